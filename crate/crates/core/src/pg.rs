//! Question-to-program generator: attention seq2seq over the question
//! vocabulary, decoding prefix programs token by token.
//!
//! The decoder can run constrained (feasibility mask from
//! [`lang::DecodeState`], termination by the pending-operand counter, every
//! sample parses) or unconstrained (free sampling over all 16 ids with <END>
//! as an explicit stop action; invalid outputs are repaired for execution).
//! Sampling records per-action log-probabilities so a caller can seed
//! REINFORCE without re-running the forward pass.

use crate::lang::{
    self, arity, DecodeState, ProgramSeq, MAX_PROGRAM_LEN, TOK_END, TOK_NULL, TOK_START,
    VOCAB_SIZE,
};
use modnet_tensor::nn::{lstm_step, LstmWeights};
use modnet_tensor::spectral::{apply_on_tape, SpectralSnapshot, SpectralState};
use modnet_tensor::store::uniform_init;
use modnet_tensor::{GradAccum, ParamId, ParameterStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct PgConfig {
    pub q_vocab: usize,
    pub q_embed: usize,
    /// Encoder hidden width per direction; states are twice this.
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub prog_embed: usize,
    pub attn_dim: usize,
    pub max_len: usize,
    /// Feasibility-masked decoding. When false, sampling is free over all
    /// 16 ids and <END> acts as the stop action.
    pub constrained: bool,
}

impl Default for PgConfig {
    fn default() -> Self {
        PgConfig {
            q_vocab: crate::data::Q_VOCAB_SIZE,
            q_embed: 64,
            enc_hidden: 128,
            dec_hidden: 256,
            prog_embed: 64,
            attn_dim: 128,
            max_len: MAX_PROGRAM_LEN,
            constrained: true,
        }
    }
}

impl PgConfig {
    /// Shrunk dimensions for fast tests; same architecture.
    pub fn tiny() -> Self {
        PgConfig {
            q_embed: 16,
            enc_hidden: 24,
            dec_hidden: 32,
            prog_embed: 16,
            attn_dim: 16,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

struct Ids {
    q_embed: ParamId,
    enc_fwd: LstmIds,
    enc_bwd: LstmIds,
    dec: LstmIds,
    attn_q: ParamId,
    attn_k: ParamId,
    attn_v: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    prog_embed: ParamId,
}

/// Result of decoding one question.
#[derive(Clone, Debug)]
pub struct Decoded {
    /// Executable program; equals `raw` when valid, else the repair.
    pub seq: ProgramSeq,
    /// Tokens as sampled, before any repair, <END> excluded.
    pub raw: ProgramSeq,
    /// Sum of log-probabilities of the sampled actions (<END> included when
    /// it was sampled).
    pub logp: f64,
    /// Whether `raw` parses as a complete program.
    pub valid: bool,
    pub repaired: bool,
}

/// A sampling pass kept alive for REINFORCE: the tape plus the picked
/// per-action log-probability nodes.
pub struct TrainDecode<T: Scalar> {
    pub items: Vec<Decoded>,
    tape: Tape<T>,
    /// One `[B]` node per decode step.
    step_picks: Vec<Var>,
    /// Which rows were still decoding at each step.
    step_active: Vec<Vec<bool>>,
}

impl<T: Scalar> TrainDecode<T> {
    /// Seed backward with per-example coefficients on the summed action
    /// log-probabilities and absorb parameter gradients into `acc`. For
    /// gradient descent on `-weight * r_b * log p_b`, pass
    /// `coeff[b] = -weight * r_b`.
    pub fn backward_into(mut self, coeff: &[f64], acc: &mut GradAccum<T>) {
        let b = self.items.len();
        assert_eq!(coeff.len(), b, "coefficient per decoded example");
        let mut seeds = Vec::with_capacity(self.step_picks.len());
        for (t, &pick) in self.step_picks.iter().enumerate() {
            let w: Vec<T> = (0..b)
                .map(|r| if self.step_active[t][r] { T::from_f64(coeff[r]) } else { T::zero() })
                .collect();
            let wc = self.tape.constant(Tensor::from_vec(&[b], w));
            let weighted = self.tape.mul(pick, wc);
            let s = self.tape.sum_all(weighted);
            seeds.push((s, T::one()));
        }
        let mut grads = self.tape.backward(&seeds);
        acc.absorb(&self.tape, &mut grads);
    }
}

/// A teacher-forced pass over a batch of (question, program) pairs.
pub struct SupervisedBatch<T: Scalar> {
    tape: Tape<T>,
    loss_var: Var,
    /// Summed cross-entropy over all target tokens in the batch.
    pub loss_sum: f64,
    pub n_tokens: usize,
}

impl<T: Scalar> SupervisedBatch<T> {
    /// Backward with `d(total)/d(loss_sum) = coeff`, absorbing into `acc`.
    pub fn backward_into(self, coeff: f64, acc: &mut GradAccum<T>) {
        let mut grads = self.tape.backward(&[(self.loss_var, T::from_f64(coeff))]);
        acc.absorb(&self.tape, &mut grads);
    }
}

enum Pick {
    Sample,
    Argmax,
}

/// Decoder weight normalization policy state. `snap` holds the detached
/// power-iteration estimates used by every forward pass until the next
/// refresh; `None` means raw weights.
struct SnState<T: Scalar> {
    state: SpectralState<T>,
    snap: Option<(SpectralSnapshot<T>, SpectralSnapshot<T>)>,
}

pub struct ProgramGenerator<T: Scalar> {
    pub cfg: PgConfig,
    pub store: ParameterStore<T>,
    ids: Ids,
    sn: SnState<T>,
}

impl<T: Scalar> ProgramGenerator<T> {
    pub fn new(cfg: PgConfig, seed: u64) -> Self {
        assert!(cfg.max_len >= 1 && cfg.max_len <= MAX_PROGRAM_LEN, "bad max_len");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let a = 0.08;
        let mut reg = |name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
            store.register(name, uniform_init(rng, shape, a))
        };
        let (e, h, d, pe, ad) =
            (cfg.q_embed, cfg.enc_hidden, cfg.dec_hidden, cfg.prog_embed, cfg.attn_dim);
        let q_embed = reg("pg.q_embed", &[cfg.q_vocab, e], &mut rng);
        let enc_fwd = LstmIds {
            w_ih: reg("pg.enc_fwd.w_ih", &[4 * h, e], &mut rng),
            w_hh: reg("pg.enc_fwd.w_hh", &[4 * h, h], &mut rng),
            bias: reg("pg.enc_fwd.bias", &[4 * h], &mut rng),
        };
        let enc_bwd = LstmIds {
            w_ih: reg("pg.enc_bwd.w_ih", &[4 * h, e], &mut rng),
            w_hh: reg("pg.enc_bwd.w_hh", &[4 * h, h], &mut rng),
            bias: reg("pg.enc_bwd.bias", &[4 * h], &mut rng),
        };
        let dec = LstmIds {
            w_ih: reg("pg.dec.w_ih", &[4 * d, pe + 2 * h], &mut rng),
            w_hh: reg("pg.dec.w_hh", &[4 * d, d], &mut rng),
            bias: reg("pg.dec.bias", &[4 * d], &mut rng),
        };
        let attn_q = reg("pg.attn_q", &[ad, d], &mut rng);
        let attn_k = reg("pg.attn_k", &[ad, 2 * h], &mut rng);
        let attn_v = reg("pg.attn_v", &[1, ad], &mut rng);
        let out_w = reg("pg.out_w", &[VOCAB_SIZE, d], &mut rng);
        let out_b = reg("pg.out_b", &[VOCAB_SIZE], &mut rng);
        let prog_embed = reg("pg.prog_embed", &[VOCAB_SIZE, pe], &mut rng);
        ProgramGenerator {
            cfg,
            store,
            ids: Ids {
                q_embed,
                enc_fwd,
                enc_bwd,
                dec,
                attn_q,
                attn_k,
                attn_v,
                out_w,
                out_b,
                prog_embed,
            },
            sn: SnState { state: SpectralState::new(seed ^ 0x5ec7_2a11), snap: None },
        }
    }

    /// Refresh the decoder spectral-norm snapshot for the next training
    /// step, advancing the persistent power-iteration state.
    pub fn sn_step(&mut self, iters: usize) {
        let ih = self.sn.state.update(&self.store, self.ids.dec.w_ih, iters);
        let hh = self.sn.state.update(&self.store, self.ids.dec.w_hh, iters);
        self.sn.snap = Some((ih, hh));
    }

    /// Sharper snapshot for evaluation, leaving the training state alone.
    pub fn sn_eval(&mut self, iters: usize) {
        let ih = self.sn.state.peek(&self.store, self.ids.dec.w_ih, iters);
        let hh = self.sn.state.peek(&self.store, self.ids.dec.w_hh, iters);
        self.sn.snap = Some((ih, hh));
    }

    /// Drop the snapshot: forward passes use raw decoder weights.
    pub fn sn_off(&mut self) {
        self.sn.snap = None;
    }

    pub fn sn_active(&self) -> bool {
        self.sn.snap.is_some()
    }

    /// Divide the decoder matrices by their current spectral-norm estimates
    /// in place, then drop the snapshot. Used when normalization should hold
    /// during one phase but leave plain weights behind.
    pub fn sn_bake(&mut self, iters: usize) {
        for id in [self.ids.dec.w_ih, self.ids.dec.w_hh] {
            let snap = self.sn.state.peek(&self.store, id, iters);
            if snap.sigma > T::from_f64(1e-12) {
                let w = self.store.value_mut(id);
                let s = snap.sigma;
                for v in w.data_mut() {
                    *v = *v / s;
                }
            }
        }
        self.sn.snap = None;
    }

    /// Decoder matrices as they enter the forward pass (normalized when a
    /// snapshot is active). Rows of `[effective w_ih, effective w_hh]`.
    pub fn effective_decoder_weights(&self) -> (Tensor<T>, Tensor<T>) {
        let raw_ih = self.store.value(self.ids.dec.w_ih).clone();
        let raw_hh = self.store.value(self.ids.dec.w_hh).clone();
        match &self.sn.snap {
            Some((ih, hh)) => {
                let scale = |w: Tensor<T>, s: &SpectralSnapshot<T>| {
                    if s.sigma > T::from_f64(1e-12) {
                        w.map(|x| x / s.sigma)
                    } else {
                        w
                    }
                };
                (scale(raw_ih, ih), scale(raw_hh, hh))
            }
            None => (raw_ih, raw_hh),
        }
    }

    fn dec_weights(&self, tape: &mut Tape<T>) -> LstmWeights {
        let mut w_ih = tape.param(&self.store, self.ids.dec.w_ih);
        let mut w_hh = tape.param(&self.store, self.ids.dec.w_hh);
        if let Some((s_ih, s_hh)) = &self.sn.snap {
            w_ih = apply_on_tape(tape, w_ih, s_ih);
            w_hh = apply_on_tape(tape, w_hh, s_hh);
        }
        let bias = tape.param(&self.store, self.ids.dec.bias);
        LstmWeights { w_ih, w_hh, bias }
    }

    fn zeros(&self, tape: &mut Tape<T>, shape: &[usize]) -> Var {
        tape.constant(Tensor::zeros(shape))
    }

    /// Run the bidirectional encoder over a batch of equal-length questions.
    /// Returns per-position state and attention-key nodes, each `[B, 2H]`
    /// and `[B, A]`.
    fn encode_on(&self, tape: &mut Tape<T>, qs: &[&[u16]]) -> (Vec<Var>, Vec<Var>) {
        assert!(!qs.is_empty(), "encode: empty batch");
        let len = qs[0].len();
        assert!(len > 0, "encode: empty question");
        assert!(qs.iter().all(|q| q.len() == len), "encode: batch must share one length");
        let b = qs.len();
        let table = tape.param(&self.store, self.ids.q_embed);
        let embs: Vec<Var> = (0..len)
            .map(|j| {
                let ids: Vec<u32> = qs.iter().map(|q| q[j] as u32).collect();
                tape.embedding(table, &ids)
            })
            .collect();
        let run = |tape: &mut Tape<T>, ids: LstmIds, order: &mut dyn Iterator<Item = usize>| {
            let w = LstmWeights {
                w_ih: tape.param(&self.store, ids.w_ih),
                w_hh: tape.param(&self.store, ids.w_hh),
                bias: tape.param(&self.store, ids.bias),
            };
            let mut h = tape.constant(Tensor::zeros(&[b, self.cfg.enc_hidden]));
            let mut c = h;
            let mut states = vec![h; len];
            for j in order {
                let (h2, c2) = lstm_step(tape, embs[j], h, c, w);
                h = h2;
                c = c2;
                states[j] = h;
            }
            states
        };
        let fwd = run(tape, self.ids.enc_fwd, &mut (0..len));
        let bwd = run(tape, self.ids.enc_bwd, &mut (0..len).rev());
        let wk = tape.param(&self.store, self.ids.attn_k);
        let mut states = Vec::with_capacity(len);
        let mut keys = Vec::with_capacity(len);
        for j in 0..len {
            let s = tape.concat(&[fwd[j], bwd[j]], 1);
            states.push(s);
            keys.push(tape.linear(s, wk, None));
        }
        (states, keys)
    }

    /// One decoder step: attention context from the previous hidden state,
    /// then the LSTM cell and the output projection. Returns raw logits.
    #[allow(clippy::too_many_arguments)]
    fn dec_step(
        &self,
        tape: &mut Tape<T>,
        states: &[Var],
        keys: &[Var],
        misc: &DecMisc,
        prev_ids: &[u32],
        h: &mut Var,
        c: &mut Var,
    ) -> Var {
        let query = tape.linear(*h, misc.wq, None);
        let scores: Vec<Var> = keys
            .iter()
            .map(|&k| {
                let a = tape.add(k, query);
                let a = tape.tanh(a);
                tape.linear(a, misc.v, None)
            })
            .collect();
        let scores = tape.concat(&scores, 1);
        let probs = tape.softmax_rows(scores);
        let mut ctx: Option<Var> = None;
        for (j, &s) in states.iter().enumerate() {
            let p = tape.narrow_cols(probs, j, 1);
            let part = tape.row_scale(s, p);
            ctx = Some(match ctx {
                Some(acc) => tape.add(acc, part),
                None => part,
            });
        }
        let emb = tape.embedding(misc.prog_table, prev_ids);
        let x = tape.concat(&[emb, ctx.expect("at least one position")], 1);
        let (h2, c2) = lstm_step(tape, x, *h, *c, misc.w);
        *h = h2;
        *c = c2;
        tape.linear(h2, misc.out_w, Some(misc.out_b))
    }

    fn dec_misc(&self, tape: &mut Tape<T>) -> DecMisc {
        DecMisc {
            w: self.dec_weights(tape),
            wq: tape.param(&self.store, self.ids.attn_q),
            v: tape.param(&self.store, self.ids.attn_v),
            out_w: tape.param(&self.store, self.ids.out_w),
            out_b: tape.param(&self.store, self.ids.out_b),
            prog_table: tape.param(&self.store, self.ids.prog_embed),
        }
    }

    fn decode_on(
        &self,
        tape: &mut Tape<T>,
        qs: &[&[u16]],
        pick: Pick,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<Decoded>, Vec<Var>, Vec<Vec<bool>>) {
        let b = qs.len();
        let (states, keys) = self.encode_on(tape, qs);
        let misc = self.dec_misc(tape);
        let mut h = self.zeros(tape, &[b, self.cfg.dec_hidden]);
        let mut c = h;
        let mut rows: Vec<RowState> = (0..b).map(|_| RowState::new()).collect();
        let mut prev_ids = vec![TOK_START as u32; b];
        let mut step_picks = Vec::new();
        let mut step_active = Vec::new();
        while rows.iter().any(|r| !r.done) {
            let logits = self.dec_step(tape, &states, &keys, &misc, &prev_ids, &mut h, &mut c);
            let mut mask = vec![false; b * VOCAB_SIZE];
            for (r, row) in rows.iter().enumerate() {
                let m = &mut mask[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE];
                if row.done {
                    m[TOK_NULL as usize] = true;
                } else if self.cfg.constrained {
                    // A live constrained row always has a live counter.
                    let ctr = row.counter.as_ref().expect("constrained row lost its counter");
                    m.copy_from_slice(&ctr.feasible_mask(self.cfg.max_len));
                    m[TOK_END as usize] = false;
                } else {
                    m.iter_mut().for_each(|x| *x = true);
                }
            }
            let lp = tape.masked_log_softmax_rows(logits, &mask);
            let chosen: Vec<u32> = (0..b)
                .map(|r| {
                    if rows[r].done {
                        return TOK_NULL as u32;
                    }
                    let lrow = &tape.value(lp).data()[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE];
                    let mrow = &mask[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE];
                    match pick {
                        Pick::Argmax => {
                            let mut best = usize::MAX;
                            for t in 0..VOCAB_SIZE {
                                if mrow[t] && (best == usize::MAX || lrow[t] > lrow[best]) {
                                    best = t;
                                }
                            }
                            best as u32
                        }
                        Pick::Sample => {
                            let rng = rng.as_mut().expect("sampling needs an rng");
                            let u: f64 = rng.gen();
                            let mut acc = 0.0f64;
                            let mut last = 0u32;
                            for t in 0..VOCAB_SIZE {
                                if !mrow[t] {
                                    continue;
                                }
                                last = t as u32;
                                acc += lrow[t].as_f64().exp();
                                if u < acc {
                                    return t as u32;
                                }
                            }
                            last
                        }
                    }
                })
                .collect();
            let picked = tape.pick_per_row(lp, &chosen);
            step_picks.push(picked);
            step_active.push(rows.iter().map(|r| !r.done).collect());
            for (r, row) in rows.iter_mut().enumerate() {
                if row.done {
                    continue;
                }
                let tok = chosen[r] as u8;
                row.logp += tape.value(picked).data()[r].as_f64();
                row.push(tok, self.cfg.max_len);
            }
            prev_ids = chosen;
        }
        let items = rows.into_iter().map(|r| r.finish(self.cfg.max_len)).collect();
        (items, step_picks, step_active)
    }

    /// Sample programs for a batch of equal-length questions, keeping the
    /// tape for a later REINFORCE backward pass.
    pub fn decode_batch_train(&self, qs: &[&[u16]], rng: &mut ChaCha8Rng) -> TrainDecode<T> {
        let mut tape = Tape::new();
        let (items, step_picks, step_active) =
            self.decode_on(&mut tape, qs, Pick::Sample, Some(rng));
        TrainDecode { items, tape, step_picks, step_active }
    }

    /// Sample without gradient bookkeeping.
    pub fn decode_sample_batch(&self, qs: &[&[u16]], rng: &mut ChaCha8Rng) -> Vec<Decoded> {
        let mut tape = Tape::forward_only();
        self.decode_on(&mut tape, qs, Pick::Sample, Some(rng)).0
    }

    pub fn decode_sample(&self, q: &[u16], rng: &mut ChaCha8Rng) -> Decoded {
        self.decode_sample_batch(&[q], rng).pop().unwrap()
    }

    /// Greedy decode; independent of any rng state.
    pub fn decode_argmax_batch(&self, qs: &[&[u16]]) -> Vec<Decoded> {
        let mut tape = Tape::forward_only();
        self.decode_on(&mut tape, qs, Pick::Argmax, None).0
    }

    pub fn decode_argmax(&self, q: &[u16]) -> Decoded {
        self.decode_argmax_batch(&[q]).pop().unwrap()
    }

    /// Distribution over the next token after teacher-forcing `prefix`.
    /// Probabilities respect the feasibility mask in constrained mode; rows
    /// sum to 1 either way.
    pub fn step_distribution(&self, q: &[u16], prefix: &[u8]) -> [f64; VOCAB_SIZE] {
        let mut tape = Tape::forward_only();
        let (states, keys) = self.encode_on(&mut tape, &[q]);
        let misc = self.dec_misc(&mut tape);
        let mut h = self.zeros(&mut tape, &[1, self.cfg.dec_hidden]);
        let mut c = h;
        let mut counter = DecodeState::new();
        let mut prev = TOK_START as u32;
        let mut logits =
            self.dec_step(&mut tape, &states, &keys, &misc, &[prev], &mut h, &mut c);
        for &tok in prefix {
            counter.step(tok);
            prev = tok as u32;
            logits = self.dec_step(&mut tape, &states, &keys, &misc, &[prev], &mut h, &mut c);
        }
        let mask: Vec<bool> = if self.cfg.constrained {
            let mut m = counter.feasible_mask(self.cfg.max_len);
            m[TOK_END as usize] = false;
            m.to_vec()
        } else {
            vec![true; VOCAB_SIZE]
        };
        let lp = tape.masked_log_softmax_rows(logits, &mask);
        let mut out = [0.0f64; VOCAB_SIZE];
        for (t, o) in out.iter_mut().enumerate() {
            if mask[t] {
                *o = tape.value(lp).data()[t].as_f64().exp();
            }
        }
        out
    }

    /// Log-probability of emitting exactly `z` for `q` under the current
    /// decoding mode (teacher forced).
    pub fn sequence_logprob(&self, q: &[u16], z: &[u8]) -> f64 {
        let mut tape = Tape::forward_only();
        let (v, _, _) = self.teacher_forced(&mut tape, &[q], &[z]);
        v.loss_sum_value * -1.0
    }

    /// Teacher-forced pass for supervised updates: summed cross-entropy of
    /// the target tokens under the step distributions.
    pub fn supervised_batch(&self, qs: &[&[u16]], zs: &[&[u8]]) -> SupervisedBatch<T> {
        let mut tape = Tape::new();
        let (tf, loss_var, n_tokens) = self.teacher_forced(&mut tape, qs, zs);
        SupervisedBatch { tape, loss_var, loss_sum: tf.loss_sum_value, n_tokens }
    }

    fn teacher_forced(
        &self,
        tape: &mut Tape<T>,
        qs: &[&[u16]],
        zs: &[&[u8]],
    ) -> (TfOut, Var, usize) {
        assert_eq!(qs.len(), zs.len(), "one target program per question");
        let b = qs.len();
        for z in zs {
            assert!(
                lang::parse_prefix(z).is_ok() && z.len() <= self.cfg.max_len,
                "teacher forcing needs complete programs within the length cap"
            );
        }
        let (states, keys) = self.encode_on(tape, qs);
        let misc = self.dec_misc(tape);
        let mut h = self.zeros(tape, &[b, self.cfg.dec_hidden]);
        let mut c = h;
        let t_max = zs.iter().map(|z| z.len()).max().unwrap();
        let mut counters: Vec<DecodeState> = (0..b).map(|_| DecodeState::new()).collect();
        let mut prev_ids = vec![TOK_START as u32; b];
        let mut loss_parts = Vec::with_capacity(t_max);
        let mut n_tokens = 0usize;
        for t in 0..t_max {
            let logits = self.dec_step(tape, &states, &keys, &misc, &prev_ids, &mut h, &mut c);
            let mut mask = vec![false; b * VOCAB_SIZE];
            let mut labels = vec![TOK_NULL as u32; b];
            let mut coeff = vec![T::zero(); b];
            for r in 0..b {
                let m = &mut mask[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE];
                if t >= zs[r].len() {
                    m[TOK_NULL as usize] = true;
                    continue;
                }
                if self.cfg.constrained {
                    m.copy_from_slice(&counters[r].feasible_mask(self.cfg.max_len));
                    m[TOK_END as usize] = false;
                } else {
                    m.iter_mut().for_each(|x| *x = true);
                }
                let tok = zs[r][t];
                assert!(m[tok as usize], "target token infeasible at step {t}");
                labels[r] = tok as u32;
                coeff[r] = -T::one();
                counters[r].step(tok);
                n_tokens += 1;
            }
            let lp = tape.masked_log_softmax_rows(logits, &mask);
            let picked = tape.pick_per_row(lp, &labels);
            let wc = tape.constant(Tensor::from_vec(&[b], coeff));
            let weighted = tape.mul(picked, wc);
            loss_parts.push(tape.sum_all(weighted));
            for r in 0..b {
                prev_ids[r] = if t < zs[r].len() { zs[r][t] as u32 } else { TOK_NULL as u32 };
            }
        }
        let mut loss = loss_parts[0];
        for &p in &loss_parts[1..] {
            loss = tape.add(loss, p);
        }
        let v = tape.value(loss).data()[0].as_f64();
        (TfOut { loss_sum_value: v }, loss, n_tokens)
    }
}

struct TfOut {
    loss_sum_value: f64,
}

struct DecMisc {
    w: LstmWeights,
    wq: Var,
    v: Var,
    out_w: Var,
    out_b: Var,
    prog_table: Var,
}

/// Per-row sampling bookkeeping during a batched decode.
struct RowState {
    raw: ProgramSeq,
    logp: f64,
    counter: Option<DecodeState>,
    saw_end: bool,
    done: bool,
}

impl RowState {
    fn new() -> Self {
        RowState {
            raw: Vec::new(),
            logp: 0.0,
            counter: Some(DecodeState::new()),
            saw_end: false,
            done: false,
        }
    }

    fn push(&mut self, tok: u8, max_len: usize) {
        debug_assert!(!self.done);
        if tok == TOK_END {
            // Explicit stop action (unconstrained mode only); not part of
            // the program text.
            self.saw_end = true;
            self.done = true;
            return;
        }
        self.raw.push(tok);
        if let Some(ctr) = &mut self.counter {
            if arity(tok).is_some() && ctr.pending() > 0 {
                ctr.step(tok);
                if ctr.complete() {
                    self.done = true;
                }
            } else {
                // Dead prefix: a special token or an operator after
                // completion. The counter no longer describes a parse.
                self.counter = None;
            }
        }
        if self.raw.len() >= max_len {
            self.done = true;
        }
    }

    fn finish(self, max_len: usize) -> Decoded {
        let valid = self.counter.as_ref().is_some_and(|c| c.complete());
        debug_assert_eq!(valid, lang::parse_prefix(&self.raw).is_ok());
        if valid {
            return Decoded {
                seq: self.raw.clone(),
                raw: self.raw,
                logp: self.logp,
                valid: true,
                repaired: false,
            };
        }
        Decoded {
            seq: repair(&self.raw, max_len),
            raw: self.raw,
            logp: self.logp,
            valid: false,
            repaired: true,
        }
    }
}

/// Deterministic repair of an invalid token sequence: keep the longest
/// prefix every token of which is feasible under the length cap, then close
/// the remaining operand slots with `scene`. The result always parses.
pub fn repair(raw: &[u8], max_len: usize) -> ProgramSeq {
    let mut state = DecodeState::new();
    let mut out = ProgramSeq::new();
    for &tok in raw {
        if !state.token_feasible(tok, max_len) || tok == TOK_END {
            break;
        }
        state.step(tok);
        out.push(tok);
    }
    while !state.complete() {
        debug_assert!(state.token_feasible(lang::TOK_SCENE, max_len));
        state.step(lang::TOK_SCENE);
        out.push(lang::TOK_SCENE);
    }
    debug_assert!(lang::parse_prefix(&out).is_ok());
    out
}

/// Exponential-moving-average reward baseline; optional, off by default in
/// training configs.
pub struct RewardBaseline {
    decay: f64,
    value: f64,
    primed: bool,
}

impl RewardBaseline {
    pub fn new(decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "decay must be in [0,1)");
        RewardBaseline { decay, value: 0.0, primed: false }
    }

    /// Current baseline, before observing this batch.
    pub fn value(&self) -> f64 {
        if self.primed {
            self.value
        } else {
            0.0
        }
    }

    /// Fold one batch-mean reward into the running average.
    pub fn observe(&mut self, mean_reward: f64) {
        if self.primed {
            self.value = self.decay * self.value + (1.0 - self.decay) * mean_reward;
        } else {
            self.value = mean_reward;
            self.primed = true;
        }
    }
}

/// Reward from an execution loss: `clip(-loss, lo, hi)`.
pub fn reward_from_loss(loss: f64, lo: f64, hi: f64) -> f64 {
    (-loss).clamp(lo, hi)
}
