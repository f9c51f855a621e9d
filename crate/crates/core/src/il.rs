//! The generation loop: interacting, transmitting, program-generator
//! learning, and execution-engine learning, plus the reset-strategy
//! ablations and the non-iterated baseline (one long interacting phase).
//!
//! Everything here is deterministic given (config, seed): sampling flows
//! from one ChaCha8 stream consumed in a fixed order, parallel gradient
//! accumulation uses fixed-size chunks merged in index order, and parallel
//! decoding draws from per-chunk streams whose seeds are drawn sequentially
//! up front.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use modnet_tensor::{AdamConfig, GradAccum, ParameterStore, Tape, Tensor, Var};

use crate::data::{render, Dataset, Split};
use crate::ee::{EeConfig, ExecutionEngine, ModuleArch};
use crate::lang::{parse_prefix, ProgramSeq, ProgramTree};
use crate::pg::{reward_from_loss, PgConfig, ProgramGenerator, RewardBaseline, SupervisedBatch};

/// Per-example gradient jobs are split into chunks of this fixed size so the
/// f32 accumulation order never depends on the worker count.
const EE_CHUNK: usize = 16;
/// Unsupervised transmit samples are decoded in chunks of this size, each on
/// its own pre-seeded stream.
const TRANSMIT_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EeReset {
    /// Fresh parameters every generation.
    Scratch,
    /// Start from the previous generation's post-learning-phase state.
    Seeded,
    /// Keep training the same engine.
    NoReset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgReset {
    /// Fresh generator distilled from the transmitted corpus.
    Retrain,
    /// Skip the learning phase; the generator carries over.
    NoRetrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnPolicy {
    /// Normalize decoder weights only while distilling the transmitted
    /// corpus; bake the scale in afterwards.
    LearningPhaseOnly,
    /// Keep the normalization active in every phase.
    FullSn,
    NoSn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResetStrategy {
    pub ee: EeReset,
    pub pg: PgReset,
    pub sn: SnPolicy,
}

impl ResetStrategy {
    pub fn standard() -> Self {
        ResetStrategy { ee: EeReset::Scratch, pg: PgReset::Retrain, sn: SnPolicy::LearningPhaseOnly }
    }
}

/// Engine-retraining budget per reset flavor: a cold start needs the most
/// steps, a seeded engine fewer, a continuing one only a top-up.
pub fn t_ee_for(ee: EeReset) -> usize {
    match ee {
        EeReset::Scratch => 250,
        EeReset::Seeded => 200,
        EeReset::NoReset => 50,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseSchedule {
    /// Joint REINFORCE + answer-loss steps per generation.
    pub t_interact: usize,
    /// (question, program) pairs transmitted to the next generation.
    pub t_transmit: usize,
    /// Teacher-forced distillation steps for the fresh generator.
    pub t_pg: usize,
    /// Answer-loss steps for the engine, generator frozen.
    pub t_ee: usize,
    pub n_generations: usize,
    pub batch_size: usize,
    /// Examples per interacting batch drawn from the supervised pool.
    pub gt_per_batch: usize,
}

impl PhaseSchedule {
    pub fn standard(ee: EeReset) -> Self {
        PhaseSchedule {
            t_interact: 2000,
            t_transmit: 256_000,
            t_pg: 2000,
            t_ee: t_ee_for(ee),
            n_generations: 20,
            batch_size: 128,
            gt_per_batch: 4,
        }
    }

    pub fn validate(&self) {
        assert!(self.t_interact > 0, "t_interact must be positive");
        assert!(self.t_transmit > 0, "t_transmit must be positive");
        assert!(self.t_pg > 0, "t_pg must be positive");
        assert!(self.t_ee > 0, "t_ee must be positive");
        assert!(self.n_generations > 0, "n_generations must be positive");
        assert!(self.batch_size > 0, "batch_size must be positive");
        assert!(self.gt_per_batch <= self.batch_size, "gt_per_batch exceeds batch");
    }

    /// Gradient steps one generation contributes to the global counter.
    pub fn steps_per_generation(&self, pg: PgReset) -> usize {
        self.t_interact + if pg == PgReset::Retrain { self.t_pg } else { 0 } + self.t_ee
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransmitRecord {
    pub question: Vec<u16>,
    pub program: ProgramSeq,
    /// True when the program is the example's ground truth rather than a
    /// generator sample.
    pub from_gt: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainerConfig {
    pub pg: PgConfig,
    pub ee: EeConfig,
    pub schedule: PhaseSchedule,
    pub strategy: ResetStrategy,
    /// False runs the baseline: one long interacting phase with the same
    /// total step budget, no transmission, no resets.
    pub il_enabled: bool,
    pub pg_lr: f64,
    pub ee_lr: f64,
    pub reinforce_weight: f64,
    pub gt_ce_weight: f64,
    pub reward_lo: f64,
    pub reward_hi: f64,
    /// Optional moving-average reward baseline (off by default; the clipped
    /// reward alone matches the reference setup).
    pub use_reward_baseline: bool,
    /// Evaluate every this many steps within a phase; 0 = boundaries only.
    pub eval_every: usize,
    /// Mid-phase evaluations score fixed random panels of this size instead
    /// of the full train / val-ood splits.
    pub train_panel: usize,
    pub ood_panel: usize,
    /// Partial-reset stub: a scratch engine copies the previous module
    /// embeddings instead of re-drawing them.
    pub keep_embeddings_on_reset: bool,
    /// Test hook: transmit argmax decodes instead of samples.
    pub transmit_argmax: bool,
    pub seed: u64,
}

impl TrainerConfig {
    /// Defaults for the given architecture; the engine learning rate is the
    /// only knob that differs between architectures.
    pub fn new(ee: EeConfig, strategy: ResetStrategy, il_enabled: bool, seed: u64) -> Self {
        let ee_lr = match ee.arch {
            ModuleArch::TensorNmn => 5e-4,
            ModuleArch::TensorFilm | ModuleArch::VectorNmn => 1e-3,
        };
        TrainerConfig {
            pg: PgConfig::default(),
            ee,
            schedule: PhaseSchedule::standard(strategy.ee),
            strategy,
            il_enabled,
            pg_lr: 1e-4,
            ee_lr,
            reinforce_weight: 10.0,
            gt_ce_weight: 1.0,
            reward_lo: -5.0,
            reward_hi: 5.0,
            use_reward_baseline: false,
            eval_every: 500,
            train_panel: 1024,
            ood_panel: 1024,
            keep_embeddings_on_reset: false,
            transmit_argmax: false,
            seed,
        }
    }
}

/// One question with its parsed ground-truth program.
#[derive(Clone, Debug)]
pub struct PreparedQuestion {
    pub uid: u16,
    pub template: u8,
    pub tokens: Vec<u16>,
    pub program: ProgramSeq,
    pub supervised: bool,
}

/// A split unpacked into standardized image tensors plus per-example
/// question indices, ready for batching.
pub struct PreparedSplit {
    pub questions: Vec<PreparedQuestion>,
    pub images: Vec<Tensor<f32>>,
    pub answers: Vec<bool>,
    /// Index into `questions` for each example.
    pub q_of: Vec<usize>,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub struct Prepared {
    pub train: PreparedSplit,
    pub val_iid: PreparedSplit,
    pub val_ood: PreparedSplit,
    /// Train example indices whose question carries a ground-truth program.
    pub supervised: Vec<usize>,
}

impl Prepared {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let prep = |split: Split| {
            let exs = ds.split_examples(split);
            let mut questions: Vec<PreparedQuestion> = Vec::new();
            let mut local: BTreeMap<u16, usize> = BTreeMap::new();
            let mut images = Vec::with_capacity(exs.len());
            let mut answers = Vec::with_capacity(exs.len());
            let mut q_of = Vec::with_capacity(exs.len());
            for ex in exs {
                let qi = *local.entry(ex.question).or_insert_with(|| {
                    let q = ds.question(ex.question);
                    questions.push(PreparedQuestion {
                        uid: q.uid,
                        template: q.template,
                        tokens: q.tokens.clone(),
                        program: q.program.clone(),
                        supervised: q.supervised,
                    });
                    questions.len() - 1
                });
                images.push(Tensor::from_vec(
                    &[3, render::IMG_SIDE, render::IMG_SIDE],
                    render::standardize(&ex.image, &ds.stats),
                ));
                answers.push(ex.answer);
                q_of.push(qi);
            }
            PreparedSplit { questions, images, answers, q_of }
        };
        let train = prep(Split::Train);
        let supervised = (0..train.len())
            .filter(|&i| train.questions[train.q_of[i]].supervised)
            .collect();
        Prepared { train, val_iid: prep(Split::ValIID), val_ood: prep(Split::ValOOD), supervised }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Interact,
    PgLearn,
    EeLearn,
    Boundary,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Interact => "interact",
            Phase::PgLearn => "pg_learn",
            Phase::EeLearn => "ee_learn",
            Phase::Boundary => "boundary",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalPoint {
    pub global_step: u64,
    pub generation: u32,
    pub phase: Phase,
    pub train_acc: f64,
    pub val_iid_acc: f64,
    pub val_ood_acc: f64,
    /// Exact-match rate of argmax programs against ground truth over the
    /// unique training questions.
    pub program_acc: f64,
    pub wallclock_s: f64,
}

/// Step accounting for one generation; the exact-count invariants are
/// checked against the schedule at the end of each phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenerationLog {
    pub generation: u32,
    pub interact_steps: u64,
    pub transmit_records: u64,
    pub transmit_from_gt: u64,
    pub pg_steps: u64,
    pub ee_steps: u64,
}

/// Parameter values captured at the evaluation with the highest Val-IID
/// accuracy (earliest step wins ties).
pub struct BestModel {
    pub global_step: u64,
    pub val_iid_acc: f64,
    pub pg: Vec<(String, Tensor<f32>)>,
    pub ee: Vec<(String, Tensor<f32>)>,
}

pub struct RunOutcome {
    pub history: Vec<EvalPoint>,
    pub generations: Vec<GenerationLog>,
    pub best: BestModel,
}

#[derive(Debug, Error)]
#[error("non-finite loss at step {global_step} (generation {generation}, {phase:?}): {detail}")]
pub struct TrainAbort {
    pub global_step: u64,
    pub generation: u32,
    pub phase: Phase,
    pub detail: String,
}

#[derive(Clone, Copy, Debug)]
pub struct InteractStats {
    pub mean_loss: f64,
    pub mean_reward: f64,
    pub batch_acc: f64,
    /// Cross entropy per target token over the supervised slots.
    pub gt_ce_per_token: f64,
}

/// Copy every parameter value out of a store, in registration order.
pub fn snapshot_values(store: &ParameterStore<f32>) -> Vec<(String, Tensor<f32>)> {
    store.ids().map(|id| (store.name(id).to_string(), store.value(id).clone())).collect()
}

/// Write a snapshot back; the store must have the same layout.
pub fn load_values(store: &mut ParameterStore<f32>, snap: &[(String, Tensor<f32>)]) {
    let ids: Vec<_> = store.ids().collect();
    assert_eq!(ids.len(), snap.len(), "snapshot layout mismatch");
    for (id, (name, tensor)) in ids.into_iter().zip(snap) {
        assert_eq!(store.name(id), name, "snapshot layout mismatch");
        store.value_mut(id).clone_from(tensor);
    }
}

/// Endless shuffled walk over a fixed index set; reshuffles at each wrap so
/// coverage stays proportional within every pass.
struct ShuffleCycle {
    items: Vec<usize>,
    at: usize,
}

impl ShuffleCycle {
    fn new(items: Vec<usize>) -> Self {
        assert!(!items.is_empty(), "cannot cycle over an empty set");
        let at = items.len();
        ShuffleCycle { items, at }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.at == self.items.len() {
            self.items.shuffle(rng);
            self.at = 0;
        }
        let v = self.items[self.at];
        self.at += 1;
        v
    }
}

pub struct Trainer<'d> {
    pub cfg: TrainerConfig,
    pub data: &'d Prepared,
    pub pg: ProgramGenerator<f32>,
    pub ee: ExecutionEngine<f32>,
    pub global_step: u64,
    pub generation: u32,
    pub history: Vec<EvalPoint>,
    pub gen_logs: Vec<GenerationLog>,
    /// Called on every recorded evaluation (streaming metrics).
    pub on_eval: Option<Box<dyn FnMut(&EvalPoint)>>,
    rng: ChaCha8Rng,
    train_cursor: ShuffleCycle,
    gt_cursor: Option<ShuffleCycle>,
    baseline: Option<RewardBaseline>,
    /// Engine state at the end of the last learning phase; what a Seeded
    /// reset restores. Starts as the run-start initialization.
    seeded_ee: Vec<(String, Tensor<f32>)>,
    best: Option<BestModel>,
    train_panel: Vec<usize>,
    ood_panel: Vec<usize>,
    t0: Instant,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainerConfig, data: &'d Prepared) -> Self {
        cfg.schedule.validate();
        assert!(!data.train.is_empty(), "empty training split");
        assert!(
            cfg.schedule.gt_per_batch == 0 || !data.supervised.is_empty(),
            "supervised pool is empty; set gt_per_batch = 0"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pg = ProgramGenerator::new(cfg.pg, rng.gen());
        let ee = ExecutionEngine::new(cfg.ee, rng.gen());
        let seeded_ee = snapshot_values(&ee.store);

        // Evaluation panels come from a side stream so their size never
        // perturbs the training sequence.
        let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
        let panel = |n: usize, k: usize, prng: &mut ChaCha8Rng| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(prng);
            idx.truncate(k.min(n));
            idx.sort_unstable();
            idx
        };
        let train_panel = panel(data.train.len(), cfg.train_panel, &mut prng);
        let ood_panel = panel(data.val_ood.len(), cfg.ood_panel, &mut prng);

        let train_cursor = ShuffleCycle::new((0..data.train.len()).collect());
        let gt_cursor = if data.supervised.is_empty() {
            None
        } else {
            Some(ShuffleCycle::new(data.supervised.clone()))
        };
        let baseline = cfg.use_reward_baseline.then(|| RewardBaseline::new(0.99));

        Trainer {
            cfg,
            data,
            pg,
            ee,
            global_step: 0,
            generation: 0,
            history: Vec::new(),
            gen_logs: Vec::new(),
            on_eval: None,
            rng,
            train_cursor,
            gt_cursor,
            baseline,
            seeded_ee,
            best: None,
            train_panel,
            ood_panel,
            t0: Instant::now(),
        }
    }

    fn gen_log(&mut self) -> &mut GenerationLog {
        while self.gen_logs.len() <= self.generation as usize {
            let generation = self.gen_logs.len() as u32;
            self.gen_logs.push(GenerationLog { generation, ..GenerationLog::default() });
        }
        &mut self.gen_logs[self.generation as usize]
    }

    /// One joint update: sample programs, execute, REINFORCE the generator
    /// on clipped negated answer losses, cross-entropy on the supervised
    /// slots, answer loss for the engine, one Adam step each.
    pub fn interact_step(&mut self) -> Result<InteractStats, TrainAbort> {
        let b = self.cfg.schedule.batch_size;
        let n_gt = self.cfg.schedule.gt_per_batch;
        if self.cfg.strategy.sn == SnPolicy::FullSn {
            self.pg.sn_step(1);
        }

        let mut batch: Vec<usize> = Vec::with_capacity(b);
        for _ in 0..b - n_gt {
            batch.push(self.train_cursor.next(&mut self.rng));
        }
        for _ in 0..n_gt {
            let cur = self.gt_cursor.as_mut().expect("gt_per_batch > 0 needs a supervised pool");
            batch.push(cur.next(&mut self.rng));
        }

        // Sample programs, grouping equal-length questions into one decode.
        let train = &self.data.train;
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, &ex) in batch.iter().enumerate() {
            groups.entry(train.questions[train.q_of[ex]].tokens.len()).or_default().push(pos);
        }
        let mut decodes = Vec::with_capacity(groups.len());
        let mut seqs: Vec<ProgramSeq> = vec![ProgramSeq::new(); b];
        for positions in groups.into_values() {
            let qs: Vec<&[u16]> = positions
                .iter()
                .map(|&p| train.questions[train.q_of[batch[p]]].tokens.as_slice())
                .collect();
            let dec = self.pg.decode_batch_train(&qs, &mut self.rng);
            for (i, &p) in positions.iter().enumerate() {
                seqs[p] = dec.items[i].seq.clone();
            }
            decodes.push((positions, dec));
        }

        // Engine pass, one tape per example, fixed-chunk parallel gradients.
        let jobs: Vec<(usize, ProgramTree)> = batch
            .iter()
            .zip(&seqs)
            .map(|(&ex, s)| (ex, parse_prefix(s).expect("decoded programs are executable")))
            .collect();
        let (ee_acc, per_ex) = self.ee_batch_grads(&jobs, train);

        let mean_loss = per_ex.iter().map(|(l, _)| l).sum::<f64>() / b as f64;
        if !mean_loss.is_finite() {
            return Err(self.abort(Phase::Interact, &per_ex));
        }
        let batch_acc = per_ex.iter().filter(|(_, c)| *c).count() as f64 / b as f64;

        // Clipped negated losses are the rewards; optional moving baseline.
        let rewards: Vec<f64> = per_ex
            .iter()
            .map(|(l, _)| reward_from_loss(*l, self.cfg.reward_lo, self.cfg.reward_hi))
            .collect();
        let mean_reward = rewards.iter().sum::<f64>() / b as f64;
        let base = self.baseline.as_ref().map_or(0.0, RewardBaseline::value);
        if let Some(bl) = &mut self.baseline {
            bl.observe(mean_reward);
        }

        let mut pg_acc = GradAccum::new(self.pg.store.len());
        let w = self.cfg.reinforce_weight / b as f64;
        for (positions, dec) in decodes {
            let coeff: Vec<f64> = positions.iter().map(|&p| -w * (rewards[p] - base)).collect();
            dec.backward_into(&coeff, &mut pg_acc);
        }

        // Supervised slots additionally get teacher-forced cross entropy,
        // averaged per target token across the slots.
        let mut gt_ce_per_token = 0.0;
        if n_gt > 0 {
            let gt_slots = &batch[b - n_gt..];
            let mut sgroups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &ex in gt_slots {
                sgroups.entry(train.questions[train.q_of[ex]].tokens.len()).or_default().push(ex);
            }
            let mut built: Vec<SupervisedBatch<f32>> = Vec::new();
            let (mut tokens, mut ce_sum) = (0usize, 0.0f64);
            for exs in sgroups.into_values() {
                let qs: Vec<&[u16]> =
                    exs.iter().map(|&e| train.questions[train.q_of[e]].tokens.as_slice()).collect();
                let zs: Vec<&[u8]> =
                    exs.iter().map(|&e| train.questions[train.q_of[e]].program.as_slice()).collect();
                let sb = self.pg.supervised_batch(&qs, &zs);
                tokens += sb.n_tokens;
                ce_sum += sb.loss_sum;
                built.push(sb);
            }
            if !ce_sum.is_finite() {
                return Err(self.abort(Phase::Interact, &per_ex));
            }
            gt_ce_per_token = ce_sum / tokens as f64;
            for sb in built {
                sb.backward_into(self.cfg.gt_ce_weight / tokens as f64, &mut pg_acc);
            }
        }

        pg_acc.apply(&mut self.pg.store);
        self.pg.store.adam_step(AdamConfig::with_lr(self.cfg.pg_lr));
        ee_acc.apply(&mut self.ee.store);
        self.ee.store.adam_step(AdamConfig::with_lr(self.cfg.ee_lr));
        self.global_step += 1;

        Ok(InteractStats { mean_loss, mean_reward, batch_acc, gt_ce_per_token })
    }

    /// Answer losses and gradients for (example, program) jobs; chunk merge
    /// order is fixed so results do not depend on the thread count.
    fn ee_batch_grads(
        &self,
        jobs: &[(usize, ProgramTree)],
        split: &PreparedSplit,
    ) -> (GradAccum<f32>, Vec<(f64, bool)>) {
        let inv_b = 1.0 / jobs.len() as f32;
        let ee = &self.ee;
        let parts: Vec<(GradAccum<f32>, Vec<(f64, bool)>)> = jobs
            .par_chunks(EE_CHUNK)
            .map(|part| {
                let mut acc = GradAccum::new(ee.store.len());
                let mut out = Vec::with_capacity(part.len());
                for (ex, tree) in part {
                    let mut tape = Tape::new();
                    let (loss, lv, correct) =
                        ee_example_pass(ee, &mut tape, tree, &split.images[*ex], split.answers[*ex]);
                    let mut grads = tape.backward(&[(loss, inv_b)]);
                    acc.absorb(&tape, &mut grads);
                    out.push((lv, correct));
                }
                (acc, out)
            })
            .collect();
        let mut acc = GradAccum::new(self.ee.store.len());
        let mut per_ex = Vec::with_capacity(jobs.len());
        for (a, o) in parts {
            acc.merge(a);
            per_ex.extend(o);
        }
        (acc, per_ex)
    }

    fn abort(&self, phase: Phase, per_ex: &[(f64, bool)]) -> TrainAbort {
        let bad = per_ex.iter().filter(|(l, _)| !l.is_finite()).count();
        let worst = per_ex
            .iter()
            .map(|(l, _)| *l)
            .filter(|l| l.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        TrainAbort {
            global_step: self.global_step,
            generation: self.generation,
            phase,
            detail: format!(
                "{bad}/{} non-finite example losses, max finite loss {worst:.3e}, \
                 pg grad norm^2 {:.3e}, ee grad norm^2 {:.3e}",
                per_ex.len(),
                self.pg.store.grad_sq_norm(),
                self.ee.store.grad_sq_norm()
            ),
        }
    }

    /// The interacting phase: exactly `t_interact` joint steps with
    /// mid-phase panel evaluations on the configured cadence.
    pub fn interact_phase(&mut self) -> Result<(), TrainAbort> {
        let t = self.cfg.schedule.t_interact;
        for step in 1..=t {
            self.interact_step()?;
            self.gen_log().interact_steps += 1;
            if self.cfg.eval_every > 0 && step % self.cfg.eval_every == 0 {
                self.eval_and_record(Phase::Interact, false);
            }
        }
        let done = self.gen_log().interact_steps;
        assert_eq!(done, t as u64, "interacting phase step count drifted");
        Ok(())
    }

    /// Draw `t_transmit` training examples with replacement; supervised ones
    /// contribute their ground-truth program, the rest a generator sample
    /// (argmax under the test hook).
    pub fn transmit(&mut self) -> Vec<TransmitRecord> {
        let tt = self.cfg.schedule.t_transmit;
        let train = &self.data.train;
        let picks: Vec<usize> = (0..tt).map(|_| self.rng.gen_range(0..train.len())).collect();

        // Positions that need a decoded program, in pick order.
        let need: Vec<usize> = picks
            .iter()
            .enumerate()
            .filter(|(_, &ex)| !train.questions[train.q_of[ex]].supervised)
            .map(|(i, _)| i)
            .collect();
        let chunks: Vec<(&[usize], u64)> =
            need.chunks(TRANSMIT_CHUNK).map(|c| (c, self.rng.gen::<u64>())).collect();
        let argmax = self.cfg.transmit_argmax;
        let pg = &self.pg;
        let decoded: Vec<Vec<(usize, ProgramSeq)>> = chunks
            .par_iter()
            .map(|(pos_list, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for &pos in *pos_list {
                    let ex = picks[pos];
                    groups
                        .entry(train.questions[train.q_of[ex]].tokens.len())
                        .or_default()
                        .push(pos);
                }
                let mut out = Vec::with_capacity(pos_list.len());
                for positions in groups.into_values() {
                    let qs: Vec<&[u16]> = positions
                        .iter()
                        .map(|&p| train.questions[train.q_of[picks[p]]].tokens.as_slice())
                        .collect();
                    let items = if argmax {
                        pg.decode_argmax_batch(&qs)
                    } else {
                        pg.decode_sample_batch(&qs, &mut rng)
                    };
                    for (i, &p) in positions.iter().enumerate() {
                        out.push((p, items[i].seq.clone()));
                    }
                }
                out
            })
            .collect();

        let mut sampled: Vec<Option<ProgramSeq>> = vec![None; tt];
        for part in decoded {
            for (pos, seq) in part {
                sampled[pos] = Some(seq);
            }
        }
        let records: Vec<TransmitRecord> = picks
            .iter()
            .enumerate()
            .map(|(i, &ex)| {
                let q = &train.questions[train.q_of[ex]];
                if q.supervised {
                    TransmitRecord {
                        question: q.tokens.clone(),
                        program: q.program.clone(),
                        from_gt: true,
                    }
                } else {
                    TransmitRecord {
                        question: q.tokens.clone(),
                        program: sampled[i].take().expect("every unsupervised pick was decoded"),
                        from_gt: false,
                    }
                }
            })
            .collect();

        let gt = records.iter().filter(|r| r.from_gt).count() as u64;
        let log = self.gen_log();
        log.transmit_records += tt as u64;
        log.transmit_from_gt += gt;
        records
    }

    /// Distill a fresh generator from the transmitted corpus for exactly
    /// `t_pg` teacher-forced steps (the learning bottleneck), or keep the
    /// old one under NoRetrain.
    pub fn pg_learning(&mut self, records: &[TransmitRecord]) -> Result<(), TrainAbort> {
        if self.cfg.strategy.pg == PgReset::NoRetrain {
            return Ok(());
        }
        assert!(!records.is_empty(), "cannot distill from an empty corpus");
        let seed = self.rng.gen::<u64>();
        let mut pg = ProgramGenerator::new(self.cfg.pg, seed);
        let sn_on = self.cfg.strategy.sn != SnPolicy::NoSn;
        let mut cursor = ShuffleCycle::new((0..records.len()).collect());
        let bsz = self.cfg.schedule.batch_size;

        for _ in 0..self.cfg.schedule.t_pg {
            if sn_on {
                pg.sn_step(1);
            }
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for _ in 0..bsz {
                let r = cursor.next(&mut self.rng);
                groups.entry(records[r].question.len()).or_default().push(r);
            }
            let mut built: Vec<SupervisedBatch<f32>> = Vec::new();
            let (mut tokens, mut ce_sum) = (0usize, 0.0f64);
            for rs in groups.into_values() {
                let qs: Vec<&[u16]> = rs.iter().map(|&r| records[r].question.as_slice()).collect();
                let zs: Vec<&[u8]> = rs.iter().map(|&r| records[r].program.as_slice()).collect();
                let sb = pg.supervised_batch(&qs, &zs);
                tokens += sb.n_tokens;
                ce_sum += sb.loss_sum;
                built.push(sb);
            }
            if !ce_sum.is_finite() {
                return Err(TrainAbort {
                    global_step: self.global_step,
                    generation: self.generation,
                    phase: Phase::PgLearn,
                    detail: format!("batch cross-entropy sum {ce_sum}"),
                });
            }
            let mut acc = GradAccum::new(pg.store.len());
            for sb in built {
                sb.backward_into(1.0 / tokens as f64, &mut acc);
            }
            acc.apply(&mut pg.store);
            pg.store.adam_step(AdamConfig::with_lr(self.cfg.pg_lr));
            self.global_step += 1;
            self.gen_log().pg_steps += 1;
        }

        if self.cfg.strategy.sn == SnPolicy::LearningPhaseOnly {
            // Fold the final normalization into the weights; later phases
            // run without the reparameterization.
            pg.sn_bake(30);
        }
        self.pg = pg;
        Ok(())
    }

    /// Engine state a Seeded reset would restore: the parameters saved at
    /// the end of the last learning phase (run-start init before the first).
    pub fn seeded_state(&self) -> &[(String, Tensor<f32>)] {
        &self.seeded_ee
    }

    /// Apply the engine reset for a learning phase: fresh parameters,
    /// restore of the saved post-learning state, or nothing.
    pub fn reset_ee(&mut self) {
        match self.cfg.strategy.ee {
            EeReset::Scratch => {
                let seed = self.rng.gen::<u64>();
                let fresh = ExecutionEngine::new(self.cfg.ee, seed);
                let old = std::mem::replace(&mut self.ee, fresh);
                if self.cfg.keep_embeddings_on_reset {
                    copy_param_if_present(&old.store, &mut self.ee.store, "ee.embed");
                }
            }
            EeReset::Seeded => {
                load_values(&mut self.ee.store, &self.seeded_ee);
                self.ee.store.reset_optimizer();
            }
            EeReset::NoReset => {}
        }
    }

    /// Retrain the engine against the (frozen) new generator for `t_ee`
    /// steps, starting per the reset strategy.
    pub fn ee_learning(&mut self) -> Result<(), TrainAbort> {
        self.reset_ee();
        for _ in 0..self.cfg.schedule.t_ee {
            self.ee_step()?;
        }
        self.seeded_ee = snapshot_values(&self.ee.store);
        Ok(())
    }

    /// One engine-only update on generator-sampled programs.
    fn ee_step(&mut self) -> Result<f64, TrainAbort> {
        let b = self.cfg.schedule.batch_size;
        let train = &self.data.train;
        let batch: Vec<usize> = (0..b).map(|_| self.train_cursor.next(&mut self.rng)).collect();

        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, &ex) in batch.iter().enumerate() {
            groups.entry(train.questions[train.q_of[ex]].tokens.len()).or_default().push(pos);
        }
        let mut seqs: Vec<ProgramSeq> = vec![ProgramSeq::new(); b];
        for positions in groups.into_values() {
            let qs: Vec<&[u16]> = positions
                .iter()
                .map(|&p| train.questions[train.q_of[batch[p]]].tokens.as_slice())
                .collect();
            let items = self.pg.decode_sample_batch(&qs, &mut self.rng);
            for (i, &p) in positions.iter().enumerate() {
                seqs[p] = items[i].seq.clone();
            }
        }

        let jobs: Vec<(usize, ProgramTree)> = batch
            .iter()
            .zip(&seqs)
            .map(|(&ex, s)| (ex, parse_prefix(s).expect("decoded programs are executable")))
            .collect();
        let (acc, per_ex) = self.ee_batch_grads(&jobs, train);
        let mean_loss = per_ex.iter().map(|(l, _)| l).sum::<f64>() / b as f64;
        if !mean_loss.is_finite() {
            return Err(self.abort(Phase::EeLearn, &per_ex));
        }
        acc.apply(&mut self.ee.store);
        self.ee.store.adam_step(AdamConfig::with_lr(self.cfg.ee_lr));
        self.global_step += 1;
        self.gen_log().ee_steps += 1;
        Ok(mean_loss)
    }

    /// Argmax-decode every unique question of a split, returning executable
    /// trees plus the exact-match count against ground truth.
    fn argmax_trees(&self, questions: &[PreparedQuestion]) -> (Vec<ProgramTree>, usize) {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, q) in questions.iter().enumerate() {
            groups.entry(q.tokens.len()).or_default().push(i);
        }
        let mut seqs: Vec<ProgramSeq> = vec![ProgramSeq::new(); questions.len()];
        for positions in groups.into_values() {
            let qs: Vec<&[u16]> = positions.iter().map(|&i| questions[i].tokens.as_slice()).collect();
            let items = self.pg.decode_argmax_batch(&qs);
            for (k, &i) in positions.iter().enumerate() {
                seqs[i] = items[k].seq.clone();
            }
        }
        let exact = seqs.iter().zip(questions).filter(|(s, q)| **s == q.program).count();
        let trees = seqs.iter().map(|s| parse_prefix(s).expect("decoded programs parse")).collect();
        (trees, exact)
    }

    fn split_accuracy(&self, split: &PreparedSplit, trees: &[ProgramTree], panel: Option<&[usize]>) -> f64 {
        let ee = &self.ee;
        let check =
            |ex: usize| ee.predict(&trees[split.q_of[ex]], &split.images[ex]) == split.answers[ex];
        match panel {
            Some(p) => {
                let n = p.par_iter().filter(|&&ex| check(ex)).count();
                n as f64 / p.len() as f64
            }
            None => {
                let n = (0..split.len()).into_par_iter().filter(|&ex| check(ex)).count();
                n as f64 / split.len() as f64
            }
        }
    }

    /// Score the current (PG, EE) pair. Full evaluations sweep every
    /// example; panel evaluations subsample train and val-ood but always
    /// score val-iid completely, since it drives model selection.
    pub fn evaluate(&self, phase: Phase, full: bool) -> EvalPoint {
        let (train_trees, exact) = self.argmax_trees(&self.data.train.questions);
        let program_acc = exact as f64 / self.data.train.questions.len() as f64;
        let train_acc = self.split_accuracy(
            &self.data.train,
            &train_trees,
            (!full).then_some(self.train_panel.as_slice()),
        );
        let (iid_trees, _) = self.argmax_trees(&self.data.val_iid.questions);
        let val_iid_acc = self.split_accuracy(&self.data.val_iid, &iid_trees, None);
        let (ood_trees, _) = self.argmax_trees(&self.data.val_ood.questions);
        let val_ood_acc = self.split_accuracy(
            &self.data.val_ood,
            &ood_trees,
            (!full).then_some(self.ood_panel.as_slice()),
        );
        EvalPoint {
            global_step: self.global_step,
            generation: self.generation,
            phase,
            train_acc,
            val_iid_acc,
            val_ood_acc,
            program_acc,
            wallclock_s: self.t0.elapsed().as_secs_f64(),
        }
    }

    fn eval_and_record(&mut self, phase: Phase, full: bool) {
        let ep = self.evaluate(phase, full);
        let better = match &self.best {
            None => true,
            // Strict comparison keeps the earliest step on ties.
            Some(b) => ep.val_iid_acc > b.val_iid_acc,
        };
        if better {
            self.best = Some(BestModel {
                global_step: ep.global_step,
                val_iid_acc: ep.val_iid_acc,
                pg: snapshot_values(&self.pg.store),
                ee: snapshot_values(&self.ee.store),
            });
        }
        if let Some(cb) = &mut self.on_eval {
            cb(&ep);
        }
        self.history.push(ep);
    }

    /// Run the configured experiment to completion: the full generation
    /// cycle when iterated learning is on, otherwise one long interacting
    /// phase with the same step budget.
    pub fn run(&mut self) -> Result<RunOutcome, TrainAbort> {
        assert_eq!(self.global_step, 0, "run() expects a fresh trainer");
        let sched = self.cfg.schedule;
        self.eval_and_record(Phase::Interact, false);

        if self.cfg.il_enabled {
            for gen in 0..sched.n_generations {
                self.generation = gen as u32;
                self.interact_phase()?;
                let records = self.transmit();
                self.pg_learning(&records)?;
                drop(records);
                self.ee_learning()?;
                self.eval_and_record(Phase::Boundary, true);

                let log = self.gen_logs[gen];
                assert_eq!(log.interact_steps, sched.t_interact as u64);
                assert_eq!(log.transmit_records, sched.t_transmit as u64);
                if self.cfg.strategy.pg == PgReset::Retrain {
                    assert_eq!(log.pg_steps, sched.t_pg as u64);
                }
                assert_eq!(log.ee_steps, sched.t_ee as u64);
            }
        } else {
            // Budget-matched baseline: the steps a full IL run would spend,
            // all in one interacting phase.
            let per = sched.steps_per_generation(self.cfg.strategy.pg);
            for gen in 0..sched.n_generations {
                self.generation = gen as u32;
                for step in 1..=per {
                    self.interact_step()?;
                    self.gen_log().interact_steps += 1;
                    if self.cfg.eval_every > 0 && step % self.cfg.eval_every == 0 && step < per {
                        self.eval_and_record(Phase::Interact, false);
                    }
                }
                self.eval_and_record(Phase::Boundary, true);
            }
        }

        let best = self.best.take().expect("at least one evaluation was recorded");
        Ok(RunOutcome {
            history: std::mem::take(&mut self.history),
            generations: std::mem::take(&mut self.gen_logs),
            best,
        })
    }
}

fn ee_example_pass(
    ee: &ExecutionEngine<f32>,
    tape: &mut Tape<f32>,
    tree: &ProgramTree,
    image: &Tensor<f32>,
    answer: bool,
) -> (Var, f64, bool) {
    let logits = ee.logits_on(tape, tree, image);
    let loss = tape
        .cross_entropy_mean(logits, &[answer as u32])
        .expect("binary labels index two logits");
    let lv = tape.value(loss).data()[0] as f64;
    let lg = tape.value(logits).data();
    let correct = (lg[1] > lg[0]) == answer;
    (loss, lv, correct)
}

fn copy_param_if_present(src: &ParameterStore<f32>, dst: &mut ParameterStore<f32>, name: &str) {
    let find = |s: &ParameterStore<f32>| s.ids().find(|&id| s.name(id) == name);
    if let (Some(si), Some(di)) = (find(src), find(dst)) {
        let v = src.value(si).clone();
        dst.value_mut(di).clone_from(&v);
    }
}
