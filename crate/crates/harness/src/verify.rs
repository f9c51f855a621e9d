//! Self-check suites behind `modnet verify` and the acceptance criteria:
//! each suite re-derives expected behavior through an independent route
//! (brute-force search, set-semantics re-evaluation, finite differences,
//! plain-f64 reference traces) and compares against the real implementation.

use std::collections::HashSet;

use modnet_core::data::exec::symbolic_execute;
use modnet_core::data::grid::{sample_grid, GridSpec, GRID_DIM};
use modnet_core::data::{build_dataset, Dataset};
use modnet_core::ee::{EeConfig, ExecutionEngine};
use modnet_core::lang::{
    self, arity, feasible_next, from_text, parse_prefix, serialize, to_text, ProgramTree,
    MAX_PROGRAM_LEN, VOCAB_SIZE,
};
use modnet_core::pg::{PgConfig, ProgramGenerator};
use modnet_tensor::check::{adam_reference_trace, finite_diff_grad, jacobi_singular_values, rel_err};
use modnet_tensor::{GradAccum, ParameterStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One named suite outcome; `detail` is a short evidence string.
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> SuiteResult {
    SuiteResult { name, passed, detail }
}

/// Draws a random valid program of at most `max_len` tokens by sampling
/// operators under the feasibility mask until only <END> remains.
pub fn random_program(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<u8> {
    let mut seq: Vec<u8> = Vec::new();
    loop {
        let mask = feasible_next(&seq, max_len).expect("prefix stays valid under the mask");
        let ops: Vec<u8> =
            (lang::FIRST_OPERATOR..VOCAB_SIZE as u8).filter(|&t| mask[t as usize]).collect();
        if ops.is_empty() {
            return seq;
        }
        seq.push(ops[rng.gen_range(0..ops.len())]);
    }
}

/// parse -> serialize and text -> tokens round trips on random programs.
pub fn parser_roundtrip(n: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for i in 0..n {
        let seq = random_program(&mut rng, MAX_PROGRAM_LEN);
        let tree = match parse_prefix(&seq) {
            Ok(t) => t,
            Err(e) => {
                return result(
                    "parser round-trip",
                    false,
                    format!("program {i} failed to parse: {e} ({seq:?})"),
                )
            }
        };
        if serialize(&tree) != seq {
            return result("parser round-trip", false, format!("serialize mismatch on {seq:?}"));
        }
        let text = to_text(&seq);
        match from_text(&text) {
            Ok(back) if back == seq => {}
            other => {
                return result(
                    "parser round-trip",
                    false,
                    format!("text round trip broke on {text:?}: {other:?}"),
                )
            }
        }
    }
    result("parser round-trip", true, format!("{n} random programs"))
}

/// Brute-force completability: can a prefix with `pending` open operand
/// slots finish within `remaining` more tokens? Searches over arity classes
/// rather than trusting any closed form.
fn can_complete(pending: usize, remaining: usize) -> bool {
    if pending == 0 {
        return true;
    }
    if remaining == 0 {
        return false;
    }
    // One slot consumed, arity slots opened; try leaf, unary, binary.
    [0usize, 1, 2].iter().any(|&a| can_complete(pending - 1 + a, remaining - 1))
}

/// Exhaustive feasibility-mask check: over every reachable arity-class
/// prefix up to `max_len`, each token is allowed iff a valid completion
/// exists (verified by brute-force search).
pub fn masking_soundness(max_len: usize) -> SuiteResult {
    // Class representatives: leaf, unary filter, binary.
    let reps = [lang::TOK_SCENE, lang::TOK_COLOR_RED, lang::TOK_AND];
    let mut frontier: Vec<Vec<u8>> = vec![vec![]];
    let mut checked = 0usize;
    while let Some(prefix) = frontier.pop() {
        let pending = {
            let mut p = 1usize;
            for &t in &prefix {
                p = p - 1 + arity(t).unwrap() as usize;
            }
            p
        };
        let complete = pending == 0 && !prefix.is_empty();
        let mask = match feasible_next(&prefix, max_len) {
            Some(m) => m,
            None => {
                return result(
                    "feasibility masking",
                    false,
                    format!("valid prefix {prefix:?} has no mask"),
                )
            }
        };
        checked += 1;
        for tok in 0..VOCAB_SIZE as u8 {
            let allowed = mask[tok as usize];
            // Independent model: <END> exactly at completion; an operator of
            // arity a consumes one slot and opens a, and the rest must close
            // within the remaining budget (decided by brute-force search).
            let viable = if tok == lang::TOK_END {
                complete
            } else {
                match arity(tok) {
                    Some(a) => {
                        !complete
                            && prefix.len() < max_len
                            && can_complete(pending - 1 + a as usize, max_len - prefix.len() - 1)
                    }
                    None => false,
                }
            };
            if allowed != viable {
                return result(
                    "feasibility masking",
                    false,
                    format!(
                        "prefix {prefix:?}: token {} allowed={allowed} but brute-force viable={viable}",
                        lang::token_name(tok)
                    ),
                );
            }
        }
        for &r in &reps {
            if mask[r as usize] {
                let mut next = prefix.clone();
                next.push(r);
                frontier.push(next);
            }
        }
    }
    result("feasibility masking", true, format!("{checked} prefixes exhaustive at max_len {max_len}"))
}

/// Naive set-semantics evaluator: explicit cell sets and loops, no masks.
fn naive_eval(tree: &ProgramTree, grid: &GridSpec) -> HashSet<(usize, usize)> {
    let cells = |keep: &dyn Fn(usize, usize) -> bool| -> HashSet<(usize, usize)> {
        let mut s = HashSet::new();
        for r in 0..GRID_DIM {
            for c in 0..GRID_DIM {
                if keep(r, c) {
                    s.insert((r, c));
                }
            }
        }
        s
    };
    match tree.token {
        lang::TOK_SCENE => cells(&|r, c| grid.cell(r, c).is_some()),
        lang::TOK_AND => {
            let a = naive_eval(&tree.children[0], grid);
            let b = naive_eval(&tree.children[1], grid);
            a.intersection(&b).copied().collect()
        }
        lang::TOK_COLOR_RED..=lang::TOK_COLOR_BLUE => {
            let want = (tree.token - lang::TOK_COLOR_RED) as usize;
            let child = naive_eval(&tree.children[0], grid);
            cells(&|r, c| {
                child.contains(&(r, c))
                    && matches!(grid.cell(r, c), Some((_, k)) if k.index() == want)
            })
        }
        lang::TOK_SHAPE_CIRCLE..=lang::TOK_SHAPE_SQUARE => {
            let want = (tree.token - lang::TOK_SHAPE_CIRCLE) as usize;
            let child = naive_eval(&tree.children[0], grid);
            cells(&|r, c| {
                child.contains(&(r, c))
                    && matches!(grid.cell(r, c), Some((s, _)) if s.index() == want)
            })
        }
        lang::TOK_ABOVE => {
            let child = naive_eval(&tree.children[0], grid);
            cells(&|r, c| child.iter().any(|&(r2, c2)| c2 == c && r2 > r))
        }
        lang::TOK_BELOW => {
            let child = naive_eval(&tree.children[0], grid);
            cells(&|r, c| child.iter().any(|&(r2, c2)| c2 == c && r2 < r))
        }
        lang::TOK_LEFT_OF => {
            let child = naive_eval(&tree.children[0], grid);
            cells(&|r, c| child.iter().any(|&(r2, c2)| r2 == r && c2 > c))
        }
        lang::TOK_RIGHT_OF => {
            let child = naive_eval(&tree.children[0], grid);
            cells(&|r, c| child.iter().any(|&(r2, c2)| r2 == r && c2 < c))
        }
        t => unreachable!("non-operator token {t}"),
    }
}

/// Mask executor vs the naive set evaluator on random (program, grid) pairs.
pub fn executor_vs_sets(n: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe7ec);
    for i in 0..n {
        let seq = random_program(&mut rng, MAX_PROGRAM_LEN);
        let grid = sample_grid(&mut rng, 0.4);
        let fast = symbolic_execute(&seq, &grid).expect("valid by construction");
        let slow = !naive_eval(&parse_prefix(&seq).unwrap(), &grid).is_empty();
        if fast != slow {
            return result(
                "executor vs set semantics",
                false,
                format!("pair {i}: mask says {fast}, sets say {slow} on {}", to_text(&seq)),
            );
        }
    }
    result("executor vs set semantics", true, format!("{n} random (program, grid) pairs"))
}

/// Every dataset example's stored answer equals the naive evaluation of its
/// question's ground-truth program on the example grid.
pub fn dataset_answers(ds: &Dataset) -> SuiteResult {
    for (i, ex) in ds.examples.iter().enumerate() {
        let q = ds.question(ex.question);
        let tree = parse_prefix(&q.program).expect("dataset programs parse");
        let want = !naive_eval(&tree, &ex.grid).is_empty();
        if ex.answer != want {
            return result(
                "dataset answers",
                false,
                format!("example {i} (question {}): stored {}, oracle {}", ex.question, ex.answer, want),
            );
        }
    }
    result("dataset answers", true, format!("{} examples", ds.examples.len()))
}

fn flat_params(store: &ParameterStore<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for id in store.ids() {
        out.extend(store.value(id).data().iter().copied());
    }
    out
}

fn set_params(store: &mut ParameterStore<f64>, flat: &[f64]) {
    let mut at = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.value_mut(id);
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    assert_eq!(at, flat.len());
}

/// End-to-end finite-difference gradient check of the full execute + loss
/// pipeline at f64, C=2, on a five-token program.
pub fn gradient_check(arch: modnet_core::ee::ModuleArch) -> SuiteResult {
    let cfg =
        EeConfig { arch, channels: 2, embed: 3, film_hidden: 4, cls_hidden: 5, ..EeConfig::default() };
    let ee = ExecutionEngine::<f64>::new(cfg, 7);
    let seq = from_text("and color[red] scene shape[circle] scene").unwrap();
    let tree = parse_prefix(&seq).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let img_data: Vec<f64> = (0..3 * 30 * 30).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let image = Tensor::from_vec(&[3, 30, 30], img_data);

    let loss_on = |probe: &ExecutionEngine<f64>, tape: &mut Tape<f64>| {
        let logits = probe.logits_on(tape, &tree, &image);
        tape.cross_entropy_mean(logits, &[1u32]).expect("two logits")
    };

    let x0 = flat_params(&ee.store);
    let mut loss_at = |x: &[f64]| -> f64 {
        let mut probe = ExecutionEngine::<f64>::new(cfg, 0);
        set_params(&mut probe.store, x);
        let mut tape = Tape::new();
        let loss = loss_on(&probe, &mut tape);
        tape.value(loss).data()[0]
    };
    let fd = finite_diff_grad(&mut loss_at, &x0, 1e-5);

    let mut tape = Tape::new();
    let loss_var = loss_on(&ee, &mut tape);
    let mut grads = tape.backward(&[(loss_var, 1.0)]);
    let mut acc = GradAccum::new(ee.store.len());
    acc.absorb(&tape, &mut grads);
    let mut scratch = ExecutionEngine::<f64>::new(cfg, 0);
    set_params(&mut scratch.store, &x0);
    acc.apply(&mut scratch.store);
    let mut analytic = Vec::with_capacity(x0.len());
    for id in scratch.store.ids().collect::<Vec<_>>() {
        analytic.extend(scratch.store.grad(id).data().iter().copied());
    }

    let err = rel_err(&analytic, &fd);
    result(
        "end-to-end gradient check",
        err < 1e-2,
        format!(
            "{:?}: relative error {err:.3e} over {} parameters (tolerance 1e-2)",
            arch,
            x0.len()
        ),
    )
}

/// Spectral normalization brings inflated decoder matrices to sigma within
/// [0.9, 1.05], measured by an independent Jacobi SVD.
pub fn spectral_sigma() -> SuiteResult {
    let mut pg = ProgramGenerator::<f32>::new(PgConfig::tiny(), 11);
    for id in pg.store.ids().collect::<Vec<_>>() {
        if pg.store.name(id).starts_with("pg.dec.w") {
            for v in pg.store.value_mut(id).data_mut() {
                *v *= 6.0;
            }
        }
    }
    pg.sn_eval(30);
    let (eff_ih, eff_hh) = pg.effective_decoder_weights();
    let s1 = jacobi_singular_values(&eff_ih)[0];
    let s2 = jacobi_singular_values(&eff_hh)[0];
    let ok = (0.9..=1.05).contains(&s1) && (0.9..=1.05).contains(&s2);
    result(
        "spectral normalization",
        ok,
        format!("sigma(w_ih) = {s1:.4}, sigma(w_hh) = {s2:.4} (need [0.9, 1.05])"),
    )
}

/// The store's Adam matches a plain-f64 reference trajectory to 1e-6.
pub fn adam_against_reference() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 13;
    let w0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let steps = 40;
    let grads: Vec<Vec<f64>> =
        (0..steps).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let adam = modnet_tensor::AdamConfig::with_lr(1e-2);
    let reference = adam_reference_trace(&w0, &grads, adam.lr, adam.beta1, adam.beta2, adam.eps);

    let mut store = ParameterStore::<f64>::new();
    let id = store.register("w", Tensor::from_vec(&[n], w0.clone()));
    let mut worst = 0.0f64;
    for (t, g) in grads.iter().enumerate() {
        store.zero_grads();
        store.accumulate_grad(id, &Tensor::from_vec(&[n], g.clone()));
        store.adam_step(adam);
        for (a, b) in store.value(id).data().iter().zip(&reference[t]) {
            worst = worst.max((a - b).abs());
        }
    }
    result(
        "adam vs reference trace",
        worst < 1e-6,
        format!("max divergence {worst:.3e} over {steps} steps (tolerance 1e-6)"),
    )
}

/// The quick always-on suites, in print order. The dataset suite takes the
/// already-built dataset so callers control its size.
pub fn standard_suites(ds: &Dataset) -> Vec<SuiteResult> {
    vec![
        parser_roundtrip(2000),
        masking_soundness(8),
        executor_vs_sets(1000),
        dataset_answers(ds),
        gradient_check(modnet_core::ee::ModuleArch::TensorFilm),
        spectral_sigma(),
        adam_against_reference(),
    ]
}

/// Convenience: build the standard dataset and run everything.
pub fn run_all() -> Vec<SuiteResult> {
    let ds = build_dataset(1, 135).expect("dataset build");
    standard_suites(&ds)
}
