//! Execution-engine behavior: assembly order, module math against hand
//! computations, finite-difference gradient checks, layout sensitivity, and
//! a capacity smoke test on real generated data.

mod common;

use modnet_core::data::{build_dataset, Split};
use modnet_core::ee::{assemble, EeConfig, ExecutionEngine, ModuleArch, FEAT_H};
use modnet_core::lang::{parse_prefix, ProgramTree, TOK_AND, TOK_COLOR_RED, TOK_SCENE};
use modnet_tensor::check::{finite_diff_grad, rel_err};
use modnet_tensor::{AdamConfig, GradAccum, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn tree(text: &str) -> ProgramTree {
    parse_prefix(&modnet_core::lang::from_text(text).unwrap()).unwrap()
}

fn rand_image<T: modnet_tensor::Scalar>(rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..3 * 30 * 30).map(|_| T::from_f64(rng.gen_range(-2.5..2.5))).collect();
    Tensor::from_vec(&[3, 30, 30], data)
}

/// Snapshot all parameter values as one flat f64 vector.
fn flat_params(ee: &ExecutionEngine<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for id in ee.store.ids() {
        out.extend_from_slice(ee.store.value(id).data());
    }
    out
}

fn set_params(ee: &mut ExecutionEngine<f64>, flat: &[f64]) {
    let mut at = 0usize;
    for id in ee.store.ids().collect::<Vec<_>>() {
        let v = ee.store.value_mut(id);
        let n = v.numel();
        v.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    assert_eq!(at, flat.len());
}

/// Tape gradients for `loss_fn`, flattened in store order (zeros where a
/// parameter is unused).
fn tape_grads(
    ee: &ExecutionEngine<f64>,
    loss_fn: &dyn Fn(&ExecutionEngine<f64>, &mut Tape<f64>) -> modnet_tensor::Var,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let loss = loss_fn(ee, &mut tape);
    let mut grads = tape.backward(&[(loss, 1.0)]);
    let mut acc = GradAccum::new(ee.store.len());
    acc.absorb(&tape, &mut grads);
    let mut scratch = ExecutionEngine::<f64>::new(ee.cfg, 0);
    scratch.store.zero_grads();
    set_params(&mut scratch, &flat_params(ee));
    acc.apply(&mut scratch.store);
    let mut out = Vec::new();
    for id in scratch.store.ids() {
        out.extend_from_slice(scratch.store.grad(id).data());
    }
    out
}

/// Central-difference check of d(loss)/d(params) for an arbitrary loss.
fn check_param_gradients(
    mut ee: ExecutionEngine<f64>,
    loss_fn: &dyn Fn(&ExecutionEngine<f64>, &mut Tape<f64>) -> modnet_tensor::Var,
    tol: f64,
) {
    let analytic = tape_grads(&ee, loss_fn);
    let x0 = flat_params(&ee);
    let mut f = |x: &[f64]| -> f64 {
        set_params(&mut ee, x);
        let mut tape = Tape::forward_only();
        let l = loss_fn(&ee, &mut tape);
        tape.value(l).data()[0]
    };
    let fd = finite_diff_grad(&mut f, &x0, 1e-5);
    let e = rel_err(&analytic, &fd);
    assert!(e < tol, "gradient mismatch: rel err {e:.2e} (tol {tol:.0e})");
}

#[test]
fn assembly_is_children_first_and_deterministic() {
    let t = tree("and color[green] scene transform[left_of] shape[square] scene");
    let sched = assemble(&t);
    assert_eq!(sched.len(), 6);
    // Root is last; every argument index precedes its consumer.
    assert_eq!(sched.last().unwrap().token, TOK_AND);
    for (i, inv) in sched.iter().enumerate() {
        for a in inv.args.into_iter().flatten() {
            assert!(a < i, "argument after consumer");
        }
    }
    assert_eq!(sched, assemble(&t), "same tree, same schedule");
    // Leaves carry no argument slots.
    assert!(sched
        .iter()
        .filter(|inv| inv.token == TOK_SCENE)
        .all(|inv| inv.args == [None, None]));
}

#[test]
fn stem_shape_and_zero_image() {
    let ee = ExecutionEngine::<f32>::new(EeConfig::tiny(), 1);
    let mut tape = Tape::forward_only();
    let img = Tensor::zeros(&[3, 30, 30]);
    let x = ee.stem_on(&mut tape, &img);
    assert_eq!(tape.value(x).shape(), &[1, ee.cfg.channels, FEAT_H, FEAT_H]);
    // Biases start at zero, so a zero image maps to zero features.
    assert!(tape.value(x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn stem_gradient_check() {
    let cfg = EeConfig { channels: 4, ..EeConfig::tiny() };
    let ee = ExecutionEngine::<f64>::new(cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = rand_image::<f64>(&mut rng);
    check_param_gradients(
        ee,
        &move |ee, tape| {
            let x = ee.stem_on(tape, &img);
            tape.sum_all(x)
        },
        1e-6,
    );
}

/// Direct 1x1 convolution for hand-computed expectations.
fn conv1x1_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    let mut out = Tensor::zeros(&[1, co, h, wd]);
    for o in 0..co {
        for p in 0..h * wd {
            let mut acc = b.data()[o];
            for i in 0..ci {
                acc += w.data()[o * ci + i] * x.data()[i * h * wd + p];
            }
            out.data_mut()[o * h * wd + p] = acc;
        }
    }
    out
}

#[test]
fn film_module_identity_start_reduces_to_projected_concat() {
    // At initialization the FiLM sites are identities; with the two shared
    // convolutions zeroed, the module must compute proj(relu(concat(x,
    // max(h1,h2), h1-h2))).
    let cfg = EeConfig { channels: 2, ..EeConfig::tiny() };
    let mut ee = ExecutionEngine::<f64>::new(cfg, 3);
    for name in ["ee.mod_w1.w", "ee.mod_w2.w"] {
        let id = ee.store.id(name);
        for v in ee.store.value_mut(id).data_mut() {
            *v = 0.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mk = |rng: &mut ChaCha8Rng| {
        let data = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::<f64>::from_vec(&[1, 2, 4, 4], data)
    };
    let (h1, h2, x) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));

    let mut e = Tensor::<f64>::zeros(&[1, 6, 4, 4]);
    for p in 0..2 * 16 {
        e.data_mut()[p] = x.data()[p];
        e.data_mut()[2 * 16 + p] = h1.data()[p].max(h2.data()[p]);
        e.data_mut()[4 * 16 + p] = h1.data()[p] - h2.data()[p];
    }
    let relu_e = e.map(|v: f64| v.max(0.0));
    let expected = conv1x1_oracle(
        &relu_e,
        ee.store.value(ee.store.id("ee.mod_proj.w")),
        ee.store.value(ee.store.id("ee.mod_proj.b")),
    );

    let mut tape = Tape::forward_only();
    let hv1 = tape.constant(h1.clone());
    let hv2 = tape.constant(h2.clone());
    let xv = tape.constant(x.clone());
    let y = ee.forward_tensor_film(&mut tape, TOK_AND, hv1, hv2, xv);
    let got = tape.value(y);
    assert_eq!(got.shape(), expected.shape());
    for (a, b) in got.data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12, "module output {a} vs hand computation {b}");
    }

    // Unary convention: h2 = h1 zeroes the difference block of e.
    let mut tape = Tape::forward_only();
    let hv1 = tape.constant(h1.clone());
    let xv = tape.constant(x.clone());
    let y_unary = ee.forward_tensor_film(&mut tape, TOK_COLOR_RED, hv1, hv1, xv);
    let mut e_unary = Tensor::<f64>::zeros(&[1, 6, 4, 4]);
    for p in 0..2 * 16 {
        e_unary.data_mut()[p] = x.data()[p];
        e_unary.data_mut()[2 * 16 + p] = h1.data()[p];
        // difference block stays zero
    }
    let relu_eu = e_unary.map(|v: f64| v.max(0.0));
    let expected_u = conv1x1_oracle(
        &relu_eu,
        ee.store.value(ee.store.id("ee.mod_proj.w")),
        ee.store.value(ee.store.id("ee.mod_proj.b")),
    );
    for (a, b) in tape.value(y_unary).data().iter().zip(expected_u.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Kick every parameter off its identity start so gradient checks and
/// sensitivity tests exercise the full computation. The magnitude must stay
/// small enough that activations do not saturate the cross entropy, or
/// finite differences land on relu/argmax kinks.
fn perturb(ee: &mut ExecutionEngine<f64>, seed: u64, mag: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in ee.store.ids().collect::<Vec<_>>() {
        for v in ee.store.value_mut(id).data_mut() {
            *v += rng.gen_range(-mag..mag);
        }
    }
}

#[test]
fn film_module_gradient_check() {
    let cfg = EeConfig { channels: 2, ..EeConfig::tiny() };
    let mut ee = ExecutionEngine::<f64>::new(cfg, 5);
    perturb(&mut ee, 50, 0.15);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mk: Vec<f64> = (0..3 * 2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    check_param_gradients(
        ee,
        &move |ee, tape| {
            let h1 = tape.constant(Tensor::from_vec(&[1, 2, 4, 4], mk[..32].to_vec()));
            let h2 = tape.constant(Tensor::from_vec(&[1, 2, 4, 4], mk[32..64].to_vec()));
            let x = tape.constant(Tensor::from_vec(&[1, 2, 4, 4], mk[64..].to_vec()));
            let y = ee.forward_tensor_film(tape, TOK_AND, h1, h2, x);
            tape.sum_all(y)
        },
        1e-3,
    );
}

#[test]
fn tensor_nmn_zero_weights_and_asymmetry() {
    let cfg = EeConfig { arch: ModuleArch::TensorNmn, channels: 2, ..EeConfig::tiny() };
    let mut ee = ExecutionEngine::<f64>::new(cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mk = |rng: &mut ChaCha8Rng| {
        let data = (0..2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::<f64>::from_vec(&[1, 2, 4, 4], data)
    };
    let (h1, h2) = (mk(&mut rng), mk(&mut rng));

    // Random weights: the binary module must depend on argument order.
    let mut tape = Tape::forward_only();
    let (a, b) = (tape.constant(h1.clone()), tape.constant(h2.clone()));
    let y_ab = ee.forward_tensor_nmn(&mut tape, TOK_AND, a, b);
    let y_ba = ee.forward_tensor_nmn(&mut tape, TOK_AND, b, a);
    let differs = tape
        .value(y_ab)
        .data()
        .iter()
        .zip(tape.value(y_ba).data())
        .any(|(p, q)| (p - q).abs() > 1e-9);
    assert!(differs, "binary module ignores argument order");

    // Zero weights: unary collapses to relu(h1), binary to zero.
    for id in ee.store.ids().collect::<Vec<_>>() {
        let name = ee.store.name(id).to_string();
        if name.starts_with("ee.tok") {
            for v in ee.store.value_mut(id).data_mut() {
                *v = 0.0;
            }
        }
    }
    let mut tape = Tape::forward_only();
    let a = tape.constant(h1.clone());
    let y_unary = ee.forward_tensor_nmn(&mut tape, TOK_COLOR_RED, a, a);
    for (got, want) in tape.value(y_unary).data().iter().zip(h1.data()) {
        assert!((got - want.max(0.0)).abs() < 1e-12);
    }
    let b = tape.constant(h2.clone());
    let y_bin = ee.forward_tensor_nmn(&mut tape, TOK_AND, a, b);
    assert!(tape.value(y_bin).data().iter().all(|&v| v == 0.0));

    // Scene is the identity on stem features here.
    let y_scene = ee.forward_tensor_nmn(&mut tape, TOK_SCENE, a, a);
    assert_eq!(tape.value(y_scene).data(), h1.data());
}

#[test]
fn tensor_nmn_gradient_check() {
    let cfg = EeConfig { arch: ModuleArch::TensorNmn, channels: 2, ..EeConfig::tiny() };
    let ee = ExecutionEngine::<f64>::new(cfg, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = rand_image::<f64>(&mut rng);
    let t = tree("and color[red] scene shape[circle] scene");
    check_param_gradients(
        ee,
        &move |ee, tape| ee.loss_on(tape, &t, &img, true).0,
        1e-2,
    );
}

#[test]
fn vector_module_purity_and_gradient_check() {
    let cfg = EeConfig { arch: ModuleArch::VectorNmn, channels: 4, ..EeConfig::tiny() };
    let mut ee = ExecutionEngine::<f64>::new(cfg, 12);
    perturb(&mut ee, 13, 0.02);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let img = rand_image::<f64>(&mut rng);
    let t = tree("transform[above] color[blue] scene");
    let l1 = ee.execute(&t, &img);
    let l2 = ee.execute(&t, &img);
    assert_eq!(l1, l2, "same inputs, same outputs");

    let img2 = img.clone();
    check_param_gradients(
        ee,
        &move |ee, tape| ee.loss_on(tape, &t, &img2, false).0,
        1e-2,
    );
}

#[test]
fn classifier_pooling_ignores_spatial_permutation() {
    // The tensor classifier is a 1x1 convolution followed by a global max
    // pool, so shuffling spatial positions of the root feature map cannot
    // change the logits.
    let ee = ExecutionEngine::<f64>::new(EeConfig { channels: 3, ..EeConfig::tiny() }, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let n = 3 * FEAT_H * FEAT_H;
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let root = Tensor::from_vec(&[1, 3, FEAT_H, FEAT_H], data.clone());

    let mut perm: Vec<usize> = (0..FEAT_H * FEAT_H).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let mut shuffled = vec![0.0f64; n];
    for c in 0..3 {
        for (p, &src) in perm.iter().enumerate() {
            shuffled[c * FEAT_H * FEAT_H + p] = data[c * FEAT_H * FEAT_H + src];
        }
    }
    let root_p = Tensor::from_vec(&[1, 3, FEAT_H, FEAT_H], shuffled);

    let logits = |r: &Tensor<f64>| {
        let mut tape = Tape::forward_only();
        let v = tape.constant(r.clone());
        let l = ee.classify_on(&mut tape, v);
        tape.value(l).data().to_vec()
    };
    let (a, b) = (logits(&root), logits(&root_p));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12, "pooled classifier is spatially sensitive");
    }
}

#[test]
fn shared_weights_gather_gradient_from_every_invocation() {
    // Full-loss finite differences on the shared first convolution of a
    // three-module program only match if the tape sums contributions from
    // all invocations.
    let cfg = EeConfig { channels: 2, ..EeConfig::tiny() };
    let mut ee = ExecutionEngine::<f64>::new(cfg, 17);
    perturb(&mut ee, 18, 0.15);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let img = rand_image::<f64>(&mut rng);
    let t = tree("and scene scene");
    assert_eq!(assemble(&t).len(), 3);

    let w1 = ee.store.id("ee.mod_w1.w");
    let analytic_full = tape_grads(&ee, &{
        let img = img.clone();
        let t = t.clone();
        move |ee, tape| ee.loss_on(tape, &t, &img, true).0
    });
    // Slice out w1's segment of the flat layout.
    let mut at = 0usize;
    let mut w1_range = 0..0;
    for id in ee.store.ids() {
        let n = ee.store.value(id).numel();
        if id == w1 {
            w1_range = at..at + n;
        }
        at += n;
    }
    let analytic: Vec<f64> = analytic_full[w1_range.clone()].to_vec();
    assert!(analytic.iter().any(|&g| g != 0.0), "shared weight got no gradient");

    let x_full = flat_params(&ee);
    let x0: Vec<f64> = x_full[w1_range.clone()].to_vec();
    let mut f = |w: &[f64]| -> f64 {
        let mut x = x_full.clone();
        x[w1_range.clone()].copy_from_slice(w);
        set_params(&mut ee, &x);
        let mut tape = Tape::forward_only();
        let (_, v) = ee.loss_on(&mut tape, &t, &img, true);
        v
    };
    let fd = finite_diff_grad(&mut f, &x0, 1e-5);
    let e = rel_err(&analytic, &fd);
    assert!(e < 1e-3, "shared-weight gradient off by {e:.2e}");
}

#[test]
fn end_to_end_gradient_check_all_architectures() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let img = rand_image::<f64>(&mut rng);
    let t = tree("and color[red] scene shape[circle] scene");
    for arch in [ModuleArch::TensorFilm, ModuleArch::TensorNmn, ModuleArch::VectorNmn] {
        let cfg = EeConfig { arch, channels: 2, ..EeConfig::tiny() };
        let mut ee = ExecutionEngine::<f64>::new(cfg, 21);
        perturb(&mut ee, 22, 0.05);
        let img = img.clone();
        let t = t.clone();
        check_param_gradients(
            ee,
            &move |ee, tape| ee.loss_on(tape, &t, &img, true).0,
            1e-2,
        );
    }
}

#[test]
fn layout_follows_the_program() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cfg = EeConfig { channels: 4, ..EeConfig::tiny() };
    let mut ee = ExecutionEngine::<f32>::new(cfg, 24);
    // A few optimizer steps on random targets leave the identity start.
    for step in 0..10 {
        let img = rand_image::<f32>(&mut rng);
        let t = common::random_tree(&mut rng, 7);
        let mut tape = Tape::new();
        let (loss, _) = ee.loss_on(&mut tape, &t, &img, step % 2 == 0);
        let mut grads = tape.backward(&[(loss, 1.0)]);
        let mut acc = GradAccum::new(ee.store.len());
        acc.absorb(&tape, &mut grads);
        acc.apply(&mut ee.store);
        ee.store.adam_step(AdamConfig::with_lr(1e-3));
    }

    let mut n_diff = 0usize;
    for _ in 0..100 {
        let s1 = common::random_tree(&mut rng, 5);
        let s2 = common::random_tree(&mut rng, 5);
        let img = rand_image::<f32>(&mut rng);
        let fwd = ee.execute(&ProgramTree::node(TOK_AND, vec![s1.clone(), s2.clone()]), &img);
        let swp = ee.execute(&ProgramTree::node(TOK_AND, vec![s2.clone(), s1.clone()]), &img);
        if s1 == s2 {
            assert_eq!(fwd, swp, "identical subtrees must commute");
        } else if fwd != swp {
            n_diff += 1;
        }
    }
    assert!(n_diff > 80, "only {n_diff}/100 swapped layouts changed the logits");
}

#[test]
fn forward_values_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let archs = [ModuleArch::TensorFilm, ModuleArch::TensorNmn, ModuleArch::VectorNmn];
    let engines: Vec<ExecutionEngine<f32>> = archs
        .iter()
        .map(|&arch| {
            let mut ee =
                ExecutionEngine::<f32>::new(EeConfig { arch, channels: 4, ..EeConfig::tiny() }, 26);
            let mut prng = ChaCha8Rng::seed_from_u64(27);
            for id in ee.store.ids().collect::<Vec<_>>() {
                for v in ee.store.value_mut(id).data_mut() {
                    *v += prng.gen_range(-0.1..0.1);
                }
            }
            ee
        })
        .collect();
    for i in 0..1000 {
        let img = rand_image::<f32>(&mut rng);
        let t = common::random_tree(&mut rng, 9);
        let logits = engines[i % 3].execute(&t, &img);
        assert!(logits.iter().all(|v| v.is_finite()), "non-finite logits at draw {i}");
    }
}

#[test]
fn capacity_smoke_single_template() {
    // 50 examples of one template with ground-truth programs: a small FiLM
    // engine must fit them exactly.
    let ds = build_dataset(0xEE, 135).unwrap();
    let train: Vec<_> = ds
        .split_examples(Split::Train)
        .iter()
        .filter(|ex| ds.question(ex.question).template == 1)
        .take(50)
        .collect();
    assert_eq!(train.len(), 50);
    let items: Vec<(ProgramTree, Tensor<f32>, bool)> = train
        .iter()
        .map(|ex| {
            let q = ds.question(ex.question);
            let t = parse_prefix(&q.program).unwrap();
            let data = modnet_core::data::render::standardize(&ex.image, &ds.stats);
            (t, Tensor::from_vec(&[3, 30, 30], data), ex.answer)
        })
        .collect();

    let cfg = EeConfig { channels: 8, embed: 8, film_hidden: 16, cls_hidden: 16, ..EeConfig::tiny() };
    let mut ee = ExecutionEngine::<f32>::new(cfg, 30);
    let mut final_acc = 0.0;
    for step in 0..400 {
        let accs: Vec<GradAccum<f32>> = items
            .par_chunks(7)
            .map(|chunk| {
                let mut acc = GradAccum::new(ee.store.len());
                for (t, img, ans) in chunk {
                    let mut tape = Tape::new();
                    let (loss, _) = ee.loss_on(&mut tape, t, img, *ans);
                    let mut grads = tape.backward(&[(loss, 1.0 / items.len() as f32)]);
                    acc.absorb(&tape, &mut grads);
                }
                acc
            })
            .collect();
        let mut total = GradAccum::new(ee.store.len());
        for a in accs {
            total.merge(a);
        }
        total.apply(&mut ee.store);
        ee.store.adam_step(AdamConfig::with_lr(3e-3));

        if step % 10 == 9 {
            let correct = items
                .par_iter()
                .filter(|(t, img, ans)| ee.predict(t, img) == *ans)
                .count();
            final_acc = correct as f64 / items.len() as f64;
            if final_acc == 1.0 {
                break;
            }
        }
    }
    assert_eq!(final_acc, 1.0, "engine failed to fit 50 single-template examples");
}
