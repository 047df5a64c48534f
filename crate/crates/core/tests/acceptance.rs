//! Acceptance criteria, one line each. Set `PCA_ACCEPTANCE=3,7` to run a subset.

use std::path::Path;
use std::time::{Duration, Instant};

use pca_core::cwa::{apply_attention, class_attention_map, class_scores, class_semantic_map, CwaBlock, CwaConfig};
use pca_core::data::{
    prepare_splits, stratified_split, synth_dataset, to_tensor, upsample_minority, DatasetManifest, Image, LoadedSet,
    Protocol, SynthConfig, DEFAULT_RATIOS,
};
use pca_core::explain::{cam_from_tape, grad_cam};
use pca_core::layers::{avg_pool2x2, conv2d, dw_sep_conv3x3, linear, relu};
use pca_core::metrics::{accuracy, class_accuracy, f1, precision, roc_auc, sensitivity, specificity, ConfusionMatrix};
use pca_core::train::{
    evaluate, fit, load_checkpoint, plateau_scheduler, save_checkpoint, CheckpointMeta, PlateauScheduler, TrainConfig,
    TrainLog,
};
use pca_core::{
    finite_difference_check_many, BackboneSpec, Mode, Model, Model32, Padding, ParamStore, Shape, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

/// `Σ v ⊙ r` for a fixed random `r`.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let w = tape.constant(Tensor::uniform(tape.shape(v), -1.0, 1.0, &mut rng(seed)));
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

fn op_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut u = |s: Shape| Tensor::<f64>::uniform(s, -1.0, 1.0, &mut r);
    let x = u(Shape::new(2, 5, 4, 3));
    let kern = u(Shape::new(3, 3, 3, 2));
    let bias = u(Shape::vector(2));
    let dw = u(Shape::new(3, 3, 3, 1));
    let pw = u(Shape::new(1, 1, 3, 4));
    let pb = u(Shape::vector(4));
    let gamma = u(Shape::vector(3));
    let beta = u(Shape::vector(3));
    let even = u(Shape::new(2, 4, 6, 3));
    let pooled = u(Shape::new(3, 1, 1, 5));
    let lw = u(Shape::new(1, 1, 5, 4));
    let lb = u(Shape::vector(4));
    let logits = u(Shape::new(4, 1, 1, 3)).scale(3.0);
    let eps = 1e-5;
    let check = |f: &dyn Fn(&mut Tape<f64>, &[Var]) -> pca_core::Result<Var>, inputs: &[Tensor<f64>]| {
        finite_difference_check_many(f, inputs, eps).unwrap()
    };
    let mut out = Vec::new();
    for (stride, pad) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)] {
        out.push((
            "conv2d",
            check(
                &|t, v| {
                    let y = conv2d(t, v[0], v[1], Some(v[2]), stride, pad)?;
                    Ok(weighted_sum(t, y, seed + 1))
                },
                &[x.clone(), kern.clone(), bias.clone()],
            ),
        ));
    }
    out.push((
        "dw_sep_conv3x3",
        check(
            &|t, v| {
                let y = dw_sep_conv3x3(t, v[0], v[1], v[2], v[3])?;
                Ok(weighted_sum(t, y, seed + 2))
            },
            &[x.clone(), dw, pw, pb],
        ),
    ));
    out.push((
        "batch_norm",
        check(
            &|t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
                Ok(weighted_sum(t, y, seed + 3))
            },
            &[x.clone(), gamma, beta],
        ),
    ));
    out.push((
        "relu",
        check(
            &|t, v| {
                let y = relu(t, v[0]);
                Ok(weighted_sum(t, y, seed + 4))
            },
            std::slice::from_ref(&x),
        ),
    ));
    out.push((
        "global_max_pool",
        check(
            &|t, v| {
                let y = t.global_max_pool(v[0]);
                Ok(weighted_sum(t, y, seed + 5))
            },
            std::slice::from_ref(&x),
        ),
    ));
    out.push((
        "global_avg_pool",
        check(
            &|t, v| {
                let y = t.global_avg_pool(v[0]);
                Ok(weighted_sum(t, y, seed + 6))
            },
            std::slice::from_ref(&x),
        ),
    ));
    out.push((
        "avg_pool2x2",
        check(
            &|t, v| {
                let y = avg_pool2x2(t, v[0])?;
                Ok(weighted_sum(t, y, seed + 7))
            },
            &[even],
        ),
    ));
    out.push((
        "linear",
        check(
            &|t, v| {
                let y = linear(t, v[0], v[1], v[2])?;
                Ok(weighted_sum(t, y, seed + 8))
            },
            &[pooled, lw, lb],
        ),
    ));
    let labels = [0usize, 2, 1, 2];
    for gamma in [0.0, 2.0] {
        out.push(("focal_loss", check(&|t, v| t.focal_loss(v[0], &labels, gamma), std::slice::from_ref(&logits))));
    }
    out.push(("cwa_forward", cwa_check(seed)));
    out
}

/// Gradient of the full attention block with respect to its input and its
/// parameters. In training mode the bias feeding batch norm is cancelled by
/// the batch mean, so its exact gradient is zero and it is checked in eval mode only.
fn cwa_check(seed: u64) -> f64 {
    let mut r = rng(seed + 100);
    let mut store = ParamStore::<f64>::new();
    let block = CwaBlock::new(&mut store, "cwa", CwaConfig::new(3, 2, 4), &mut r).unwrap();
    for id in [block.bn.running_mean, block.bn.running_var] {
        let shape = store.tensor(id).shape();
        *store.tensor_mut(id) = Tensor::uniform(shape, 0.5, 1.5, &mut r);
    }
    let x = Tensor::<f64>::uniform(Shape::new(2, 4, 3, 4), -1.0, 1.0, &mut r);
    let mut worst = 0.0f64;
    for mode in [Mode::Train, Mode::Eval] {
        let ids: Vec<_> = store
            .trainable_ids()
            .filter(|&id| mode == Mode::Eval || id != block.expand.bias)
            .collect();
        let mut inputs = vec![x.clone()];
        for &id in &ids {
            inputs.push(Tensor::uniform(store.tensor(id).shape(), 0.2, 1.0, &mut r));
        }
        let err = finite_difference_check_many(
            |t, v| {
                let mut p = store.bind_frozen(t);
                for (k, &id) in ids.iter().enumerate() {
                    p.rebind(id, v[k + 1]);
                }
                let out = block.forward(t, &p, &store, v[0], mode)?;
                Ok(weighted_sum(t, out.output, seed + 9))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Largest per-coordinate relative error of the toy model's loss gradient
/// over a sample of parameter coordinates.
fn end_to_end_check(seed: u64) -> f64 {
    let mut model = Model::<f64>::build(&BackboneSpec::toy(3), seed).unwrap();
    let mut r = rng(seed + 200);
    let x = Tensor::<f64>::uniform(Shape::new(3, 8, 8, 3), 0.0, 1.0, &mut r);
    let labels = [0usize, 1, 2];
    let loss_of = |m: &Model<f64>| -> f64 {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let fp = m.forward(&mut t, xv, Mode::Train).unwrap();
        let l = t.focal_loss(fp.logits, &labels, 2.0).unwrap();
        t.value(l).data()[0]
    };
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let fp = model.forward(&mut t, xv, Mode::Train).unwrap();
    let l = t.focal_loss(fp.logits, &labels, 2.0).unwrap();
    t.backward(l).unwrap();
    let ids: Vec<_> = model.store().trainable_ids().collect();
    // Biases feeding a training-mode batch norm have an exactly zero gradient.
    let cancelled_by_batch_norm: Vec<_> = model.attention_blocks().map(|(_, b)| b.expand.bias).collect();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for id in ids {
        let grad = t.grad(fp.bindings.var(id)).unwrap();
        let g = grad.data();
        let largest = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        let random = r.gen_range(0..g.len());
        for i in [largest, random] {
            let orig = model.store().tensor(id).data()[i];
            model.store_mut().tensor_mut(id).data_mut()[i] = orig + eps;
            let plus = loss_of(&model);
            model.store_mut().tensor_mut(id).data_mut()[i] = orig - eps;
            let minus = loss_of(&model);
            model.store_mut().tensor_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = if cancelled_by_batch_norm.contains(&id) {
                if g[i].abs() <= 1e-12 && numeric.abs() <= 1e-6 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (g[i] - numeric).abs() / (g[i].abs() + numeric.abs()).max(1e-8)
            };
            worst = worst.max(err);
        }
    }
    worst
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut worst_op = (String::new(), 0.0f64);
    for seed in 0..10 {
        for (name, err) in op_checks(seed) {
            ensure(err < 1e-5, || format!("{name} seed {seed}: relative error {err:.2e}"))?;
            if err > worst_op.1 {
                worst_op = (name.to_string(), err);
            }
        }
    }
    let mut worst_e2e = 0.0f64;
    for seed in 0..10 {
        let err = end_to_end_check(seed);
        ensure(err < 1e-3, || format!("toy model seed {seed}: relative error {err:.2e}"))?;
        worst_e2e = worst_e2e.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("suite took {secs:.1}s"))?;
    Ok(format!(
        "10 seeds; worst op {} {:.1e} < 1e-5; toy model {:.1e} < 1e-3; {secs:.1}s",
        worst_op.0, worst_op.1, worst_e2e
    ))
}

// ---------------------------------------------------------------------------
// 2. Attention algebra

struct Parts {
    s: Vec<f64>,
    sem: Vec<f64>,
    ca: Vec<f64>,
}

fn parts(fhat: &Tensor<f64>, cfg: &CwaConfig) -> Parts {
    let mut t = Tape::new();
    let x = t.constant(fhat.clone());
    let s = class_scores(&mut t, x, cfg).unwrap();
    let sem = class_semantic_map(&mut t, x, cfg).unwrap();
    let ca = class_attention_map(&mut t, s, sem).unwrap();
    Parts {
        s: t.value(s).data().to_vec(),
        sem: t.value(sem).data().to_vec(),
        ca: t.value(ca).data().to_vec(),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn attention_algebra() -> Check {
    let mut cases = 0;
    for k in [2usize, 4, 8] {
        for l in [2usize, 3, 7] {
            for seed in 0..4u64 {
                let mut r = rng(seed * 97 + (k * 10 + l) as u64);
                let (n, h, w, c) = (2, 3 + seed as usize % 2, 4, 5);
                let cfg = CwaConfig::new(l, k, c);

                let mut store = ParamStore::<f64>::new();
                let block = CwaBlock::new(&mut store, "cwa", cfg, &mut r).map_err(e)?;
                let f = Tensor::<f64>::uniform(Shape::new(n, h, w, c), -1.0, 1.0, &mut r);
                let mut t = Tape::new();
                let p = store.bind(&mut t);
                let fv = t.constant(f.clone());
                let out = block.forward(&mut t, &p, &store, fv, Mode::Train).map_err(e)?;
                ensure(t.shape(out.output) == f.shape(), || format!("shape changed for k={k} L={l}"))?;
                ensure(t.value(out.scores).data().iter().all(|&v| v >= 0.0), || "negative score".into())?;

                let one = t.constant(Tensor::ones(Shape::new(n, h, w, 1)));
                let gated = apply_attention(&mut t, fv, one).map_err(e)?;
                let same = t.value(gated).data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, || "CA = 1 gate is not bit-exact".into())?;

                let fhat = Tensor::<f64>::uniform(Shape::new(n, h, w, k * l), 0.0, 2.0, &mut r);
                let base = parts(&fhat, &cfg);
                ensure(base.s.iter().all(|&v| v >= 0.0), || "negative score".into())?;

                let alpha = r.gen_range(0.05..20.0);
                let scaled = parts(&fhat.scale(alpha), &cfg);
                let want: Vec<f64> = base.s.iter().map(|v| v * alpha).collect();
                let d = max_diff(&scaled.s, &want);
                ensure(d <= 1e-10, || format!("homogeneity off by {d:e}"))?;

                let within: Vec<usize> = (0..k * l).map(|ch| (ch / k) * k + (ch + 1) % k).collect();
                let permuted = Tensor::from_fn(fhat.shape(), |[a, y, x, ch]| fhat.at(a, y, x, within[ch]));
                let q = parts(&permuted, &cfg);
                let d = max_diff(&q.s, &base.s).max(max_diff(&q.sem, &base.sem)).max(max_diff(&q.ca, &base.ca));
                ensure(d <= 1e-10, || format!("within-group permutation moved outputs by {d:e}"))?;

                let sigma: Vec<usize> = (0..l).map(|i| (i * 2 + 1) % l).collect();
                let sigma = if sigma.iter().collect::<std::collections::BTreeSet<_>>().len() == l {
                    sigma
                } else {
                    (0..l).rev().collect()
                };
                let across: Vec<usize> = (0..k * l).map(|ch| sigma[ch / k] * k + ch % k).collect();
                let permuted = Tensor::from_fn(fhat.shape(), |[a, y, x, ch]| fhat.at(a, y, x, across[ch]));
                let q = parts(&permuted, &cfg);
                let want_s: Vec<f64> = (0..n * l).map(|i| base.s[(i / l) * l + sigma[i % l]]).collect();
                let want_sem: Vec<f64> = (0..n * h * w * l).map(|i| base.sem[(i / l) * l + sigma[i % l]]).collect();
                let d = max_diff(&q.s, &want_s).max(max_diff(&q.sem, &want_sem)).max(max_diff(&q.ca, &base.ca));
                ensure(d <= 1e-10, || format!("class permutation equivariance off by {d:e}"))?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases over k in {{2,4,8}}, L in {{2,3,7}}; all six properties hold"))
}

// ---------------------------------------------------------------------------
// 3. Constant-map fixture through the composed block

fn constant_map_fixture() -> Check {
    let cfg = CwaConfig::new(2, 2, 3);
    let mut store = ParamStore::<f64>::new();
    let block = CwaBlock::new(&mut store, "cwa", cfg, &mut rng(0)).map_err(e)?;
    for id in [block.expand.depthwise, block.expand.pointwise, block.expand.bias] {
        let shape = store.tensor(id).shape();
        *store.tensor_mut(id) = Tensor::zeros(shape);
    }
    *store.tensor_mut(block.bn.beta) = Tensor::from_vec(Shape::vector(4), vec![1.0, 3.0, 2.0, 4.0]).map_err(e)?;
    let f = Tensor::<f64>::uniform(Shape::new(2, 3, 3, 3), -2.0, 2.0, &mut rng(1));
    for mode in [Mode::Train, Mode::Eval] {
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let fv = t.constant(f.clone());
        let out = block.forward(&mut t, &p, &store, fv, mode).map_err(e)?;
        let s = t.value(out.scores).data();
        ensure(s.chunks(2).all(|c| c == [2.0, 3.0]), || format!("s = {s:?}"))?;
        let sem = t.value(out.semantic).data();
        ensure(sem.chunks(2).all(|c| c == [2.0, 3.0]), || "F~ is not (2, 3)".into())?;
        let ca = t.value(out.attention).data();
        ensure(ca.iter().all(|&v| v == 6.5), || "CA is not 6.5 everywhere".into())?;
        let got = t.value(out.output).data();
        ensure(got.iter().zip(f.data()).all(|(a, b)| *a == 6.5 * b), || "F_CA != 6.5 F".into())?;
    }
    Ok("s = (2, 3), F~ = (2, 3), CA = 6.5, F_CA = 6.5 F in train and eval mode".into())
}

// ---------------------------------------------------------------------------
// 4. Focal loss

fn focal_value(logits: &[f64], labels: &[usize], gamma: f64) -> f64 {
    let classes = logits.len() / labels.len();
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(Shape::new(labels.len(), 1, 1, classes), logits.to_vec()).unwrap());
    let l = t.focal_loss(x, labels, gamma).unwrap();
    t.value(l).data()[0]
}

fn focal_loss() -> Check {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = r.gen_range(1..6);
        let classes = r.gen_range(2..8);
        let logits: Vec<f64> = (0..n * classes).map(|_| r.gen_range(-10.0..10.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let mut ce = 0.0;
        for (row, &y) in logits.chunks(classes).zip(&labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            ce -= (row[y].exp() / z).ln();
        }
        ce /= n as f64;
        worst = worst.max((focal_value(&logits, &labels, 0.0) - ce).abs());
    }
    ensure(worst < 1e-12, || format!("gamma = 0 differs from cross-entropy by {worst:e}"))?;
    let p: f64 = 0.9;
    let want = -(1.0 - p).powi(2) * p.ln();
    let got = focal_value(&[p.ln(), (1.0 - p).ln()], &[0], 2.0);
    ensure((got - want).abs() < 1e-12, || format!("fixture {got} vs oracle {want}"))?;
    ensure((got - 1.0536e-3).abs() < 1e-7, || format!("fixture {got}"))?;
    Ok(format!("gamma = 0 matches cross-entropy to {worst:.1e}; p = 0.9 fixture {got:.7e}"))
}

// ---------------------------------------------------------------------------
// 5. Metrics oracle

/// Independent per-class metrics by walking every cell.
fn oracle(counts: &[u64], l: usize, c: usize) -> [f64; 6] {
    let (mut tp, mut fp, mut fn_, mut tn, mut total, mut trace) = (0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
    for truth in 0..l {
        for pred in 0..l {
            let v = counts[truth * l + pred];
            total += v;
            if truth == pred {
                trace += v;
            }
            match (truth == c, pred == c) {
                (true, true) => tp += v,
                (false, true) => fp += v,
                (true, false) => fn_ += v,
                (false, false) => tn += v,
            }
        }
    }
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let p = div(tp as f64, (tp + fp) as f64);
    let r = div(tp as f64, (tp + fn_) as f64);
    [
        div(trace as f64, total as f64),
        div((tp + tn) as f64, total as f64),
        p,
        r,
        div(tn as f64, (tn + fp) as f64),
        div(2.0 * p * r, p + r),
    ]
}

fn check_matrix(counts: &[u64], l: usize, cm: &ConfusionMatrix) -> bool {
    (0..l).all(|c| {
        let want = oracle(counts, l, c);
        let got = [
            accuracy(cm),
            class_accuracy(cm, c),
            precision(cm, c),
            sensitivity(cm, c),
            specificity(cm, c),
            f1(cm, c),
        ];
        got == want
    })
}

fn brute_auc(scores: &[f64], labels: &[usize], classes: usize, c: usize) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] == c && labels[j] != c {
                pairs += 1.0;
                let (a, b) = (scores[i * classes + c], scores[j * classes + c]);
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn metrics_oracle() -> Check {
    let mut matrices = 0u64;
    for l in [2usize, 3] {
        let cells = l * l;
        let mut counts = vec![0u64; cells];
        let total = 6u64.pow(cells as u32);
        for code in 0..total {
            let mut z = code;
            for v in counts.iter_mut() {
                *v = z % 6;
                z /= 6;
            }
            let rows = counts.chunks(l).map(|r| r.to_vec()).collect();
            let cm = ConfusionMatrix::from_counts(rows).map_err(e)?;
            ensure(check_matrix(&counts, l, &cm), || format!("mismatch on {counts:?}"))?;
            matrices += 1;
        }
    }
    let mut r = rng(5);
    let mut fixtures = 0;
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let n = r.gen_range(2..=100);
        let classes = r.gen_range(2..=5);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let scores: Vec<f64> = (0..n * classes).map(|_| r.gen_range(0..12) as f64 / 11.0).collect();
        let rep = roc_auc(&scores, &labels, classes).map_err(e)?;
        for c in 0..classes {
            match (rep.per_class[c], brute_auc(&scores, &labels, classes, c)) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                (a, b) => return Err(format!("class {c}: AUC {a:?} vs brute force {b:?}")),
            }
        }
        fixtures += 1;
    }
    ensure(worst < 1e-9, || format!("AUC differs from brute force by {worst:e}"))?;
    Ok(format!(
        "{matrices} confusion matrices (2x2 and 3x3, entries 0..=5) exact; {fixtures} AUC fixtures within {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 6. Parameter accounting

fn parameter_accounting() -> Check {
    let mut cases = 0;
    for c in [1usize, 3, 16, 64, 200] {
        for k in [1usize, 2, 4, 8] {
            for l in [2usize, 4, 7] {
                let mut store = ParamStore::<f32>::new();
                let block = CwaBlock::new(&mut store, "cwa", CwaConfig::new(l, k, c), &mut rng(0)).map_err(e)?;
                let want = 9 * c + c * k * l + 3 * k * l;
                ensure(store.trainable_count() == want && block.param_count() == want, || {
                    format!("(C={c}, k={k}, L={l}): {} vs {want}", store.trainable_count())
                })?;
                cases += 1;
            }
        }
    }
    let spec = BackboneSpec::toy(4);
    let with = Model32::build(&spec, 0).map_err(e)?.param_count();
    let without = Model32::build(&spec.clone().with_attention(&[]), 0).map_err(e)?.param_count();
    ensure(with.baseline == without.total && with.total == with.baseline + with.attention, || {
        "attention overhead does not separate from the baseline".into()
    })?;
    let reference = Model32::build(&BackboneSpec::densenet121(7).with_attention(&[]), 0).map_err(e)?;
    let total = reference.param_count().total as f64;
    let published = 6.961e6;
    let rel = (total - published) / published;
    ensure(rel.abs() <= 0.10, || format!("reference baseline {total} is {:.1}% off", rel * 100.0))?;
    Ok(format!(
        "{cases} (C,k,L) triples exact; reference baseline {total} ({:+.2}% vs 6.961 M)",
        rel * 100.0
    ))
}

// ---------------------------------------------------------------------------
// 7. Desk-scale ablation

const ABLATION_SEEDS: u64 = 3;
const ABLATION_EPOCHS: usize = 40;
const ABLATION_BATCH: usize = 16;

fn ablation_spec(sites: &[usize]) -> BackboneSpec {
    BackboneSpec::desk(4).with_attention(sites)
}

fn desk_ablation() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let variants: [(&str, &[usize]); 3] = [("baseline", &[]), ("single", &[4]), ("progressive", &[2, 3, 4])];
    let mut f1s = vec![Vec::new(); 3];
    let mut slowest = Duration::ZERO;
    for seed in 0..ABLATION_SEEDS {
        let manifest = synth_dataset(&SynthConfig::desk(seed), &dir.path().join(format!("seed{seed}"))).map_err(e)?;
        let splits = prepare_splits(&manifest, DEFAULT_RATIOS, seed, Protocol::SplitThenUpsample).map_err(e)?;
        let train = LoadedSet::load(&splits.train, 32, 32).map_err(e)?;
        let val = LoadedSet::load(&splits.val, 32, 32).map_err(e)?;
        let test = LoadedSet::load(&splits.test, 32, 32).map_err(e)?;
        for (v, (name, sites)) in variants.iter().enumerate() {
            let start = Instant::now();
            let model = Model32::build(&ablation_spec(sites), seed).map_err(e)?;
            let cfg = TrainConfig {
                epochs: ABLATION_EPOCHS,
                batch_size: ABLATION_BATCH,
                seed,
                ..TrainConfig::default()
            };
            let fitted = fit(model, &train, &val, &cfg).map_err(e)?;
            let report = evaluate(&fitted.model, &test, 64, cfg.gamma).map_err(e)?.report;
            let took = start.elapsed();
            slowest = slowest.max(took);
            println!(
                "    seed {seed} {name:<11} macro-F1 {:.4} ({:.0}s, {})",
                report.macro_avg.f1,
                took.as_secs_f64(),
                fitted.log.stop_reason
            );
            f1s[v].push(report.macro_avg.f1);
        }
    }
    let mean: Vec<f64> = f1s.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let summary = format!(
        "mean macro-F1 baseline {:.4}, single {:.4}, progressive {:.4}; slowest run {:.0}s",
        mean[0],
        mean[1],
        mean[2],
        slowest.as_secs_f64()
    );
    ensure(slowest < Duration::from_secs(600), || format!("{summary}: a run exceeded 10 min"))?;
    ensure(mean[0] <= mean[1] && mean[1] <= mean[2], || format!("{summary}: ordering violated"))?;
    ensure(mean[2] - mean[0] >= 0.02, || format!("{summary}: gain below 0.02"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 8. Protocol reproduction

const HAM_COUNTS: [(&str, usize); 7] = [
    ("akiec", 327),
    ("bcc", 514),
    ("bkl", 1099),
    ("df", 115),
    ("mel", 1113),
    ("nv", 6705),
    ("vasc", 142),
];

fn ham_manifest() -> pca_core::Result<DatasetManifest> {
    let names = HAM_COUNTS.iter().map(|(n, _)| n.to_string()).collect();
    let items = HAM_COUNTS
        .iter()
        .flat_map(|&(name, n)| (0..n).map(move |i| (format!("{name}_{i:05}"), name.to_string())))
        .collect();
    DatasetManifest::new(names, Path::new(".").into(), items)
}

fn protocol_reproduction() -> Check {
    let m = ham_manifest().map_err(e)?;
    ensure(m.len() == 10015, || format!("{} records", m.len()))?;
    let s = stratified_split(&m, DEFAULT_RATIOS, 0).map_err(e)?;
    let sizes = (s.train.len(), s.val.len(), s.test.len());
    ensure(sizes == (6009, 2003, 2003), || format!("split sizes {sizes:?}"))?;
    for (c, (name, n)) in HAM_COUNTS.iter().enumerate() {
        for (part, ratio) in [(&s.train, 0.6), (&s.val, 0.2), (&s.test, 0.2)] {
            let got = part.counts()[c] as f64;
            ensure((got - ratio * *n as f64).abs() <= 1.0, || format!("{name}: {got} vs {ratio}·{n}"))?;
        }
    }
    let up = upsample_minority(&m).map_err(e)?;
    ensure(up.counts().iter().all(|&n| n == 6705) && up.len() == 46935, || {
        format!("upsampled counts {:?}", up.counts())
    })?;
    let first = prepare_splits(&m, DEFAULT_RATIOS, 0, Protocol::UpsampleThenSplit).map_err(e)?;
    let total = first.train.len() + first.val.len() + first.test.len();
    ensure(total == 46935, || format!("upsample-then-split total {total}"))?;
    let ours = prepare_splits(&m, DEFAULT_RATIOS, 0, Protocol::SplitThenUpsample).map_err(e)?;
    ensure(
        ours.train.counts().iter().all(|&n| n == s.train.counts()[5]) && ours.test.len() == 2003,
        || "split-then-upsample should balance only the training split".into(),
    )?;
    Ok(format!(
        "10015 -> 6009/2003/2003 (within 1 per class); upsampled to 7 x 6705 = 46935; upsample-then-split {}/{}/{}",
        first.train.len(),
        first.val.len(),
        first.test.len()
    ))
}

// ---------------------------------------------------------------------------
// 9. LR schedule

fn tiny_data(dir: &Path, seed: u64) -> pca_core::Result<(LoadedSet, LoadedSet)> {
    let cfg = SynthConfig {
        num_classes: 3,
        counts: vec![16, 10, 8],
        image_size: 16,
        seed,
    };
    let m = synth_dataset(&cfg, dir)?;
    let s = prepare_splits(&m, DEFAULT_RATIOS, seed, Protocol::SplitThenUpsample)?;
    Ok((LoadedSet::load(&s.train, 16, 16)?, LoadedSet::load(&s.val, 16, 16)?))
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 8,
        seed,
        record_time: false,
        ..TrainConfig::default()
    }
}

fn lr_schedule() -> Check {
    let lr = plateau_scheduler(&[1.0; 6], 0.001, 0.25, 5);
    ensure(lr == 0.00025, || format!("after 5 stagnant epochs lr = {lr}"))?;
    let mut r = rng(9);
    for _ in 0..200 {
        let mut s = PlateauScheduler::new(0.001, 0.25, 5);
        let mut last = s.lr;
        for _ in 0..r.gen_range(0..80) {
            let next = s.observe(r.gen_range(0.0..2.0));
            ensure(next <= last, || format!("lr rose from {last} to {next}"))?;
            last = next;
        }
    }
    let dir = tempfile::tempdir().map_err(e)?;
    let (train, val) = tiny_data(dir.path(), 1).map_err(e)?;
    let model = Model32::build(&BackboneSpec::desk(3), 1).map_err(e)?;
    let cfg = TrainConfig {
        epochs: 8,
        initial_lr: 0.01,
        plateau_patience: 1,
        early_stop_patience: 100,
        ..tiny_config(1)
    };
    let log = fit(model, &train, &val, &cfg).map_err(e)?.log;
    let lrs: Vec<f64> = log.epochs.iter().map(|ep| ep.lr).collect();
    ensure(lrs.windows(2).all(|w| w[1] <= w[0]), || format!("training lr trace {lrs:?}"))?;
    Ok(format!("0.001 -> {lr} after 5 stagnant epochs; non-increasing over 200 histories and a training run"))
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn read_all(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            continue;
        }
        let bytes = std::fs::read(&path)?;
        out.push((path.file_name().unwrap().to_string_lossy().into_owned(), bytes));
    }
    out.sort();
    Ok(out)
}

fn run_once(data: &Path, out: &Path) -> pca_core::Result<TrainLog> {
    let (train, val) = tiny_data(data, 3)?;
    let model = Model32::build(&BackboneSpec::desk(3), 3)?;
    let fitted = fit(model, &train, &val, &tiny_config(3))?;
    let meta = CheckpointMeta {
        class_names: train.class_names.clone(),
        image_size: Some(16),
    };
    save_checkpoint(&fitted.model, &meta, &out.join("ckpt"))?;
    fitted.log.write(out, "train_log")?;
    Ok(fitted.log)
}

fn determinism() -> Check {
    let root = tempfile::tempdir().map_err(e)?;
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let log_a = run_once(&root.path().join("data_a"), &a).map_err(e)?;
    run_once(&root.path().join("data_b"), &b).map_err(e)?;
    ensure(read_all(&a).map_err(e)? == read_all(&b).map_err(e)?, || "train logs differ".into())?;
    let (ca, cb) = (read_all(&a.join("ckpt")).map_err(e)?, read_all(&b.join("ckpt")).map_err(e)?);
    ensure(ca == cb, || "checkpoints differ".into())?;

    let (model, meta) = load_checkpoint::<f32>(&a.join("ckpt")).map_err(e)?;
    save_checkpoint(&model, &meta, &root.path().join("again")).map_err(e)?;
    ensure(read_all(&root.path().join("again")).map_err(e)? == ca, || "save/load/save changed bytes".into())?;
    let (reloaded, _) = load_checkpoint::<f32>(&root.path().join("again")).map_err(e)?;
    let bits = |m: &Model32| -> Vec<u32> {
        m.store().entries().iter().flat_map(|en| en.tensor.data().iter().map(|v| v.to_bits())).collect()
    };
    ensure(bits(&model) == bits(&reloaded), || "reloaded tensors differ".into())?;
    let bytes: usize = ca.iter().map(|(_, b)| b.len()).sum();
    Ok(format!(
        "two {}-epoch runs byte-identical (logs and {bytes}-byte checkpoint); round trip bit-exact",
        log_a.epochs.len()
    ))
}

// ---------------------------------------------------------------------------
// 11. Grad-CAM

fn cam_of(act: &Tensor<f64>, scale: f64) -> Vec<f64> {
    let mut t = Tape::new();
    let a = t.param(act.clone());
    let m = t.mean(a);
    let score = t.scale(m, scale);
    t.backward(score).unwrap();
    let s = act.shape();
    cam_from_tape(&t, a, s.h(), s.w()).unwrap()
}

fn grad_cam_criterion() -> Check {
    for seed in 0..10 {
        let act = Tensor::<f64>::uniform(Shape::new(1, 6, 5, 1), -1.0, 1.0, &mut rng(seed));
        let relu: Vec<f64> = act.data().iter().map(|v| v.max(0.0)).collect();
        let max = relu.iter().copied().fold(0.0, f64::max);
        let want: Vec<f64> = relu.iter().map(|v| v / max).collect();
        let got = cam_of(&act, 1.0);
        let d = max_diff(&got, &want);
        ensure(d < 1e-12, || format!("single-channel fixture off by {d:e}"))?;
        ensure(cam_of(&act, 2.0) == got, || "score and 2·score disagree".into())?;
    }

    let model = Model32::build(&BackboneSpec::toy(4), 7).map_err(e)?;
    let img = Image::from_fn(32, 32, |y, x| [y as f32 / 31.0, x as f32 / 31.0, ((x + y) % 7) as f32 / 6.0]);
    let _ = to_tensor::<f32>(&[&img]).map_err(e)?;
    let mut maps = 0;
    for layer in model.activation_names() {
        for class in 0..4 {
            let map = grad_cam(&model, &img, class, Some(&layer)).map_err(e)?;
            ensure((map.height, map.width) == (32, 32) && map.values.len() == 32 * 32, || {
                format!("{layer}: map is {}x{}", map.height, map.width)
            })?;
            ensure(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)), || format!("{layer}: values outside [0, 1]"))?;
            let max = map.max();
            ensure(max == 1.0 || max == 0.0, || format!("{layer}: max {max}"))?;
            maps += 1;
        }
    }
    Ok(format!("analytic fixture exact on 10 seeds; {maps} model maps nonnegative, max-normalized, 32x32"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(usize, &str, fn() -> Check); 11] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "attention algebra", attention_algebra),
        (3, "constant-map fixture", constant_map_fixture),
        (4, "focal loss", focal_loss),
        (5, "metrics oracle", metrics_oracle),
        (6, "parameter accounting", parameter_accounting),
        (7, "desk-scale ablation", desk_ablation),
        (8, "protocol reproduction", protocol_reproduction),
        (9, "lr schedule", lr_schedule),
        (10, "determinism", determinism),
        (11, "grad-cam", grad_cam_criterion),
    ];
    let only: Option<Vec<usize>> = std::env::var("PCA_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{id:>2}] {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
