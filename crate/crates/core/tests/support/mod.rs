//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptsc::eval::{auroc, balanced_accuracy, confusion};
use ptsc::rf::{rf_of_stack, LayerGeom};
use ptsc::tensor::Activation;
use ptsc::{
    build_model, model, Forward, HeadVariant, Mode, Model, ModelConfig, Tape, Tensor, ValidInterval, Var,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values with magnitude in [0.05, 1] and pairwise gaps large enough that a
/// 1e-5 step never crosses a kink of relu or max.
pub fn kink_safe_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| 0.05 + 0.95 * (i as f64 + 0.5) / n as f64).collect();
    for x in &mut v {
        if rng.random_bool(0.5) {
            *x = -*x;
        }
    }
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Below this norm a central difference at [`FD_STEP`] is rounding noise.
pub const FD_FLOOR: f64 = 1e-6;

/// Norm-wise relative error `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let d: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    d / na.max(nn).max(FD_FLOOR)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Builds `op` on leaves holding `inputs`, reduces the output with fixed
/// random weights and compares the tape gradient of every input with central
/// differences. Returns the worst relative error over the inputs.
pub fn check_op(
    seed: u64,
    inputs: &[Tensor<f64>],
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |vals: &[Tensor<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = vals
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = op(&mut tape, &leaves);
        let shape = tape.shape(out).to_vec();
        let mut r = rng(seed ^ 0x5eed);
        let w = tape.constant(random_tensor(&mut r, &shape));
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        (tape, leaves, loss)
    };
    let (tape, leaves, loss) = eval(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(leaves[k])
            .unwrap_or_else(|| panic!("input {k} received no gradient"))
            .to_vec();
        let mut numeric = vec![0.0; input.len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[j] += FD_STEP;
            let (t, _, l) = eval(&shifted);
            let up = t.scalar(l).unwrap();
            shifted[k].data_mut()[j] -= 2.0 * FD_STEP;
            let (t, _, l) = eval(&shifted);
            let down = t.scalar(l).unwrap();
            *num = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Finite-difference check of every differentiable tape operation. Each
/// entry is `(name, worst relative error)`.
pub fn op_gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));

    let x = random_tensor(&mut r, &[2, 3, 9]);
    let w = random_tensor(&mut r, &[4, 3, 3]);
    let b = random_tensor(&mut r, &[4]);
    for pad in [0, 2] {
        push(
            &format!("conv1d(pad={pad})"),
            check_op(seed, &[x.clone(), w.clone(), b.clone()], |t, v| {
                t.conv1d(v[0], v[1], Some(v[2]), pad).unwrap()
            }),
        );
    }
    push(
        "conv1d(no bias)",
        check_op(seed, &[x.clone(), w.clone()], |t, v| t.conv1d(v[0], v[1], None, 1).unwrap()),
    );
    let active = [ValidInterval::new(1, 6), ValidInterval::new(8, 9)];
    push(
        "conv1d_within",
        check_op(seed, &[x.clone(), w.clone(), b.clone()], |t, v| {
            t.conv1d_within(v[0], v[1], Some(v[2]), 1, Some(&active)).unwrap()
        }),
    );
    push(
        "max_pool1d",
        check_op(seed, &[kink_safe_tensor(&mut r, &[2, 3, 11])], |t, v| {
            t.max_pool1d(v[0], 3, 2).unwrap()
        }),
    );
    let valid = [ValidInterval::new(2, 7), ValidInterval::new(0, 1)];
    push(
        "masked_mean",
        check_op(seed, &[x.clone()], |t, v| t.masked_mean(v[0], &valid).unwrap()),
    );
    let a = random_tensor(&mut r, &[3, 5]);
    let aw = random_tensor(&mut r, &[4, 5]);
    let ab = random_tensor(&mut r, &[4]);
    push(
        "affine",
        check_op(seed, &[a.clone(), aw.clone(), ab.clone()], |t, v| {
            t.affine(v[0], v[1], Some(v[2])).unwrap()
        }),
    );
    push(
        "affine(no bias)",
        check_op(seed, &[a.clone(), aw.clone()], |t, v| t.affine(v[0], v[1], None).unwrap()),
    );
    let ks = kink_safe_tensor(&mut r, &[3, 5]);
    for (name, act) in [
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ] {
        push(name, check_op(seed, &[ks.clone()], |t, v| t.activation(v[0], act)));
    }
    let a2 = random_tensor(&mut r, &[3, 5]);
    push("add", check_op(seed, &[a.clone(), a2.clone()], |t, v| t.add(v[0], v[1]).unwrap()));
    push("mul", check_op(seed, &[a.clone(), a2.clone()], |t, v| t.mul(v[0], v[1]).unwrap()));
    push("sum", check_op(seed, &[a.clone()], |t, v| t.sum(v[0])));
    let c3 = random_tensor(&mut r, &[3, 2]);
    push(
        "concat",
        check_op(seed, &[a.clone(), c3], |t, v| t.concat(&[v[0], v[1]]).unwrap()),
    );
    push(
        "narrow",
        check_op(seed, &[x.clone()], |t, v| t.narrow(v[0], 1, 2).unwrap()),
    );
    push(
        "row_select",
        check_op(seed, &[a.clone(), a2.clone()], |t, v| {
            t.row_select(&[true, false, true], v[0], v[1]).unwrap()
        }),
    );
    let gamma = random_tensor(&mut r, &[3]);
    let beta = random_tensor(&mut r, &[3]);
    let bn_valid = [ValidInterval::new(1, 8), ValidInterval::new(3, 5)];
    push(
        "masked_batch_norm(train)",
        check_op(seed, &[x.clone(), gamma.clone(), beta.clone()], |t, v| {
            t.masked_batch_norm(v[0], v[1], v[2], &bn_valid, None, 1e-5).unwrap().0
        }),
    );
    let rm = [0.1, -0.2, 0.3];
    let rv = [0.5, 1.5, 2.0];
    push(
        "masked_batch_norm(eval)",
        check_op(seed, &[x.clone(), gamma, beta], |t, v| {
            t.masked_batch_norm(v[0], v[1], v[2], &bn_valid, Some((&rm, &rv)), 1e-5).unwrap().0
        }),
    );
    let table = random_tensor(&mut r, &[2, 6]);
    push(
        "timeline",
        check_op(seed, &[table.clone()], |t, v| t.timeline(v[0], 2, 5, false).unwrap()),
    );
    push(
        "timeline(cyclic)",
        check_op(seed, &[table], |t, v| t.timeline(v[0], 2, 14, true).unwrap()),
    );
    let logits = random_tensor(&mut r, &[4, 3]);
    push(
        "softmax_cross_entropy",
        check_op(seed, &[logits], |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 2, 1, 2], &[1.0, 0.5, 2.0, 1.5]).unwrap()
        }),
    );
    out
}

/// A small model of the given preset whose backbone still has six blocks.
pub fn tiny_config(preset: &str, channels: usize, classes: usize, t_max: usize) -> ModelConfig {
    let mut c = ModelConfig::preset(preset, channels, classes, t_max).unwrap();
    let residual = c.backbone[0].residual;
    c.backbone = if residual {
        model::residual_backbone(&[3, 3, 3])
    } else {
        model::base_backbone(&[2, 3, 3, 3, 3, 3])
    };
    c.head.projection_channels = 3;
    c.head.recurrent_hidden = 3;
    if c.classifier_hidden.is_some() {
        c.classifier_hidden = Some(4);
    }
    c
}

fn model_loss(m: &Model<f64>, x: &Tensor<f64>, valid: &[ValidInterval], labels: &[usize]) -> (f64, Option<Vec<(String, Vec<f64>)>>) {
    let mut f = Forward::new(&m.params, Mode::Train);
    let xv = f.tape.constant(x.clone());
    let z = m.logits(&mut f, xv, valid).unwrap();
    let w = vec![1.0; labels.len()];
    let loss = f.tape.softmax_cross_entropy(z, labels, &w).unwrap();
    let value = f.tape.scalar(loss).unwrap();
    let grads = f.tape.backward(loss).unwrap();
    let bindings = f.bindings().to_vec();
    let mut out = Vec::new();
    for ((_, p), b) in m.params.iter().zip(&bindings) {
        if let Some(v) = b {
            out.push((p.name.clone(), grads.get(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; p.tensor.len()])));
        }
    }
    (value, Some(out))
}

/// Finite differences through a whole training-mode forward pass, for every
/// trainable tensor (at most `per_tensor` randomly chosen entries each).
pub fn model_gradient_check(
    m: &mut Model<f64>,
    x: &Tensor<f64>,
    valid: &[ValidInterval],
    labels: &[usize],
    per_tensor: usize,
    seed: u64,
) -> Vec<(String, f64)> {
    let (_, analytic) = model_loss(m, x, valid, labels);
    let analytic = analytic.unwrap();
    let mut r = rng(seed);
    let ids: Vec<_> = m.params.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, p.name.clone())).collect();
    let mut out = Vec::new();
    for (id, name) in ids {
        let n = m.params.get(id).len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| r.random_range(0..n)).collect()
        };
        let full = &analytic
            .iter()
            .find(|(nm, _)| *nm == name)
            .unwrap_or_else(|| panic!("{name} is not used by the forward pass"))
            .1;
        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = m.params.get(id).data()[j];
            m.params.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = model_loss(m, x, valid, labels).0;
            m.params.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = model_loss(m, x, valid, labels).0;
            m.params.get_mut(id).data_mut()[j] = orig;
            a.push(full[j]);
            num.push((up - down) / (2.0 * FD_STEP));
        }
        out.push((name, rel_error(&a, &num)));
    }
    out
}

/// Random batch placed on a canvas: `(inputs, valid, labels)`.
pub fn random_batch(
    r: &mut impl Rng,
    channels: usize,
    lengths: &[usize],
    frames: usize,
    classes: usize,
) -> (Tensor<f64>, Vec<ValidInterval>, Vec<usize>) {
    let b = lengths.len();
    let mut x = Tensor::zeros(&[b, channels, frames]);
    let mut valid = Vec::with_capacity(b);
    for (i, &t) in lengths.iter().enumerate() {
        let start = r.random_range(0..=frames - t);
        for c in 0..channels {
            for f in start..start + t {
                let off = x.offset(&[i, c, f]);
                x.data_mut()[off] = r.random_range(-1.0..1.0);
            }
        }
        valid.push(ValidInterval::new(start, start + t));
    }
    let labels = (0..b).map(|_| r.random_range(0..classes)).collect();
    (x, valid, labels)
}

/// The tiny AMSCNN-te model used by the whole-model gradient check.
pub fn tiny_model_gradient_check(seed: u64) -> Vec<(String, f64)> {
    let mut r = rng(seed);
    let cfg = tiny_config("amscnn-te", 2, 3, 600);
    let mut m = build_model::<f64>(&cfg, seed).unwrap();
    let (x, valid, labels) = random_batch(&mut r, 2, &[600, 70, 9], 600, 3);
    model_gradient_check(&mut m, &x, &valid, &labels, 12, seed)
}

pub const HEAD_VARIANTS: [HeadVariant; 4] = [
    HeadVariant::Gap,
    HeadVariant::MultiScale,
    HeadVariant::AdaptiveScale,
    HeadVariant::AdaptiveMultiScale,
];

/// Small random model with the given head and no temporal encoding.
pub fn random_head_model(variant: HeadVariant, seed: u64) -> Model<f64> {
    let mut cfg = tiny_config("amscnn", 2, 3, 2048);
    cfg.head.variant = variant;
    cfg.name = format!("{variant:?}");
    let mut m = build_model::<f64>(&cfg, seed).unwrap();
    perturb_running_stats(&mut m, seed);
    m
}

/// Replaces the default running statistics so eval-mode batch norm is not
/// the identity.
pub fn perturb_running_stats(m: &mut Model<f64>, seed: u64) {
    let mut r = rng(seed ^ 0xb17);
    let ids: Vec<_> = m.params.iter().filter(|(_, p)| !p.trainable).map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        for v in m.params.get_mut(id).data_mut() {
            *v = if name.ends_with("var") {
                r.random_range(0.5..2.0)
            } else {
                r.random_range(-0.5..0.5)
            };
        }
    }
}

/// Empirical receptive field and jump of the last layer of a conv/pool stack
/// without padding: raise one input frame at a time and record which outputs
/// move. Positive weights and inputs make every op monotone, so an output
/// changes exactly when the frame lies in its window.
pub fn empirical_rf(layers: &[(bool, LayerGeom)], frames: usize) -> Option<(usize, usize)> {
    let run = |x: &Tensor<f64>| -> Option<Vec<f64>> {
        let mut t = Tape::new();
        let mut h = t.constant(x.clone());
        for &(is_conv, g) in layers {
            let len = t.shape(h)[2];
            if len < g.kernel {
                return None;
            }
            h = if is_conv {
                let w = Tensor::full(&[1, 1, g.kernel], 1.0);
                let wv = t.constant(w);
                t.conv1d(h, wv, None, g.padding).ok()?
            } else {
                t.max_pool1d(h, g.kernel, g.stride).ok()?
            };
        }
        Some(t.value(h).data().to_vec())
    };
    let base_in = Tensor::full(&[1, 1, frames], 1.0);
    let base = run(&base_in)?;
    if base.len() < 2 {
        return None;
    }
    let mut touched: Vec<Vec<usize>> = vec![Vec::new(); base.len()];
    for i in 0..frames {
        let mut x = base_in.clone();
        x.data_mut()[i] = 1000.0;
        let y = run(&x)?;
        for (j, (a, b)) in y.iter().zip(&base).enumerate() {
            if a != b {
                touched[j].push(i);
            }
        }
    }
    let lo0 = *touched[0].first()?;
    let hi0 = *touched[0].last()?;
    let lo1 = *touched[1].first()?;
    Some((hi0 - lo0 + 1, lo1 - lo0))
}

/// Random stack of unpadded convolutions and pools.
pub fn random_stack(r: &mut impl Rng) -> Vec<(bool, LayerGeom)> {
    let n = r.random_range(2..=6);
    (0..n)
        .map(|_| {
            if r.random_bool(0.5) {
                (true, LayerGeom::new(r.random_range(1..=7), 1, 0))
            } else {
                let w = r.random_range(2..=4);
                let s = r.random_range(1..=w);
                (false, LayerGeom::new(w, s, 0))
            }
        })
        .collect()
}

pub fn analytic_rf(layers: &[(bool, LayerGeom)]) -> (usize, usize) {
    let geoms: Vec<LayerGeom> = layers.iter().map(|&(_, g)| g).collect();
    let last = *rf_of_stack(&geoms).last().unwrap();
    (last.rf, last.jump)
}

/// Per-class recall averaged over classes, straight from the definition.
pub fn brute_balanced_accuracy(labels: &[usize], predicted: &[usize], classes: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let hits = members.iter().filter(|&&i| predicted[i] == c).count();
        sum += hits as f64 / members.len() as f64;
    }
    sum / classes as f64
}

/// Area under the ROC polyline through every distinct threshold.
pub fn trapezoid_auroc(scores: &[f64], positive: &[bool]) -> f64 {
    let p = positive.iter().filter(|&&x| x).count() as f64;
    let n = positive.len() as f64 - p;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for &th in &thresholds {
        let tp = scores.iter().zip(positive).filter(|(s, y)| **s >= th && **y).count() as f64;
        let fp = scores.iter().zip(positive).filter(|(s, y)| **s >= th && !**y).count() as f64;
        pts.push((fp / n, tp / p));
    }
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Worst disagreement between the metric implementations and the oracles
/// over `instances` random problems, as `(balanced accuracy, auroc)`.
pub fn metric_oracle_gaps(seed: u64, instances: usize) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut ba_gap, mut au_gap): (f64, f64) = (0.0, 0.0);
    for _ in 0..instances {
        let classes = r.random_range(2..=5);
        let n = r.random_range(classes * 2..200);
        let mut labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        labels[..classes].iter_mut().enumerate().for_each(|(c, l)| *l = c);
        let predicted: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let ba = balanced_accuracy(&confusion(&labels, &predicted, classes)).unwrap();
        ba_gap = ba_gap.max((ba - brute_balanced_accuracy(&labels, &predicted, classes)).abs());

        // coarse scores so that ties are common
        let levels = r.random_range(2..20);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let mut positive: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        let a = auroc(&scores, &positive).unwrap();
        au_gap = au_gap.max((a - trapezoid_auroc(&scores, &positive)).abs());
    }
    (ba_gap, au_gap)
}

/// Largest `|Δ|` between two tensors of equal shape.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn logits_eval(m: &Model<f64>, x: &Tensor<f64>, valid: &[ValidInterval]) -> Vec<f64> {
    m.predict(x, valid).unwrap().logits.data().to_vec()
}

fn features_eval(m: &Model<f64>, x: &Tensor<f64>, valid: &[ValidInterval]) -> Vec<f64> {
    let mut f = Forward::new(&m.params, Mode::Eval);
    let xv = f.tape.constant(x.clone());
    let z = m.features(&mut f, xv, valid).unwrap();
    f.tape.value(z).data().to_vec()
}

/// Copies each sample of `x` into a canvas of `frames` frames, shifted right
/// by `shift`.
pub fn recanvas(x: &Tensor<f64>, valid: &[ValidInterval], frames: usize, shift: usize) -> (Tensor<f64>, Vec<ValidInterval>) {
    let (b, c, t) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(&[b, c, frames]);
    for bi in 0..b {
        for ci in 0..c {
            for f in valid[bi].range() {
                let v = x.at(&[bi, ci, f]);
                let o = out.offset(&[bi, ci, f + shift]);
                out.data_mut()[o] = v;
            }
        }
    }
    assert!(valid.iter().all(|v| v.end <= t));
    let moved = valid.iter().map(|v| ValidInterval::new(v.start + shift, v.end + shift)).collect();
    (out, moved)
}

/// Largest logit change between the same `samples` series placed on 1024-
/// and 2048-frame canvases.
pub fn padding_gap(variant: HeadVariant, seed: u64, samples: usize) -> f64 {
    let m = random_head_model(variant, seed);
    let mut r = rng(seed ^ 0x9ad);
    let lengths: Vec<usize> = (0..samples).map(|_| r.random_range(1..=1000)).collect();
    let (x, valid, _) = random_batch(&mut r, 2, &lengths, 1024, 2);
    let (x2, v2) = recanvas(&x, &valid, 2048, 0);
    max_abs_diff(&logits_eval(&m, &x, &valid), &logits_eval(&m, &x2, &v2))
}

/// Largest change of `z_f` when every series moves right by the cumulative
/// stride of the backbone (TE off).
pub fn shift_gap(variant: HeadVariant, seed: u64, samples: usize) -> f64 {
    let m = random_head_model(variant, seed);
    let jump = m.rf_report().final_jump();
    let mut r = rng(seed ^ 0x5f1);
    let lengths: Vec<usize> = (0..samples).map(|_| r.random_range(1..=900)).collect();
    let (x, valid, _) = random_batch(&mut r, 2, &lengths, 1024, 2);
    let (a, va) = recanvas(&x, &valid, 2048, 0);
    let (b, vb) = recanvas(&x, &valid, 2048, jump);
    max_abs_diff(&features_eval(&m, &a, &va), &features_eval(&m, &b, &vb))
}

/// Largest logit change under the same shift for a model with a random
/// temporal encoding.
pub fn te_shift_change(seed: u64) -> f64 {
    let mut cfg = tiny_config("amscnn-te", 2, 3, 2048);
    cfg.name = "te-shift".into();
    // a dead hidden ReLU layer would make the logits constant
    cfg.classifier_hidden = None;
    let mut m = build_model::<f64>(&cfg, seed).unwrap();
    perturb_running_stats(&mut m, seed);
    let mut r = rng(seed ^ 0x7e);
    // a generic table rather than the small initial one
    let table = m.temporal_encoding().unwrap().table;
    for v in m.params.get_mut(table).data_mut() {
        *v = r.random_range(-1.0..1.0);
    }
    let jump = m.rf_report().final_jump();
    let lengths: Vec<usize> = (0..4).map(|_| r.random_range(50..=900)).collect();
    let (x, valid, _) = random_batch(&mut r, 2, &lengths, 1024, 2);
    let (a, va) = recanvas(&x, &valid, 2048, 0);
    let (b, vb) = recanvas(&x, &valid, 2048, jump);
    max_abs_diff(&logits_eval(&m, &a, &va), &logits_eval(&m, &b, &vb))
}

/// Worst disagreement (statistics and valid outputs) between training-mode
/// masked batch norm with garbage in the padding and an oracle run on the
/// physically trimmed frames.
pub fn bn_oracle_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.random_range(1..=6);
    let c = r.random_range(1..=4);
    let frames = r.random_range(5..=60);
    let x = Tensor::from_fn(&[b, c, frames], |_| r.random_range(-50.0..50.0));
    let valid: Vec<ValidInterval> = (0..b)
        .map(|_| {
            let len = r.random_range(1..=frames);
            let s = r.random_range(0..=frames - len);
            ValidInterval::new(s, s + len)
        })
        .collect();
    // padding garbage differs from the valid content by construction
    let mut padded = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            for f in 0..frames {
                if !valid[bi].contains(f) {
                    let o = padded.offset(&[bi, ci, f]);
                    padded.data_mut()[o] = 1e3 * r.random_range(-1.0..1.0);
                }
            }
        }
    }
    let gamma: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
    let beta: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
    let eps = 1e-5;
    let mut tape = Tape::new();
    let xv = tape.constant(padded);
    let g = tape.constant(Tensor::new(vec![c], gamma.clone()).unwrap());
    let bt = tape.constant(Tensor::new(vec![c], beta.clone()).unwrap());
    let (y, stats) = tape.masked_batch_norm(xv, g, bt, &valid, None, eps).unwrap();
    let stats = stats.unwrap();
    let y = tape.value(y);
    let mut gap: f64 = 0.0;
    for ci in 0..c {
        let trimmed: Vec<f64> = (0..b)
            .flat_map(|bi| valid[bi].range().map(move |f| (bi, f)))
            .map(|(bi, f)| x.at(&[bi, ci, f]))
            .collect();
        let n = trimmed.len() as f64;
        let mean = trimmed.iter().sum::<f64>() / n;
        let var = trimmed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        gap = gap.max((mean - stats.mean[ci]).abs()).max((var - stats.var[ci]).abs());
        for bi in 0..b {
            for f in valid[bi].range() {
                let want = gamma[ci] * (x.at(&[bi, ci, f]) - mean) / (var + eps).sqrt() + beta[ci];
                gap = gap.max((want - y.at(&[bi, ci, f])).abs());
            }
        }
    }
    gap
}

/// Lengths `T` in `1..=t_max` where the adaptive sequence length of `m`
/// differs from `1 + |{l : rf_l <= T}|` with the given block RFs.
pub fn truncation_mismatches(m: &Model<f64>, expected_rfs: &[usize], t_max: usize) -> Vec<usize> {
    let lengths: Vec<usize> = (1..=t_max).collect();
    let levels = m.block_rfs().len() + 1;
    let mut tape = Tape::<f64>::new();
    let items: Vec<Var> = (0..levels).map(|_| tape.constant(Tensor::zeros(&[t_max, 1]))).collect();
    let seq = ptsc::heads::build_sequence(items, &m.block_rfs(), &lengths, true).unwrap();
    lengths
        .iter()
        .zip(&seq.lengths)
        .filter(|(&t, &n)| n != 1 + expected_rfs.iter().filter(|&&rf| rf <= t).count())
        .map(|(&t, _)| t)
        .collect()
}
