#![allow(dead_code)]

use cascade::autodiff::{BatchNormCfg, Tape, Var};
use cascade::distill::{slot_loss_on_tape, DistillConfig, TeacherOutputs};
use cascade::hierarchy::{route_gamma_gradients, save_contexts, ModelHierarchy, SavedContext};
use cascade::kernels::Padding;
use cascade::mask::{self, ImportanceScores, PruneConfig};
use cascade::model::{BnMode, Network};
use cascade::arch::ArchSpec;
use cascade::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Output extent and leading pad, computed from first principles.
fn pad_geom(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - k) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (out, total / 2)
        }
    }
}

/// Direct seven-loop convolution. `x` is `N,C,H,W`, `w` is `K,K,C_in,C_out`. Terms are
/// summed over `kh, kw, ci` in that order, with zero padding contributing `w * 0`.
pub fn conv_loop(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, padding: Padding) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, co) = (w.shape()[0], w.shape()[3]);
    let (ho, pt) = pad_geom(h, k, stride, padding);
    let (wo, pl) = pad_geom(wd, k, stride, padding);
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0f64; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0f64;
                    for kh in 0..k {
                        for kw in 0..k {
                            for c in 0..ci {
                                let ih = (oh * stride + kh) as isize - pt as isize;
                                let iw = (ow * stride + kw) as isize - pl as isize;
                                let xv = if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    0.0
                                } else {
                                    xd[((b * ci + c) * h + ih as usize) * wd + iw as usize]
                                };
                                acc += wdat[((kh * k + kw) * ci + c) * co + o] * xv;
                            }
                        }
                    }
                    out[((b * co + o) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out).unwrap()
}

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Largest relative error between tape gradients and central differences of
/// `sum(R * build(inputs))`, with `R` a fixed random weighting of the output.
pub fn grad_check<F>(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (Tape<f64>, Vec<Var>, Var, Tensor<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let r = weights.cloned().unwrap_or_else(|| Tensor::zeros(shape));
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv).unwrap();
        let loss = tape.sum(prod);
        (tape, vars, loss, r)
    };
    let (_, _, _, probe) = eval(inputs, None);
    let weights = randn(probe.shape(), rng);
    let (tape, vars, loss, _) = eval(inputs, Some(&weights));
    let grads = tape.backward(loss).unwrap();

    let value = |vals: &[Tensor<f64>]| {
        let (tape, _, loss, _) = eval(vals, Some(&weights));
        tape.value(loss).item()
    };
    let mut worst = 0.0f64;
    for (j, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, &inputs[j]);
        for k in 0..inputs[j].len() {
            let mut plus = inputs.to_vec();
            plus[j].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[j].data_mut()[k] -= FD_STEP;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    worst
}

pub fn random_padding(rng: &mut ChaCha8Rng) -> Padding {
    if rng.random_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

/// Filter preference used by the mask oracle: higher score, then lower layer, then lower
/// index.
pub fn precedes(a: (f64, usize, usize), b: (f64, usize, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2))
}

/// Independent floor-constrained top-k: each layer's best `min(floor, size)` filters are
/// forced, the remaining budget goes to the best of the rest.
pub fn mask_oracle(scores: &ImportanceScores, keep_ratio: f64, floor: usize) -> Vec<Vec<bool>> {
    let all: Vec<(f64, usize, usize)> = scores
        .gamma
        .iter()
        .enumerate()
        .flat_map(|(l, g)| g.iter().enumerate().map(move |(n, &s)| (s, l, n)))
        .collect();
    let total = all.len();
    let n_keep = ((keep_ratio * total as f64).round() as usize).min(total);
    let mut keep: Vec<Vec<bool>> = scores.gamma.iter().map(|g| vec![false; g.len()]).collect();
    let rank_in_layer = |f: (f64, usize, usize)| all.iter().filter(|&&o| o.1 == f.1 && precedes(o, f)).count();
    let mut forced = 0;
    for &f in &all {
        if rank_in_layer(f) < floor.min(scores.gamma[f.1].len()) {
            keep[f.1][f.2] = true;
            forced += 1;
        }
    }
    let rest: Vec<_> = all.iter().copied().filter(|f| !keep[f.1][f.2]).collect();
    let budget = n_keep.saturating_sub(forced);
    for &f in &rest {
        let better = rest.iter().filter(|&&o| precedes(o, f)).count();
        if better < budget {
            keep[f.1][f.2] = true;
        }
    }
    keep
}

/// Random scores over random layer sizes. With `ties`, values come from a small set.
pub fn random_scores(rng: &mut ChaCha8Rng, ties: bool) -> ImportanceScores {
    let layers = rng.random_range(1..=6);
    let gamma = (0..layers)
        .map(|_| {
            let n = rng.random_range(1..=24);
            (0..n)
                .map(|_| {
                    if ties {
                        rng.random_range(0..4) as f64 * 0.5
                    } else {
                        rng.random_range(-2.0..2.0)
                    }
                })
                .collect()
        })
        .collect();
    ImportanceScores { gamma }
}

/// A random keep ratio whose kept count covers every layer's floor.
pub fn feasible_ratio(rng: &mut ChaCha8Rng, scores: &ImportanceScores, floor: usize) -> f64 {
    let total = scores.total() as f64;
    let need: usize = scores.gamma.iter().map(|g| floor.min(g.len())).sum();
    let lo = (need as f64 + 0.5) / total;
    if lo >= 1.0 {
        1.0
    } else {
        rng.random_range(lo..=1.0)
    }
}

pub fn prune_cfg(keep_ratio: f64, floor: usize) -> PruneConfig {
    PruneConfig {
        keep_ratio,
        min_filters_per_layer: floor,
    }
}

/// One joint step of a three-slot toy hierarchy in f64, up to the routed score gradients.
pub struct RoutingCase {
    pub contexts: Vec<SavedContext<f64>>,
    pub routed: Vec<Vec<Vec<f64>>>,
    pub hierarchy: ModelHierarchy<f64>,
}

pub fn routing_case(seed: u64) -> RoutingCase {
    let mut r = rng(seed);
    let net = Network::new(&ArchSpec::builtin("toy4").unwrap()).unwrap();
    let pre = net.init::<f64, _>(&mut r);
    let mut hierarchy = ModelHierarchy::from_pretrained(&net, &pre, &[0.5, 0.75, 1.0], 1).unwrap();
    // Perturb the scores so the slots' masks are not nested copies of one ranking.
    for slot in hierarchy.slots.iter_mut() {
        if let Some(s) = slot.scores.as_mut() {
            s.gamma.iter_mut().flatten().for_each(|g| *g += r.random_range(-0.5..0.5));
        }
    }
    hierarchy.refresh_masks().unwrap();

    let x = randn(&[4, 3, 8, 8], &mut r);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..10)).collect();
    let mut targets = Tensor::<f64>::zeros(vec![4, 10]);
    for (i, &l) in labels.iter().enumerate() {
        targets.data_mut()[i * 10 + l] = 1.0;
    }

    let mut tape = Tape::new();
    let plan: Vec<_> = (0..3).map(|i| (i, BnMode::Train, true)).collect();
    let fwd = hierarchy.forward_all(&net, &mut tape, &x, &plan, true).unwrap();
    let frozen = fwd.frozen.as_ref().unwrap();
    let cfg = DistillConfig::default();
    let mut total: Option<Var> = None;
    for i in 0..3 {
        let teacher = if i + 1 < 3 { &fwd.slots[i + 1] } else { frozen };
        let t_logits = tape.value(teacher.logits).clone();
        let t_maps: Vec<Tensor<f64>> = teacher.hints.iter().map(|&v| tape.value(v).clone()).collect();
        let s = &fwd.slots[i];
        let lv = slot_loss_on_tape(
            &mut tape,
            s.logits,
            &s.hints,
            &targets,
            Some(TeacherOutputs {
                logits: &t_logits,
                maps: &t_maps,
            }),
            &cfg,
        )
        .unwrap();
        total = Some(match total {
            None => lv.total,
            Some(t) => tape.add(t, lv.total).unwrap(),
        });
    }
    let grads = tape.backward(total.unwrap()).unwrap();
    let contexts: Vec<SavedContext<f64>> = fwd.slots.iter().map(|f| save_contexts(&tape, f, &grads)).collect();
    let wrapped: Vec<_> = contexts.iter().cloned().map(Some).collect();
    let routed = route_gamma_gradients(&wrapped, false).unwrap();
    RoutingCase {
        contexts,
        routed,
        hierarchy,
    }
}

/// `surrogate_gamma_grad` on every maskable layer of one saved context.
pub fn surrogate_on(ctx: &SavedContext<f64>) -> Vec<Vec<f64>> {
    ctx.layers
        .iter()
        .map(|c| mask::surrogate_gamma_grad(&c.dl_dy, &c.x, &c.w, c.stride, c.padding).unwrap())
        .collect()
}

pub fn bitwise_eq(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
}

/// Distinct values at least `gap` apart, in random order, so max-pooling has no near ties.
pub fn spread(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Values with magnitude at least `margin`, so ReLU stays away from its kink.
pub fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin - v.abs() } else { margin + v.abs() };
        }
    }
    t
}

pub fn label_rows(n: usize, k: usize, soft: bool, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::<f64>::zeros(vec![n, k]);
    for row in t.data_mut().chunks_mut(k) {
        if soft {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            row.iter_mut().zip(&raw).for_each(|(d, r)| *d = r / s);
        } else {
            row[rng.random_range(0..k)] = 1.0;
        }
    }
    t
}

/// Worst relative error of the score gradient against central differences of the loss
/// in a continuous per-channel scale `s`, evaluated at a binary mask.
pub fn surrogate_check(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..=2);
    let ci = rng.random_range(1..=3);
    let co = rng.random_range(2..=5);
    let h = rng.random_range(3..=6);
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let padding = random_padding(rng);
    let x = randn(&[n, ci, h, h], rng);
    let w = randn(&[k, k, ci, co], rng);
    let s0: Vec<f64> = (0..co).map(|_| if rng.random_bool(0.6) { 1.0 } else { 0.0 }).collect();
    let probe = conv_loop(&x, &w, stride, padding);
    let r1 = randn(probe.shape(), rng);
    let r2 = randn(probe.shape(), rng);
    // L(s) = sum(r1 * Y + r2 * Y * Y) with Y = (X * W) scaled per channel by s.
    let run = |s: &[f64]| {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let wv = tape.param(w.clone());
        let pre = tape.conv2d(xv, wv, stride, padding).unwrap();
        let y = tape.channel_scale(pre, s).unwrap();
        let a = tape.constant(r1.clone());
        let b = tape.constant(r2.clone());
        let lin = tape.mul(y, a).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let quad = tape.mul(sq, b).unwrap();
        let both = tape.add(lin, quad).unwrap();
        let loss = tape.sum(both);
        (tape, y, loss)
    };
    let (tape, y, loss) = run(&s0);
    let grads = tape.backward(loss).unwrap();
    let dl_dy = grads.get_or_zeros(y, tape.value(y));
    let analytic = mask::surrogate_gamma_grad(&dl_dy, &x, &w, stride, padding).unwrap();
    let mut worst = 0.0f64;
    for c in 0..co {
        let mut plus = s0.clone();
        plus[c] += FD_STEP;
        let mut minus = s0.clone();
        minus[c] -= FD_STEP;
        let lp = { let (t, _, l) = run(&plus); t.value(l).item() };
        let lm = { let (t, _, l) = run(&minus); t.value(l).item() };
        worst = worst.max(rel_err(analytic[c], (lp - lm) / (2.0 * FD_STEP)));
    }
    worst
}

/// Worst finite-difference error of one op over `instances` random cases.
pub fn op_check(op: &str, instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let e = op_instance(op, &mut r);
        worst = worst.max(e);
    }
    worst
}

pub const OPS: &[&str] = &[
    "conv2d",
    "channel_scale",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "max_pool",
    "global_avg_pool",
    "flatten",
    "dense",
    "add",
    "mul",
    "scale",
    "sum",
    "mean",
    "softmax_cross_entropy",
    "kd_loss",
    "mse",
    "surrogate",
];

fn small4(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(2..=4),
        rng.random_range(2..=4),
    ]
}

fn op_instance(op: &str, r: &mut ChaCha8Rng) -> f64 {
    let bn = BatchNormCfg::default();
    match op {
        "conv2d" => {
            let (n, ci, co) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
            let h = r.random_range(3..=5);
            let wd = r.random_range(3..=5);
            let k = r.random_range(1..=3);
            let stride = r.random_range(1..=2);
            let padding = random_padding(r);
            let x = randn(&[n, ci, h, wd], r);
            let w = randn(&[k, k, ci, co], r);
            grad_check(&[x, w], r, |t, v| t.conv2d(v[0], v[1], stride, padding).unwrap())
        }
        "channel_scale" => {
            let shape = small4(r);
            let s: Vec<f64> = (0..shape[1]).map(|_| r.random_range(-2.0..2.0)).collect();
            grad_check(&[randn(&shape, r)], r, |t, v| t.channel_scale(v[0], &s).unwrap())
        }
        "batch_norm_train" => {
            let shape = small4(r);
            let c = shape[1];
            let inputs = [randn(&shape, r), randn(&[c], r), randn(&[c], r)];
            grad_check(&inputs, r, |t, v| t.batch_norm_train(v[0], v[1], v[2], bn).unwrap().0)
        }
        "batch_norm_eval" => {
            let shape = small4(r);
            let c = shape[1];
            let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
            let inputs = [randn(&shape, r), randn(&[c], r), randn(&[c], r)];
            grad_check(&inputs, r, |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, bn).unwrap())
        }
        "relu" => {
            let shape = small4(r);
            grad_check(&[away_from_zero(&shape, 0.01, r)], r, |t, v| t.relu(v[0]))
        }
        "max_pool" => {
            let k = r.random_range(2..=3);
            let stride = r.random_range(1..=2);
            let padding = random_padding(r);
            let mut shape = small4(r);
            shape[2] = r.random_range(k..=5);
            shape[3] = r.random_range(k..=5);
            grad_check(&[spread(&shape, 0.01, r)], r, |t, v| t.max_pool(v[0], k, stride, padding).unwrap())
        }
        "global_avg_pool" => {
            let shape = small4(r);
            grad_check(&[randn(&shape, r)], r, |t, v| t.global_avg_pool(v[0]).unwrap())
        }
        "flatten" => {
            let shape = small4(r);
            grad_check(&[randn(&shape, r)], r, |t, v| t.flatten(v[0]))
        }
        "dense" => {
            let (n, d, k) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
            grad_check(&[randn(&[n, d], r), randn(&[d, k], r)], r, |t, v| t.dense(v[0], v[1]).unwrap())
        }
        "add" | "mul" => {
            let shape = small4(r);
            let inputs = [randn(&shape, r), randn(&shape, r)];
            if op == "add" {
                grad_check(&inputs, r, |t, v| t.add(v[0], v[1]).unwrap())
            } else {
                grad_check(&inputs, r, |t, v| t.mul(v[0], v[1]).unwrap())
            }
        }
        "scale" => {
            let c = r.random_range(-3.0..3.0);
            let shape = small4(r);
            grad_check(&[randn(&shape, r)], r, |t, v| t.scale(v[0], c))
        }
        "sum" | "mean" => {
            let shape = small4(r);
            if op == "sum" {
                grad_check(&[randn(&shape, r)], r, |t, v| t.sum(v[0]))
            } else {
                grad_check(&[randn(&shape, r)], r, |t, v| t.mean(v[0]))
            }
        }
        "softmax_cross_entropy" => {
            let (n, k) = (r.random_range(1..=4), r.random_range(2..=6));
            let labels = label_rows(n, k, r.random_bool(0.5), r);
            let logits = Tensor::randn(vec![n, k], 2.0, r);
            grad_check(&[logits], r, |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap())
        }
        "kd_loss" => {
            let (n, k) = (r.random_range(1..=4), r.random_range(2..=6));
            let tau = r.random_range(1.0..6.0);
            let teacher = Tensor::randn(vec![n, k], 3.0, r);
            let student = Tensor::randn(vec![n, k], 3.0, r);
            // Scaled up so the gradient is not dwarfed by the comparison floor.
            grad_check(&[student], r, |t, v| {
                let l = t.kd_loss(v[0], &teacher, tau).unwrap();
                t.scale(l, 10.0)
            })
        }
        "mse" => {
            let shape = small4(r);
            let target = randn(&shape, r);
            grad_check(&[randn(&shape, r)], r, |t, v| t.mse_const(v[0], &target).unwrap())
        }
        "surrogate" => surrogate_check(r),
        other => panic!("unknown op {other}"),
    }
}

/// One randomized mask trial. Returns the first violated property.
pub fn mask_trial(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let ties = r.random_bool(0.5);
    let scores = random_scores(&mut r, ties);
    let floor = r.random_range(1..=3);
    let ratio = feasible_ratio(&mut r, &scores, floor);
    let cfg = prune_cfg(ratio, floor);
    let m = mask::build_mask(&scores, &cfg).map_err(|e| format!("build: {e}"))?;

    let total = scores.total();
    let want = ((ratio * total as f64).round() as usize).min(total);
    if m.kept() != want {
        return Err(format!("cardinality: kept {} of {total}, want {want}", m.kept()));
    }
    if mask::build_mask(&scores, &cfg).unwrap() != m {
        return Err("determinism".into());
    }
    for (l, layer) in m.layers.iter().enumerate() {
        if m.kept_in(l) < floor.min(layer.len()) {
            return Err(format!("floor: layer {l} keeps {}", m.kept_in(l)));
        }
    }
    if m.layers != mask_oracle(&scores, ratio, floor) {
        return Err(format!("oracle mismatch (ties={ties}, floor={floor}, ratio={ratio})"));
    }
    let lower = feasible_ratio(&mut r, &scores, floor).min(ratio);
    let small = mask::build_mask(&scores, &prune_cfg(lower, floor)).unwrap();
    if !small.is_subset_of(&m) {
        return Err(format!("nesting: {lower} not inside {ratio}"));
    }
    Ok(())
}
