//! Per-filter importance scores, the global top-k mask, and the straight-through score
//! gradient.
//!
//! A mask keeps the `round(keep_ratio * F)` highest-scored filters across all maskable
//! layers. Scores are trained from `sum_{n,h,w} dL/dY * (X * W)`: the reduction uses the
//! unmasked convolution, so a filter that is currently switched off still sees a gradient
//! and can come back.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Padding};
use crate::optim;
use crate::tensor::{Scalar, Tensor};

/// Real-valued importance per output filter of each maskable conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub gamma: Vec<Vec<f64>>,
}

/// Binary keep/drop decision per output filter of each maskable conv layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterMask {
    pub layers: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub keep_ratio: f64,
    pub min_filters_per_layer: usize,
}

impl PruneConfig {
    pub fn keep(keep_ratio: f64) -> Result<Self> {
        let cfg = PruneConfig {
            keep_ratio,
            min_filters_per_layer: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// From a pruned fraction `p`; keeps `1 - p`.
    pub fn prune(prune_ratio: f64) -> Result<Self> {
        Self::keep(1.0 - prune_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::InvalidKeepRatio(self.keep_ratio));
        }
        if self.min_filters_per_layer == 0 {
            return Err(Error::config("min_filters_per_layer", "must be at least 1"));
        }
        Ok(())
    }
}

impl ImportanceScores {
    /// Per-layer L1 norm of each filter's weights, rescaled to unit mean within the layer.
    /// `weights` are kernels in `K,K,C_in,C_out` layout.
    pub fn from_l1<T: Scalar>(weights: &[&Tensor<T>]) -> Self {
        let gamma = weights
            .iter()
            .map(|w| {
                let c_out = *w.shape().last().expect("kernel rank");
                let mut l1 = vec![0.0f64; c_out];
                for (i, v) in w.data().iter().enumerate() {
                    l1[i % c_out] += v.f64().abs();
                }
                let mean = l1.iter().sum::<f64>() / c_out as f64;
                if mean > 0.0 {
                    l1.iter_mut().for_each(|v| *v /= mean);
                } else {
                    l1.iter_mut().for_each(|v| *v = 1.0);
                }
                l1
            })
            .collect();
        ImportanceScores { gamma }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.gamma.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.gamma.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.gamma.iter().flatten().all(|v| v.is_finite())
    }
}

impl FilterMask {
    pub fn all_ones(sizes: &[usize]) -> Self {
        FilterMask {
            layers: sizes.iter().map(|&n| vec![true; n]).collect(),
        }
    }

    pub fn kept(&self) -> usize {
        self.layers.iter().flatten().filter(|&&b| b).count()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn kept_in(&self, layer: usize) -> usize {
        self.layers[layer].iter().filter(|&&b| b).count()
    }

    pub fn layer_scale<T: Scalar>(&self, layer: usize) -> Vec<T> {
        self.layers[layer]
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect()
    }

    /// Number of filters whose state differs.
    pub fn hamming(&self, other: &FilterMask) -> usize {
        self.layers
            .iter()
            .flatten()
            .zip(other.layers.iter().flatten())
            .filter(|(a, b)| a != b)
            .count()
    }

    /// True when every filter kept here is also kept in `other`.
    pub fn is_subset_of(&self, other: &FilterMask) -> bool {
        self.layers
            .iter()
            .flatten()
            .zip(other.layers.iter().flatten())
            .all(|(&a, &b)| !a || b)
    }
}

pub fn keep_count(keep_ratio: f64, total: usize) -> usize {
    ((keep_ratio * total as f64).round() as usize).min(total)
}

/// Keep-preference order: higher score first, then lower layer, then lower filter index.
fn keep_order(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Global top-k mask with a per-layer floor.
///
/// The `round(keep_ratio * F)` best filters are kept. Any layer left below
/// `min_filters_per_layer` then gets its best disabled filters back, and the same number of
/// globally weakest kept filters in layers above the floor are dropped, preserving the count.
pub fn build_mask(scores: &ImportanceScores, cfg: &PruneConfig) -> Result<FilterMask> {
    cfg.validate()?;
    let total = scores.total();
    let n_keep = keep_count(cfg.keep_ratio, total);
    let floor: usize = scores
        .gamma
        .iter()
        .map(|l| cfg.min_filters_per_layer.min(l.len()))
        .sum();
    if n_keep < floor {
        return Err(Error::KeepBelowFloor { n_keep, floor });
    }

    let mut ranked: Vec<(f64, usize, usize)> = scores
        .gamma
        .iter()
        .enumerate()
        .flat_map(|(l, g)| g.iter().enumerate().map(move |(n, &s)| (s, l, n)))
        .collect();
    ranked.sort_by(keep_order);

    let mut mask = FilterMask {
        layers: scores.gamma.iter().map(|g| vec![false; g.len()]).collect(),
    };
    for &(_, l, n) in &ranked[..n_keep] {
        mask.layers[l][n] = true;
    }

    for l in 0..mask.layers.len() {
        let need = cfg.min_filters_per_layer.min(mask.layers[l].len());
        let mut kept = mask.kept_in(l);
        while kept < need {
            // Best disabled filter of this layer comes back...
            let (_, _, n_on) = *ranked
                .iter()
                .find(|&&(_, rl, rn)| rl == l && !mask.layers[rl][rn])
                .expect("layer has a disabled filter");
            // ...and the weakest kept filter of a layer above its floor goes.
            let victim = ranked.iter().rev().find(|&&(_, rl, rn)| {
                rl != l
                    && mask.layers[rl][rn]
                    && mask.kept_in(rl) > cfg.min_filters_per_layer.min(mask.layers[rl].len())
            });
            let &(_, vl, vn) = victim.ok_or(Error::KeepBelowFloor { n_keep, floor })?;
            mask.layers[l][n_on] = true;
            mask.layers[vl][vn] = false;
            kept += 1;
        }
    }
    Ok(mask)
}

/// Convolution with output channels zeroed where the mask is off.
pub fn masked_conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, mask: &[bool], stride: usize, padding: Padding) -> Result<Tensor<T>> {
    let c_out = *w.shape().last().unwrap_or(&0);
    if mask.len() != c_out {
        return Err(Error::shape(
            "masked_conv2d",
            format!("mask has {} entries for {c_out} filters", mask.len()),
        ));
    }
    let (mut y, g) = kernels::conv2d_forward(x, w, stride, padding)?;
    let hw = g.h_out * g.w_out;
    let c = g.c_out;
    let data = y.data_mut();
    for n in 0..g.n {
        for (ch, &keep) in mask.iter().enumerate() {
            if !keep {
                data[(n * c + ch) * hw..(n * c + ch + 1) * hw].fill(T::zero());
            }
        }
    }
    Ok(y)
}

/// `g[n] = sum_{batch,h,w} dL/dY[., n, ., .] * XW[., n, ., .]`, with `XW` the unmasked
/// convolution output. Accumulated in f64 in index order.
pub fn surrogate_from_preactivation<T: Scalar>(dl_dy: &Tensor<T>, xw: &Tensor<T>) -> Result<Vec<f64>> {
    if dl_dy.shape() != xw.shape() {
        return Err(Error::shape(
            "surrogate_gamma_grad",
            format!("dL/dY {:?} vs X*W {:?}", dl_dy.shape(), xw.shape()),
        ));
    }
    let [n, c, h, w] = xw.dims4("surrogate_gamma_grad")?;
    let hw = h * w;
    let mut g = vec![0.0f64; c];
    for i in 0..n {
        for (ch, gc) in g.iter_mut().enumerate() {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                *gc += dl_dy.data()[j].f64() * xw.data()[j].f64();
            }
        }
    }
    Ok(g)
}

/// Straight-through score gradient for one conv layer, recomputing `X * W`.
pub fn surrogate_gamma_grad<T: Scalar>(
    dl_dy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Vec<f64>> {
    let (xw, _) = kernels::conv2d_forward(x, w, stride, padding)?;
    surrogate_from_preactivation(dl_dy, &xw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreOptimizerKind {
    Sgd,
    Rmsprop,
}

/// Optimizer for importance scores. Scores never receive weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptimizer {
    pub kind: ScoreOptimizerKind,
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// RMSProp second-moment estimates, shaped like the scores.
    pub second_moment: Vec<Vec<f64>>,
}

impl ScoreOptimizer {
    pub fn sgd() -> Self {
        ScoreOptimizer {
            kind: ScoreOptimizerKind::Sgd,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            second_moment: Vec::new(),
        }
    }

    pub fn rmsprop(rms_decay: f64, rms_eps: f64) -> Self {
        ScoreOptimizer {
            kind: ScoreOptimizerKind::Rmsprop,
            rms_decay,
            rms_eps,
            second_moment: Vec::new(),
        }
    }
}

/// One optimizer step on the scores. Masks are not rebuilt here.
pub fn apply_gamma_update(
    scores: &ImportanceScores,
    grads: &[Vec<f64>],
    opt: &mut ScoreOptimizer,
    lr: f64,
) -> Result<ImportanceScores> {
    if grads.len() != scores.gamma.len() || grads.iter().zip(&scores.gamma).any(|(g, s)| g.len() != s.len()) {
        return Err(Error::shape("apply_gamma_update", "gradient shapes do not match scores"));
    }
    let mut next = scores.clone();
    match opt.kind {
        ScoreOptimizerKind::Sgd => {
            for (layer, g) in next.gamma.iter_mut().zip(grads) {
                for (s, &d) in layer.iter_mut().zip(g) {
                    *s -= lr * d;
                }
            }
        }
        ScoreOptimizerKind::Rmsprop => {
            if opt.second_moment.len() != grads.len() {
                opt.second_moment = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            }
            for ((layer, g), v) in next.gamma.iter_mut().zip(grads).zip(opt.second_moment.iter_mut()) {
                optim::rmsprop_step(layer, g, v, lr, opt.rms_decay, opt.rms_eps, 0.0);
            }
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(g: &[&[f64]]) -> ImportanceScores {
        ImportanceScores {
            gamma: g.iter().map(|l| l.to_vec()).collect(),
        }
    }

    fn mask_of(m: &FilterMask) -> Vec<Vec<u8>> {
        m.layers.iter().map(|l| l.iter().map(|&b| b as u8).collect()).collect()
    }

    #[test]
    fn threshold_at_second_largest() {
        let m = build_mask(&scores(&[&[0.9, 0.1], &[0.5, 0.3]]), &PruneConfig::keep(0.5).unwrap()).unwrap();
        assert_eq!(mask_of(&m), vec![vec![1, 0], vec![1, 0]]);
    }

    #[test]
    fn keep_all() {
        let m = build_mask(&scores(&[&[-3.0, 0.1, 7.0], &[0.0]]), &PruneConfig::keep(1.0).unwrap()).unwrap();
        assert_eq!(m.kept(), 4);
    }

    #[test]
    fn floor_repair_trace() {
        let m = build_mask(&scores(&[&[0.9, 0.8], &[0.1, 0.05]]), &PruneConfig::keep(0.5).unwrap()).unwrap();
        assert_eq!(mask_of(&m), vec![vec![1, 0], vec![1, 0]]);
    }

    #[test]
    fn ties_prefer_lower_layer_then_lower_index() {
        // Top three by tie order are all of layer 0; the floor repair then trades (0,2)
        // for (1,0).
        let m = build_mask(&scores(&[&[1.0; 3], &[1.0; 3]]), &PruneConfig::keep(0.5).unwrap()).unwrap();
        assert_eq!(mask_of(&m), vec![vec![1, 1, 0], vec![1, 0, 0]]);
        let m = build_mask(&scores(&[&[1.0, 1.0], &[1.0, 1.0]]), &PruneConfig::keep(0.75).unwrap()).unwrap();
        assert_eq!(mask_of(&m), vec![vec![1, 1], vec![1, 0]]);
    }

    #[test]
    fn keep_below_floor_is_error() {
        let cfg = PruneConfig::keep(0.1).unwrap();
        let r = build_mask(&scores(&[&[1.0; 4], &[1.0; 4], &[1.0; 2]]), &cfg);
        assert!(matches!(r, Err(Error::KeepBelowFloor { n_keep: 1, floor: 3 })));
    }

    #[test]
    fn prune_ratio_converts_to_keep() {
        assert!((PruneConfig::prune(0.7).unwrap().keep_ratio - 0.3).abs() < 1e-12);
        assert!(PruneConfig::keep(0.0).is_err());
        assert!(PruneConfig::keep(1.2).is_err());
    }

    #[test]
    fn sgd_update_arithmetic() {
        let s = scores(&[&[1.0]]);
        let next = apply_gamma_update(&s, &[vec![2.0]], &mut ScoreOptimizer::sgd(), 0.1).unwrap();
        assert!((next.gamma[0][0] - 0.8).abs() < 1e-15);
        let same = apply_gamma_update(&s, &[vec![0.0]], &mut ScoreOptimizer::sgd(), 0.1).unwrap();
        assert_eq!(same, s);
    }

    #[test]
    fn rmsprop_update_matches_formula() {
        let s = scores(&[&[0.5, -1.0, 2.0], &[0.0, 3.0]]);
        let g = vec![vec![0.3, -0.7, 1.1], vec![2.0, -0.05]];
        let mut opt = ScoreOptimizer::rmsprop(0.9, 1e-8);
        let a = apply_gamma_update(&s, &g, &mut opt, 0.01).unwrap();
        let b = apply_gamma_update(&a, &g, &mut opt, 0.01).unwrap();
        // Independent closed form for two steps with a constant gradient.
        let flat_s = [0.5, -1.0, 2.0, 0.0, 3.0];
        let flat_g: [f64; 5] = [0.3, -0.7, 1.1, 2.0, -0.05];
        let got: Vec<f64> = b.gamma.iter().flatten().copied().collect();
        for i in 0..5 {
            let v1 = 0.1 * flat_g[i] * flat_g[i];
            let w1 = flat_s[i] - 0.01 * flat_g[i] / (v1.sqrt() + 1e-8);
            let v2 = 0.9 * v1 + 0.1 * flat_g[i] * flat_g[i];
            let w2 = w1 - 0.01 * flat_g[i] / (v2.sqrt() + 1e-8);
            assert!((got[i] - w2).abs() < 1e-14);
        }
    }

    #[test]
    fn gamma_update_shape_mismatch() {
        let s = scores(&[&[1.0, 2.0]]);
        assert!(apply_gamma_update(&s, &[vec![0.0]], &mut ScoreOptimizer::sgd(), 0.1).is_err());
    }

    #[test]
    fn l1_init_unit_mean() {
        // K=1, C_in=2, C_out=2: filter 0 has |w| sum 1+3, filter 1 has 2+2.
        let w = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1.0, -2.0, 3.0, 2.0]).unwrap();
        let s = ImportanceScores::from_l1(&[&w]);
        assert_eq!(s.gamma[0], vec![1.0, 1.0]);
        let w = Tensor::<f64>::from_f64([1, 1, 1, 2], &[1.0, 3.0]).unwrap();
        let s = ImportanceScores::from_l1(&[&w]);
        assert_eq!(s.gamma[0], vec![0.5, 1.5]);
    }

    #[test]
    fn masked_conv_mask_length_checked() {
        let x = Tensor::<f32>::ones([1, 1, 3, 3]);
        let w = Tensor::<f32>::ones([1, 1, 1, 2]);
        assert!(masked_conv2d(&x, &w, &[true], 1, Padding::Same).is_err());
    }

    #[test]
    fn surrogate_degenerate_scalar() {
        let x = Tensor::<f64>::from_f64([1, 1, 1, 1], &[3.0]).unwrap();
        let w = Tensor::<f64>::from_f64([1, 1, 1, 1], &[-2.0]).unwrap();
        let dy = Tensor::<f64>::from_f64([1, 1, 1, 1], &[0.5]).unwrap();
        let g = surrogate_gamma_grad(&dy, &x, &w, 1, Padding::Valid).unwrap();
        assert_eq!(g, vec![0.5 * (3.0 * -2.0)]);
        let zero = Tensor::<f64>::zeros([1, 1, 1, 1]);
        assert_eq!(surrogate_gamma_grad(&zero, &x, &w, 1, Padding::Valid).unwrap(), vec![0.0]);
    }
}
