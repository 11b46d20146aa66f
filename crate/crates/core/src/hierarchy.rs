//! Weight-shared model hierarchy with cascaded score routing.
//!
//! Slot 0 is the student; the last slot keeps every filter. The scores of slot `i` are
//! trained from slot `i + 1`'s quantities: `dL_{i+1}/dY_{i+1}` and `X_{i+1} * W`.

use crate::autodiff::{Grads, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::mask::{self, build_mask, FilterMask, ImportanceScores, PruneConfig};
use crate::model::{BnMode, Bound, Forward, ModelParams, Network, SlotState};
use crate::tensor::{Scalar, Tensor};

/// `[r0] ++ [1 + (r0 - 1) / d for d in divisors] ++ [1.0]`.
pub fn derive_ta_keep_ratios(r0: f64, divisors: &[f64]) -> Result<Vec<f64>> {
    if !(r0 > 0.0 && r0 <= 1.0) {
        return Err(Error::InvalidKeepRatio(r0));
    }
    let mut out = vec![r0];
    out.extend(divisors.iter().map(|d| 1.0 + (r0 - 1.0) / d));
    out.push(1.0);
    check_ratios(&out)?;
    Ok(out)
}

/// Strictly increasing, within `(0, 1]`, ending at 1.
pub fn check_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.len() < 2
        || ratios.windows(2).any(|w| !(w[0] < w[1]))
        || ratios.last() != Some(&1.0)
        || !(ratios[0] > 0.0)
    {
        return Err(Error::NonIncreasingSchedule(ratios.to_vec()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSlot<T> {
    pub index: usize,
    pub keep_ratio: f64,
    pub mask: FilterMask,
    /// `None` for the top slot, whose mask is fixed to all ones.
    pub scores: Option<ImportanceScores>,
    pub state: SlotState<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelHierarchy<T> {
    pub shared: Vec<Parameter<T>>,
    pub slots: Vec<ModelSlot<T>>,
    /// Copy of the pre-trained model; teacher of the top slot, never updated.
    pub frozen: ModelParams<T>,
    pub min_filters_per_layer: usize,
}

/// Slot and frozen-teacher forward passes recorded on one tape.
#[derive(Debug)]
pub struct HierarchyForward<T> {
    pub shared: Vec<Var>,
    pub slot_vars: Vec<Vec<Var>>,
    pub slots: Vec<Forward<T>>,
    pub frozen: Option<Forward<T>>,
}

/// What one slot's maskable convs saw in a step, extracted after backward.
#[derive(Debug, Clone)]
pub struct SavedContext<T> {
    pub layers: Vec<LayerContext<T>>,
}

#[derive(Debug, Clone)]
pub struct LayerContext<T> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub xw: Tensor<T>,
    pub dl_dy: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Scalar> LayerContext<T> {
    pub fn score_grad(&self) -> Result<Vec<f64>> {
        mask::surrogate_from_preactivation(&self.dl_dy, &self.xw)
    }
}

pub fn save_contexts<T: Scalar>(tape: &Tape<T>, fwd: &Forward<T>, grads: &Grads<T>) -> SavedContext<T> {
    let layers = fwd
        .contexts
        .iter()
        .map(|c| LayerContext {
            x: tape.value(c.input).clone(),
            w: tape.value(c.weight).clone(),
            xw: tape.value(c.pre_mask).clone(),
            dl_dy: grads.get_or_zeros(c.output, tape.value(c.output)),
            stride: c.stride,
            padding: c.padding,
        })
        .collect();
    SavedContext { layers }
}

/// Score gradients for slots `0..N-1`: slot `i` receives the reduction evaluated on slot
/// `i + 1`'s context. With `own_gradient`, slot `i`'s own reduction is added.
pub fn route_gamma_gradients<T: Scalar>(
    contexts: &[Option<SavedContext<T>>],
    own_gradient: bool,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = contexts.len();
    let fetch = |slot: usize| contexts[slot].as_ref().ok_or(Error::MissingContext { slot });
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n.saturating_sub(1) {
        let teacher = fetch(i + 1)?;
        let mut g = teacher
            .layers
            .iter()
            .map(LayerContext::score_grad)
            .collect::<Result<Vec<_>>>()?;
        if own_gradient {
            let own = fetch(i)?;
            for (gl, c) in g.iter_mut().zip(&own.layers) {
                for (a, b) in gl.iter_mut().zip(c.score_grad()?) {
                    *a += b;
                }
            }
        }
        out.push(g);
    }
    Ok(out)
}

impl<T: Scalar> ModelHierarchy<T> {
    /// Every slot starts from the pre-trained weights; scores start from per-layer
    /// normalized filter L1 norms.
    pub fn from_pretrained(net: &Network, pretrained: &ModelParams<T>, keep_ratios: &[f64], min_filters_per_layer: usize) -> Result<Self> {
        check_ratios(keep_ratios)?;
        let mut shared = pretrained.shared.clone();
        for p in &mut shared {
            p.trainable = true;
        }
        let weights = Self::maskable_weights(net, &shared);
        let init = ImportanceScores::from_l1(&weights);
        let top = keep_ratios.len() - 1;
        let slots = keep_ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let (scores, mask) = if i == top {
                    (None, net.full_mask())
                } else {
                    let cfg = PruneConfig {
                        keep_ratio: r,
                        min_filters_per_layer,
                    };
                    cfg.validate()?;
                    (Some(init.clone()), build_mask(&init, &cfg)?)
                };
                Ok(ModelSlot {
                    index: i,
                    keep_ratio: r,
                    mask,
                    scores,
                    state: pretrained.slot.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut frozen = pretrained.clone();
        for p in frozen.shared.iter_mut().chain(frozen.slot.params.iter_mut()) {
            p.trainable = false;
        }
        Ok(ModelHierarchy {
            shared,
            slots,
            frozen,
            min_filters_per_layer,
        })
    }

    fn maskable_weights<'a>(net: &Network, shared: &'a [Parameter<T>]) -> Vec<&'a Tensor<T>> {
        net.mask_params.iter().map(|&i| &shared[i].value).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn keep_ratios(&self) -> Vec<f64> {
        self.slots.iter().map(|s| s.keep_ratio).collect()
    }

    pub fn slot_params(&self, i: usize) -> ModelParams<T> {
        ModelParams {
            shared: self.shared.clone(),
            slot: self.slots[i].state.clone(),
        }
    }

    /// Runs the selected slots (and optionally the frozen teacher, in eval mode) on one
    /// batch. Shared weights are registered once so their gradients sum over slots.
    pub fn forward_all(
        &self,
        net: &Network,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        slots: &[(usize, BnMode, bool)],
        with_frozen: bool,
    ) -> Result<HierarchyForward<T>> {
        let xv = tape.constant(x.clone());
        let any_trainable = slots.iter().any(|s| s.2);
        let shared = Network::bind(tape, &self.shared, any_trainable);
        let mut out = HierarchyForward {
            shared: shared.clone(),
            slot_vars: Vec::new(),
            slots: Vec::new(),
            frozen: None,
        };
        for &(i, mode, trainable) in slots {
            let slot = self.slots.get(i).ok_or(Error::MissingContext { slot: i })?;
            let bound = Bound {
                shared: if trainable || !any_trainable {
                    shared.clone()
                } else {
                    Network::bind(tape, &self.shared, false)
                },
                slot: Network::bind(tape, &slot.state.params, trainable),
            };
            let f = net.forward(tape, &bound, &slot.state.running, &slot.mask, xv, mode)?;
            out.slot_vars.push(bound.slot);
            out.slots.push(f);
        }
        if with_frozen {
            let bound = Bound {
                shared: Network::bind(tape, &self.frozen.shared, false),
                slot: Network::bind(tape, &self.frozen.slot.params, false),
            };
            out.frozen = Some(net.forward(tape, &bound, &self.frozen.slot.running, &net.full_mask(), xv, BnMode::Eval)?);
        }
        Ok(out)
    }

    /// Rebuilds every scored slot's mask at its own keep ratio.
    pub fn refresh_masks(&mut self) -> Result<()> {
        for slot in &mut self.slots {
            if let Some(scores) = &slot.scores {
                let cfg = PruneConfig {
                    keep_ratio: slot.keep_ratio,
                    min_filters_per_layer: self.min_filters_per_layer,
                };
                slot.mask = build_mask(scores, &cfg)?;
            }
        }
        Ok(())
    }
}
