//! Trainable networks built from an [`ArchSpec`].
//!
//! Parameters are split into two groups. *Shared* parameters (every conv except the
//! first, and dense layers before the `classifier` marker) have one copy for the whole
//! hierarchy. *Slot* parameters (the first conv, every batch norm, and the dense head) are
//! owned by each model separately.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Layer, PoolKind};
use crate::autodiff::{BatchNormCfg, BatchStats, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::mask::FilterMask;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    Shared(usize),
    Slot(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics; the caller folds them into the running averages.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone)]
enum Step {
    Conv {
        w: ParamRef,
        stride: usize,
        padding: Padding,
        mask_layer: Option<usize>,
        conv: usize,
    },
    Bn {
        gamma: usize,
        beta: usize,
        stat: usize,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
        padding: Padding,
    },
    Gap,
    Flatten,
    Dense {
        w: ParamRef,
    },
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    BnScale,
    BnShift,
}

/// Exponential moving averages of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Everything a single model owns on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotState<T> {
    pub params: Vec<Parameter<T>>,
    pub running: Vec<RunningStats<T>>,
}

impl<T: Scalar> SlotState<T> {
    /// `running = momentum * running + (1 - momentum) * batch` for every BN layer.
    pub fn update_running(&mut self, stats: &[BatchStats<T>], momentum: f64) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::shape(
                "batch_norm",
                format!("{} batch statistics for {} layers", stats.len(), self.running.len()),
            ));
        }
        let m = T::of(momentum);
        let one_m = T::one() - m;
        for (r, s) in self.running.iter_mut().zip(stats) {
            for (a, &b) in r.mean.iter_mut().zip(&s.mean) {
                *a = m * *a + one_m * b;
            }
            for (a, &b) in r.var.iter_mut().zip(&s.var) {
                *a = m * *a + one_m * b;
            }
        }
        Ok(())
    }
}

/// A full standalone model: shared weights plus one slot's state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub shared: Vec<Parameter<T>>,
    pub slot: SlotState<T>,
}

/// Per maskable conv: the tensors needed to form the score gradient after backward.
#[derive(Debug, Clone, Copy)]
pub struct ConvContext {
    pub input: Var,
    pub weight: Var,
    /// Unmasked convolution output `X * W`.
    pub pre_mask: Var,
    /// Masked output `Y`.
    pub output: Var,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub logits: Var,
    pub hints: Vec<Var>,
    pub contexts: Vec<ConvContext>,
    /// One entry per BN layer in train mode, empty in eval mode.
    pub batch_stats: Vec<BatchStats<T>>,
}

/// Tape handles of a model's parameters.
#[derive(Debug, Clone)]
pub struct Bound {
    pub shared: Vec<Var>,
    pub slot: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ArchSpec,
    steps: Vec<Step>,
    pub shared_specs: Vec<ParamSpec>,
    pub slot_specs: Vec<ParamSpec>,
    bn_channels: Vec<usize>,
    /// Filters per maskable conv.
    pub mask_sizes: Vec<usize>,
    /// Shared parameter index of each maskable conv's weight.
    pub mask_params: Vec<usize>,
    conv_count: usize,
    /// Conv ordinals whose (masked) outputs are exposed as hint maps.
    pub hint_convs: Vec<usize>,
    pub bn: BatchNormCfg,
    pub bn_momentum: f64,
    pub classes: usize,
}

impl Network {
    pub fn new(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let mut net = Network {
            arch: arch.clone(),
            steps: Vec::new(),
            shared_specs: Vec::new(),
            slot_specs: Vec::new(),
            bn_channels: Vec::new(),
            mask_sizes: Vec::new(),
            mask_params: Vec::new(),
            conv_count: 0,
            hint_convs: Vec::new(),
            bn: BatchNormCfg::default(),
            bn_momentum: 0.9,
            classes: 0,
        };
        let has_marker = arch.layers.iter().any(|l| matches!(l, Layer::Classifier));
        let mut in_head = !has_marker;
        let mut channels = arch.input.c;
        let (mut n_dense, mut n_bn) = (0, 0);
        for layer in &arch.layers {
            match *layer {
                Layer::Conv {
                    k,
                    c_in,
                    c_out,
                    stride,
                    padding,
                    maskable,
                } => {
                    let conv = net.conv_count;
                    net.conv_count += 1;
                    let spec = ParamSpec {
                        name: format!("conv{conv}.w"),
                        shape: vec![k, k, c_in, c_out],
                        fan_in: k * k * c_in,
                        kind: ParamKind::Weight,
                    };
                    let w = if conv == 0 {
                        if maskable {
                            return Err(Error::Unsupported("the first conv must not be maskable".into()));
                        }
                        net.slot_specs.push(spec);
                        ParamRef::Slot(net.slot_specs.len() - 1)
                    } else {
                        net.shared_specs.push(spec);
                        ParamRef::Shared(net.shared_specs.len() - 1)
                    };
                    let mask_layer = match (maskable, w) {
                        (true, ParamRef::Shared(i)) => {
                            net.mask_sizes.push(c_out);
                            net.mask_params.push(i);
                            Some(net.mask_sizes.len() - 1)
                        }
                        _ => None,
                    };
                    net.steps.push(Step::Conv {
                        w,
                        stride,
                        padding,
                        mask_layer,
                        conv,
                    });
                    channels = c_out;
                }
                Layer::BatchNorm => {
                    let stat = n_bn;
                    n_bn += 1;
                    net.bn_channels.push(channels);
                    net.slot_specs.push(ParamSpec {
                        name: format!("bn{stat}.gamma"),
                        shape: vec![channels],
                        fan_in: 0,
                        kind: ParamKind::BnScale,
                    });
                    net.slot_specs.push(ParamSpec {
                        name: format!("bn{stat}.beta"),
                        shape: vec![channels],
                        fan_in: 0,
                        kind: ParamKind::BnShift,
                    });
                    let beta = net.slot_specs.len() - 1;
                    net.steps.push(Step::Bn {
                        gamma: beta - 1,
                        beta,
                        stat,
                    });
                }
                Layer::Relu => net.steps.push(Step::Relu),
                Layer::Pool {
                    kind: PoolKind::Max,
                    k,
                    stride,
                    padding,
                } => net.steps.push(Step::MaxPool { k, stride, padding }),
                Layer::GlobalAvgPool => net.steps.push(Step::Gap),
                Layer::Flatten => net.steps.push(Step::Flatten),
                Layer::Dense { d_in, d_out } => {
                    let spec = ParamSpec {
                        name: format!("dense{n_dense}.w"),
                        shape: vec![d_in, d_out],
                        fan_in: d_in,
                        kind: ParamKind::Weight,
                    };
                    n_dense += 1;
                    let w = if in_head {
                        net.slot_specs.push(spec);
                        ParamRef::Slot(net.slot_specs.len() - 1)
                    } else {
                        net.shared_specs.push(spec);
                        ParamRef::Shared(net.shared_specs.len() - 1)
                    };
                    net.steps.push(Step::Dense { w });
                    net.classes = d_out;
                }
                Layer::Classifier => in_head = true,
                ref other => {
                    return Err(Error::Unsupported(format!(
                        "`{}` layers are supported by the analyzer only",
                        match other {
                            Layer::Pool { .. } => "avg pool",
                            l => l.kind_name(),
                        }
                    )))
                }
            }
        }
        if net.conv_count == 0 {
            return Err(Error::Unsupported("a trainable network needs at least one conv".into()));
        }
        if !matches!(net.steps.last(), Some(Step::Dense { .. })) {
            return Err(Error::Unsupported("a trainable network must end with a dense layer".into()));
        }
        let first_hint = net.conv_count.saturating_sub(3);
        net.hint_convs = (first_hint..net.conv_count).collect();
        Ok(net)
    }

    pub fn conv_count(&self) -> usize {
        self.conv_count
    }

    pub fn set_hint_convs(&mut self, convs: Vec<usize>) -> Result<()> {
        if let Some(&bad) = convs.iter().find(|&&c| c >= self.conv_count) {
            return Err(Error::config(
                "hint_layers",
                format!("conv {bad} does not exist ({} convs)", self.conv_count),
            ));
        }
        self.hint_convs = convs;
        Ok(())
    }

    fn init_param<T: Scalar, R: Rng>(spec: &ParamSpec, rng: &mut R) -> Parameter<T> {
        match spec.kind {
            ParamKind::Weight => {
                let std = (2.0 / spec.fan_in as f64).sqrt();
                Parameter::new(&spec.name, Tensor::randn(spec.shape.clone(), std, rng))
            }
            ParamKind::BnScale => Parameter::new(&spec.name, Tensor::ones(spec.shape.clone())),
            ParamKind::BnShift => Parameter::new(&spec.name, Tensor::zeros(spec.shape.clone())).exempt(),
        }
    }

    /// He-normal weights, unit BN scale, zero BN shift.
    pub fn init<T: Scalar, R: Rng>(&self, rng: &mut R) -> ModelParams<T> {
        let shared = self.shared_specs.iter().map(|s| Self::init_param(s, rng)).collect();
        let params = self.slot_specs.iter().map(|s| Self::init_param(s, rng)).collect();
        ModelParams {
            shared,
            slot: SlotState {
                params,
                running: self.fresh_running(),
            },
        }
    }

    pub fn fresh_running<T: Scalar>(&self) -> Vec<RunningStats<T>> {
        self.bn_channels
            .iter()
            .map(|&c| RunningStats {
                mean: vec![T::zero(); c],
                var: vec![T::one(); c],
            })
            .collect()
    }

    pub fn full_mask(&self) -> FilterMask {
        FilterMask::all_ones(&self.mask_sizes)
    }

    /// Registers parameters on the tape, as gradient-receiving leaves when `trainable`.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &[Parameter<T>], trainable: bool) -> Vec<Var> {
        params
            .iter()
            .map(|p| {
                if trainable && p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        running: &[RunningStats<T>],
        mask: &FilterMask,
        x: Var,
        mode: BnMode,
    ) -> Result<Forward<T>> {
        if mask.layers.len() != self.mask_sizes.len() {
            return Err(Error::shape(
                "forward",
                format!("mask has {} layers, network has {}", mask.layers.len(), self.mask_sizes.len()),
            ));
        }
        let resolve = |r: ParamRef| match r {
            ParamRef::Shared(i) => bound.shared[i],
            ParamRef::Slot(i) => bound.slot[i],
        };
        let mut h = x;
        let mut out = Forward {
            logits: x,
            hints: Vec::new(),
            contexts: Vec::new(),
            batch_stats: Vec::new(),
        };
        for step in &self.steps {
            h = match *step {
                Step::Conv {
                    w,
                    stride,
                    padding,
                    mask_layer,
                    conv,
                } => {
                    let wv = resolve(w);
                    let pre = tape.conv2d(h, wv, stride, padding)?;
                    let y = match mask_layer {
                        Some(l) => {
                            let y = tape.channel_scale(pre, &mask.layer_scale::<T>(l))?;
                            out.contexts.push(ConvContext {
                                input: h,
                                weight: wv,
                                pre_mask: pre,
                                output: y,
                                stride,
                                padding,
                            });
                            y
                        }
                        None => pre,
                    };
                    if self.hint_convs.contains(&conv) {
                        out.hints.push(y);
                    }
                    y
                }
                Step::Bn { gamma, beta, stat } => {
                    let (g, b) = (bound.slot[gamma], bound.slot[beta]);
                    match mode {
                        BnMode::Train => {
                            let (y, s) = tape.batch_norm_train(h, g, b, self.bn)?;
                            out.batch_stats.push(s);
                            y
                        }
                        BnMode::Eval => {
                            let r = &running[stat];
                            tape.batch_norm_eval(h, g, b, &r.mean, &r.var, self.bn)?
                        }
                    }
                }
                Step::Relu => tape.relu(h),
                Step::MaxPool { k, stride, padding } => tape.max_pool(h, k, stride, padding)?,
                Step::Gap => tape.global_avg_pool(h)?,
                Step::Flatten => tape.flatten(h),
                Step::Dense { w } => tape.dense(h, resolve(w))?,
            };
        }
        out.logits = h;
        Ok(out)
    }

    /// Eval-mode logits of a standalone model, without gradients.
    pub fn predict<T: Scalar>(&self, params: &ModelParams<T>, mask: &FilterMask, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = Bound {
            shared: Self::bind(&mut tape, &params.shared, false),
            slot: Self::bind(&mut tape, &params.slot.params, false),
        };
        let f = self.forward(&mut tape, &bound, &params.slot.running, mask, xv, BnMode::Eval)?;
        Ok(tape.value(f.logits).clone())
    }
}

/// Number of rows whose arg-max matches the arg-max of the label row.
pub fn correct_count<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Network {
        Network::new(&ArchSpec::builtin("toy4").unwrap()).unwrap()
    }

    #[test]
    fn parameter_split() {
        let net = toy();
        let shared: Vec<_> = net.shared_specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(shared, ["conv1.w", "conv2.w", "conv3.w"]);
        let slot: Vec<_> = net.slot_specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(slot[0], "conv0.w");
        assert_eq!(*slot.last().unwrap(), "dense0.w");
        assert_eq!(net.mask_sizes, [16, 32, 32]);
        assert_eq!(net.hint_convs, [1, 2, 3]);
        assert_eq!(net.classes, 10);
    }

    #[test]
    fn first_conv_must_be_unmasked() {
        let a = ArchSpec::parse("input c=1 h=4 w=4\nconv k=3 in=1 out=2 maskable=true\ngap\ndense in=2 out=2\n").unwrap();
        assert!(matches!(Network::new(&a), Err(Error::Unsupported(_))));
    }

    #[test]
    fn residual_is_analyzer_only() {
        let a = ArchSpec::builtin("resnet50").unwrap();
        assert!(matches!(Network::new(&a), Err(Error::Unsupported(_))));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = net.init::<f32, _>(&mut rng);
        let x = Tensor::randn([2, 3, 8, 8], 1.0, &mut rng);
        let a = net.predict(&p, &net.full_mask(), &x).unwrap();
        let b = net.predict(&p, &net.full_mask(), &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [2, 10]);
    }

    #[test]
    fn masked_channels_are_zero() {
        let net = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = net.init::<f64, _>(&mut rng);
        let mut mask = net.full_mask();
        mask.layers[1][5] = false;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn([2, 3, 8, 8], 1.0, &mut rng));
        let bound = Bound {
            shared: Network::bind(&mut tape, &p.shared, true),
            slot: Network::bind(&mut tape, &p.slot.params, true),
        };
        let f = net.forward(&mut tape, &bound, &p.slot.running, &mask, x, BnMode::Train).unwrap();
        let y = tape.value(f.contexts[1].output);
        let hw = 16;
        for n in 0..2 {
            let ch = &y.data()[(n * 32 + 5) * hw..(n * 32 + 6) * hw];
            assert!(ch.iter().all(|&v| v == 0.0));
        }
        assert_eq!(f.batch_stats.len(), 4);
    }
}
