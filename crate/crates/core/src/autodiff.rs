//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in creation order, so the tape is already topologically sorted and
//! `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    /// Excluded from weight decay (BN offsets, importance scores).
    pub decay_exempt: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            value,
            trainable: true,
            decay_exempt: false,
        }
    }

    pub fn exempt(mut self) -> Self {
        self.decay_exempt = true;
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormCfg {
    pub eps: f64,
}

impl Default for BatchNormCfg {
    fn default() -> Self {
        BatchNormCfg { eps: 1e-5 }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ChannelScale {
        x: Var,
        scale: Vec<T>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    MatMul {
        x: Var,
        w: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<T>,
    },
    Kd {
        student: Var,
        student_probs: Vec<T>,
        teacher_probs: Vec<T>,
        tau: T,
    },
    MseConst {
        x: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (y, geom) = kernels::conv2d_forward(self.value(x), self.value(w), stride, padding)?;
        Ok(self.push(Op::Conv2d { x, w, geom }, y, &[x, w]))
    }

    /// Multiplies output channel `c` of an `N,C,H,W` tensor by the constant `scale[c]`.
    pub fn channel_scale(&mut self, x: Var, scale: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4("channel_scale")?;
        if scale.len() != c {
            return Err(Error::shape(
                "channel_scale",
                format!("{} scale entries for {c} channels", scale.len()),
            ));
        }
        let hw = h * w;
        let mut y = xv.data().to_vec();
        for i in 0..n {
            for (ch, &s) in scale.iter().enumerate() {
                for v in &mut y[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    *v = *v * s;
                }
            }
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), y);
        Ok(self.push(Op::ChannelScale { x, scale: scale.to_vec() }, y, &[x]))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let [_, c, _, _] = self.value(x).dims4("batch_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", format!("affine vectors must have length {c}")));
        }
        Ok(c)
    }

    /// Batch norm normalizing by the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, cfg: BatchNormCfg) -> Result<(Var, BatchStats<T>)> {
        self.check_bn(x, gamma, beta)?;
        let (mean, var) = kernels::channel_stats(self.value(x));
        let eps = T::of(cfg.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::bn_apply(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let v = self.push(
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            y,
            &[x, gamma, beta],
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        cfg: BatchNormCfg,
    ) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats must have length {c}")));
        }
        let eps = T::of(cfg.eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::bn_apply(
            self.value(x),
            running_mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        Ok(self.push(
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            y,
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu { x }, y, &[x])
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, padding: Padding) -> Result<Var> {
        let (y, argmax) = kernels::max_pool_forward(self.value(x), k, stride, padding)?;
        Ok(self.push(Op::MaxPool { x, argmax }, y, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = kernels::global_avg_pool_forward(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool { x }, y, &[x]))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let rest = xv.len() / n;
        let y = Tensor::from_parts(vec![n, rest], xv.data().to_vec());
        self.push(Op::Reshape { x }, y, &[x])
    }

    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = kernels::matmul_forward(self.value(x), self.value(w))?;
        Ok(self.push(Op::MatMul { x, w }, y, &[x, w]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(Op::Add { a, b }, y, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(Op::Mul { a, b }, y, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(Op::Scale { x, c }, y, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum { x }, y, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = Tensor::scalar(xv.sum() / T::of(xv.len() as f64));
        self.push(Op::Mean { x }, y, &[x])
    }

    /// Batch-mean cross-entropy between `softmax(logits)` and constant label rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor<T>) -> Result<Var> {
        let [n, k] = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.shape() != [n, k] {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("labels {:?} vs logits [{n}, {k}]", labels.shape()),
            ));
        }
        for (row, l) in labels.data().chunks(k).enumerate() {
            let s: f64 = l.iter().map(|v| v.f64()).sum();
            if (s - 1.0).abs() > 1e-4 {
                return Err(Error::LabelNotNormalized { row, sum: s });
            }
        }
        let logp = kernels::log_softmax_rows(self.value(logits).data(), k);
        let mut loss = T::zero();
        for (lp, &y) in logp.iter().zip(labels.data()) {
            if y != T::zero() {
                loss -= y * *lp;
            }
        }
        let loss = loss / T::of(n as f64);
        let probs = logp.iter().map(|v| v.exp()).collect();
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.data().to_vec(),
            },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// `tau^2` times the batch-mean of `KL(softmax(teacher/tau) || softmax(student/tau))`.
    /// The teacher logits are a constant.
    pub fn kd_loss(&mut self, student: Var, teacher: &Tensor<T>, tau: T) -> Result<Var> {
        let [n, k] = self.value(student).dims2("kd_loss")?;
        if teacher.shape() != [n, k] {
            return Err(Error::shape(
                "kd_loss",
                format!("teacher {:?} vs student [{n}, {k}]", teacher.shape()),
            ));
        }
        let soften = |z: &[T]| -> Vec<T> {
            let scaled: Vec<T> = z.iter().map(|&v| v / tau).collect();
            kernels::log_softmax_rows(&scaled, k)
        };
        let log_ps = soften(self.value(student).data());
        let log_pt = soften(teacher.data());
        let mut kl = T::zero();
        for (&lt, &ls) in log_pt.iter().zip(&log_ps) {
            let pt = lt.exp();
            if pt > T::zero() {
                kl += pt * (lt - ls);
            }
        }
        let loss = tau * tau * kl / T::of(n as f64);
        Ok(self.push(
            Op::Kd {
                student,
                student_probs: log_ps.iter().map(|v| v.exp()).collect(),
                teacher_probs: log_pt.iter().map(|v| v.exp()).collect(),
                tau,
            },
            Tensor::scalar(loss),
            &[student],
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse_const(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs target {:?}", xv.shape(), target.shape()),
            ));
        }
        let mut s = T::zero();
        for (&a, &b) in xv.data().iter().zip(target.data()) {
            s += (a - b) * (a - b);
        }
        let y = Tensor::scalar(s / T::of(xv.len() as f64));
        Ok(self.push(Op::MseConst { x, target: target.clone() }, y, &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients reaching a node through several paths
    /// are summed.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let need_dx = self.requires_grad(*x);
                let (dx, dw) = kernels::conv2d_backward(geom, self.value(*x), self.value(*w), g, need_dx);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
            }
            Op::ChannelScale { x, scale } => {
                let s = g.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = g.data().to_vec();
                for i in 0..n {
                    for (ch, &sc) in scale.iter().enumerate() {
                        for v in &mut dx[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            *v = *v * sc;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), dx));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let (dx, dgamma, dbeta) = kernels::bn_train_backward(xhat, inv_std, gv, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![dgamma.len()], dgamma));
                self.accumulate(grads, *beta, Tensor::from_parts(vec![dbeta.len()], dbeta));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = g.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gv = self.value(*gamma).data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            let d = g.data()[j];
                            dx[j] = d * gv[ch] * inv_std[ch];
                            dgamma[ch] += d * xhat.data()[j];
                            dbeta[ch] += d;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), dx));
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], dgamma));
                self.accumulate(grads, *beta, Tensor::from_parts(vec![c], dbeta));
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                for (&idx, &d) in argmax.iter().zip(g.data()) {
                    dx[idx] += d;
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(xv.len());
                for &d in g.data() {
                    dx.extend(std::iter::repeat_n(d * inv, hw));
                }
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), dx));
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::MatMul { x, w } => {
                let need_dx = self.requires_grad(*x);
                let (dx, dw) = kernels::matmul_backward(self.value(*x), self.value(*w), g, need_dx);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(&d, &y)| d * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(&d, &x)| d * x).collect();
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.map(|d| d * *c));
            }
            Op::Sum { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::Mean { x } => {
                let xv = self.value(*x);
                let d = g.item() / T::of(xv.len() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), d));
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let shape = self.value(*logits).shape().to_vec();
                let scale = g.item() / T::of(shape[0] as f64);
                let data = probs.iter().zip(labels).map(|(&p, &y)| (p - y) * scale).collect();
                self.accumulate(grads, *logits, Tensor::from_parts(shape, data));
            }
            Op::Kd {
                student,
                student_probs,
                teacher_probs,
                tau,
            } => {
                let shape = self.value(*student).shape().to_vec();
                let scale = g.item() * *tau / T::of(shape[0] as f64);
                let data = student_probs
                    .iter()
                    .zip(teacher_probs)
                    .map(|(&ps, &pt)| (ps - pt) * scale)
                    .collect();
                self.accumulate(grads, *student, Tensor::from_parts(shape, data));
            }
            Op::MseConst { x, target } => {
                let xv = self.value(*x);
                let scale = g.item() * T::of(2.0) / T::of(xv.len() as f64);
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| (a - b) * scale)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
        }
    }
}
