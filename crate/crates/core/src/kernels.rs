//! Forward and backward kernels on flat buffers.
//!
//! Every reduction runs in a fixed index order so results are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(H / stride)`; zero padding split evenly, odd pixel on bottom/right.
    Same,
    /// Output extent `floor((H - K) / stride) + 1`.
    Valid,
}

impl Padding {
    /// Output extent and leading pad for one spatial axis.
    pub fn resolve(self, input: usize, window: usize, stride: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + window).saturating_sub(input);
                Some((out, total / 2))
            }
            Padding::Valid => {
                if window > input {
                    None
                } else {
                    Some(((input - window) / stride + 1, 0))
                }
            }
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(format!("unknown padding `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if stride < 1 {
            return Err(Error::InvalidStride(stride));
        }
        let [n, c_in, h, wd] = match *x {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("conv2d", format!("input must be rank 4, got {x:?}"))),
        };
        let [kh, kw, wc, c_out] = match *w {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {w:?}"))),
        };
        if kh != kw {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if wc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but kernel expects {wc}"),
            ));
        }
        let too_big = || Error::shape("conv2d", format!("kernel {kh} larger than input {h}x{wd}"));
        let (h_out, pad_top) = padding.resolve(h, kh, stride).ok_or_else(too_big)?;
        let (w_out, pad_left) = padding.resolve(wd, kh, stride).ok_or_else(too_big)?;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            k: kh,
            c_out,
            stride,
            pad_top,
            pad_left,
            h_out,
            w_out,
        })
    }

    fn kdim(&self) -> usize {
        self.k * self.k * self.c_in
    }

    fn hw_out(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.h_out, self.w_out]
    }
}

/// Patch matrix `[K*K*C_in, H_out*W_out]` for one sample; row index `(kh*K + kw)*C_in + ci`
/// matches the kernel's flattened `K_h,K_w,C_in` leading axes.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw = g.hw_out();
    for kh in 0..g.k {
        for kw in 0..g.k {
            for ci in 0..g.c_in {
                let row = ((kh * g.k + kw) * g.c_in + ci) * hw;
                let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + kh) as isize - g.pad_top as isize;
                    let dst = &mut cols[row + oh * g.w_out..row + (oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.pad_left as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let hw = g.hw_out();
    for kh in 0..g.k {
        for kw in 0..g.k {
            for ci in 0..g.c_in {
                let row = ((kh * g.k + kw) * g.c_in + ci) * hw;
                let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + kh) as isize - g.pad_top as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oh * g.w_out..row + (oh + 1) * g.w_out];
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.pad_left as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (pa, pb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for j in 0..8 {
            acc[j] += pa[j] * pb[j];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn transpose<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: Padding) -> Result<(Tensor<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
    let (kdim, hw) = (g.kdim(), g.hw_out());
    let wt = transpose(w.data(), kdim, g.c_out);
    let mut cols = vec![T::zero(); kdim * hw];
    let mut y = vec![T::zero(); g.n * g.c_out * hw];
    let xs = g.c_in * g.h * g.w;
    for n in 0..g.n {
        im2col(&g, &x.data()[n * xs..(n + 1) * xs], &mut cols);
        let yn = &mut y[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        for co in 0..g.c_out {
            let yrow = &mut yn[co * hw..(co + 1) * hw];
            let wrow = &wt[co * kdim..(co + 1) * kdim];
            for (k, &a) in wrow.iter().enumerate() {
                axpy(a, &cols[k * hw..(k + 1) * hw], yrow);
            }
        }
    }
    Ok((Tensor::from_parts(g.out_shape(), y), g))
}

/// Gradients of a convolution with respect to its input and kernel.
/// `need_dx == false` skips the input gradient.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let (kdim, hw) = (g.kdim(), g.hw_out());
    let xs = g.c_in * g.h * g.w;
    let mut cols = vec![T::zero(); kdim * hw];
    let mut dcols = vec![T::zero(); kdim * hw];
    // dW accumulated as [C_out, kdim], transposed at the end.
    let mut dwt = vec![T::zero(); kdim * g.c_out];
    let mut dx = if need_dx { vec![T::zero(); g.n * xs] } else { Vec::new() };
    for n in 0..g.n {
        im2col(g, &x.data()[n * xs..(n + 1) * xs], &mut cols);
        let dyn_ = &dy.data()[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        for co in 0..g.c_out {
            let dyrow = &dyn_[co * hw..(co + 1) * hw];
            let drow = &mut dwt[co * kdim..(co + 1) * kdim];
            for (k, d) in drow.iter_mut().enumerate() {
                *d += dot(&cols[k * hw..(k + 1) * hw], dyrow);
            }
        }
        if need_dx {
            dcols.fill(T::zero());
            for co in 0..g.c_out {
                let dyrow = &dyn_[co * hw..(co + 1) * hw];
                for k in 0..kdim {
                    let a = w.data()[k * g.c_out + co];
                    axpy(a, dyrow, &mut dcols[k * hw..(k + 1) * hw]);
                }
            }
            col2im(g, &dcols, &mut dx[n * xs..(n + 1) * xs]);
        }
    }
    let dw = Tensor::from_parts(w.shape().to_vec(), transpose(&dwt, g.c_out, kdim));
    let dx = need_dx.then(|| Tensor::from_parts(x.shape().to_vec(), dx));
    (dx, dw)
}

pub fn matmul_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, d] = x.dims2("dense")?;
    let [wd, m] = w.dims2("dense")?;
    if d != wd {
        return Err(Error::shape("dense", format!("input width {d} but weight rows {wd}")));
    }
    let mut y = vec![T::zero(); n * m];
    for i in 0..n {
        let yrow = &mut y[i * m..(i + 1) * m];
        for k in 0..d {
            axpy(x.data()[i * d + k], &w.data()[k * m..(k + 1) * m], yrow);
        }
    }
    Ok(Tensor::from_parts(vec![n, m], y))
}

pub fn matmul_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> (Option<Tensor<T>>, Tensor<T>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    let mut dw = vec![T::zero(); d * m];
    for i in 0..n {
        let dyrow = &dy.data()[i * m..(i + 1) * m];
        for k in 0..d {
            axpy(x.data()[i * d + k], dyrow, &mut dw[k * m..(k + 1) * m]);
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * d];
        for i in 0..n {
            let dyrow = &dy.data()[i * m..(i + 1) * m];
            for k in 0..d {
                dx[i * d + k] = dot(dyrow, &w.data()[k * m..(k + 1) * m]);
            }
        }
        Tensor::from_parts(vec![n, d], dx)
    });
    (dx, Tensor::from_parts(vec![d, m], dw))
}

/// Per-channel batch statistics (biased variance) over `N,H,W`.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.dims4("batch_norm").expect("rank checked by caller");
    let hw = h * w;
    let count = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            s += x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
        let mu = s / count;
        let mut v = T::zero();
        for i in 0..n {
            for &e in &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                v += (e - mu) * (e - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / count;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel; returns `(y, xhat)`.
pub fn bn_apply<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                let xh = (x.data()[j] - mean[ch]) * inv_std[ch];
                xhat[j] = xh;
                y[j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (Tensor::from_parts(s.to_vec(), y), Tensor::from_parts(s.to_vec(), xhat))
}

/// Backward of training-mode batch norm. Returns `(dx, dgamma, dbeta)`.
pub fn bn_train_backward<T: Scalar>(xhat: &Tensor<T>, inv_std: &[T], gamma: &[T], dy: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = xhat.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let m = T::of((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                dgamma[ch] += dy.data()[j] * xhat.data()[j];
                dbeta[ch] += dy.data()[j];
            }
        }
    }
    let mut dx = vec![T::zero(); xhat.len()];
    for ch in 0..c {
        let k = gamma[ch] * inv_std[ch] / m;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                dx[j] = k * (m * dy.data()[j] - dbeta[ch] - xhat.data()[j] * dgamma[ch]);
            }
        }
    }
    (Tensor::from_parts(s.to_vec(), dx), dgamma, dbeta)
}

#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl PoolGeom {
    pub fn new(h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride < 1 {
            return Err(Error::InvalidStride(stride));
        }
        let err = || Error::WindowTooLarge {
            window: k,
            height: h,
            width: w,
        };
        let (h_out, pad_top) = padding.resolve(h, k, stride).ok_or_else(err)?;
        let (w_out, pad_left) = padding.resolve(w, k, stride).ok_or_else(err)?;
        Ok(PoolGeom {
            k,
            stride,
            pad_top,
            pad_left,
            h_out,
            w_out,
        })
    }
}

/// Max pooling; returns the output and, per output element, the flat input index of the
/// first maximal element in scan order.
pub fn max_pool_forward<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, padding: Padding) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims4("max_pool")?;
    let g = PoolGeom::new(h, w, k, stride, padding)?;
    let mut y = Vec::with_capacity(n * c * g.h_out * g.w_out);
    let mut arg = Vec::with_capacity(y.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..g.h_out {
            for ow in 0..g.w_out {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for kh in 0..k {
                    let ih = (oh * stride + kh) as isize - g.pad_top as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (ow * stride + kw) as isize - g.pad_left as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * w + iw as usize;
                        let v = x.data()[idx];
                        if best_idx == usize::MAX || v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                y.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, g.h_out, g.w_out], y), arg))
}

pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("global_avg_pool")?;
    let hw = h * w;
    let denom = T::of(hw as f64);
    let y = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() / denom).collect();
    Ok(Tensor::from_parts(vec![n, c], y))
}

/// Row-wise `log_softmax`, max-subtracted.
pub fn log_softmax_rows<T: Scalar>(z: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - m - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        assert_eq!(Padding::Same.resolve(5, 3, 1), Some((5, 1)));
        assert_eq!(Padding::Same.resolve(224, 7, 2), Some((112, 2)));
        // 4 wide, k=2, s=1: one pixel of padding, on the right.
        assert_eq!(Padding::Same.resolve(4, 2, 1), Some((4, 0)));
        assert_eq!(Padding::Valid.resolve(5, 3, 2), Some((2, 0)));
        assert_eq!(Padding::Valid.resolve(2, 3, 1), None);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn max_pool_window_too_large() {
        let x = Tensor::<f32>::ones([1, 1, 2, 2]);
        assert!(matches!(
            max_pool_forward(&x, 3, 1, Padding::Valid),
            Err(Error::WindowTooLarge { .. })
        ));
    }
}
