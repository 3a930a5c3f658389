//! Convolution layers with hand-written backward passes, and the parameter
//! container trait shared by detectors and amplifier heads.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `c = a·b + beta·c` for logical `m×k` `a` and `k×n` `b`, both stored
/// row-major, optionally transposed in storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel 2D convolution with bias and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `out×in×k×k`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

/// What [`Conv::backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    /// He-normal weights, zero bias.
    pub fn he_init(rng: &mut Rng, out_ch: usize, in_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut conv = Self::zeros(out_ch, in_ch, kernel, stride, pad);
        conv.weight = Tensor::from_fn(conv.weight.shape(), |_| std * rng.normal());
        conv
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn out_extent(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        (padded >= self.kernel()).then(|| (padded - self.kernel()) / self.stride + 1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let (c, h, w) = x.dims3("conv forward")?;
        if c != self.in_channels() {
            return Err(Error::shape(
                "conv forward",
                format!("layer expects {} channels, got {c}", self.in_channels()),
            ));
        }
        let (oh, ow) = match (self.out_extent(h), self.out_extent(w)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv forward",
                    format!("input {h}×{w} smaller than kernel {}", self.kernel()),
                ))
            }
        };
        let cols = self.im2col(x.data(), (c, h, w), (oh, ow));
        let o = self.out_channels();
        let kk = c * self.kernel() * self.kernel();
        let n = oh * ow;
        let mut out = vec![0.0; o * n];
        for (oc, row) in out.chunks_exact_mut(n).enumerate() {
            row.fill(self.bias.data()[oc]);
        }
        gemm(o, kk, n, self.weight.data(), false, &cols, false, &mut out, 1.0);
        let cache = ConvCache {
            cols,
            in_dims: (c, h, w),
            out_hw: (oh, ow),
        };
        Ok((Tensor::from_raw(vec![o, oh, ow], out), cache))
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the input gradient (when `need_input`).
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &Tensor,
        grads: Option<&mut Conv>,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        let (oh, ow) = cache.out_hw;
        let o = self.out_channels();
        if grad_out.shape() != [o, oh, ow] {
            return Err(Error::shape(
                "conv backward",
                format!("gradient {:?} vs output {:?}", grad_out.shape(), [o, oh, ow]),
            ));
        }
        let (c, h, w) = cache.in_dims;
        let kk = c * self.kernel() * self.kernel();
        let n = oh * ow;
        let g = grad_out.data();
        if let Some(grads) = grads {
            gemm(o, n, kk, g, false, &cache.cols, true, grads.weight.data_mut(), 1.0);
            for (oc, row) in g.chunks_exact(n).enumerate() {
                grads.bias.data_mut()[oc] += row.iter().sum::<f64>();
            }
        }
        if !need_input {
            return Ok(None);
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, o, n, self.weight.data(), true, g, false, &mut dcols, 0.0);
        let dx = self.col2im(&dcols, (c, h, w), (oh, ow));
        Ok(Some(Tensor::from_raw(vec![c, h, w], dx)))
    }

    fn im2col(&self, x: &[f64], (c, h, w): (usize, usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
        let k = self.kernel();
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return x.to_vec();
        }
        let n = oh * ow;
        let mut cols = vec![0.0; c * k * k * n];
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ic * k + ky) * k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = (ic * h + iy as usize) * w;
                        let dst = row + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[dst + ox] = x[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], (c, h, w): (usize, usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
        let k = self.kernel();
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return cols.to_vec();
        }
        let n = oh * ow;
        let mut dx = vec![0.0; c * h * w];
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ic * k + ky) * k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = (ic * h + iy as usize) * w;
                        let src = row + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[dst + ix as usize] += cols[src + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Negative-side slope of the activation. Keeps narrow students from
/// losing whole channels to dead units.
pub const LEAK: f64 = 0.05;

pub fn leaky_relu_inplace(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= LEAK
        }
    });
}

/// Scales `grad` by [`LEAK`] where the activation was negative; exact zeros
/// take the zero subgradient.
pub fn leaky_relu_backward_inplace(grad: &mut Tensor, activated: &Tensor) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if a < 0.0 {
            *g *= LEAK;
        } else if a == 0.0 {
            *g = 0.0;
        }
    }
}

/// A named, ordered collection of parameter tensors.
pub trait ParamSet: Clone + Send + Sync {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += factor * other`, tensor by tensor.
    fn axpy(&mut self, factor: f64, other: &Self) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.axpy(factor, s).expect("matching parameter layout");
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn sum_sq(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_sq()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    fn bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bit_eq(y))
    }

    /// SHA-256 over names, shapes and little-endian payloads.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            hasher.update(t.to_le_bytes());
        }
        hex(&hasher.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn push_conv<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, conv: &'a Conv) {
    out.push((format!("{prefix}.weight"), &conv.weight));
    out.push((format!("{prefix}.bias"), &conv.bias));
}

pub(crate) fn push_conv_mut<'a>(out: &mut Vec<&'a mut Tensor>, conv: &'a mut Conv) {
    out.push(&mut conv.weight);
    out.push(&mut conv.bias);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy on a logit; the gradient is `sigmoid(x) - target`.
pub fn bce_with_logits(x: f64, target: f64) -> f64 {
    x.max(0.0) - x * target + (-x.abs()).exp().ln_1p()
}

/// Smooth-L1 (Huber with threshold `beta`) and its derivative.
pub fn smooth_l1(diff: f64, beta: f64) -> (f64, f64) {
    let a = diff.abs();
    if a < beta {
        (0.5 * diff * diff / beta, diff / beta)
    } else {
        (a - 0.5 * beta, diff.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, Padding};

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let mut rng = Rng::new(1);
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, 0.0);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a stored transposed (k×m), b stored transposed (n×k)
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, 0.0);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_forward_matches_direct_correlation() {
        let mut rng = Rng::new(2);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 2, 0)] {
            let conv = Conv::he_init(&mut rng, 4, 3, k, stride, pad);
            let x = Tensor::from_fn(&[3, 9, 8], |_| rng.normal());
            let (y, _) = conv.forward(&x).unwrap();
            let mut want = conv2d(&x, &conv.weight, stride, Padding::Zero(pad)).unwrap();
            let hw = want.shape()[1] * want.shape()[2];
            for (i, v) in want.data_mut().iter_mut().enumerate() {
                *v += conv.bias.data()[i / hw];
            }
            assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = Rng::new(3);
        let mut conv = Conv::he_init(&mut rng, 2, 3, 3, 2, 1);
        conv.bias = Tensor::from_fn(&[2], |_| rng.normal());
        let x = Tensor::from_fn(&[3, 6, 6], |_| rng.normal());
        let (y, cache) = conv.forward(&x).unwrap();
        let g = Tensor::from_fn(y.shape(), |_| rng.normal());
        let mut grads = Conv::zeros(2, 3, 3, 2, 1);
        let dx = conv.backward(&cache, &g, Some(&mut grads), true).unwrap().unwrap();
        // The layer is affine in x: <g, y(x) - y(0)> = <dx, x>.
        let (y0, _) = conv.forward(&Tensor::zeros(&[3, 6, 6])).unwrap();
        let lhs = g.dot(&y.sub(&y0).unwrap()).unwrap();
        assert!((lhs - dx.dot(&x).unwrap()).abs() < 1e-10);
        // ...and linear in the weights.
        let mut no_bias = conv.clone();
        no_bias.bias.fill(0.0);
        let (yw, _) = no_bias.forward(&x).unwrap();
        assert!((g.dot(&yw).unwrap() - grads.weight.dot(&conv.weight).unwrap()).abs() < 1e-10);
        assert!((grads.bias.sum() - g.sum()).abs() < 1e-12);
    }
}
