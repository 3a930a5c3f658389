//! First-order separable 2D orthonormal wavelet transform over `C×H×W`
//! feature maps, with periodic boundary extension.
//!
//! Analysis along one axis of length `n` (even) produces `n/2` low and `n/2`
//! high coefficients:
//!
//! ```text
//! low[k]  = Σ_j h0[j] · x[(2k + j) mod n]
//! high[k] = Σ_j h1[j] · x[(2k + j) mod n]
//! ```
//!
//! with `h1[j] = (-1)^j · h0[L-1-j]`. Rows (the width axis) are filtered
//! first, then columns. The three detail orientations are stored in the
//! fixed order `[row-high/col-low, row-low/col-high, row-high/col-high]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sum_pool2x, upsample_nearest2x, Tensor};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

// Orthonormal low-pass taps (8 taps each), obtained by spectral
// factorisation of the Daubechies polynomial; db4 takes the minimum-phase
// root set, sym4 the least-asymmetric one.
const DB4_LOW: [f64; 8] = [
    -0.010_597_401_785_069_032,
    0.032_883_011_666_885_2,
    0.030_841_381_835_560_764,
    -0.187_034_811_719_093_09,
    -0.027_983_769_416_859_854,
    0.630_880_767_929_858_9,
    0.714_846_570_552_915_7,
    0.230_377_813_308_896_5,
];

const SYM4_LOW: [f64; 8] = [
    -0.075_765_714_789_502_21,
    -0.029_635_527_646_002_493,
    0.497_618_667_632_775,
    0.803_738_751_805_132_1,
    0.297_857_795_605_306_06,
    -0.099_219_543_576_633_53,
    -0.012_603_967_262_031_304,
    0.032_223_100_604_051_466,
];

const ORTHONORMAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Haar,
    #[serde(alias = "daubechies4")]
    Db4,
    #[serde(alias = "symlet4")]
    Sym4,
}

impl BasisKind {
    pub const ALL: [BasisKind; 3] = [BasisKind::Haar, BasisKind::Db4, BasisKind::Sym4];

    pub fn name(self) -> &'static str {
        match self {
            BasisKind::Haar => "haar",
            BasisKind::Db4 => "db4",
            BasisKind::Sym4 => "sym4",
        }
    }
}

impl fmt::Display for BasisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BasisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" => Ok(BasisKind::Haar),
            "db4" | "daubechies4" => Ok(BasisKind::Db4),
            "sym4" | "symlet4" => Ok(BasisKind::Sym4),
            other => Err(Error::Config(format!("unknown wavelet basis {other:?}"))),
        }
    }
}

/// Orthonormal two-channel filter pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBasis {
    kind: BasisKind,
    h0: Vec<f64>,
    h1: Vec<f64>,
}

impl WaveletBasis {
    pub fn new(kind: BasisKind) -> Self {
        let h0: Vec<f64> = match kind {
            BasisKind::Haar => vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2],
            BasisKind::Db4 => DB4_LOW.to_vec(),
            BasisKind::Sym4 => SYM4_LOW.to_vec(),
        };
        let basis = Self::from_low_pass(kind, h0);
        basis
            .check_orthonormal(ORTHONORMAL_TOL)
            .expect("committed filter taps are orthonormal");
        basis
    }

    pub fn haar() -> Self {
        Self::new(BasisKind::Haar)
    }

    fn from_low_pass(kind: BasisKind, h0: Vec<f64>) -> Self {
        let len = h0.len();
        let h1 = (0..len)
            .map(|j| {
                let v = h0[len - 1 - j];
                if j % 2 == 0 {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Self { kind, h0, h1 }
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn low_pass(&self) -> &[f64] {
        &self.h0
    }

    pub fn high_pass(&self) -> &[f64] {
        &self.h1
    }

    pub fn filter_len(&self) -> usize {
        self.h0.len()
    }

    /// Checks unit norms, mutual orthogonality and orthogonality under even shifts.
    pub fn check_orthonormal(&self, tol: f64) -> Result<()> {
        let shifted =
            |a: &[f64], b: &[f64], s: usize| -> f64 { (0..a.len().saturating_sub(s)).map(|j| a[j + s] * b[j]).sum() };
        let len = self.h0.len();
        let mut worst: f64 = 0.0;
        for s in (0..len).step_by(2) {
            let target = if s == 0 { 1.0 } else { 0.0 };
            worst = worst.max((shifted(&self.h0, &self.h0, s) - target).abs());
            worst = worst.max((shifted(&self.h1, &self.h1, s) - target).abs());
            worst = worst.max(shifted(&self.h0, &self.h1, s).abs());
            worst = worst.max(shifted(&self.h1, &self.h0, s).abs());
        }
        if worst > tol {
            return Err(Error::Config(format!(
                "{} filters deviate from orthonormality by {worst:e}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Low band `C×h×w` and detail bands `C×3×h×w` of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralComponents {
    pub low: Tensor,
    pub high: Tensor,
}

impl SpectralComponents {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Self {
            low: Tensor::zeros(&[channels, h, w]),
            high: Tensor::zeros(&[channels, 3, h, w]),
        }
    }

    /// Returns `(C, h, w)` after checking low/high agree.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.low.dims3("spectral components")?;
        if self.high.shape() != [c, 3, h, w] {
            return Err(Error::shape(
                "spectral components",
                format!(
                    "low {:?} is inconsistent with high {:?}",
                    self.low.shape(),
                    self.high.shape()
                ),
            ));
        }
        Ok((c, h, w))
    }

    pub fn sum_sq(&self) -> f64 {
        self.low.sum_sq() + self.high.sum_sq()
    }

    pub fn dot(&self, other: &SpectralComponents) -> Result<f64> {
        Ok(self.low.dot(&other.low)? + self.high.dot(&other.high)?)
    }
}

#[allow(clippy::too_many_arguments)]
/// One-dimensional periodic analysis of `n` samples at stride `step`.
fn analyze_line(
    src: &[f64],
    offset: usize,
    step: usize,
    n: usize,
    filter: &[f64],
    out: &mut [f64],
    out_offset: usize,
    out_step: usize,
) {
    for k in 0..n / 2 {
        let mut acc = 0.0;
        for (j, &f) in filter.iter().enumerate() {
            acc += f * src[offset + ((2 * k + j) % n) * step];
        }
        out[out_offset + k * out_step] = acc;
    }
}

#[allow(clippy::too_many_arguments)]
/// Adjoint of [`analyze_line`]: scatters `n/2` coefficients back onto `n` samples.
fn synthesize_line(
    coeffs: &[f64],
    offset: usize,
    step: usize,
    n: usize,
    filter: &[f64],
    dst: &mut [f64],
    dst_offset: usize,
    dst_step: usize,
) {
    for k in 0..n / 2 {
        let c = coeffs[offset + k * step];
        for (j, &f) in filter.iter().enumerate() {
            dst[dst_offset + ((2 * k + j) % n) * dst_step] += f * c;
        }
    }
}

fn check_extents(op: &'static str, h: usize, w: usize, basis: &WaveletBasis) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::shape(op, format!("spatial extents {h}×{w} must be even")));
    }
    let len = basis.filter_len();
    if h < len || w < len {
        return Err(Error::shape(
            op,
            format!(
                "spatial extents {h}×{w} are shorter than the {len}-tap {} filter",
                basis.kind
            ),
        ));
    }
    Ok(())
}

/// Forward first-order 2D transform.
pub fn dwt2d(map: &Tensor, basis: &WaveletBasis) -> Result<SpectralComponents> {
    let (c, h, w) = map.dims3("dwt2d")?;
    check_extents("dwt2d", h, w, basis)?;
    let (hh, hw) = (h / 2, w / 2);
    let x = map.data();

    // Row pass: [c][y][k] for low and high separately, each c×h×hw.
    let mut row_lo = vec![0.0; c * h * hw];
    let mut row_hi = vec![0.0; c * h * hw];
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * h + y) * w;
            let dst = (ch * h + y) * hw;
            analyze_line(x, src, 1, w, &basis.h0, &mut row_lo, dst, 1);
            analyze_line(x, src, 1, w, &basis.h1, &mut row_hi, dst, 1);
        }
    }

    // Column pass.
    let plane = hh * hw;
    let mut low = vec![0.0; c * plane];
    let mut high = vec![0.0; c * 3 * plane];
    for ch in 0..c {
        for col in 0..hw {
            let src = ch * h * hw + col;
            analyze_line(&row_lo, src, hw, h, &basis.h0, &mut low, ch * plane + col, hw);
            let detail = |o: usize| (ch * 3 + o) * plane + col;
            analyze_line(&row_hi, src, hw, h, &basis.h0, &mut high, detail(0), hw);
            analyze_line(&row_lo, src, hw, h, &basis.h1, &mut high, detail(1), hw);
            analyze_line(&row_hi, src, hw, h, &basis.h1, &mut high, detail(2), hw);
        }
    }
    Ok(SpectralComponents {
        low: Tensor::from_raw(vec![c, hh, hw], low),
        high: Tensor::from_raw(vec![c, 3, hh, hw], high),
    })
}

/// Transpose of the analysis operator. For orthonormal filters this is also
/// its inverse.
fn analysis_adjoint(op: &'static str, comps: &SpectralComponents, basis: &WaveletBasis) -> Result<Tensor> {
    let (c, hh, hw) = comps.dims().map_err(|e| match e {
        Error::Shape { detail, .. } => Error::shape(op, detail),
        other => other,
    })?;
    let (h, w) = (2 * hh, 2 * hw);
    check_extents(op, h, w, basis)?;
    let plane = hh * hw;
    let low = comps.low.data();
    let high = comps.high.data();

    let mut row_lo = vec![0.0; c * h * hw];
    let mut row_hi = vec![0.0; c * h * hw];
    for ch in 0..c {
        for col in 0..hw {
            let dst = ch * h * hw + col;
            let detail = |o: usize| (ch * 3 + o) * plane + col;
            synthesize_line(low, ch * plane + col, hw, h, &basis.h0, &mut row_lo, dst, hw);
            synthesize_line(high, detail(0), hw, h, &basis.h0, &mut row_hi, dst, hw);
            synthesize_line(high, detail(1), hw, h, &basis.h1, &mut row_lo, dst, hw);
            synthesize_line(high, detail(2), hw, h, &basis.h1, &mut row_hi, dst, hw);
        }
    }

    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * h + y) * hw;
            let dst = (ch * h + y) * w;
            synthesize_line(&row_lo, src, 1, w, &basis.h0, &mut out, dst, 1);
            synthesize_line(&row_hi, src, 1, w, &basis.h1, &mut out, dst, 1);
        }
    }
    Ok(Tensor::from_raw(vec![c, h, w], out))
}

/// Inverse transform (perfect reconstruction under periodic extension).
pub fn idwt2d(comps: &SpectralComponents, basis: &WaveletBasis) -> Result<Tensor> {
    analysis_adjoint("idwt2d", comps, basis)
}

/// Pulls a gradient on the spectral components back onto the source map.
pub fn dwt2d_backward(grad: &SpectralComponents, basis: &WaveletBasis) -> Result<Tensor> {
    analysis_adjoint("dwt2d_backward", grad, basis)
}

/// Sums the three detail orientations and upsamples 2× (nearest), giving a
/// `C×2h×2w` map aligned with the source feature map.
pub fn fuse_high(high: &Tensor) -> Result<Tensor> {
    let (c, h, w) = detail_dims("fuse_high", high)?;
    let plane = h * w;
    let src = high.data();
    let mut summed = vec![0.0; c * plane];
    for ch in 0..c {
        let dst = &mut summed[ch * plane..(ch + 1) * plane];
        for o in 0..3 {
            let band = &src[(ch * 3 + o) * plane..(ch * 3 + o + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(band) {
                *d += s;
            }
        }
    }
    Ok(upsample_nearest2x(&Tensor::from_raw(vec![c, h, w], summed)))
}

/// Adjoint of [`fuse_high`].
pub fn fuse_high_backward(grad: &Tensor) -> Result<Tensor> {
    let (c, h2, w2) = grad.dims3("fuse_high_backward")?;
    let pooled = sum_pool2x(grad)?;
    let (h, w) = (h2 / 2, w2 / 2);
    let plane = h * w;
    let p = pooled.data();
    let mut out = vec![0.0; c * 3 * plane];
    for ch in 0..c {
        for o in 0..3 {
            out[(ch * 3 + o) * plane..(ch * 3 + o + 1) * plane].copy_from_slice(&p[ch * plane..(ch + 1) * plane]);
        }
    }
    Ok(Tensor::from_raw(vec![c, 3, h, w], out))
}

fn detail_dims(op: &'static str, high: &Tensor) -> Result<(usize, usize, usize)> {
    match high.shape()[..] {
        [c, 3, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected C×3×h×w detail bands, got {:?}", high.shape()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_map(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn haar_taps_exact() {
        let b = WaveletBasis::haar();
        assert_eq!(b.low_pass(), &[FRAC_1_SQRT_2, FRAC_1_SQRT_2]);
        assert_eq!(b.high_pass(), &[FRAC_1_SQRT_2, -FRAC_1_SQRT_2]);
    }

    #[test]
    fn all_bases_orthonormal() {
        for kind in BasisKind::ALL {
            WaveletBasis::new(kind).check_orthonormal(1e-12).unwrap();
        }
        let sum: f64 = DB4_LOW.iter().sum();
        assert!((sum - std::f64::consts::SQRT_2).abs() < 1e-14);
    }

    #[test]
    fn constant_map() {
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let s = dwt2d(&x, &WaveletBasis::haar()).unwrap();
        assert!((s.low.data()[0] - 2.0).abs() < 1e-15);
        assert!(s.high.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn golden_two_by_two() {
        let x = Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let s = dwt2d(&x, &WaveletBasis::haar()).unwrap();
        assert!((s.low.data()[0] - 5.0).abs() < 1e-14);
        let expect = [-1.0, -2.0, 0.0];
        for (got, want) in s.high.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
        assert!((s.sum_sq() - 30.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_of_constant_case() {
        let comps = SpectralComponents {
            low: Tensor::full(&[1, 1, 1], 2.0),
            high: Tensor::zeros(&[1, 3, 1, 1]),
        };
        let x = idwt2d(&comps, &WaveletBasis::haar()).unwrap();
        for v in x.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let z = idwt2d(&SpectralComponents::zeros(2, 4, 4), &WaveletBasis::new(BasisKind::Db4)).unwrap();
        assert_eq!(z.sum_sq(), 0.0);
    }

    #[test]
    fn parseval_and_reconstruction() {
        let mut rng = Rng::new(3);
        for kind in BasisKind::ALL {
            let b = WaveletBasis::new(kind);
            let x = random_map(&mut rng, &[2, 8, 8]);
            let s = dwt2d(&x, &b).unwrap();
            assert!((s.sum_sq() - x.sum_sq()).abs() <= 1e-10 * x.sum_sq());
            let r = idwt2d(&s, &b).unwrap();
            assert!(r.max_abs_diff(&x).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn rejects_bad_extents() {
        let b = WaveletBasis::haar();
        assert!(dwt2d(&Tensor::zeros(&[1, 3, 4]), &b).is_err());
        assert!(dwt2d(&Tensor::zeros(&[1, 4, 4]), &WaveletBasis::new(BasisKind::Db4)).is_err());
        let bad = SpectralComponents {
            low: Tensor::zeros(&[1, 2, 2]),
            high: Tensor::zeros(&[1, 3, 2, 3]),
        };
        assert!(idwt2d(&bad, &b).is_err());
        assert!(dwt2d_backward(&bad, &b).is_err());
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = Rng::new(11);
        for kind in BasisKind::ALL {
            let b = WaveletBasis::new(kind);
            let x = random_map(&mut rng, &[3, 8, 16]);
            let y = SpectralComponents {
                low: random_map(&mut rng, &[3, 4, 8]),
                high: random_map(&mut rng, &[3, 3, 4, 8]),
            };
            let lhs = dwt2d(&x, &b).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&dwt2d_backward(&y, &b).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{kind}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn fuse_high_examples() {
        let z = fuse_high(&Tensor::zeros(&[2, 3, 2, 3])).unwrap();
        assert_eq!(z.shape(), &[2, 4, 6]);
        assert_eq!(z.sum_sq(), 0.0);
        let one = Tensor::new(vec![1, 3, 1, 1], vec![1., 2., 3.]).unwrap();
        assert_eq!(fuse_high(&one).unwrap().data(), &[6.; 4]);
        assert!(fuse_high(&Tensor::zeros(&[1, 2, 2, 2])).is_err());
    }

    #[test]
    fn fuse_high_adjoint() {
        let mut rng = Rng::new(5);
        let x = random_map(&mut rng, &[2, 3, 3, 4]);
        let g = random_map(&mut rng, &[2, 6, 8]);
        let lhs = fuse_high(&x).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&fuse_high_backward(&g).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn channel_permutation_commutes() {
        let mut rng = Rng::new(9);
        let x = random_map(&mut rng, &[3, 8, 8]);
        let perm = [2usize, 0, 1];
        let plane = 64;
        let mut xp = vec![0.0; x.len()];
        for (dst, &src) in perm.iter().enumerate() {
            xp[dst * plane..(dst + 1) * plane].copy_from_slice(&x.data()[src * plane..(src + 1) * plane]);
        }
        let xp = Tensor::new(vec![3, 8, 8], xp).unwrap();
        let b = WaveletBasis::new(BasisKind::Sym4);
        let s = dwt2d(&x, &b).unwrap();
        let sp = dwt2d(&xp, &b).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                &sp.low.data()[dst * 16..(dst + 1) * 16],
                &s.low.data()[src * 16..(src + 1) * 16]
            );
            assert_eq!(
                &sp.high.data()[dst * 48..(dst + 1) * 48],
                &s.high.data()[src * 48..(src + 1) * 48]
            );
        }
    }
}
