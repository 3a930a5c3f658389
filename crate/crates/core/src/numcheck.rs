//! Brute-force oracles: central finite differences and a direct
//! nested-loop wavelet transform. Nothing here reuses the optimised code
//! paths it is meant to check.

use serde::Serialize;

use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::wavelet::{SpectralComponents, WaveletBasis};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so coordinates whose true
/// gradient is (near) zero are judged on absolute error instead.
pub const DEFAULT_FLOOR: f64 = 1e-4;

/// Central-difference gradient and the coordinates where `f` was not finite.
#[derive(Debug, Clone)]
pub struct FiniteDiff {
    pub grad: Tensor,
    pub non_finite: Vec<usize>,
}

pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> FiniteDiff {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    let mut non_finite = Vec::new();
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if up.is_finite() && down.is_finite() {
            *g = (up - down) / (2.0 * step);
        } else {
            non_finite.push(i);
            *g = f64::NAN;
        }
    }
    FiniteDiff {
        grad: Tensor::from_raw(x.shape().to_vec(), grad),
        non_finite,
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat indices above tolerance or with non-finite evaluations.
    pub failing: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.failing.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| {
            if t.max_rel_error.is_nan() {
                f64::INFINITY
            } else {
                m.max(t.max_rel_error)
            }
        })
    }
}

/// Compares an analytic gradient with central differences of `f` at `x`.
pub fn check_tensor(
    name: &str,
    x: &Tensor,
    analytic: &Tensor,
    f: impl FnMut(&Tensor) -> f64,
    step: f64,
    tolerance: f64,
    floor: f64,
) -> TensorReport {
    let fd = finite_diff_grad(f, x, step);
    compare(name, analytic, &fd, tolerance, floor)
}

fn compare(name: &str, analytic: &Tensor, fd: &FiniteDiff, tolerance: f64, floor: f64) -> TensorReport {
    assert_eq!(analytic.shape(), fd.grad.shape(), "gradient shape for {name}");
    let mut report = TensorReport {
        name: name.to_string(),
        checked: analytic.len(),
        max_rel_error: 0.0,
        failing: Vec::new(),
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(fd.grad.data()).enumerate() {
        let err = if n.is_finite() {
            relative_error(a, n, floor)
        } else {
            f64::INFINITY
        };
        report.max_rel_error = report.max_rel_error.max(err);
        // Written so that NaN counts as a failure.
        if err.is_nan() || err > tolerance {
            report.failing.push(i);
        }
    }
    report
}

/// Checks every tensor of a parameter set. `f` evaluates the objective at a
/// perturbed copy of `params`.
pub fn check_params<P: ParamSet>(
    params: &P,
    analytic: &P,
    f: impl Fn(&P) -> f64,
    step: f64,
    tolerance: f64,
    floor: f64,
) -> GradCheckReport {
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grads = analytic.tensors();
    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let x = params.tensors()[ti].clone();
        let fd = finite_diff_grad(
            |t| {
                *probe.tensors_mut()[ti] = t.clone();
                f(&probe)
            },
            &x,
            step,
        );
        *probe.tensors_mut()[ti] = x;
        tensors.push(compare(name, grads[ti], &fd, tolerance, floor));
    }
    GradCheckReport {
        step,
        tolerance,
        floor,
        tensors,
    }
}

/// Direct nested-loop first-order 2D DWT with periodic indexing. The
/// high-pass filter is re-derived here from the low-pass taps.
pub fn reference_dwt2d(map: &Tensor, basis: &WaveletBasis) -> SpectralComponents {
    let shape = map.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let h0 = basis.low_pass().to_vec();
    let len = h0.len();
    let h1: Vec<f64> = (0..len)
        .map(|j| if j % 2 == 0 { h0[len - 1 - j] } else { -h0[len - 1 - j] })
        .collect();
    let (oh, ow) = (h / 2, w / 2);
    let x = |ch: usize, r: usize, col: usize| map.data()[(ch * h + r % h) * w + col % w];
    let mut low = Tensor::zeros(&[c, oh, ow]);
    let mut high = Tensor::zeros(&[c, 3, oh, ow]);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                // (column filter, row filter) per band: LL, HL, LH, HH
                let mut sums = [0.0f64; 4];
                for a in 0..len {
                    for b in 0..len {
                        let v = x(ch, 2 * i + a, 2 * j + b);
                        sums[0] += h0[a] * h0[b] * v;
                        sums[1] += h0[a] * h1[b] * v;
                        sums[2] += h1[a] * h0[b] * v;
                        sums[3] += h1[a] * h1[b] * v;
                    }
                }
                low.data_mut()[(ch * oh + i) * ow + j] = sums[0];
                for o in 0..3 {
                    high.data_mut()[((ch * 3 + o) * oh + i) * ow + j] = sums[o + 1];
                }
            }
        }
    }
    SpectralComponents { low, high }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::{dwt2d, BasisKind};

    #[test]
    fn quadratic_and_constant() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let fd = finite_diff_grad(|t| t.sum_sq(), &x, DEFAULT_STEP);
        assert!((fd.grad.data()[0] - 2.0).abs() < 1e-8 && (fd.grad.data()[1] - 4.0).abs() < 1e-8);
        let fd = finite_diff_grad(|_| 3.0, &x, DEFAULT_STEP);
        assert!(fd.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::new(vec![3], vec![1.0, 0.0, 2.0]).unwrap();
        let fd = finite_diff_grad(|t| if t.data()[1] > 0.0 { f64::INFINITY } else { t.sum() }, &x, 1e-3);
        assert_eq!(fd.non_finite, vec![1]);
        let report = check_tensor(
            "x",
            &x,
            &Tensor::full(&[3], 1.0),
            |t| if t.data()[1] > 0.0 { f64::NAN } else { t.sum() },
            1e-3,
            1e-5,
            1e-6,
        );
        assert_eq!(report.failing, vec![1]);
    }

    #[test]
    fn haar_reference_cases() {
        let basis = WaveletBasis::haar();
        let golden = reference_dwt2d(&Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap(), &basis);
        assert!((golden.low.data()[0] - 5.0).abs() < 1e-12);
        let want = [-1.0, -2.0, 0.0];
        for (g, w) in golden.high.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let constant = reference_dwt2d(&Tensor::full(&[2, 4, 4], 1.5), &basis);
        assert!(constant.low.data().iter().all(|v| (v - 3.0).abs() < 1e-12));
        assert!(constant.high.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn agrees_with_fast_transform() {
        let mut rng = crate::rng::Rng::new(12);
        for kind in BasisKind::ALL {
            let basis = WaveletBasis::new(kind);
            let x = Tensor::from_fn(&[2, 8, 12], |_| rng.normal());
            let a = dwt2d(&x, &basis).unwrap();
            let b = reference_dwt2d(&x, &basis);
            assert!(a.low.max_abs_diff(&b.low).unwrap() <= 1e-12);
            assert!(a.high.max_abs_diff(&b.high).unwrap() <= 1e-12);
        }
    }
}
