//! Weighted regression of student subbands onto teacher subbands.

use crate::disw::DiswMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::{dwt2d, dwt2d_backward, SpectralComponents, WaveletBasis};

/// Unweighted per-band sums over all levels, the weighted value
/// `α·low + β·high`, and its gradient on each student level.
#[derive(Debug, Clone)]
pub struct ExplicitLoss {
    pub low: f64,
    pub high: f64,
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// Explicit loss from raw teacher and student pyramids. `disw` holds one
/// map per level on the decomposed grid; `None` means uniform weights.
pub fn explicit_loss(
    teacher: &[Tensor],
    student: &[Tensor],
    disw: Option<&[DiswMap]>,
    basis: &WaveletBasis,
    alpha: f64,
    beta: f64,
) -> Result<ExplicitLoss> {
    let comps = teacher.iter().map(|t| dwt2d(t, basis)).collect::<Result<Vec<_>>>()?;
    explicit_loss_from_components(&comps, student, disw, basis, alpha, beta)
}

/// Same as [`explicit_loss`] with the teacher side already decomposed.
pub fn explicit_loss_from_components(
    teacher: &[SpectralComponents],
    student: &[Tensor],
    disw: Option<&[DiswMap]>,
    basis: &WaveletBasis,
    alpha: f64,
    beta: f64,
) -> Result<ExplicitLoss> {
    if teacher.len() != student.len() {
        return Err(Error::shape(
            "explicit loss",
            format!("{} teacher levels vs {} student levels", teacher.len(), student.len()),
        ));
    }
    if let Some(maps) = disw {
        if maps.len() != student.len() {
            return Err(Error::shape(
                "explicit loss",
                format!("{} weight maps for {} levels", maps.len(), student.len()),
            ));
        }
    }
    let mut out = ExplicitLoss {
        low: 0.0,
        high: 0.0,
        value: 0.0,
        grads: Vec::with_capacity(student.len()),
    };
    for (level, (t, s)) in teacher.iter().zip(student).enumerate() {
        let weights = disw.map(|m| &m[level].weights);
        let (low, high, grad) = level_loss(t, s, weights, basis, alpha, beta)?;
        out.low += low;
        out.high += high;
        out.grads.push(grad);
    }
    out.value = alpha * out.low + beta * out.high;
    Ok(out)
}

fn level_loss(
    teacher: &SpectralComponents,
    student_map: &Tensor,
    weights: Option<&Tensor>,
    basis: &WaveletBasis,
    alpha: f64,
    beta: f64,
) -> Result<(f64, f64, Tensor)> {
    let student = dwt2d(student_map, basis)?;
    let (c, h, w) = student.dims()?;
    if teacher.dims()? != (c, h, w) {
        return Err(Error::shape(
            "explicit loss",
            format!(
                "teacher subbands {:?} vs student subbands {:?}",
                teacher.low.shape(),
                student.low.shape()
            ),
        ));
    }
    if let Some(p) = weights {
        if p.shape() != [h, w] {
            return Err(Error::shape(
                "explicit loss",
                format!("weight map {:?} vs decomposed grid {h}×{w}", p.shape()),
            ));
        }
    }
    let plane = h * w;
    let ones;
    let p = match weights {
        Some(p) => p.data(),
        None => {
            ones = vec![1.0; plane];
            &ones
        }
    };

    let band = |t: &[f64], s: &[f64], factor: f64| -> (f64, Vec<f64>) {
        let mut sum = 0.0;
        let mut grad = vec![0.0; s.len()];
        for (i, ((&tv, &sv), g)) in t.iter().zip(s).zip(grad.iter_mut()).enumerate() {
            let pw = p[i % plane];
            let d = sv - tv;
            sum += pw * d * d;
            *g = 2.0 * factor * pw * d;
        }
        (sum, grad)
    };
    let (low, g_low) = band(teacher.low.data(), student.low.data(), alpha);
    let (high, g_high) = band(teacher.high.data(), student.high.data(), beta);
    let grad = dwt2d_backward(
        &SpectralComponents {
            low: Tensor::from_raw(vec![c, h, w], g_low),
            high: Tensor::from_raw(vec![c, 3, h, w], g_high),
        },
        basis,
    )?;
    Ok((low, high, grad))
}
