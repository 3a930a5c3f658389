//! Prediction-level distillation through frozen knowledge amplifiers.
//!
//! Both parties' features go through the same frozen head; the student is
//! pulled towards the teacher's outputs. Classification discrepancy is the
//! KL divergence between per-cell, per-class Bernoulli distributions (teacher
//! as target), regression discrepancy is smooth-L1, both averaged over cells.

use crate::detector::{AmplifierHead, DetectorParams, Prediction};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, smooth_l1, softplus, ParamSet};
use crate::tensor::Tensor;
use crate::wavelet::{dwt2d, dwt2d_backward, fuse_high, fuse_high_backward, SpectralComponents, WaveletBasis};

use crate::detector::loss::SMOOTH_L1_BETA;

/// Full-frequency amplifier (a copy of the teacher head) and the separately
/// trained high-frequency amplifier.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplifierSet {
    pub full: AmplifierHead,
    pub high: AmplifierHead,
}

impl AmplifierSet {
    pub fn new(teacher: &DetectorParams, high: AmplifierHead) -> Result<Self> {
        let full = teacher.head.clone();
        if high.width() != full.width() || high.num_classes() != full.num_classes() {
            return Err(Error::shape(
                "amplifier set",
                format!(
                    "high-frequency amplifier {}→{} vs teacher head {}→{}",
                    high.width(),
                    high.num_classes(),
                    full.width(),
                    full.num_classes()
                ),
            ));
        }
        Ok(Self { full, high })
    }

    pub fn checksum(&self) -> String {
        format!("{}:{}", self.full.checksum(), self.high.checksum())
    }

    pub(crate) fn check_features(&self, level: &Tensor) -> Result<()> {
        let (c, _, _) = level.dims3("implicit loss")?;
        if c != self.full.width() {
            return Err(Error::shape(
                "implicit loss",
                format!("amplifiers take {} channels, feature has {c}", self.full.width()),
            ));
        }
        Ok(())
    }
}

/// High-frequency amplifier input for one level: fused detail bands.
pub fn high_frequency_input(level: &Tensor, basis: &WaveletBasis) -> Result<Tensor> {
    fuse_high(&dwt2d(level, basis)?.high)
}

/// Discrepancy between student and teacher predictions on one level:
/// `(classification, regression, gradient w.r.t. the student prediction)`.
pub fn discrepancy(student: &Prediction, teacher: &Prediction) -> Result<(f64, f64, Prediction)> {
    student.cls.ensure_same_shape(&teacher.cls, "discrepancy")?;
    student.reg.ensure_same_shape(&teacher.reg, "discrepancy")?;
    let (h, w) = student.grid();
    let n = (h * w) as f64;
    let mut cls = 0.0;
    let mut gcls = vec![0.0; student.cls.len()];
    for ((&s, &t), g) in student.cls.data().iter().zip(teacher.cls.data()).zip(gcls.iter_mut()) {
        let p = sigmoid(t);
        // ln σ(x) = −softplus(−x), ln(1 − σ(x)) = −softplus(x)
        cls += p * (softplus(-s) - softplus(-t)) + (1.0 - p) * (softplus(s) - softplus(t));
        *g = (sigmoid(s) - p) / n;
    }
    let mut reg = 0.0;
    let mut greg = vec![0.0; student.reg.len()];
    for ((&s, &t), g) in student.reg.data().iter().zip(teacher.reg.data()).zip(greg.iter_mut()) {
        let (v, d) = smooth_l1(s - t, SMOOTH_L1_BETA);
        reg += v;
        *g = d / n;
    }
    Ok((
        cls / n,
        reg / n,
        Prediction {
            cls: Tensor::from_raw(student.cls.shape().to_vec(), gcls),
            reg: Tensor::from_raw(student.reg.shape().to_vec(), greg),
        },
    ))
}

fn scaled(pred: Prediction, factor: f64) -> Prediction {
    if factor == 1.0 {
        return pred;
    }
    Prediction {
        cls: pred.cls.scale(factor),
        reg: pred.reg.scale(factor),
    }
}

/// Unweighted full/high terms summed over levels, the weighted value
/// `λ·full + μ·high`, and its gradient on each student level.
#[derive(Debug, Clone)]
pub struct ImplicitLoss {
    pub full: f64,
    pub high: f64,
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// Implicit loss from raw pyramids; teacher predictions are computed here.
pub fn implicit_loss(
    teacher: &[Tensor],
    student: &[Tensor],
    amplifiers: &AmplifierSet,
    basis: &WaveletBasis,
    lambda: f64,
    mu: f64,
) -> Result<ImplicitLoss> {
    let mut full = Vec::with_capacity(teacher.len());
    let mut high = Vec::with_capacity(teacher.len());
    for t in teacher {
        amplifiers.check_features(t)?;
        full.push(amplifiers.full.predict(t)?);
        high.push(amplifiers.high.predict(&high_frequency_input(t, basis)?)?);
    }
    implicit_loss_from_predictions(&full, &high, student, amplifiers, basis, lambda, mu, true, true)
}

/// Implicit loss against cached teacher predictions. Terms whose switch is
/// off are neither evaluated nor differentiated.
#[allow(clippy::too_many_arguments)]
pub fn implicit_loss_from_predictions(
    teacher_full: &[Prediction],
    teacher_high: &[Prediction],
    student: &[Tensor],
    amplifiers: &AmplifierSet,
    basis: &WaveletBasis,
    lambda: f64,
    mu: f64,
    use_full: bool,
    use_high: bool,
) -> Result<ImplicitLoss> {
    if teacher_full.len() != student.len() || teacher_high.len() != student.len() {
        return Err(Error::shape(
            "implicit loss",
            format!(
                "{}/{} teacher prediction levels vs {} student levels",
                teacher_full.len(),
                teacher_high.len(),
                student.len()
            ),
        ));
    }
    let mut out = ImplicitLoss {
        full: 0.0,
        high: 0.0,
        value: 0.0,
        grads: Vec::with_capacity(student.len()),
    };
    for (level, s) in student.iter().enumerate() {
        amplifiers.check_features(s)?;
        let mut grad = Tensor::zeros_like(s);
        if use_full {
            let (pred, cache) = amplifiers.full.forward(s)?;
            let (c, r, g) = discrepancy(&pred, &teacher_full[level])?;
            out.full += c + r;
            grad = amplifiers.full.backward(&cache, &scaled(g, lambda), None)?;
        }
        if use_high {
            let comps = dwt2d(s, basis)?;
            let fused = fuse_high(&comps.high)?;
            let (pred, cache) = amplifiers.high.forward(&fused)?;
            let (c, r, g) = discrepancy(&pred, &teacher_high[level])?;
            out.high += c + r;
            let g_fused = amplifiers.high.backward(&cache, &scaled(g, mu), None)?;
            let g_comps = SpectralComponents {
                low: Tensor::zeros_like(&comps.low),
                high: fuse_high_backward(&g_fused)?,
            };
            grad.add_assign(&dwt2d_backward(&g_comps, basis)?)?;
        }
        out.grads.push(grad);
    }
    out.value = lambda * out.full + mu * out.high;
    Ok(out)
}
