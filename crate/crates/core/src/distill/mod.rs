//! Explicit and implicit distillation in the wavelet domain.
//!
//! The student is trained on its detection loss plus up to four
//! distillation terms on each pyramid level:
//!
//! | term      | site                          | weight |
//! |-----------|-------------------------------|--------|
//! | `ex_low`  | low subband, DISW-weighted    | α      |
//! | `ex_high` | detail subbands, DISW-weighted| β      |
//! | `im_full` | full-frequency amplifier      | λ      |
//! | `im_high` | high-frequency amplifier      | μ      |
//!
//! Teacher, amplifiers and every teacher-side quantity are computed once and
//! never touched again; implicit gradients reach the student backbone and
//! neck through its pyramid features only.

pub mod explicit;
pub mod implicit;

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use explicit::{explicit_loss, explicit_loss_from_components, ExplicitLoss};
pub use implicit::{
    discrepancy, high_frequency_input, implicit_loss, implicit_loss_from_predictions, AmplifierSet, ImplicitLoss,
};

use crate::detector::{
    detection_loss, validation_ap50, DetectorParams, HeadParams, Prediction, SyntheticScene, STRIDES,
};
use crate::disw::{build_disw, DiswMap};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::parallel::Execution;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{sgd_train, ItemGrad, OptimizerConfig};
use crate::wavelet::{dwt2d, BasisKind, SpectralComponents, WaveletBasis};

/// Which frequency bands are distilled. `Low` keeps the low subband and the
/// full-frequency amplifier term; `High` keeps the detail subbands and the
/// high-frequency amplifier term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Low,
    High,
    #[default]
    Both,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Low, Band::High, Band::Both];

    fn low(self) -> bool {
        matches!(self, Band::Low | Band::Both)
    }

    fn high(self) -> bool {
        matches!(self, Band::High | Band::Both)
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Low => "low",
            Band::High => "high",
            Band::Both => "both",
        })
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Band::Low),
            "high" => Ok(Band::High),
            "both" => Ok(Band::Both),
            _ => Err(Error::Config(format!(
                "unknown band `{s}` (expected low, high or both)"
            ))),
        }
    }
}

/// γ re-weighting used by the sweep experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    /// γ is ignored.
    #[default]
    None,
    /// Low-frequency terms (`ex_low`, `im_full`) × γ, high-frequency terms × (2 − γ).
    Spectral,
    /// Explicit terms × γ, implicit terms × (2 − γ).
    Stream,
}

impl fmt::Display for GammaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GammaMode::None => "none",
            GammaMode::Spectral => "spectral",
            GammaMode::Stream => "stream",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub mu: f64,
    pub gamma: f64,
    pub gamma_mode: GammaMode,
    pub explicit: bool,
    pub implicit: bool,
    pub disw: bool,
    pub band: Band,
    pub basis: BasisKind,
    pub amplifier_epochs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 2e-5,
            beta: 2e-5,
            lambda: 0.02,
            mu: 0.02,
            gamma: 1.0,
            gamma_mode: GammaMode::None,
            explicit: true,
            implicit: true,
            disw: true,
            band: Band::Both,
            basis: BasisKind::Haar,
            amplifier_epochs: 10,
        }
    }
}

/// Effective multipliers of the four distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TermWeights {
    pub ex_low: f64,
    pub ex_high: f64,
    pub im_full: f64,
    pub im_high: f64,
}

impl TermWeights {
    pub fn explicit_active(&self) -> bool {
        self.ex_low != 0.0 || self.ex_high != 0.0
    }

    pub fn implicit_active(&self) -> bool {
        self.im_full != 0.0 || self.im_high != 0.0
    }

    pub fn any_active(&self) -> bool {
        self.explicit_active() || self.implicit_active()
    }
}

impl DistillConfig {
    /// Every term switched off: plain supervised training.
    pub fn disabled() -> Self {
        Self {
            explicit: false,
            implicit: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("mu", self.mu),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..=2.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 2], got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn weights(&self) -> TermWeights {
        let on = |switch: bool, w: f64| if switch { w } else { 0.0 };
        let mut t = TermWeights {
            ex_low: on(self.explicit && self.band.low(), self.alpha),
            ex_high: on(self.explicit && self.band.high(), self.beta),
            im_full: on(self.implicit && self.band.low(), self.lambda),
            im_high: on(self.implicit && self.band.high(), self.mu),
        };
        let (g, rest) = (self.gamma, 2.0 - self.gamma);
        match self.gamma_mode {
            GammaMode::None => {}
            GammaMode::Spectral => {
                t.ex_low *= g;
                t.im_full *= g;
                t.ex_high *= rest;
                t.im_high *= rest;
            }
            GammaMode::Stream => {
                t.ex_low *= g;
                t.ex_high *= g;
                t.im_full *= rest;
                t.im_high *= rest;
            }
        }
        t
    }
}

/// Teacher-side quantities for one training scene, computed once.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    pub pyramid: Vec<Tensor>,
    pub components: Vec<SpectralComponents>,
    pub full_predictions: Vec<Prediction>,
    pub high_predictions: Vec<Prediction>,
    /// One map per level, on the decomposed grid.
    pub disw: Vec<DiswMap>,
}

impl TeacherTargets {
    pub fn build(
        teacher: &DetectorParams,
        amplifiers: &AmplifierSet,
        scene: &SyntheticScene,
        basis: &WaveletBasis,
    ) -> Result<Self> {
        let pyramid = teacher.features(&scene.image)?;
        let (_, ih, iw) = scene.image.dims3("teacher targets")?;
        let mut out = Self {
            components: Vec::with_capacity(pyramid.len()),
            full_predictions: Vec::with_capacity(pyramid.len()),
            high_predictions: Vec::with_capacity(pyramid.len()),
            disw: Vec::with_capacity(pyramid.len()),
            pyramid: Vec::new(),
        };
        for level in &pyramid {
            amplifiers.check_features(level)?;
            let comps = dwt2d(level, basis)?;
            let (_, h, w) = comps.dims()?;
            out.disw.push(build_disw(&scene.annotations, (ih, iw), (h, w))?);
            out.full_predictions.push(amplifiers.full.predict(level)?);
            let fused = crate::wavelet::fuse_high(&comps.high)?;
            out.high_predictions.push(amplifiers.high.predict(&fused)?);
            out.components.push(comps);
        }
        out.pyramid = pyramid;
        Ok(out)
    }
}

pub fn build_targets(
    teacher: &DetectorParams,
    amplifiers: &AmplifierSet,
    scenes: &[SyntheticScene],
    basis: &WaveletBasis,
    exec: Execution,
) -> Result<Vec<TeacherTargets>> {
    exec.map(scenes, |s| TeacherTargets::build(teacher, amplifiers, s, basis))
        .into_iter()
        .collect()
}

/// Trains a fresh head on the teacher's fused high-frequency features
/// against ground truth. The teacher is only read.
pub fn train_high_amplifier(
    teacher: &DetectorParams,
    scenes: &[SyntheticScene],
    basis: &WaveletBasis,
    opt: &OptimizerConfig,
    exec: Execution,
) -> Result<HeadParams> {
    let inputs: Vec<Vec<Tensor>> = exec
        .map(scenes, |s| -> Result<Vec<Tensor>> {
            teacher
                .features(&s.image)?
                .iter()
                .map(|level| high_frequency_input(level, basis))
                .collect()
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mut rng = Rng::stream(opt.seed, 0x000a_3b1f);
    let mut head = HeadParams::init(&mut rng, teacher.config.pyramid_width, teacher.config.num_classes);
    sgd_train(
        &mut head,
        scenes.len(),
        opt,
        exec,
        |h, i| {
            let (loss, grads) = amplifier_loss_and_grads(h, &inputs[i], &scenes[i])?;
            Ok(ItemGrad {
                loss,
                grads,
                metrics: (),
            })
        },
        |_| {},
        |_, _| Ok(()),
    )?;
    Ok(head)
}

/// Detection loss of a head applied to precomputed per-level inputs.
pub fn amplifier_loss_and_grads(
    head: &HeadParams,
    inputs: &[Tensor],
    scene: &SyntheticScene,
) -> Result<(f64, HeadParams)> {
    let mut preds = Vec::with_capacity(inputs.len());
    let mut caches = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (p, c) = head.forward(x)?;
        preds.push(p);
        caches.push(c);
    }
    let (loss, grad_preds) = detection_loss(&preds, &scene.annotations, &STRIDES)?;
    let mut grads = head.zeros_like();
    for (c, g) in caches.iter().zip(&grad_preds) {
        head.backward(c, g, Some(&mut grads))?;
    }
    Ok((loss.total(), grads))
}

/// Unweighted value of each objective term for one scene (or averaged over
/// many). Terms whose weight is zero are not evaluated and read 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub det: f64,
    pub ex_low: f64,
    pub ex_high: f64,
    pub im_full: f64,
    pub im_high: f64,
    /// Weighted objective actually optimised.
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, other: &LossBreakdown, factor: f64) {
        self.det += factor * other.det;
        self.ex_low += factor * other.ex_low;
        self.ex_high += factor * other.ex_high;
        self.im_full += factor * other.im_full;
        self.im_high += factor * other.im_high;
        self.total += factor * other.total;
    }
}

/// Detection loss plus the weighted distillation terms for one scene, and
/// the gradient of the total with respect to every student parameter.
pub fn total_distill_loss(
    student: &DetectorParams,
    scene: &SyntheticScene,
    target: &TeacherTargets,
    amplifiers: &AmplifierSet,
    cfg: &DistillConfig,
) -> Result<(LossBreakdown, DetectorParams)> {
    let w = cfg.weights();
    let out = student.forward(&scene.image)?;
    let (det, grad_preds) = detection_loss(&out.predictions, &scene.annotations, &STRIDES)?;
    let mut breakdown = LossBreakdown {
        det: det.total(),
        total: det.total(),
        ..LossBreakdown::default()
    };
    if !w.any_active() {
        let grads = student.backward(&out.cache, &grad_preds, None)?;
        return Ok((breakdown, grads));
    }

    let basis = WaveletBasis::new(cfg.basis);
    let mut pyramid_grads: Vec<Tensor> = out.pyramid.iter().map(Tensor::zeros_like).collect();
    if w.explicit_active() {
        let disw = cfg.disw.then_some(&target.disw[..]);
        let ex = explicit_loss_from_components(&target.components, &out.pyramid, disw, &basis, w.ex_low, w.ex_high)?;
        breakdown.ex_low = ex.low;
        breakdown.ex_high = ex.high;
        breakdown.total += ex.value;
        for (g, e) in pyramid_grads.iter_mut().zip(&ex.grads) {
            g.add_assign(e)?;
        }
    }
    if w.implicit_active() {
        let im = implicit_loss_from_predictions(
            &target.full_predictions,
            &target.high_predictions,
            &out.pyramid,
            amplifiers,
            &basis,
            w.im_full,
            w.im_high,
            w.im_full != 0.0,
            w.im_high != 0.0,
        )?;
        breakdown.im_full = im.full;
        breakdown.im_high = im.high;
        breakdown.total += im.value;
        for (g, e) in pyramid_grads.iter_mut().zip(&im.grads) {
            g.add_assign(e)?;
        }
    }
    let grads = student.backward(&out.cache, &grad_preds, Some(&pyramid_grads))?;
    Ok((breakdown, grads))
}

/// One row of the distillation trace: epoch-mean loss terms over training
/// items and validation AP₅₀ at the end of the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub det: f64,
    pub ex_low: f64,
    pub ex_high: f64,
    pub im_full: f64,
    pub im_high: f64,
    pub total: f64,
    pub val_ap50: f64,
}

/// Trains `student` under the distillation objective and returns the
/// per-epoch trace. Teacher and amplifier checksums are compared before and
/// after the run.
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    student: &mut DetectorParams,
    teacher: &DetectorParams,
    amplifiers: &AmplifierSet,
    train: &[SyntheticScene],
    targets: &[TeacherTargets],
    val: &[SyntheticScene],
    cfg: &DistillConfig,
    opt: &OptimizerConfig,
    exec: Execution,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if targets.len() != train.len() {
        return Err(Error::shape(
            "distill",
            format!("{} teacher targets for {} training scenes", targets.len(), train.len()),
        ));
    }
    if student.config.pyramid_width != teacher.config.pyramid_width
        || student.config.num_classes != teacher.config.num_classes
    {
        return Err(Error::shape(
            "distill",
            format!(
                "student pyramid {}/K={} vs teacher pyramid {}/K={}",
                student.config.pyramid_width,
                student.config.num_classes,
                teacher.config.pyramid_width,
                teacher.config.num_classes
            ),
        ));
    }
    let frozen = (teacher.checksum(), amplifiers.checksum());

    let epoch_sums = RefCell::new((LossBreakdown::default(), 0usize));
    let mut trace = Vec::with_capacity(opt.epochs);
    sgd_train(
        student,
        train.len(),
        opt,
        exec,
        |p, i| {
            let (breakdown, grads) = total_distill_loss(p, &train[i], &targets[i], amplifiers, cfg)?;
            Ok(ItemGrad {
                loss: breakdown.total,
                grads,
                metrics: breakdown,
            })
        },
        |step| {
            let mut acc = epoch_sums.borrow_mut();
            for m in step.metrics {
                acc.0.add_scaled(m, 1.0);
            }
            acc.1 += step.metrics.len();
        },
        |epoch, p| {
            let (sums, count) = epoch_sums.replace((LossBreakdown::default(), 0));
            let mut mean = LossBreakdown::default();
            mean.add_scaled(&sums, 1.0 / count.max(1) as f64);
            trace.push(EpochRecord {
                epoch,
                det: mean.det,
                ex_low: mean.ex_low,
                ex_high: mean.ex_high,
                im_full: mean.im_full,
                im_high: mean.im_high,
                total: mean.total,
                val_ap50: validation_ap50(p, val, exec)?,
            });
            Ok(())
        },
    )?;

    if (teacher.checksum(), amplifiers.checksum()) != frozen {
        return Err(Error::Invariant(
            "teacher or amplifier parameters changed during distillation".into(),
        ));
    }
    Ok(trace)
}
