//! Experiment configuration and the teacher → amplifier → student pipeline
//! shared by the CLI and the acceptance suite.
//!
//! Configuration is TOML; unknown keys are errors. Command-line flags are
//! applied on top of the file (see [`Overrides`]).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{
    generate_dataset, generate_scene, loss_and_grads, validation_ap50, DetectorConfig, DetectorParams, HeadParams,
    SceneConfig, SyntheticScene,
};
use crate::distill::{
    build_targets, distill_student, explicit_loss_from_components, implicit_loss_from_predictions, total_distill_loss,
    train_high_amplifier, AmplifierSet, Band, DistillConfig, EpochRecord, ExplicitLoss, GammaMode, ImplicitLoss,
    TeacherTargets,
};
use crate::error::{Error, Result};
use crate::numcheck::{check_params, check_tensor, GradCheckReport, TensorReport};
use crate::parallel::Execution;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{train_detector, OptimizerConfig};
use crate::wavelet::{BasisKind, WaveletBasis};

/// Named configuration templates shipped with the crate.
pub const PRESETS: [(&str, &str); 6] = [
    ("default", include_str!("../configs/default.toml")),
    ("smoke", include_str!("../configs/smoke.toml")),
    ("retinanet-dior", include_str!("../configs/retinanet-dior.toml")),
    ("retinanet-dota", include_str!("../configs/retinanet-dota.toml")),
    ("faster-rcnn-dior", include_str!("../configs/faster-rcnn-dior.toml")),
    ("faster-rcnn-dota", include_str!("../configs/faster-rcnn-dota.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 512,
            val_scenes: 128,
            seed: 2024,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub teacher_width: usize,
    pub student_width: usize,
    pub pyramid_width: usize,
    pub teacher_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            teacher_width: 32,
            student_width: 6,
            pyramid_width: 16,
            teacher_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Student seeds; each seed fixes student initialisation and batch order.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub teacher: OptimizerConfig,
    /// `epochs` is taken from `distill.amplifier_epochs`.
    pub amplifier: OptimizerConfig,
    pub student: OptimizerConfig,
    pub distill: DistillConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            teacher: OptimizerConfig {
                epochs: 40,
                lr: 0.02,
                ..OptimizerConfig::default()
            },
            amplifier: OptimizerConfig {
                lr: 0.02,
                ..OptimizerConfig::default()
            },
            student: OptimizerConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
        Self::from_toml(text)
    }

    /// Reads a TOML file, or a shipped preset when `source` names one and no
    /// such file exists.
    pub fn load(source: &str) -> Result<Self> {
        let path = Path::new(source);
        if !path.is_file() {
            if PRESETS.iter().any(|(n, _)| *n == source) {
                return Self::preset(source);
            }
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            return Err(Error::Config(format!(
                "`{source}` is neither a file nor a preset ({})",
                names.join(", ")
            )));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, e: Error| Error::Config(format!("{k}: {e}"));
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if self.data.train_scenes == 0 {
            return Err(Error::Config("data.train_scenes: must be positive".into()));
        }
        self.data.scene.validate().map_err(|e| key("data.scene", e))?;
        let m = &self.model;
        if m.teacher_width == 0 || m.student_width == 0 || m.pyramid_width == 0 {
            return Err(Error::Config("model: widths must be positive".into()));
        }
        self.teacher.validate().map_err(|e| key("teacher", e))?;
        self.amplifier.validate().map_err(|e| key("amplifier", e))?;
        self.student.validate().map_err(|e| key("student", e))?;
        self.distill.validate().map_err(|e| key("distill", e))?;
        // The smallest pyramid level must be decomposable with the chosen basis.
        let smallest = self.data.scene.size / crate::detector::STRIDES[1];
        let taps = WaveletBasis::new(self.distill.basis).filter_len();
        if smallest < taps || !smallest.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "distill.basis: {} needs pyramid extents ≥ {taps}, smallest level is {smallest}",
                self.distill.basis
            )));
        }
        Ok(())
    }

    pub fn teacher_config(&self) -> DetectorConfig {
        DetectorConfig::new(
            self.model.teacher_width,
            self.model.pyramid_width,
            self.data.scene.num_classes,
        )
    }

    pub fn student_config(&self) -> DetectorConfig {
        DetectorConfig::new(
            self.model.student_width,
            self.model.pyramid_width,
            self.data.scene.num_classes,
        )
    }

    pub fn amplifier_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            epochs: self.distill.amplifier_epochs,
            ..self.amplifier
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if o.no_explicit {
            self.distill.explicit = false;
        }
        if o.no_implicit {
            self.distill.implicit = false;
        }
        if o.no_disw {
            self.distill.disw = false;
        }
        if let Some(band) = o.band {
            self.distill.band = band;
        }
        if let Some(basis) = o.basis {
            self.distill.basis = basis;
        }
        self.validate()
    }
}

/// Command-line overrides; each one replaces the corresponding file key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_explicit: bool,
    pub no_implicit: bool,
    pub no_disw: bool,
    pub band: Option<Band>,
    pub basis: Option<BasisKind>,
}

/// Training and validation scenes; validation uses its own seed stream.
pub fn datasets(cfg: &ExperimentConfig) -> (Vec<SyntheticScene>, Vec<SyntheticScene>) {
    let d = &cfg.data;
    let val_seed = Rng::stream(d.seed, 1).next_u64();
    (
        generate_dataset(&d.scene, d.train_scenes, d.seed),
        generate_dataset(&d.scene, d.val_scenes, val_seed),
    )
}

/// Validation AP₅₀ after every epoch.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    train: &[SyntheticScene],
    val: &[SyntheticScene],
    exec: Execution,
) -> Result<(DetectorParams, Vec<f64>)> {
    let mut teacher = DetectorParams::init(cfg.teacher_config(), cfg.model.teacher_seed);
    let opt = OptimizerConfig {
        seed: cfg.model.teacher_seed,
        ..cfg.teacher
    };
    let mut aps = Vec::with_capacity(opt.epochs);
    train_detector(&mut teacher, train, &opt, exec, |epoch, p| {
        let ap = validation_ap50(p, val, exec)?;
        eprintln!("teacher epoch {epoch}: val AP50 {ap:.4}");
        aps.push(ap);
        Ok(())
    })?;
    Ok((teacher, aps))
}

pub fn train_amplifiers(
    cfg: &ExperimentConfig,
    teacher: &DetectorParams,
    train: &[SyntheticScene],
    exec: Execution,
) -> Result<AmplifierSet> {
    let opt = OptimizerConfig {
        seed: cfg.model.teacher_seed,
        ..cfg.amplifier_optimizer()
    };
    let basis = WaveletBasis::new(cfg.distill.basis);
    let high = train_high_amplifier(teacher, train, &basis, &opt, exec)?;
    AmplifierSet::new(teacher, high)
}

/// Everything a student run needs, built once and shared across variants
/// and seeds.
pub struct Workbench {
    pub config: ExperimentConfig,
    pub train: Vec<SyntheticScene>,
    pub val: Vec<SyntheticScene>,
    pub teacher: DetectorParams,
    pub teacher_trace: Vec<f64>,
    pub amplifiers: AmplifierSet,
    pub targets: Vec<TeacherTargets>,
}

impl Workbench {
    pub fn from_parts(
        config: ExperimentConfig,
        train: Vec<SyntheticScene>,
        val: Vec<SyntheticScene>,
        teacher: DetectorParams,
        teacher_trace: Vec<f64>,
        amplifiers: AmplifierSet,
        exec: Execution,
    ) -> Result<Self> {
        let basis = WaveletBasis::new(config.distill.basis);
        let targets = build_targets(&teacher, &amplifiers, &train, &basis, exec)?;
        Ok(Self {
            config,
            train,
            val,
            teacher,
            teacher_trace,
            amplifiers,
            targets,
        })
    }

    /// Generates data and trains the teacher and the amplifier from scratch.
    pub fn build(config: ExperimentConfig, exec: Execution) -> Result<Self> {
        let (train, val) = datasets(&config);
        let (teacher, trace) = train_teacher(&config, &train, &val, exec)?;
        let amplifiers = train_amplifiers(&config, &teacher, &train, exec)?;
        Self::from_parts(config, train, val, teacher, trace, amplifiers, exec)
    }

    pub fn student_init(&self, seed: u64) -> DetectorParams {
        DetectorParams::init(self.config.student_config(), seed)
    }

    pub fn run_student(&self, distill: &DistillConfig, seed: u64, exec: Execution) -> Result<StudentRun> {
        let mut student = self.student_init(seed);
        let opt = OptimizerConfig {
            seed,
            ..self.config.student
        };
        let trace = distill_student(
            &mut student,
            &self.teacher,
            &self.amplifiers,
            &self.train,
            &self.targets,
            &self.val,
            distill,
            &opt,
            exec,
        )?;
        Ok(StudentRun { student, trace })
    }
}

pub struct StudentRun {
    pub student: DetectorParams,
    pub trace: Vec<EpochRecord>,
}

impl StudentRun {
    pub fn final_ap50(&self) -> f64 {
        self.trace.last().map_or(0.0, |r| r.val_ap50)
    }
}

/// A named distillation configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub distill: DistillConfig,
}

/// Baseline plus {explicit, implicit, both} × {low, high, both} bands, with
/// DISW on and off wherever an explicit term is present (16 variants).
pub fn ablation_variants(base: &DistillConfig) -> Vec<Variant> {
    let mut out = vec![Variant {
        name: "baseline".into(),
        distill: DistillConfig {
            explicit: false,
            implicit: false,
            gamma_mode: GammaMode::None,
            ..*base
        },
    }];
    for (stream, explicit, implicit) in [
        ("explicit", true, false),
        ("implicit", false, true),
        ("both", true, true),
    ] {
        for band in Band::ALL {
            let disw_options: &[bool] = if explicit { &[true, false] } else { &[true] };
            for &disw in disw_options {
                let mut name = format!("{stream}-{band}");
                if explicit {
                    name.push_str(if disw { "-disw" } else { "-nodisw" });
                }
                out.push(Variant {
                    name,
                    distill: DistillConfig {
                        explicit,
                        implicit,
                        band,
                        disw,
                        gamma_mode: GammaMode::None,
                        ..*base
                    },
                });
            }
        }
    }
    out
}

pub const GAMMAS: [f64; 7] = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

/// Both sweep modes over [`GAMMAS`] (14 variants).
pub fn gamma_variants(base: &DistillConfig) -> Vec<Variant> {
    [GammaMode::Spectral, GammaMode::Stream]
        .into_iter()
        .flat_map(|mode| {
            GAMMAS.into_iter().map(move |gamma| Variant {
                name: format!("{mode}-{gamma}"),
                distill: DistillConfig {
                    gamma,
                    gamma_mode: mode,
                    ..*base
                },
            })
        })
        .collect()
}

/// Sample mean and sample standard deviation (n − 1; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Gradient checks of every objective term on a one-scene, narrow-width
/// instance derived from `cfg` (classes, basis and distillation weights).
pub fn gradcheck_suite(
    cfg: &ExperimentConfig,
    step: f64,
    tolerance: f64,
    floor: f64,
) -> Result<Vec<(String, GradCheckReport)>> {
    let taps = WaveletBasis::new(cfg.distill.basis).filter_len();
    let scene_cfg = SceneConfig {
        size: 32.max(8 * taps),
        max_box: 12,
        ..cfg.data.scene
    };
    let scene = generate_scene(&scene_cfg, cfg.data.seed);
    let k = scene_cfg.num_classes;
    let teacher = DetectorParams::init(DetectorConfig::new(4, 4, k), cfg.model.teacher_seed);
    let mut rng = Rng::stream(cfg.model.teacher_seed, 0x6c);
    let amplifiers = AmplifierSet::new(&teacher, HeadParams::init(&mut rng, 4, k))?;
    let basis = WaveletBasis::new(cfg.distill.basis);
    let target = TeacherTargets::build(&teacher, &amplifiers, &scene, &basis)?;
    let seed = cfg.seeds[0];
    let student = DetectorParams::init(DetectorConfig::new(3, 4, k), seed);
    let student_pyramid = student.features(&scene.image)?;
    let mut reports = Vec::new();

    // The explicit loss is quadratic in the features, so central differences
    // have no truncation error and a larger step only cuts roundoff.
    let explicit_step = step.max(1e-3);
    for (li, level) in student_pyramid.iter().enumerate() {
        let explicit_at = |x: &Tensor| -> Result<ExplicitLoss> {
            let mut levels = student_pyramid.clone();
            levels[li] = x.clone();
            explicit_loss_from_components(&target.components, &levels, Some(&target.disw), &basis, 1.0, 1.0)
        };
        let analytic = explicit_at(level)?.grads.swap_remove(li);
        let r = check_tensor(
            &format!("level{li}"),
            level,
            &analytic,
            |x| explicit_at(x).map_or(f64::NAN, |l| l.value),
            explicit_step,
            tolerance,
            floor,
        );
        reports.push((
            format!("explicit.level{li}"),
            single(r, explicit_step, tolerance, floor),
        ));

        let implicit_at = |x: &Tensor| -> Result<ImplicitLoss> {
            let mut levels = student_pyramid.clone();
            levels[li] = x.clone();
            implicit_loss_from_predictions(
                &target.full_predictions,
                &target.high_predictions,
                &levels,
                &amplifiers,
                &basis,
                1.0,
                1.0,
                true,
                true,
            )
        };
        let analytic = implicit_at(level)?.grads.swap_remove(li);
        let r = check_tensor(
            &format!("level{li}"),
            level,
            &analytic,
            |x| implicit_at(x).map_or(f64::NAN, |l| l.value),
            step,
            tolerance,
            floor,
        );
        reports.push((format!("implicit.level{li}"), single(r, step, tolerance, floor)));
    }

    let (_, det_grads) = loss_and_grads(&student, &scene)?;
    reports.push((
        "detection".into(),
        check_params(
            &student,
            &det_grads,
            |p| loss_and_grads(p, &scene).map_or(f64::NAN, |(l, _)| l.total()),
            step,
            tolerance,
            floor,
        ),
    ));

    let distill = DistillConfig {
        explicit: true,
        implicit: true,
        ..cfg.distill
    };
    let (_, total_grads) = total_distill_loss(&student, &scene, &target, &amplifiers, &distill)?;
    reports.push((
        "total".into(),
        check_params(
            &student,
            &total_grads,
            |p| total_distill_loss(p, &scene, &target, &amplifiers, &distill).map_or(f64::NAN, |(b, _)| b.total),
            step,
            tolerance,
            floor,
        ),
    ));
    Ok(reports)
}

fn single(report: TensorReport, step: f64, tolerance: f64, floor: f64) -> GradCheckReport {
    GradCheckReport {
        step,
        tolerance,
        floor,
        tensors: vec![report],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for (name, _) in PRESETS {
            ExperimentConfig::preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[distill]\nalpah = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml("[distill]\ngamma = 3.0\n").is_err());
    }

    #[test]
    fn default_preset_matches_default_struct() {
        assert_eq!(
            ExperimentConfig::preset("default").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn overrides_replace_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            no_disw: true,
            band: Some(Band::High),
            basis: Some(BasisKind::Db4),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.seeds, vec![9]);
        assert!(!cfg.distill.disw);
        assert_eq!(cfg.distill.band, Band::High);
        assert_eq!(cfg.distill.basis, BasisKind::Db4);
    }

    #[test]
    fn variant_counts() {
        let base = DistillConfig::default();
        let v = ablation_variants(&base);
        assert_eq!(v.len(), 16);
        let mut names: Vec<_> = v.iter().map(|x| x.name.clone()).collect();
        names.dedup();
        assert_eq!(names.len(), 16);
        assert_eq!(gamma_variants(&base).len(), 14);
    }

    #[test]
    fn sample_statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
