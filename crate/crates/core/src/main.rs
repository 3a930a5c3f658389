//! `specdistill` command-line driver.
//!
//! Flags given on the command line override the matching keys of the
//! configuration file; everything else comes from the file (or a shipped
//! preset name such as `default` or `retinanet-dior`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use specdistill::checkpoint;
use specdistill::detector::{write_dataset, DetectorParams, HeadParams};
use specdistill::distill::{AmplifierSet, Band, EpochRecord};
use specdistill::experiment::{
    ablation_variants, datasets, gamma_variants, gradcheck_suite, mean_std, train_amplifiers, train_teacher,
    ExperimentConfig, Overrides, Variant, Workbench,
};
use specdistill::nn::ParamSet;
use specdistill::numcheck::{DEFAULT_FLOOR, DEFAULT_STEP};
use specdistill::wavelet::BasisKind;
use specdistill::{Error, Execution, Result};

/// Version tag written as the first line of every CSV file.
const CSV_SCHEMA: &str = "# schema: specdistill-csv v1";

#[derive(Parser, Debug)]
#[command(
    name = "specdistill",
    version,
    about = "Spectral distillation experiments on synthetic dense scenes"
)]
struct Cli {
    /// TOML configuration file or preset name.
    #[arg(long, global = true, default_value = "default")]
    config: String,
    /// Run a single student seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write teacher and student pyramid features of the first validation scene.
    #[arg(long, global = true)]
    dump_features: bool,
    /// Drop the explicit (wavelet feature) terms.
    #[arg(long, global = true)]
    no_explicit: bool,
    /// Drop the implicit (amplifier prediction) terms.
    #[arg(long, global = true)]
    no_implicit: bool,
    /// Weight every cell equally in the explicit terms.
    #[arg(long, global = true)]
    no_disw: bool,
    /// Frequency bands to distill: `low`, `high` or `both`.
    #[arg(long, global = true, value_parser = parse_band)]
    band: Option<Band>,
    /// Wavelet basis: `haar`, `db4` or `sym4`.
    #[arg(long, global = true, value_parser = parse_basis)]
    basis: Option<BasisKind>,
    /// `parallel` (default) or `sequential`.
    #[arg(long, global = true, default_value = "parallel")]
    exec: Execution,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training and validation scenes.
    GenData,
    /// Train the teacher detector.
    TrainTeacher,
    /// Train the high-frequency knowledge amplifier on the teacher's features.
    TrainAmplifier,
    /// Distill one student per seed under the configured objective.
    Distill,
    /// Run the ablation matrix.
    Ablate {
        /// Comma-separated subset of variant names.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Sweep γ in both re-weighting modes.
    SweepGamma,
    /// Finite-difference checks of every objective term.
    Gradcheck {
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn parse_band(s: &str) -> std::result::Result<Band, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_basis(s: &str) -> std::result::Result<BasisKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Divergence { .. } => 3,
                _ => 1,
            })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        no_explicit: cli.no_explicit,
        no_implicit: cli.no_implicit,
        no_disw: cli.no_disw,
        band: cli.band,
        basis: cli.basis,
    })?;
    let out = cfg.out.clone();
    create_dir(&out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let exec = cli.exec;

    match &cli.command {
        Command::GenData => {
            let (train, val) = datasets(&cfg);
            write_dataset(out.join("data/train"), &train)?;
            write_dataset(out.join("data/val"), &val)?;
            eprintln!("wrote {} training and {} validation scenes", train.len(), val.len());
        }
        Command::TrainTeacher => {
            let (train, val) = datasets(&cfg);
            teacher(&cfg, &train, &val, exec)?;
        }
        Command::TrainAmplifier => {
            let (train, val) = datasets(&cfg);
            let (t, _) = teacher(&cfg, &train, &val, exec)?;
            amplifiers(&cfg, &t, &train, exec)?;
        }
        Command::Distill => {
            let bench = workbench(&cfg, exec)?;
            let variant = Variant {
                name: "distill".into(),
                distill: cfg.distill,
            };
            let rows = run_variants(&bench, &[variant], &out, exec, cli.dump_features)?;
            write_summaries(&out.join("distill"), &rows)?;
        }
        Command::Ablate { variants } => {
            let bench = workbench(&cfg, exec)?;
            let mut all = ablation_variants(&cfg.distill);
            if !variants.is_empty() {
                if let Some(bad) = variants.iter().find(|v| !all.iter().any(|a| &a.name == *v)) {
                    return Err(Error::Config(format!("unknown ablation variant `{bad}`")));
                }
                all.retain(|a| variants.contains(&a.name));
            }
            let rows = run_variants(&bench, &all, &out.join("ablate"), exec, cli.dump_features)?;
            write_summaries(&out.join("ablate"), &rows)?;
        }
        Command::SweepGamma => {
            let bench = workbench(&cfg, exec)?;
            let mut variants = vec![Variant {
                name: "reference".into(),
                distill: cfg.distill,
            }];
            variants.extend(gamma_variants(&cfg.distill));
            let dir = out.join("sweep-gamma");
            let rows = run_variants(&bench, &variants, &dir, exec, cli.dump_features)?;
            write_summaries(&dir, &rows)?;
            check_gamma_identity(&rows)?;
        }
        Command::Gradcheck { tolerance } => {
            let reports = gradcheck_suite(&cfg, DEFAULT_STEP, *tolerance, DEFAULT_FLOOR)?;
            let dir = out.join("gradcheck");
            create_dir(&dir)?;
            let mut worst: f64 = 0.0;
            let mut passed = true;
            for (name, r) in &reports {
                eprintln!(
                    "{name}: max relative error {:.3e} ({})",
                    r.max_rel_error(),
                    if r.passed() { "ok" } else { "FAIL" }
                );
                worst = worst.max(r.max_rel_error());
                passed &= r.passed();
            }
            let body: Vec<_> = reports
                .iter()
                .map(|(n, r)| json!({"term": n, "passed": r.passed(), "max_rel_error": r.max_rel_error(), "report": r}))
                .collect();
            write_json(
                &dir.join("report.json"),
                &json!({"passed": passed, "max_rel_error": worst, "terms": body}),
            )?;
            if !passed {
                return Err(Error::Invariant(format!(
                    "gradient check failed: max relative error {worst:.3e} > {tolerance:.1e}"
                )));
            }
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{CSV_SCHEMA}").expect("in-memory write");
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn teacher_meta(cfg: &ExperimentConfig) -> serde_json::Value {
    json!({"role": "teacher", "data": cfg.data, "model": cfg.model, "optimizer": cfg.teacher})
}

/// Loads the teacher checkpoint under `out/teacher` when it was produced by
/// the same data/model/optimizer settings, otherwise trains and saves it.
fn teacher(
    cfg: &ExperimentConfig,
    train: &[specdistill::detector::SyntheticScene],
    val: &[specdistill::detector::SyntheticScene],
    exec: Execution,
) -> Result<(DetectorParams, Vec<f64>)> {
    let dir = cfg.out.join("teacher");
    let ckpt = dir.join("checkpoint");
    let meta = teacher_meta(cfg);
    if let Ok(m) = checkpoint::read_manifest(&ckpt) {
        if m.meta == meta {
            let mut p = DetectorParams::init(cfg.teacher_config(), 0);
            checkpoint::load_into(&ckpt, &mut p)?;
            eprintln!("loaded teacher from {}", ckpt.display());
            let trace = read_teacher_trace(&dir)?;
            return Ok((p, trace));
        }
    }
    let (p, trace) = train_teacher(cfg, train, val, exec)?;
    checkpoint::save(&ckpt, &p, meta)?;
    #[derive(Serialize)]
    struct Row {
        epoch: usize,
        val_ap50: f64,
    }
    let rows: Vec<Row> = trace
        .iter()
        .enumerate()
        .map(|(epoch, &val_ap50)| Row { epoch, val_ap50 })
        .collect();
    write_csv(&dir.join("trace.csv"), &rows)?;
    write_json(
        &dir.join("summary.json"),
        &json!({"final_val_ap50": trace.last().copied().unwrap_or(0.0), "checksum": p.checksum()}),
    )?;
    Ok((p, trace))
}

fn read_teacher_trace(dir: &Path) -> Result<Vec<f64>> {
    let path = dir.join("trace.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| Error::Format(e.to_string()))?;
            r.get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad row in {}", path.display())))
        })
        .collect()
}

fn amplifiers(
    cfg: &ExperimentConfig,
    teacher: &DetectorParams,
    train: &[specdistill::detector::SyntheticScene],
    exec: Execution,
) -> Result<AmplifierSet> {
    let ckpt = cfg.out.join("amplifier/checkpoint");
    let meta = json!({
        "role": "high-frequency amplifier",
        "teacher": teacher.checksum(),
        "basis": cfg.distill.basis,
        "optimizer": cfg.amplifier_optimizer(),
        "data": cfg.data,
    });
    if let Ok(m) = checkpoint::read_manifest(&ckpt) {
        if m.meta == meta {
            let mut high = HeadParams::init(
                &mut specdistill::rng::Rng::new(0),
                cfg.model.pyramid_width,
                cfg.data.scene.num_classes,
            );
            checkpoint::load_into(&ckpt, &mut high)?;
            eprintln!("loaded amplifier from {}", ckpt.display());
            return AmplifierSet::new(teacher, high);
        }
    }
    let set = train_amplifiers(cfg, teacher, train, exec)?;
    checkpoint::save(&ckpt, &set.high, meta)?;
    Ok(set)
}

fn workbench(cfg: &ExperimentConfig, exec: Execution) -> Result<Workbench> {
    let (train, val) = datasets(cfg);
    let (t, trace) = teacher(cfg, &train, &val, exec)?;
    let amps = amplifiers(cfg, &t, &train, exec)?;
    Workbench::from_parts(cfg.clone(), train, val, t, trace, amps, exec)
}

#[derive(Debug, Clone, Serialize)]
struct RunRow {
    variant: String,
    seed: u64,
    final_val_ap50: f64,
    final_det: f64,
    final_ex_low: f64,
    final_ex_high: f64,
    final_im_full: f64,
    final_im_high: f64,
    checksum: String,
}

#[derive(Serialize)]
struct TraceRow<'a> {
    variant: &'a str,
    seed: u64,
    epoch: usize,
    det: f64,
    ex_low: f64,
    ex_high: f64,
    im_full: f64,
    im_high: f64,
    total: f64,
    val_ap50: f64,
}

fn run_variants(
    bench: &Workbench,
    variants: &[Variant],
    dir: &Path,
    exec: Execution,
    dump_features: bool,
) -> Result<Vec<RunRow>> {
    let mut rows = Vec::new();
    for v in variants {
        for &seed in &bench.config.seeds {
            let run_dir = dir.join(&v.name).join(format!("seed-{seed}"));
            create_dir(&run_dir)?;
            let run = bench.run_student(&v.distill, seed, exec)?;
            let trace: Vec<TraceRow> = run
                .trace
                .iter()
                .map(|r| TraceRow {
                    variant: &v.name,
                    seed,
                    epoch: r.epoch,
                    det: r.det,
                    ex_low: r.ex_low,
                    ex_high: r.ex_high,
                    im_full: r.im_full,
                    im_high: r.im_high,
                    total: r.total,
                    val_ap50: r.val_ap50,
                })
                .collect();
            write_csv(&run_dir.join("trace.csv"), &trace)?;
            checkpoint::save(
                run_dir.join("checkpoint"),
                &run.student,
                json!({"role": "student", "variant": v.name, "seed": seed, "distill": v.distill}),
            )?;
            if dump_features {
                dump_pyramids(bench, &run.student, &run_dir.join("features"))?;
            }
            let last = run.trace.last().copied();
            let pick = |f: fn(&EpochRecord) -> f64| last.as_ref().map_or(0.0, f);
            eprintln!("{} seed {seed}: final val AP50 {:.4}", v.name, run.final_ap50());
            rows.push(RunRow {
                variant: v.name.clone(),
                seed,
                final_val_ap50: run.final_ap50(),
                final_det: pick(|r| r.det),
                final_ex_low: pick(|r| r.ex_low),
                final_ex_high: pick(|r| r.ex_high),
                final_im_full: pick(|r| r.im_full),
                final_im_high: pick(|r| r.im_high),
                checksum: run.student.checksum(),
            });
        }
    }
    Ok(rows)
}

fn dump_pyramids(bench: &Workbench, student: &DetectorParams, dir: &Path) -> Result<()> {
    let Some(scene) = bench.val.first() else {
        return Ok(());
    };
    create_dir(dir)?;
    for (who, params) in [("teacher", &bench.teacher), ("student", student)] {
        for (level, t) in params.features(&scene.image)?.iter().enumerate() {
            t.dump(dir.join(format!("{who}-level{level}.f64")))?;
        }
    }
    Ok(())
}

fn write_summaries(dir: &Path, rows: &[RunRow]) -> Result<()> {
    create_dir(dir)?;
    write_csv(&dir.join("summary.csv"), rows)?;
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    let variants: Vec<_> = names
        .iter()
        .map(|name| {
            let aps: Vec<f64> = rows.iter().filter(|r| r.variant == *name).map(|r| r.final_val_ap50).collect();
            let (mean, std) = mean_std(&aps);
            json!({"variant": name, "seeds": aps.len(), "final_val_ap50_mean": mean, "final_val_ap50_std": std, "final_val_ap50": aps})
        })
        .collect();
    write_json(&dir.join("summary.json"), &json!({"variants": variants}))
}

/// γ = 1 must reproduce the unswept reference in both modes.
fn check_gamma_identity(rows: &[RunRow]) -> Result<()> {
    for r in rows.iter().filter(|r| r.variant.ends_with("-1")) {
        let reference = rows
            .iter()
            .find(|x| x.variant == "reference" && x.seed == r.seed)
            .expect("reference run per seed");
        if r.checksum != reference.checksum || r.final_val_ap50.to_bits() != reference.final_val_ap50.to_bits() {
            return Err(Error::Invariant(format!(
                "{} seed {} differs from the unswept reference",
                r.variant, r.seed
            )));
        }
    }
    Ok(())
}
