//! Brute-force oracles shared by the integration tests. Nothing here calls
//! into the code paths it is used to check.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use specdistill::detector::HeadParams;
use specdistill::disw::{BBox, ObjectAnnotation};
use specdistill::nn::{Conv, LEAK};
use specdistill::numcheck::reference_dwt2d;
use specdistill::rng::Rng;
use specdistill::tensor::{conv2d, Padding};
use specdistill::wavelet::WaveletBasis;
use specdistill::Tensor;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

fn naive_conv(conv: &Conv, x: &Tensor) -> Tensor {
    let mut y = conv2d(x, &conv.weight, conv.stride, Padding::Zero(conv.pad)).unwrap();
    let (_, h, w) = y.dims3("oracle").unwrap();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += conv.bias.data()[i / (h * w)];
    }
    y
}

fn leaky(x: Tensor) -> Tensor {
    x.map(|v| if v < 0.0 { LEAK * v } else { v })
}

/// Head outputs `(cls, reg)` through direct convolution loops.
pub fn naive_head(head: &HeadParams, feat: &Tensor) -> (Tensor, Tensor) {
    let a1 = leaky(naive_conv(&head.conv1, feat));
    let a2 = leaky(naive_conv(&head.conv2, &a1));
    (naive_conv(&head.cls, &a2), naive_conv(&head.reg, &a2))
}

/// Sum of the three detail bands of the reference transform, replicated
/// into 2×2 blocks.
pub fn naive_high_input(level: &Tensor, basis: &WaveletBasis) -> Tensor {
    let high = reference_dwt2d(level, basis).high;
    let [c, _, h, w] = high.shape()[..] else {
        panic!("detail bands are rank 4")
    };
    Tensor::from_fn(&[c, 2 * h, 2 * w], |i| {
        let (ch, rest) = (i / (4 * h * w), i % (4 * h * w));
        let (y, x) = (rest / (2 * w) / 2, rest % (2 * w) / 2);
        (0..3).map(|o| high.data()[((ch * 3 + o) * h + y) * w + x]).sum()
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean over cells of the Bernoulli KL (teacher as target) plus smooth-L1
/// (β = 1) between regression outputs.
pub fn naive_discrepancy(student: &(Tensor, Tensor), teacher: &(Tensor, Tensor)) -> f64 {
    let (_, h, w) = student.0.dims3("oracle").unwrap();
    let cells = (h * w) as f64;
    let mut kl = 0.0;
    for (&s, &t) in student.0.data().iter().zip(teacher.0.data()) {
        // Complements taken as σ(−x) so saturated logits keep their precision.
        let (p, p_bar, q, q_bar) = (sigmoid(t), sigmoid(-t), sigmoid(s), sigmoid(-s));
        kl += p * (p / q).ln() + p_bar * (p_bar / q_bar).ln();
    }
    let mut reg = 0.0;
    for (&s, &t) in student.1.data().iter().zip(teacher.1.data()) {
        let d = (s - t).abs();
        reg += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
    }
    (kl + reg) / cells
}

/// `λ·Σ full + μ·Σ high` over levels, every prediction materialised.
pub fn naive_implicit(
    teacher: &[Tensor],
    student: &[Tensor],
    full: &HeadParams,
    high: &HeadParams,
    basis: &WaveletBasis,
    lambda: f64,
    mu: f64,
) -> f64 {
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        total += lambda * naive_discrepancy(&naive_head(full, s), &naive_head(full, t));
        total += mu
            * naive_discrepancy(
                &naive_head(high, &naive_high_input(s, basis)),
                &naive_head(high, &naive_high_input(t, basis)),
            );
    }
    total
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact excess weights as integer numerators over a shared denominator.
pub struct ExactDisw {
    pub denominator: u128,
    pub numerators: Vec<u128>,
    pub projected: usize,
}

/// Cells whose area overlaps the scaled box, plus the cell holding its
/// centre; computed cell by cell.
pub fn naive_cells(bbox: &BBox, image: (usize, usize), grid: (usize, usize)) -> Vec<usize> {
    let (ch, cw) = (image.0 as f64 / grid.0 as f64, image.1 as f64 / grid.1 as f64);
    let (cy, cx) = ((bbox.y1 + bbox.y2) / 2.0, (bbox.x1 + bbox.x2) / 2.0);
    let centre = (
        ((cy / ch).floor() as usize).min(grid.0 - 1),
        ((cx / cw).floor() as usize).min(grid.1 - 1),
    );
    let mut cells = Vec::new();
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let overlaps = (r as f64) * ch < bbox.y2
                && ((r + 1) as f64) * ch > bbox.y1
                && (c as f64) * cw < bbox.x2
                && ((c + 1) as f64) * cw > bbox.x1;
            if overlaps || (r, c) == centre {
                cells.push(r * grid.1 + c);
            }
        }
    }
    cells
}

pub fn exact_disw(annotations: &[ObjectAnnotation], image: (usize, usize), grid: (usize, usize)) -> ExactDisw {
    let sets: Vec<Vec<usize>> = annotations.iter().map(|a| naive_cells(&a.bbox, image, grid)).collect();
    let denominator = sets
        .iter()
        .fold(1u128, |l, s| l / gcd(l, s.len() as u128) * s.len() as u128);
    let mut numerators = vec![0u128; grid.0 * grid.1];
    for s in &sets {
        for &cell in s {
            numerators[cell] += denominator / s.len() as u128;
        }
    }
    ExactDisw {
        denominator,
        numerators,
        projected: sets.iter().filter(|s| !s.is_empty()).count(),
    }
}

/// Random in-bounds boxes on a quarter-pixel lattice, biased towards small
/// and overlapping objects.
pub fn random_annotations(rng: &mut Rng, image: usize, count: usize) -> Vec<ObjectAnnotation> {
    (0..count)
        .map(|_| {
            let w = rng.int_inclusive(1, 4 * image / 2) as f64 / 4.0;
            let h = rng.int_inclusive(1, 4 * image / 2) as f64 / 4.0;
            let x1 = rng.int_inclusive(0, (4.0 * (image as f64 - w)) as usize) as f64 / 4.0;
            let y1 = rng.int_inclusive(0, (4.0 * (image as f64 - h)) as usize) as f64 / 4.0;
            ObjectAnnotation::new(rng.int_inclusive(0, 2), BBox::new(x1, y1, x1 + w, y1 + h))
        })
        .collect()
}

pub fn cli(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_specdistill"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("cli binary runs")
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub const SUBCOMMANDS: [&[&str]; 7] = [
    &["gen-data"],
    &["train-teacher"],
    &["train-amplifier"],
    &["distill", "--dump-features"],
    &["ablate", "--variants", "baseline,both-both-disw,implicit-high"],
    &["sweep-gamma"],
    &["gradcheck"],
];

/// Runs every subcommand on the smoke preset into `out`; returns the
/// failing invocations.
pub fn run_smoke_pipeline(out: &Path) -> Vec<String> {
    let mut failures = Vec::new();
    for sub in SUBCOMMANDS {
        let mut args = vec!["--config", "smoke"];
        args.extend_from_slice(sub);
        let o = cli(&args, out);
        if !o.status.success() {
            failures.push(format!("{sub:?}: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    failures
}
