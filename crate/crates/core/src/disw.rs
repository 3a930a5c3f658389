//! Density-independent scale weights.
//!
//! Every cell of a feature grid starts at weight 1. Each object adds
//! `1/|D|` to each of the `|D|` cells its box covers, so an object's total
//! excess weight is exactly 1 however large it is, and overlapping objects
//! accumulate instead of clipping.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in image pixels, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub class_id: usize,
    pub bbox: BBox,
}

impl ObjectAnnotation {
    pub fn new(class_id: usize, bbox: BBox) -> Self {
        Self { class_id, bbox }
    }

    /// Checks ordering, finiteness and that the box lies in an
    /// `height×width` image.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let b = &self.bbox;
        let finite = [b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite());
        if !finite || b.x1 >= b.x2 || b.y1 >= b.y2 {
            return Err(Error::Annotation(format!("degenerate box {b:?}")));
        }
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > width as f64 || b.y2 > height as f64 {
            return Err(Error::Annotation(format!(
                "box {b:?} leaves the {height}×{width} image"
            )));
        }
        Ok(())
    }
}

/// Spatial extents `(rows, cols)`.
pub type GridSize = (usize, usize);

/// Cells `(row, col)` whose area intersects the box once scaled onto the
/// grid, in row-major order.
pub fn project_box(ann: &ObjectAnnotation, image: GridSize, grid: GridSize) -> Result<Vec<(usize, usize)>> {
    ann.validate(image.0, image.1)?;
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 {
        return Err(Error::Annotation("empty grid".into()));
    }
    let sy = rows as f64 / image.0 as f64;
    let sx = cols as f64 / image.1 as f64;
    let b = &ann.bbox;
    let span = |lo: f64, hi: f64, scale: f64, n: usize| -> (usize, usize) {
        let first = ((lo * scale).floor() as usize).min(n - 1);
        let last = ((hi * scale).ceil() as usize).clamp(first + 1, n) - 1;
        let center = (((lo + hi) * 0.5 * scale).floor() as usize).min(n - 1);
        (first.min(center), last.max(center))
    };
    let (r0, r1) = span(b.y1, b.y2, sy, rows);
    let (c0, c1) = span(b.x1, b.x2, sx, cols);
    Ok((r0..=r1).flat_map(|r| (c0..=c1).map(move |c| (r, c))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiswMap {
    /// `rows×cols` weights, all ≥ 1.
    pub weights: Tensor,
    /// Image pixels per grid cell along x.
    pub grid_stride: f64,
}

impl DiswMap {
    pub fn uniform(grid: GridSize, grid_stride: f64) -> Self {
        Self {
            weights: Tensor::full(&[grid.0, grid.1], 1.0),
            grid_stride,
        }
    }

    pub fn grid(&self) -> GridSize {
        (self.weights.shape()[0], self.weights.shape()[1])
    }
}

/// Builds the weight map for one image on a `grid` of cells.
pub fn build_disw(annotations: &[ObjectAnnotation], image: GridSize, grid: GridSize) -> Result<DiswMap> {
    let mut weights = Tensor::full(&[grid.0, grid.1], 1.0);
    let cols = grid.1;
    for ann in annotations {
        let cells = project_box(ann, image, grid)?;
        let share = 1.0 / cells.len() as f64;
        let w = weights.data_mut();
        for (r, c) in cells {
            w[r * cols + c] += share;
        }
    }
    Ok(DiswMap {
        weights,
        grid_stride: image.1 as f64 / grid.1 as f64,
    })
}

/// One line of an annotation file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: usize,
    pub class_id: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl AnnotationRecord {
    pub fn annotation(&self) -> ObjectAnnotation {
        ObjectAnnotation::new(self.class_id, BBox::new(self.x1, self.y1, self.x2, self.y2))
    }

    pub fn from_annotation(image_id: usize, ann: &ObjectAnnotation) -> Self {
        Self {
            image_id,
            class_id: ann.class_id,
            x1: ann.bbox.x1,
            y1: ann.bbox.y1,
            x2: ann.bbox.x2,
            y2: ann.bbox.y2,
        }
    }

    /// Parses either a JSON object or six whitespace/comma separated fields
    /// `image_id class_id x1 y1 x2 y2`.
    pub fn parse_line(line: &str) -> Result<Self> {
        let trimmed = line.trim();
        if trimmed.starts_with('{') {
            return serde_json::from_str(trimmed)
                .map_err(|e| Error::Annotation(format!("bad JSON record {trimmed:?}: {e}")));
        }
        let fields: Vec<&str> = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != 6 {
            return Err(Error::Annotation(format!(
                "expected 6 fields, got {} in {trimmed:?}",
                fields.len()
            )));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Annotation(format!("bad integer {s:?}: {e}")))
        };
        let real = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Annotation(format!("bad number {s:?}: {e}")))
        };
        Ok(Self {
            image_id: int(fields[0])?,
            class_id: int(fields[1])?,
            x1: real(fields[2])?,
            y1: real(fields[3])?,
            x2: real(fields[4])?,
            y2: real(fields[5])?,
        })
    }
}

/// Reads an annotation file; blank lines and `#` comments are skipped.
pub fn read_annotation_file(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(AnnotationRecord::parse_line(t)?);
    }
    Ok(out)
}

/// Writes records as JSON lines.
pub fn write_annotation_file(path: impl AsRef<Path>, records: &[AnnotationRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(x1: f64, y1: f64, x2: f64, y2: f64) -> ObjectAnnotation {
        ObjectAnnotation::new(0, BBox::new(x1, y1, x2, y2))
    }

    #[test]
    fn quarter_box_projection() {
        let cells = project_box(&ann(0., 0., 32., 32.), (64, 64), (4, 4)).unwrap();
        assert_eq!(cells, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn tiny_and_full_boxes() {
        let cells = project_box(&ann(20., 20., 21., 22.), (64, 64), (4, 4)).unwrap();
        assert_eq!(cells, vec![(1, 1)]);
        let all = project_box(&ann(0., 0., 64., 64.), (64, 64), (4, 4)).unwrap();
        assert_eq!(all.len(), 16);
    }

    #[test]
    fn rejects_out_of_bounds() {
        assert!(project_box(&ann(-1., 0., 10., 10.), (64, 64), (4, 4)).is_err());
        assert!(project_box(&ann(0., 0., 65., 10.), (64, 64), (4, 4)).is_err());
        assert!(project_box(&ann(5., 0., 5., 10.), (64, 64), (4, 4)).is_err());
    }

    #[test]
    fn empty_is_all_ones() {
        let m = build_disw(&[], (64, 64), (8, 8)).unwrap();
        assert!(m.weights.data().iter().all(|&v| v == 1.0));
        assert_eq!(m.grid_stride, 8.0);
    }

    #[test]
    fn single_and_overlapping_objects() {
        // Box covering cells (0,0),(0,1) on a 4×4 grid over 64 px.
        let a = ann(0., 0., 32., 16.);
        let m = build_disw(&[a], (64, 64), (4, 4)).unwrap();
        let w = m.weights.data();
        assert_eq!(w[0], 1.5);
        assert_eq!(w[1], 1.5);
        assert_eq!(w.iter().filter(|&&v| v == 1.0).count(), 14);

        let b = ann(16., 0., 48., 16.);
        let m = build_disw(&[a, b], (64, 64), (4, 4)).unwrap();
        let w = m.weights.data();
        assert_eq!(w[0], 1.5);
        assert_eq!(w[1], 2.0);
        assert_eq!(w[2], 1.5);
    }

    #[test]
    fn parses_both_line_formats() {
        let r = AnnotationRecord::parse_line("3, 1, 0.5, 1, 10, 12.5").unwrap();
        assert_eq!(r.image_id, 3);
        assert_eq!(r.y2, 12.5);
        let j = serde_json::to_string(&r).unwrap();
        assert_eq!(AnnotationRecord::parse_line(&j).unwrap(), r);
        assert!(AnnotationRecord::parse_line("1 2 3").is_err());
    }
}
