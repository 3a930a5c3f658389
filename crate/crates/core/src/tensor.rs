//! Dense row-major `f64` tensors.
//!
//! The tensor type is deliberately small: explicit shapes, no broadcasting,
//! and only the handful of operations the wavelet, detector and distillation
//! code need. The raw dump format is shared by checkpoints and the
//! `--dump-features` CLI flag:
//!
//! ```text
//! {"shape":[2,2],"dtype":"f64","byte_order":"little"}\n
//! <product(shape) little-endian IEEE-754 binary64 values>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating extents, length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(
                "tensor",
                format!("non-finite value {} at flat index {i}", data[i]),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Length-checked constructor for internal hot paths; finiteness is left
    /// to the caller (training loops check their losses).
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert!(!shape.is_empty() && shape.iter().product::<usize>() == data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interprets the tensor as `C×H×W`.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(op, format!("expected C×H×W, got {:?}", self.shape))),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn ensure_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Raw little-endian payload bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::decode(&bytes)
    }

    /// Encodes into the dump format (header line plus payload).
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.shape.is_empty() {
            return Err(Error::Format("empty shape".into()));
        }
        let header = DumpHeader {
            shape: self.shape.clone(),
            dtype: DTYPE_TAG.to_string(),
            byte_order: BYTE_ORDER_TAG.to_string(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend(self.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Tensor> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header terminator".into()))?;
        let header: DumpHeader =
            serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::Format(format!("corrupt header: {e}")))?;
        if header.dtype != DTYPE_TAG {
            return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
        }
        if header.byte_order != BYTE_ORDER_TAG {
            return Err(Error::Format(format!("unsupported byte order {:?}", header.byte_order)));
        }
        if header.shape.is_empty() || header.shape.contains(&0) {
            return Err(Error::Format(format!("invalid shape {:?}", header.shape)));
        }
        let numel = header
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("shape overflows".into()))?;
        let payload = &bytes[newline + 1..];
        if payload.len() != numel * 8 {
            return Err(Error::Format(format!(
                "payload is {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                numel * 8
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(header.shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

const DTYPE_TAG: &str = "f64";
const BYTE_ORDER_TAG: &str = "little";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpHeader {
    shape: Vec<usize>,
    dtype: String,
    byte_order: String,
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            "tensor",
            format!("extents must be a non-empty list of positive values, got {shape:?}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of the given width on every spatial side.
    Zero(usize),
    /// Circular extension; output extent is `ceil(n / stride)`.
    Periodic,
}

/// Direct cross-correlation of a `C×H×W` input with a `O×C×kh×kw` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (c, h, w) = input.dims3("conv2d")?;
    let (o, kc, kh, kw) = match kernel.shape()[..] {
        [o, kc, kh, kw] => (o, kc, kh, kw),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be O×C×kh×kw, got {:?}", kernel.shape()),
            ))
        }
    };
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {kc} input channels, input has {c}"),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be at least 1"));
    }
    let (oh, ow, pad) = match padding {
        Padding::Zero(p) => {
            if kh > h + 2 * p || kw > w + 2 * p {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}×{kw} exceeds padded input {}×{}", h + 2 * p, w + 2 * p),
                ));
            }
            ((h + 2 * p - kh) / stride + 1, (w + 2 * p - kw) / stride + 1, p)
        }
        Padding::Periodic => {
            if kh > h || kw > w {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}×{kw} exceeds periodic input {h}×{w}"),
                ));
            }
            ((h - 1) / stride + 1, (w - 1) / stride + 1, 0)
        }
    };
    let kd = kernel.data();
    let xd = input.data();
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let (iy, ix) = match padding {
                                Padding::Zero(_) => {
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    (iy as usize, ix as usize)
                                }
                                Padding::Periodic => (iy as usize % h, ix as usize % w),
                            };
                            acc += kd[((oc * c + ic) * kh + ky) * kw + kx] * xd[(ic * h + iy) * w + ix];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out)
}

/// Replicates every cell of the trailing two axes into a 2×2 block.
pub fn upsample_nearest2x(input: &Tensor) -> Tensor {
    let rank = input.rank();
    assert!(rank >= 2, "upsample needs at least two axes");
    let (h, w) = (input.shape[rank - 2], input.shape[rank - 1]);
    let planes = input.len() / (h * w);
    let mut shape = input.shape.clone();
    shape[rank - 2] = 2 * h;
    shape[rank - 1] = 2 * w;
    let mut data = vec![0.0; input.len() * 4];
    for p in 0..planes {
        let src = &input.data[p * h * w..(p + 1) * h * w];
        let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    Tensor { shape, data }
}

/// Sums each 2×2 block of the trailing two axes; the adjoint of
/// [`upsample_nearest2x`]. Trailing extents must be even.
pub fn sum_pool2x(input: &Tensor) -> Result<Tensor> {
    let rank = input.rank();
    if rank < 2 {
        return Err(Error::shape("sum_pool2x", "needs at least two axes"));
    }
    let (h2, w2) = (input.shape[rank - 2], input.shape[rank - 1]);
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape("sum_pool2x", format!("odd trailing extents {h2}×{w2}")));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let planes = input.len() / (h2 * w2);
    let mut shape = input.shape.clone();
    shape[rank - 2] = h;
    shape[rank - 1] = w;
    let mut data = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &input.data[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut data[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    Ok(Tensor { shape, data })
}

pub fn avg_pool2x(input: &Tensor) -> Result<Tensor> {
    Ok(sum_pool2x(input)?.scale(0.25))
}
