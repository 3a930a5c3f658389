use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu_backward_inplace, leaky_relu_inplace, push_conv, push_conv_mut, Conv, ConvCache, ParamSet};
use crate::rng::Rng;
use crate::tensor::{sum_pool2x, upsample_nearest2x, Tensor};

/// Output strides of the two pyramid levels.
pub const STRIDES: [usize; 2] = [4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub backbone_width: usize,
    pub pyramid_width: usize,
    pub num_classes: usize,
}

impl DetectorConfig {
    pub fn new(backbone_width: usize, pyramid_width: usize, num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            backbone_width,
            pyramid_width,
            num_classes,
        }
    }
}

/// Per-level classification logits (`K×h×w`) and regression distances
/// (`4×h×w`, order l, t, r, b).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub cls: Tensor,
    pub reg: Tensor,
}

impl Prediction {
    pub fn zeros_like(other: &Prediction) -> Self {
        Self {
            cls: Tensor::zeros_like(&other.cls),
            reg: Tensor::zeros_like(&other.reg),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.cls.shape()[1], self.cls.shape()[2])
    }
}

/// Shared detection head: two 3×3 conv + leaky-ReLU layers, then 1×1 classification
/// and regression branches. Knowledge amplifiers use the same topology.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub conv1: Conv,
    pub conv2: Conv,
    pub cls: Conv,
    pub reg: Conv,
}

pub type AmplifierHead = HeadParams;

pub struct HeadCache {
    c1: ConvCache,
    a1: Tensor,
    c2: ConvCache,
    a2: Tensor,
    cls: ConvCache,
    reg: ConvCache,
}

impl HeadParams {
    pub fn init(rng: &mut Rng, width: usize, num_classes: usize) -> Self {
        Self {
            conv1: Conv::he_init(rng, width, width, 3, 1, 1),
            conv2: Conv::he_init(rng, width, width, 3, 1, 1),
            cls: Conv::he_init(rng, num_classes, width, 1, 1, 0),
            reg: Conv::he_init(rng, 4, width, 1, 1, 0),
        }
    }

    pub fn width(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn num_classes(&self) -> usize {
        self.cls.out_channels()
    }

    pub fn forward(&self, feat: &Tensor) -> Result<(Prediction, HeadCache)> {
        let (c, _, _) = feat.dims3("head forward")?;
        if c != self.width() {
            return Err(Error::shape(
                "head forward",
                format!("head expects {} channels, feature has {c}", self.width()),
            ));
        }
        let (mut a1, c1) = self.conv1.forward(feat)?;
        leaky_relu_inplace(&mut a1);
        let (mut a2, c2) = self.conv2.forward(&a1)?;
        leaky_relu_inplace(&mut a2);
        let (cls, cls_cache) = self.cls.forward(&a2)?;
        let (reg, reg_cache) = self.reg.forward(&a2)?;
        Ok((
            Prediction { cls, reg },
            HeadCache {
                c1,
                a1,
                c2,
                a2,
                cls: cls_cache,
                reg: reg_cache,
            },
        ))
    }

    pub fn predict(&self, feat: &Tensor) -> Result<Prediction> {
        Ok(self.forward(feat)?.0)
    }

    /// Returns the gradient with respect to the input feature map.
    /// Parameter gradients are accumulated into `grads` when given.
    pub fn backward(&self, cache: &HeadCache, grad: &Prediction, mut grads: Option<&mut HeadParams>) -> Result<Tensor> {
        let mut ga2 = self
            .cls
            .backward(&cache.cls, &grad.cls, grads.as_deref_mut().map(|g| &mut g.cls), true)?
            .expect("input gradient requested");
        let from_reg = self
            .reg
            .backward(&cache.reg, &grad.reg, grads.as_deref_mut().map(|g| &mut g.reg), true)?
            .expect("input gradient requested");
        ga2.add_assign(&from_reg)?;
        leaky_relu_backward_inplace(&mut ga2, &cache.a2);
        let mut ga1 = self
            .conv2
            .backward(&cache.c2, &ga2, grads.as_deref_mut().map(|g| &mut g.conv2), true)?
            .expect("input gradient requested");
        leaky_relu_backward_inplace(&mut ga1, &cache.a1);
        Ok(self
            .conv1
            .backward(&cache.c1, &ga1, grads.map(|g| &mut g.conv1), true)?
            .expect("input gradient requested"))
    }
}

impl ParamSet for HeadParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_conv(&mut out, "head.conv1", &self.conv1);
        push_conv(&mut out, "head.conv2", &self.conv2);
        push_conv(&mut out, "head.cls", &self.cls);
        push_conv(&mut out, "head.reg", &self.reg);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        push_conv_mut(&mut out, &mut self.conv1);
        push_conv_mut(&mut out, &mut self.conv2);
        push_conv_mut(&mut out, &mut self.cls);
        push_conv_mut(&mut out, &mut self.reg);
        out
    }
}

/// Backbone (four 3×3 convs, three of them stride 2), a two-level top-down
/// pyramid at strides 4 and 8, and the shared head.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub config: DetectorConfig,
    pub stem: Conv,
    pub stage2: Conv,
    pub stage2b: Conv,
    pub stage3: Conv,
    pub lateral4: Conv,
    pub lateral8: Conv,
    pub merge4: Conv,
    pub head: HeadParams,
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache {
    stem: ConvCache,
    a1: Tensor,
    stage2: ConvCache,
    a2: Tensor,
    stage2b: ConvCache,
    a3: Tensor,
    stage3: ConvCache,
    a4: Tensor,
    lateral4: ConvCache,
    lateral8: ConvCache,
    merge4: ConvCache,
    heads: Vec<HeadCache>,
}

pub struct ForwardOutput {
    pub pyramid: Vec<Tensor>,
    pub predictions: Vec<Prediction>,
    pub cache: ForwardCache,
}

impl DetectorParams {
    /// He-normal initialisation from `seed`.
    pub fn init(config: DetectorConfig, seed: u64) -> Self {
        let mut rng = Rng::stream(seed, 0x05ee_dde7);
        let (b, p) = (config.backbone_width, config.pyramid_width);
        Self {
            config,
            stem: Conv::he_init(&mut rng, b, config.in_channels, 3, 2, 1),
            stage2: Conv::he_init(&mut rng, b, b, 3, 2, 1),
            stage2b: Conv::he_init(&mut rng, b, b, 3, 1, 1),
            stage3: Conv::he_init(&mut rng, b, b, 3, 2, 1),
            lateral4: Conv::he_init(&mut rng, p, b, 1, 1, 0),
            lateral8: Conv::he_init(&mut rng, p, b, 1, 1, 0),
            merge4: Conv::he_init(&mut rng, p, p, 1, 1, 0),
            head: HeadParams::init(&mut rng, p, config.num_classes),
        }
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3("detector forward")?;
        let max_stride = STRIDES[STRIDES.len() - 1];
        if c != self.config.in_channels || h % max_stride != 0 || w % max_stride != 0 {
            return Err(Error::shape(
                "detector forward",
                format!(
                    "image {c}×{h}×{w} must have {} channels and extents divisible by {max_stride}",
                    self.config.in_channels
                ),
            ));
        }
        Ok(())
    }

    /// Backbone and pyramid only.
    pub fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.forward_neck(image)?.0)
    }

    fn forward_neck(&self, image: &Tensor) -> Result<(Vec<Tensor>, NeckCache)> {
        self.check_image(image)?;
        let (mut a1, stem) = self.stem.forward(image)?;
        leaky_relu_inplace(&mut a1);
        let (mut a2, stage2) = self.stage2.forward(&a1)?;
        leaky_relu_inplace(&mut a2);
        let (mut a3, stage2b) = self.stage2b.forward(&a2)?;
        leaky_relu_inplace(&mut a3);
        let (mut a4, stage3) = self.stage3.forward(&a3)?;
        leaky_relu_inplace(&mut a4);
        let (p8, lateral8) = self.lateral8.forward(&a4)?;
        let (mut m4, lateral4) = self.lateral4.forward(&a3)?;
        m4.add_assign(&upsample_nearest2x(&p8))?;
        let (p4, merge4) = self.merge4.forward(&m4)?;
        Ok((
            vec![p4, p8],
            NeckCache {
                stem,
                a1,
                stage2,
                a2,
                stage2b,
                a3,
                stage3,
                a4,
                lateral4,
                lateral8,
                merge4,
            },
        ))
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        let (pyramid, neck) = self.forward_neck(image)?;
        let mut predictions = Vec::with_capacity(pyramid.len());
        let mut heads = Vec::with_capacity(pyramid.len());
        for level in &pyramid {
            let (pred, cache) = self.head.forward(level)?;
            predictions.push(pred);
            heads.push(cache);
        }
        Ok(ForwardOutput {
            pyramid,
            predictions,
            cache: ForwardCache {
                stem: neck.stem,
                a1: neck.a1,
                stage2: neck.stage2,
                a2: neck.a2,
                stage2b: neck.stage2b,
                a3: neck.a3,
                stage3: neck.stage3,
                a4: neck.a4,
                lateral4: neck.lateral4,
                lateral8: neck.lateral8,
                merge4: neck.merge4,
                heads,
            },
        })
    }

    /// Back-propagates prediction gradients (and optional extra gradients on
    /// the pyramid levels) to every parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_predictions: &[Prediction],
        grad_pyramid: Option<&[Tensor]>,
    ) -> Result<DetectorParams> {
        if grad_predictions.len() != cache.heads.len() {
            return Err(Error::shape(
                "detector backward",
                format!(
                    "{} prediction gradients for {} levels",
                    grad_predictions.len(),
                    cache.heads.len()
                ),
            ));
        }
        let mut grads = self.zeros_like();
        let mut level_grads = Vec::with_capacity(grad_predictions.len());
        for (hc, gp) in cache.heads.iter().zip(grad_predictions) {
            level_grads.push(self.head.backward(hc, gp, Some(&mut grads.head))?);
        }
        if let Some(extra) = grad_pyramid {
            if extra.len() != level_grads.len() {
                return Err(Error::shape(
                    "detector backward",
                    format!("{} pyramid gradients for {} levels", extra.len(), level_grads.len()),
                ));
            }
            for (g, e) in level_grads.iter_mut().zip(extra) {
                g.add_assign(e)?;
            }
        }
        let mut level_grads = level_grads.into_iter();
        let g4 = level_grads.next().expect("two levels");
        let mut g8 = level_grads.next().expect("two levels");

        let gm4 = self
            .merge4
            .backward(&cache.merge4, &g4, Some(&mut grads.merge4), true)?
            .expect("input gradient requested");
        let mut ga3 = self
            .lateral4
            .backward(&cache.lateral4, &gm4, Some(&mut grads.lateral4), true)?
            .expect("input gradient requested");
        g8.add_assign(&sum_pool2x(&gm4)?)?;
        let mut ga4 = self
            .lateral8
            .backward(&cache.lateral8, &g8, Some(&mut grads.lateral8), true)?
            .expect("input gradient requested");
        leaky_relu_backward_inplace(&mut ga4, &cache.a4);
        ga3.add_assign(
            &self
                .stage3
                .backward(&cache.stage3, &ga4, Some(&mut grads.stage3), true)?
                .expect("input gradient requested"),
        )?;
        leaky_relu_backward_inplace(&mut ga3, &cache.a3);
        let mut ga2 = self
            .stage2b
            .backward(&cache.stage2b, &ga3, Some(&mut grads.stage2b), true)?
            .expect("input gradient requested");
        leaky_relu_backward_inplace(&mut ga2, &cache.a2);
        let mut ga1 = self
            .stage2
            .backward(&cache.stage2, &ga2, Some(&mut grads.stage2), true)?
            .expect("input gradient requested");
        leaky_relu_backward_inplace(&mut ga1, &cache.a1);
        self.stem.backward(&cache.stem, &ga1, Some(&mut grads.stem), false)?;
        Ok(grads)
    }
}

struct NeckCache {
    stem: ConvCache,
    a1: Tensor,
    stage2: ConvCache,
    a2: Tensor,
    stage2b: ConvCache,
    a3: Tensor,
    stage3: ConvCache,
    a4: Tensor,
    lateral4: ConvCache,
    lateral8: ConvCache,
    merge4: ConvCache,
}

impl ParamSet for DetectorParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_conv(&mut out, "backbone.stem", &self.stem);
        push_conv(&mut out, "backbone.stage2", &self.stage2);
        push_conv(&mut out, "backbone.stage2b", &self.stage2b);
        push_conv(&mut out, "backbone.stage3", &self.stage3);
        push_conv(&mut out, "neck.lateral4", &self.lateral4);
        push_conv(&mut out, "neck.lateral8", &self.lateral8);
        push_conv(&mut out, "neck.merge4", &self.merge4);
        out.extend(self.head.named_tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        push_conv_mut(&mut out, &mut self.stem);
        push_conv_mut(&mut out, &mut self.stage2);
        push_conv_mut(&mut out, &mut self.stage2b);
        push_conv_mut(&mut out, &mut self.stage3);
        push_conv_mut(&mut out, &mut self.lateral4);
        push_conv_mut(&mut out, &mut self.lateral8);
        push_conv_mut(&mut out, &mut self.merge4);
        out.extend(self.head.tensors_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_shapes_for_64() {
        let p = DetectorParams::init(DetectorConfig::new(8, 16, 3), 1);
        let out = p.forward(&Tensor::zeros(&[3, 64, 64])).unwrap();
        assert_eq!(out.pyramid[0].shape(), &[16, 16, 16]);
        assert_eq!(out.pyramid[1].shape(), &[16, 8, 8]);
        assert_eq!(out.predictions[0].cls.shape(), &[3, 16, 16]);
        assert_eq!(out.predictions[1].reg.shape(), &[4, 8, 8]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_logits() {
        let mut p = DetectorParams::init(DetectorConfig::new(4, 4, 2), 2);
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (t, name) in p.tensors_mut().into_iter().zip(names) {
            if name.ends_with(".bias") {
                t.fill(0.0);
            }
        }
        let out = p.forward(&Tensor::zeros(&[3, 16, 16])).unwrap();
        for pred in &out.predictions {
            assert!(pred.cls.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn teacher_student_pyramids_compatible() {
        let t = DetectorParams::init(DetectorConfig::new(32, 16, 3), 1);
        let s = DetectorParams::init(DetectorConfig::new(8, 16, 3), 2);
        let img = Tensor::full(&[3, 32, 32], 0.5);
        let (ft, fs) = (t.features(&img).unwrap(), s.features(&img).unwrap());
        for (a, b) in ft.iter().zip(&fs) {
            assert_eq!(a.shape(), b.shape());
        }
    }

    #[test]
    fn rejects_bad_image() {
        let p = DetectorParams::init(DetectorConfig::new(4, 4, 2), 2);
        assert!(p.forward(&Tensor::zeros(&[3, 12, 16])).is_err());
        assert!(p.forward(&Tensor::zeros(&[1, 16, 16])).is_err());
    }
}
