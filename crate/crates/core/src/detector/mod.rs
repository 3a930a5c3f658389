//! Small anchor-free detector used as the distillation scaffold.

pub mod eval;
pub mod loss;
pub mod model;
pub mod scene;

pub use eval::{decode, evaluate_ap50, nms, Detection, NMS_IOU, SCORE_THRESHOLD};
pub use loss::{assign_targets, detection_loss, DetectionLoss, Targets};
pub use model::{AmplifierHead, DetectorConfig, DetectorParams, HeadParams, Prediction, STRIDES};
pub use scene::{generate_dataset, generate_scene, write_dataset, SceneConfig, SyntheticScene};

use crate::error::Result;
use crate::parallel::Execution;
use crate::tensor::Tensor;

/// Detection loss of one scene and its gradient for every parameter.
pub fn loss_and_grads(params: &DetectorParams, scene: &SyntheticScene) -> Result<(DetectionLoss, DetectorParams)> {
    let out = params.forward(&scene.image)?;
    let (loss, grad_preds) = detection_loss(&out.predictions, &scene.annotations, &STRIDES)?;
    let grads = params.backward(&out.cache, &grad_preds, None)?;
    Ok((loss, grads))
}

/// Decoded detections for every scene.
pub fn detect(params: &DetectorParams, images: &[&Tensor], exec: Execution) -> Result<Vec<Vec<Detection>>> {
    exec.map(images, |img| {
        let out = params.forward(img)?;
        Ok(decode(&out.predictions, &STRIDES, SCORE_THRESHOLD, NMS_IOU))
    })
    .into_iter()
    .collect()
}

/// AP₅₀ of `params` on `scenes`.
pub fn validation_ap50(params: &DetectorParams, scenes: &[SyntheticScene], exec: Execution) -> Result<f64> {
    let images: Vec<&Tensor> = scenes.iter().map(|s| &s.image).collect();
    let dets = detect(params, &images, exec)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.annotations.clone()).collect();
    Ok(evaluate_ap50(&dets, &gts))
}
