//! Inference glue: network outputs to binary map to predictions, for single
//! images and whole splits.

use crate::binarize::{binarize, binarize_fixed, clip_act};
use crate::error::Result;
use crate::grid::{Grid, Tensor3};
use crate::labelgen::Annotation;
use crate::metrics::{evaluate, EvalConfig, EvalReport};
use crate::model::{Network, Outputs, ParamStore, Sample};
use crate::par;
use crate::postprocess::{predict, ImagePredictions, PostprocessConfig, Prediction};

/// How the confidence map is binarized at inference.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ThresholdMode {
    /// The network's per-pixel threshold map.
    #[default]
    Learned,
    /// One global threshold for every pixel.
    Fixed(f64),
}

/// Maps produced for one image.
#[derive(Debug, Clone)]
pub struct Inference {
    pub outputs: Outputs,
    pub threshold: Grid,
    pub binary: Grid,
    pub prediction: Prediction,
}

/// Smallest dims at or above `(h, w)` that the network accepts.
pub fn padded_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(4).max(1) * 4, w.div_ceil(4).max(1) * 4)
}

/// Runs the network, padding the image by edge replication when its dims
/// are not multiples of 4 and cropping the maps back afterwards.
pub fn run_network(net: &Network, params: &ParamStore, image: &Tensor3) -> Result<Outputs> {
    let (h, w) = (image.height, image.width);
    let (ph, pw) = padded_dims(h, w);
    if (ph, pw) == (h, w) {
        return net.infer(image, params);
    }
    let planes: Vec<Grid> = (0..image.channels)
        .map(|c| image.to_grid(c).pad_replicate(ph, pw))
        .collect();
    let o = net.infer(&Tensor3::from_grids(&planes)?, params)?;
    Ok(Outputs {
        confidence: o.confidence.crop(0, 0, h, w),
        raw_threshold: o.raw_threshold.crop(0, 0, h, w),
        size: o.size.crop(0, 0, h, w),
    })
}

pub fn infer_image(
    net: &Network,
    params: &ParamStore,
    image: &Tensor3,
    mode: ThresholdMode,
    post: &PostprocessConfig,
) -> Result<Inference> {
    let outputs = run_network(net, params, image)?;
    let (threshold, binary) = match mode {
        ThresholdMode::Learned => {
            let t = outputs.raw_threshold.map(clip_act);
            let b = binarize(&outputs.confidence, &t)?;
            (t, b)
        }
        ThresholdMode::Fixed(t) => {
            let (h, w) = outputs.confidence.dims();
            (Grid::filled(h, w, t), binarize_fixed(&outputs.confidence, t))
        }
    };
    let prediction = predict(&binary, &outputs.confidence, &outputs.size, post)?;
    Ok(Inference {
        outputs,
        threshold,
        binary,
        prediction,
    })
}

/// Predictions for every sample, in input order.
pub fn predict_samples(
    net: &Network,
    params: &ParamStore,
    samples: &[Sample],
    mode: ThresholdMode,
    post: &PostprocessConfig,
) -> Result<Vec<ImagePredictions>> {
    par::try_map(samples, |s| {
        let inf = infer_image(net, params, &s.image, mode, post)?;
        Ok(ImagePredictions::from_prediction(&s.annotation.image_id, &inf.prediction))
    })
}

pub fn evaluate_samples(
    net: &Network,
    params: &ParamStore,
    samples: &[Sample],
    mode: ThresholdMode,
    post: &PostprocessConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let preds = predict_samples(net, params, samples, mode, post)?;
    let gts: Vec<Annotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    evaluate(&preds, &gts, eval)
}

/// Validation score used for model selection: localization F1-m.
pub fn validation_f1(net: &Network, params: &ParamStore, samples: &[Sample]) -> Result<f64> {
    let r = evaluate_samples(
        net,
        params,
        samples,
        ThresholdMode::Learned,
        &PostprocessConfig::default(),
        &EvalConfig::default(),
    )?;
    Ok(r.localization.f1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn padded_inference_stays_in_bounds() {
        let (net, p) = Network::new(ModelConfig::default()).unwrap();
        let img = Tensor3::from_grid(&Grid::from_fn(30, 22, |r, c| ((r + 2 * c) % 5) as f64 / 5.0));
        let inf = infer_image(&net, &p, &img, ThresholdMode::Fixed(0.0), &PostprocessConfig::default()).unwrap();
        assert_eq!(inf.binary.dims(), (30, 22));
        for q in &inf.prediction.points {
            assert!(q.x >= 0.0 && q.x <= 22.0 && q.y >= 0.0 && q.y <= 30.0);
        }
        assert_eq!(padded_dims(30, 22), (32, 24));
        assert_eq!(padded_dims(32, 24), (32, 24));
    }
}
