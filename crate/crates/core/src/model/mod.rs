//! The network, its parameters and the training loop.

mod layers;
mod network;
mod params;
mod train;

pub use layers::{
    avg_pool_same, avg_pool_same_backward, avg_pool_same_tensor, avg_pool_same_tensor_backward, conv2d,
    conv2d_backward, relu, relu_backward, transposed_conv2d, transposed_conv2d_backward, upsample_nearest,
    upsample_nearest_backward, ConvSpec, ParamGrads,
};
pub use network::{Cache, Network, OutputGrads, Outputs};
pub use params::{
    decode_checkpoint, encode_checkpoint, he_normal, poly_lr, read_checkpoint, seeded_rng, write_checkpoint,
    AdamConfig, Grads, Param, ParamGroup, ParamId, ParamStore,
};
pub use train::{
    augment, batch_gradients, train, LogRow, Sample, TrainExample, TrainOutcome, TrainingLog, ValidationRow,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;

/// Architecture hyper-parameters. Defaults give the small desk-scale network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// 1 for grayscale, 3 for RGB.
    pub in_channels: usize,
    pub extractor_widths: Vec<usize>,
    /// Must contain exactly two 2s; everything else 1.
    pub extractor_strides: Vec<usize>,
    /// Hidden widths of the confidence head: `[after 1x1, after 3x3]`.
    pub confidence_widths: [usize; 2],
    /// Widths of the three 3x3 reducers and the full-resolution 3x3.
    pub threshold_widths: [usize; 4],
    /// Bottleneck width inside each dilated residual block.
    pub scale_bottleneck: usize,
    /// Width between the two transposed convs of the scale head.
    pub scale_upsample_width: usize,
    pub dilations: Vec<usize>,
    pub threshold_window: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            extractor_widths: vec![8, 16, 16, 32, 32],
            extractor_strides: vec![1, 2, 1, 2, 1],
            confidence_widths: [16, 8],
            threshold_widths: [16, 8, 8, 4],
            scale_bottleneck: 8,
            scale_upsample_width: 8,
            dilations: vec![2, 3, 4, 5],
            threshold_window: 9,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::argument(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.extractor_widths.is_empty() || self.extractor_widths.len() != self.extractor_strides.len() {
            return Err(Error::argument("extractor widths and strides must be non-empty and equally long"));
        }
        if self.extractor_strides.iter().any(|&s| s != 1 && s != 2)
            || self.extractor_strides.iter().filter(|&&s| s == 2).count() != 2
        {
            return Err(Error::argument("extractor needs exactly two stride-2 layers (1/4 resolution)"));
        }
        let widths = self
            .extractor_widths
            .iter()
            .chain(&self.confidence_widths)
            .chain(&self.threshold_widths)
            .chain([&self.scale_bottleneck, &self.scale_upsample_width]);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::argument("channel widths must be positive"));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::argument("dilation schedule must be non-empty and positive"));
        }
        if self.threshold_window % 2 == 0 {
            return Err(Error::argument(format!(
                "threshold window must be odd, got {}",
                self.threshold_window
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.extractor_widths.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Base learning rate of extractor, confidence and scale parameters.
    pub lr: f64,
    /// Base learning rate of the threshold learner.
    pub lr_binarization: f64,
    /// Base learning rate of the scale predictor; `None` uses `lr`.
    pub lr_scale: Option<f64>,
    pub iterations: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub size_foreground_only: bool,
    /// Let the size loss update the shared extractor as well as the scale head.
    pub size_into_extractor: bool,
    pub crop: usize,
    pub flip: bool,
    pub scale_aug: bool,
    pub scale_range: (f64, f64),
    /// Validate every this many iterations (and after the last one).
    pub eval_every: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            lr_binarization: 1e-5,
            lr_scale: None,
            iterations: 2000,
            batch_size: 4,
            lambda: 0.01,
            size_foreground_only: false,
            size_into_extractor: false,
            crop: 64,
            flip: true,
            scale_aug: true,
            scale_range: (0.8, 1.2),
            eval_every: 250,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Short-schedule recipe for 64x64 synthetic scenes on one CPU core:
    /// higher learning rates (same 5:1 ratio), 1500 iterations and a
    /// foreground-only size loss. The default size loss collapses the scale
    /// head to zero when heads cover a small fraction of the image.
    pub fn desk_scale() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_binarization: 2e-4,
            iterations: 1500,
            size_foreground_only: true,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_binarization > 0.0 && self.lr_scale.is_none_or(|l| l > 0.0)) {
            return Err(Error::argument("learning rates must be > 0"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::argument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("batch size must be >= 1"));
        }
        if self.crop == 0 || self.crop % 4 != 0 {
            return Err(Error::argument(format!(
                "crop size must be a positive multiple of 4, got {}",
                self.crop
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::argument("scale range must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            size_foreground_only: self.size_foreground_only,
            ..LossConfig::default()
        }
    }

    /// Learning rate of a parameter group at `iteration`.
    pub fn lr_at(&self, group: ParamGroup, iteration: usize) -> f64 {
        let base = match group {
            ParamGroup::Threshold => self.lr_binarization,
            ParamGroup::Scale => self.lr_scale.unwrap_or(self.lr),
            _ => self.lr,
        };
        poly_lr(base, iteration, self.iterations)
    }
}
