//! Learnable binarization: the clipped threshold activation with its
//! stipulated derivative, the hard binarization layer, and straight-through
//! gradient routing back to either the threshold map or the confidence map.

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const THRESHOLD_MIN: f64 = 0.25;
pub const THRESHOLD_MAX: f64 = 0.90;
/// Above this input the activation's stipulated derivative is zero. It is
/// deliberately not `THRESHOLD_MAX`: inputs in (0.90, 0.95] keep slope 1.
pub const GRAD_CUTOFF: f64 = 0.95;

/// Clamps a raw threshold into `[0.25, 0.90]`.
#[inline]
pub fn clip_act(x: f64) -> f64 {
    if x <= THRESHOLD_MIN {
        THRESHOLD_MIN
    } else if x >= THRESHOLD_MAX {
        THRESHOLD_MAX
    } else {
        x
    }
}

/// Stipulated derivative of [`clip_act`]: `e^(x - 0.25)` below the lower
/// bound so saturated thresholds still move, zero beyond 0.95, one otherwise.
#[inline]
pub fn clip_act_grad(x: f64) -> f64 {
    if x < THRESHOLD_MIN {
        (x - THRESHOLD_MIN).exp()
    } else if x > GRAD_CUTOFF {
        0.0
    } else {
        1.0
    }
}

/// Hard binarization: 1 where `confidence >= threshold`, else 0.
pub fn binarize(confidence: &Grid, threshold: &Grid) -> Result<Grid> {
    confidence.check_same_dims(threshold, "binarize")?;
    let data = confidence
        .as_slice()
        .iter()
        .zip(threshold.as_slice())
        .map(|(c, t)| if c >= t { 1.0 } else { 0.0 })
        .collect();
    Ok(Grid::from_raw(confidence.height(), confidence.width(), data))
}

/// Binarizes against a single global threshold.
pub fn binarize_fixed(confidence: &Grid, threshold: f64) -> Grid {
    confidence.map(|c| if c >= threshold { 1.0 } else { 0.0 })
}

/// Which input of the binarization layer receives the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    ToThreshold,
    ToConfidence,
}

/// Gradients w.r.t. both inputs; the unrouted one is all zeros.
#[derive(Debug, Clone)]
pub struct BinarizeGrads {
    pub d_confidence: Grid,
    pub d_threshold: Grid,
}

/// Result of the binarization module's forward pass.
#[derive(Debug, Clone)]
pub struct BinarizeOutput {
    /// Activated threshold map, in `[0.25, 0.90]`.
    pub threshold: Grid,
    pub binary: Grid,
    raw_threshold: Option<Grid>,
}

impl BinarizeOutput {
    /// Activates `raw_threshold` and binarizes `confidence` against it.
    pub fn forward(confidence: &Grid, raw_threshold: &Grid) -> Result<Self> {
        let threshold = raw_threshold.map(clip_act);
        let binary = binarize(confidence, &threshold)?;
        Ok(BinarizeOutput {
            threshold,
            binary,
            raw_threshold: Some(raw_threshold.clone()),
        })
    }

    /// Output without a backward cache, e.g. for inference.
    pub fn without_cache(threshold: Grid, binary: Grid) -> Self {
        BinarizeOutput {
            threshold,
            binary,
            raw_threshold: None,
        }
    }

    /// Straight-through surrogate: `dL/dT = -dL/dB` or `dL/dC = +dL/dB`.
    pub fn backward(&self, d_binary: &Grid, routing: Routing) -> Result<BinarizeGrads> {
        if self.raw_threshold.is_none() {
            return Err(Error::State("binarize backward called without forward cache".into()));
        }
        self.binary.check_same_dims(d_binary, "binarize backward")?;
        let (h, w) = self.binary.dims();
        let zero = Grid::zeros(h, w);
        Ok(match routing {
            Routing::ToThreshold => BinarizeGrads {
                d_confidence: zero,
                d_threshold: d_binary.map(|g| -g),
            },
            Routing::ToConfidence => BinarizeGrads {
                d_confidence: d_binary.clone(),
                d_threshold: zero,
            },
        })
    }

    /// Chains `dL/dT` through the activation to the raw threshold.
    pub fn threshold_to_raw(&self, d_threshold: &Grid) -> Result<Grid> {
        let raw = self
            .raw_threshold
            .as_ref()
            .ok_or_else(|| Error::State("no raw threshold cached".into()))?;
        raw.check_same_dims(d_threshold, "threshold backward")?;
        let data = raw
            .as_slice()
            .iter()
            .zip(d_threshold.as_slice())
            .map(|(&x, &g)| g * clip_act_grad(x))
            .collect();
        Ok(Grid::from_raw(raw.height(), raw.width(), data))
    }
}
