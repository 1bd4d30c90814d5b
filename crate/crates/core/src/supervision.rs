//! Ground-truth label maps and the label-side losses: per-pixel cross-entropy
//! and the gated combination with the Mumford-Shah loss used when only part
//! of the data carries labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::softseg::{ms_loss, MsConfig, SoftSegmentation};

/// Label value marking pixels that take part in no loss or metric.
pub const IGNORE: u8 = 255;

/// Floor applied to probabilities inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Per-pixel class indices, row-major. [`IGNORE`] marks void pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::input("label map must be non-empty"));
        }
        if labels.len() != height * width {
            return Err(Error::input(format!(
                "label buffer has {} entries, expected {}",
                labels.len(),
                height * width
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(height > 0 && width > 0);
        let labels = (0..height).flat_map(|i| (0..width).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        Self { height, width, labels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    pub fn is_ignored(&self, p: usize) -> bool {
        self.labels[p] == IGNORE
    }

    /// Largest non-ignored label plus one (0 when every pixel is ignored).
    pub fn num_classes(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l != IGNORE)
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Sorted distinct non-ignored labels.
    pub fn distinct(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0u8..IGNORE).filter(|&l| seen[l as usize]).collect()
    }

    /// Applies a class relabeling; ignored pixels stay ignored.
    pub fn relabel(&self, map: impl Fn(u8) -> u8) -> Self {
        let labels = self
            .labels
            .iter()
            .map(|&l| if l == IGNORE { IGNORE } else { map(l) })
            .collect();
        Self { height: self.height, width: self.width, labels }
    }
}

/// Mean negative log-probability of the true class over labeled pixels.
pub fn cross_entropy(seg: &SoftSegmentation, g: &LabelMap) -> Result<f64> {
    if seg.shape() != g.shape() {
        return Err(Error::input(format!(
            "segmentation is {:?}, labels are {:?}",
            seg.shape(),
            g.shape()
        )));
    }
    let n = seg.num_classes();
    let y = seg.memberships();
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, &label) in g.as_slice().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let k = label as usize;
        if k >= n {
            return Err(Error::input(format!("label {k} out of range for {n} classes")));
        }
        total -= y[k].as_slice()[p].max(LOG_CLAMP).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::input("label map has no labeled pixels"));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedLossConfig {
    /// Weight of the Mumford-Shah term.
    pub beta: f64,
    /// Whether the input carries labels; selects the cross-entropy gate.
    pub labeled: bool,
}

impl CombinedLossConfig {
    pub fn alpha(&self) -> f64 {
        if self.labeled {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedLoss {
    pub total: f64,
    /// Cross-entropy; zero when the input is unlabeled.
    pub ce: f64,
    pub ms: f64,
}

/// `alpha * CE + beta * MS`, with `alpha` 1 for labeled inputs and 0 otherwise.
pub fn combined_loss(
    x: &Image,
    seg: &SoftSegmentation,
    g: Option<&LabelMap>,
    cfg: &CombinedLossConfig,
    ms_cfg: &MsConfig,
) -> Result<CombinedLoss> {
    if !(cfg.beta >= 0.0 && cfg.beta.is_finite()) {
        return Err(Error::param(format!("beta must be non-negative, got {}", cfg.beta)));
    }
    let ce = match (cfg.labeled, g) {
        (true, Some(g)) => cross_entropy(seg, g)?,
        (true, None) => return Err(Error::input("labeled input requires a label map")),
        (false, _) => 0.0,
    };
    let ms = ms_loss(x, seg, ms_cfg)?.loss;
    Ok(CombinedLoss { total: cfg.alpha() * ce + cfg.beta * ms, ce, ms })
}
