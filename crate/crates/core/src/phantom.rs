//! Synthetic test images with known ground truth.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, ScalarField};
use crate::supervision::LabelMap;

pub const MIN_PHANTOM_SIZE: usize = 16;

/// Bias ramp end points, left column to right column.
pub const RAMP_RANGE: (f64, f64) = (0.7, 1.3);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    /// Disk at 0.8 on a 0.2 background.
    TwoPhase,
    /// Quadrant blocks at 0.2, 0.4, 0.6, 0.8 (row-major quadrant order).
    FourPhase,
    /// Two-phase image multiplied by a horizontal linear bias ramp.
    RampBias,
}

impl PhantomKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhantomKind::TwoPhase => "two-phase",
            PhantomKind::FourPhase => "four-phase",
            PhantomKind::RampBias => "ramp-bias",
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-phase" => Ok(PhantomKind::TwoPhase),
            "four-phase" => Ok(PhantomKind::FourPhase),
            "ramp-bias" => Ok(PhantomKind::RampBias),
            other => Err(Error::param(format!("unknown phantom kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Image,
    pub labels: LabelMap,
    /// True multiplicative bias, present for [`PhantomKind::RampBias`].
    pub bias: Option<ScalarField>,
}

/// Label of the two-phase disk: 1 inside, 0 outside.
pub fn disk_label(size: usize, row: usize, col: usize) -> u8 {
    let c = (size as f64 - 1.0) / 2.0;
    let r = size as f64 / 4.0;
    let (di, dj) = (row as f64 - c, col as f64 - c);
    u8::from(di * di + dj * dj <= r * r)
}

fn quadrant_label(size: usize, row: usize, col: usize) -> u8 {
    let half = size / 2;
    2 * u8::from(row >= half) + u8::from(col >= half)
}

pub fn ramp_value(size: usize, col: usize) -> f64 {
    let (lo, hi) = RAMP_RANGE;
    lo + (hi - lo) * col as f64 / (size - 1) as f64
}

pub fn make_phantom(kind: PhantomKind, size: usize, noise_sigma: f64, seed: u64) -> Result<Phantom> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::param(format!("phantom size must be >= {MIN_PHANTOM_SIZE}, got {size}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::param(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }

    let labels = match kind {
        PhantomKind::TwoPhase | PhantomKind::RampBias => {
            LabelMap::from_fn(size, size, |i, j| disk_label(size, i, j))
        }
        PhantomKind::FourPhase => LabelMap::from_fn(size, size, |i, j| quadrant_label(size, i, j)),
    };
    let level = |label: u8| match kind {
        PhantomKind::FourPhase => 0.2 * (label as f64 + 1.0),
        _ => {
            if label == 1 {
                0.8
            } else {
                0.2
            }
        }
    };
    let bias = match kind {
        PhantomKind::RampBias => Some(ScalarField::from_fn(size, size, |_, j| ramp_value(size, j))),
        _ => None,
    };

    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Image::from_fn(size, size, 1, |i, j, _| {
        let clean = level(labels.get(i, j)) * bias.as_ref().map_or(1.0, |b| b.get(i, j));
        let noise = if noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        (clean + noise).clamp(0.0, 1.0)
    });

    Ok(Phantom { image, labels, bias })
}
