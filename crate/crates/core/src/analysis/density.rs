//! Threshold density stand-in.
//!
//! With `max = 2^bits - 1`, a pixel belongs to the breast when `p > 0.1 max`
//! and is dense when additionally `p > 0.6 max`. Density is the dense share of
//! the breast area. Comparisons are done as `10p > max` and `5p > 3 max`.

use serde::{Deserialize, Serialize};

use super::PixelMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMeasure {
    pub breast_area_px: u64,
    pub dense_area_px: u64,
    pub density: f64,
    pub empty_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityResult {
    pub guid: String,
    #[serde(flatten)]
    pub measure: DensityMeasure,
}

pub fn measure_density(pixels: &PixelMatrix) -> DensityMeasure {
    let max = pixels.max_value();
    let (mut breast, mut dense) = (0u64, 0u64);
    for &p in &pixels.samples {
        let p = p as u64;
        if 10 * p > max {
            breast += 1;
            if 5 * p > 3 * max {
                dense += 1;
            }
        }
    }
    if breast == 0 {
        return DensityMeasure {
            breast_area_px: 0,
            dense_area_px: 0,
            density: 0.0,
            empty_mask: true,
        };
    }
    DensityMeasure {
        breast_area_px: breast,
        dense_area_px: dense,
        density: dense as f64 / breast as f64,
        empty_mask: false,
    }
}
