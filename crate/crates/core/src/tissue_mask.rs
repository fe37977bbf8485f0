//! Tissue vs background detection by repeated Gaussian smoothing and Otsu
//! thresholding.
//!
//! Tissue is the darker Otsu class. The loop widens the blur until the
//! unblurred gray level of the background class is within `stop_threshold`
//! of white, or the iteration budget runs out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{gaussian_blur, otsu_threshold, to_gray, Image, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueMaskParams {
    pub sigma: f64,
    pub growth: f64,
    /// Allowed distance of the mean background gray level from white.
    pub stop_threshold: f64,
    pub max_iterations: usize,
}

impl Default for TissueMaskParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            growth: 2.0,
            stop_threshold: 10.0,
            max_iterations: 5,
        }
    }
}

impl TissueMaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::param(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.growth >= 1.0) {
            return Err(Error::param(format!("growth must be >= 1, got {}", self.growth)));
        }
        if !(0.0..=255.0).contains(&self.stop_threshold) {
            return Err(Error::param(format!(
                "stop threshold must lie in [0, 255], got {}",
                self.stop_threshold
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::param("max iterations must be >= 1"));
        }
        Ok(())
    }
}

/// Binary tissue mask (label 1 = tissue) and the number of iterations run.
pub fn detect_tissue_traced(img: &Image, params: &TissueMaskParams) -> Result<(LabelMap, usize)> {
    params.validate()?;
    let gray = to_gray(img);
    let mut sigma = params.sigma;
    let mut mask = vec![0u32; gray.data().len()];
    let mut iterations = 0;
    while iterations < params.max_iterations {
        iterations += 1;
        let blurred = gaussian_blur(&gray, sigma)?;
        let t = otsu_threshold(&blurred.histogram())?;
        let (mut bg_sum, mut bg_count) = (0u64, 0u64);
        for ((m, &b), &g) in mask.iter_mut().zip(blurred.data()).zip(gray.data()) {
            *m = u32::from(b <= t);
            if b > t {
                bg_sum += g as u64;
                bg_count += 1;
            }
        }
        // no background class means nothing left to separate
        let bg_mean = if bg_count == 0 {
            255.0
        } else {
            bg_sum as f64 / bg_count as f64
        };
        if 255.0 - bg_mean < params.stop_threshold {
            break;
        }
        sigma *= params.growth;
    }
    Ok((LabelMap::new(gray.height(), gray.width(), mask)?, iterations))
}

pub fn detect_tissue(img: &Image, params: &TissueMaskParams) -> Result<LabelMap> {
    detect_tissue_traced(img, params).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_fixture(side: usize, lo: usize, hi: usize, fg: u8, bg: u8) -> Image {
        let mut img = Image::filled(side, side, [bg; 3]).unwrap();
        for r in lo..hi {
            for c in lo..hi {
                img.set_pixel(r, c, [fg; 3]);
            }
        }
        img
    }

    #[test]
    fn white_image_has_no_tissue() {
        let img = Image::filled(32, 32, [255, 255, 255]).unwrap();
        let (mask, iters) = detect_tissue_traced(&img, &TissueMaskParams::default()).unwrap();
        assert_eq!(iters, 1);
        assert!(mask.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn dark_square_is_tissue() {
        let img = square_fixture(100, 25, 75, 60, 255);
        let mask = detect_tissue(&img, &TissueMaskParams::default()).unwrap();
        // inside square (shrunk by halo) is tissue; far background is not
        for r in 0..100 {
            for c in 0..100 {
                let inside = (26..74).contains(&r) && (26..74).contains(&c);
                let outside = !(24..76).contains(&r) || !(24..76).contains(&c);
                if inside {
                    assert_eq!(mask.get(r, c), 1);
                }
                if outside {
                    assert_eq!(mask.get(r, c), 0);
                }
            }
        }
    }

    #[test]
    fn polarity_follows_darkness() {
        let img = square_fixture(100, 25, 75, 255, 40);
        let mask = detect_tissue(&img, &TissueMaskParams::default()).unwrap();
        assert_eq!(mask.get(50, 50), 0);
        assert_eq!(mask.get(5, 5), 1);
    }

    #[test]
    fn iteration_budget_is_respected() {
        // a mid-gray background never gets close enough to white
        let img = square_fixture(40, 10, 30, 30, 150);
        let params = TissueMaskParams {
            max_iterations: 3,
            ..Default::default()
        };
        let (_, iters) = detect_tissue_traced(&img, &params).unwrap();
        assert_eq!(iters, 3);
    }

    #[test]
    fn invalid_params() {
        let img = Image::filled(4, 4, [255; 3]).unwrap();
        for p in [
            TissueMaskParams { sigma: 0.0, ..Default::default() },
            TissueMaskParams { growth: 0.5, ..Default::default() },
            TissueMaskParams { max_iterations: 0, ..Default::default() },
        ] {
            assert!(detect_tissue(&img, &p).is_err());
        }
    }
}
