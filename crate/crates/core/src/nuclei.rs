//! Classical nuclei instance detection: hematoxylin deconvolution, Otsu
//! foreground, Euclidean distance transform, peak markers and a
//! marker-controlled watershed that splits touching nuclei.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{
    gaussian_blur, otsu_threshold, Connectivity, EntityTable, GrayImage, Image, LabelMap,
};
use crate::stain::{fit_concentrations, StainMatrix, StainProfile};
use crate::stats::percentile;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NucleiParams {
    pub min_area: usize,
    pub max_area: usize,
    pub sigma: f64,
    pub peak_min_distance: usize,
}

impl Default for NucleiParams {
    fn default() -> Self {
        Self {
            min_area: 20,
            max_area: 5000,
            sigma: 2.0,
            peak_min_distance: 5,
        }
    }
}

impl NucleiParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_area == 0 || self.min_area >= self.max_area {
            return Err(Error::param(format!(
                "need 0 < min area < max area, got {} and {}",
                self.min_area, self.max_area
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::param(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.peak_min_distance == 0 {
            return Err(Error::param("peak min distance must be >= 1"));
        }
        Ok(())
    }
}

/// Hematoxylin concentration rescaled to 0-255 by the 99th percentile of its
/// positive values.
pub fn hematoxylin_channel(img: &Image, stains: &StainMatrix) -> Result<GrayImage> {
    let conc = fit_concentrations(img, stains)?.channel(0);
    let mut positive: Vec<f64> = conc.iter().copied().filter(|&c| c > 0.0).collect();
    let scale = percentile(&mut positive, 99.0).unwrap_or(0.0);
    let data = conc
        .iter()
        .map(|&c| {
            if scale > 0.0 {
                (255.0 * c / scale).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    GrayImage::new(img.height(), img.width(), data)
}

/// Squared Euclidean distance of a 1-D sampled function's lower envelope
/// (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() && f[v[k]].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: replace the only parabola
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact Euclidean distance from each foreground pixel to the nearest
/// background pixel; pixels outside the image count as background.
pub fn distance_transform(mask: &[bool], height: usize, width: usize) -> Vec<f64> {
    // pad by one pixel of background on every side
    let (h, w) = (height + 2, width + 2);
    let mut grid = vec![0.0f64; h * w];
    for r in 0..height {
        for c in 0..width {
            if mask[r * width + c] {
                grid[(r + 1) * w + c + 1] = f64::INFINITY;
            }
        }
    }
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    let mut dist = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            dist[r * width + c] = grid[(r + 1) * w + c + 1].sqrt();
        }
    }
    dist
}

/// Local maxima of `dist` (over its `min_distance` neighborhood) that are at
/// least `min_distance` apart. Stronger peaks win; equal peaks are taken in
/// (row, col) order.
pub fn find_peaks(dist: &[f64], height: usize, width: usize, min_distance: usize) -> Vec<(usize, usize)> {
    let rad = min_distance as isize;
    let mut candidates = Vec::new();
    for r in 0..height {
        for c in 0..width {
            let d = dist[r * width + c];
            if d <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'scan: for dr in -rad..=rad {
                for dc in -rad..=rad {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                        continue;
                    }
                    if dist[nr as usize * width + nc as usize] > d {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                candidates.push((d, r, c));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let min_sq = (min_distance * min_distance) as isize;
    let mut peaks: Vec<(usize, usize)> = Vec::new();
    for (_, r, c) in candidates {
        let clear = peaks.iter().all(|&(pr, pc)| {
            let (dr, dc) = (pr as isize - r as isize, pc as isize - c as isize);
            dr * dr + dc * dc >= min_sq
        });
        if clear {
            peaks.push((r, c));
        }
    }
    peaks
}

/// Priority-flood watershed of `-dist` restricted to `mask`, grown from
/// the given markers with 8-connectivity. Returns a label per pixel
/// (marker index + 1; 0 = unreached).
pub fn watershed(dist: &[f64], mask: &[bool], height: usize, width: usize, markers: &[(usize, usize)]) -> Vec<u32> {
    let mut labels = vec![0u32; height * width];
    // key: (-distance bits, insertion order) as a min-heap
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    let key = |d: f64| Reverse(ordered(-d));
    for (i, &(r, c)) in markers.iter().enumerate() {
        let p = r * width + c;
        labels[p] = i as u32 + 1;
        heap.push((key(dist[p]), Reverse(order), p));
        order += 1;
    }
    while let Some((_, _, p)) = heap.pop() {
        let (r, c) = ((p / width) as isize, (p % width) as isize);
        for &(dr, dc) in Connectivity::Eight.offsets() {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                continue;
            }
            let q = nr as usize * width + nc as usize;
            if mask[q] && labels[q] == 0 {
                labels[q] = labels[p];
                heap.push((key(dist[q]), Reverse(order), q));
                order += 1;
            }
        }
    }
    labels
}

/// Total order on finite floats for heap keys.
fn ordered(x: f64) -> i64 {
    let bits = x.to_bits() as i64;
    if bits < 0 {
        bits ^ i64::MAX
    } else {
        bits
    }
}

/// Nuclei instances using the reference-free H&E stain vectors.
pub fn detect_nuclei(img: &Image, params: &NucleiParams) -> Result<(LabelMap, EntityTable)> {
    detect_nuclei_with(img, params, &StainProfile::default_he().stain_matrix, None)
}

/// Nuclei instances, optionally restricted to a tissue mask.
pub fn detect_nuclei_with(
    img: &Image,
    params: &NucleiParams,
    stains: &StainMatrix,
    tissue: Option<&LabelMap>,
) -> Result<(LabelMap, EntityTable)> {
    params.validate()?;
    let (h, w) = (img.height(), img.width());
    if let Some(t) = tissue {
        if (t.height(), t.width()) != (h, w) {
            return Err(Error::shape(format!(
                "tissue mask {}x{} for image {h}x{w}",
                t.height(),
                t.width()
            )));
        }
    }
    let channel = gaussian_blur(&hematoxylin_channel(img, stains)?, params.sigma)?;
    let hist = channel.histogram();
    let t = otsu_threshold(&hist)?;
    // a single occupied bin has no bright class
    let flat = hist.iter().filter(|&&n| n > 0).count() == 1;
    let mask: Vec<bool> = channel
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| !flat && v > t && tissue.is_none_or(|m| m.labels()[i] > 0))
        .collect();
    let dist = distance_transform(&mask, h, w);
    let peaks = find_peaks(&dist, h, w, params.peak_min_distance);
    let basins = watershed(&dist, &mask, h, w, &peaks);

    let mut area = vec![0usize; peaks.len() + 1];
    for &l in &basins {
        area[l as usize] += 1;
    }
    let keep: Vec<bool> = area
        .iter()
        .enumerate()
        .map(|(l, &a)| l > 0 && (params.min_area..=params.max_area).contains(&a))
        .collect();
    let filtered: Vec<u32> = basins
        .iter()
        .map(|&l| if keep[l as usize] { l } else { 0 })
        .collect();
    let labels = LabelMap::from_sparse(h, w, filtered)?.relabel_raster_order();
    let table = EntityTable::from_label_map(&labels);
    Ok((labels, table))
}
