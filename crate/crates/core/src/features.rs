//! Handcrafted per-entity features: shape, GLCM texture and crowdedness,
//! plus import of externally computed feature tables.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{components_by, read_text, to_gray, write_file, Connectivity, EntityTable, Image, LabelMap};

/// Entities by rows, named features by columns; rows follow `ids`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub ids: Vec<u32>,
    pub names: Vec<String>,
    /// Row-major, `ids.len() * names.len()` values.
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<u32>, names: Vec<String>, data: Vec<f64>) -> Result<Self> {
        if data.len() != ids.len() * names.len() {
            return Err(Error::shape(format!(
                "{} values for {} rows x {} columns",
                data.len(),
                ids.len(),
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::input(format!("duplicate feature name {dup:?}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let (row, col) = (i / names.len(), i % names.len());
            return Err(Error::NonFinite(format!(
                "feature {:?} of entity {} is {}",
                names[col], ids[row], data[i]
            )));
        }
        Ok(Self { ids, names, data })
    }

    /// No columns, one row per id.
    pub fn empty(ids: Vec<u32>) -> Self {
        Self {
            ids,
            names: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols()..(i + 1) * self.cols()]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, col)).collect()
    }

    /// Header `id,<names>`, then one row per entity with 17 significant digits.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.row(i).iter().map(|v| format!("{v:.16e}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("id") {
            return Err(Error::schema("id", "first CSV column must be `id`"));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id: u32 = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::input(format!("bad entity id {:?}", &rec[0])))?;
            ids.push(id);
            for (j, cell) in rec.iter().skip(1).enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::input(format!("non-numeric value {cell:?} for entity {id}, column {:?}", names[j]))
                })?;
                data.push(v);
            }
        }
        Self::new(ids, names, data)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_csv()?.as_bytes())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&read_text(path.as_ref())?)
    }
}

/// Pixel coordinates of each label, indexed by label.
fn pixels_by_label(labels: &LabelMap) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new(); labels.num_labels() as usize + 1];
    for r in 0..labels.height() {
        for c in 0..labels.width() {
            out[labels.get(r, c) as usize].push((r, c));
        }
    }
    out
}

fn check_table(labels: &LabelMap, table: &EntityTable) -> Result<()> {
    for e in &table.entities {
        if e.id == 0 || e.id > labels.num_labels() {
            return Err(Error::shape(format!(
                "entity {} not in label map with {} labels",
                e.id,
                labels.num_labels()
            )));
        }
    }
    Ok(())
}

pub const MORPHOLOGY_NAMES: [&str; 15] = [
    "area",
    "convex_area",
    "eccentricity",
    "equivalent_diameter",
    "euler_number",
    "major_axis_length",
    "minor_axis_length",
    "orientation",
    "perimeter",
    "solidity",
    "convex_hull_perimeter",
    "roughness",
    "shape_factor",
    "ellipticity",
    "roundness",
];

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull of points (monotone chain), counter-clockwise, no collinear
/// points.
pub(crate) fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn polygon_perimeter(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 2 {
        return 0.0;
    }
    (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
        })
        .sum()
}

/// Pixel centers of the bounding box lying inside or on the hull.
fn hull_fill(hull: &[(f64, f64)], h: usize, w: usize) -> usize {
    let inside = |p: (f64, f64)| match hull.len() {
        0 => false,
        1 => p == hull[0],
        2 => {
            let (a, b) = (hull[0], hull[1]);
            cross(a, b, p).abs() < 1e-9
                && p.0 >= a.0.min(b.0) - 1e-9
                && p.0 <= a.0.max(b.0) + 1e-9
                && p.1 >= a.1.min(b.1) - 1e-9
                && p.1 <= a.1.max(b.1) + 1e-9
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= -1e-9),
    };
    (0..h)
        .flat_map(|r| (0..w).map(move |c| (r as f64, c as f64)))
        .filter(|&p| inside(p))
        .count()
}

const DIRS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

/// Length of the outer 8-connected contour through pixel centers, starting
/// from `start` (the first pixel of its component in raster order).
fn contour_length(mask: &[bool], h: usize, w: usize, start: (usize, usize)) -> f64 {
    let fg = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[r as usize * w + c as usize];
    let step = |pos: (isize, isize), from: usize| -> Option<(usize, (isize, isize))> {
        (0..8).map(|k| (from + k) % 8).find_map(|d| {
            let n = (pos.0 + DIRS[d].0, pos.1 + DIRS[d].1);
            fg(n.0, n.1).then_some((d, n))
        })
    };
    let start = (start.0 as isize, start.1 as isize);
    // the pixel west of start is background, so searching begins north-west
    let Some((first_dir, mut pos)) = step(start, 5) else { return 0.0 };
    let mut len = if first_dir % 2 == 0 { 1.0 } else { std::f64::consts::SQRT_2 };
    let mut dir = first_dir;
    loop {
        let (d, next) = step(pos, (dir + 6) % 8).expect("contour pixel has a neighbor");
        if pos == start && d == first_dir {
            break;
        }
        len += if d % 2 == 0 { 1.0 } else { std::f64::consts::SQRT_2 };
        pos = next;
        dir = d;
    }
    len
}

/// Shape features of one entity from its pixel coordinates.
fn shape_of(pixels: &[(usize, usize)]) -> [f64; 15] {
    let area = pixels.len() as f64;
    let r0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
    let c0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
    let local: Vec<(usize, usize)> = pixels.iter().map(|&(r, c)| (r - r0 + 1, c - c0 + 1)).collect();
    let h = local.iter().map(|p| p.0).max().unwrap_or(0) + 2;
    let w = local.iter().map(|p| p.1).max().unwrap_or(0) + 2;
    let mut mask = vec![false; h * w];
    for &(r, c) in &local {
        mask[r * w + c] = true;
    }

    let mr = local.iter().map(|p| p.0 as f64).sum::<f64>() / area;
    let mc = local.iter().map(|p| p.1 as f64).sum::<f64>() / area;
    let (mut mrr, mut mcc, mut mrc) = (0.0, 0.0, 0.0);
    for &(r, c) in &local {
        let (dr, dc) = (r as f64 - mr, c as f64 - mc);
        mrr += dr * dr;
        mcc += dc * dc;
        mrc += dr * dc;
    }
    let (mrr, mcc, mrc) = (mrr / area, mcc / area, mrc / area);
    let half_trace = (mrr + mcc) / 2.0;
    let disc = (((mrr - mcc) / 2.0).powi(2) + mrc * mrc).sqrt();
    let (l1, l2) = (half_trace + disc, (half_trace - disc).max(0.0));
    let major = 4.0 * l1.sqrt();
    let minor = 4.0 * l2.sqrt();
    let eccentricity = if l1 > 0.0 { (1.0 - l2 / l1).sqrt() } else { 0.0 };
    // angle of the major axis from the column axis, toward increasing rows
    let orientation = if disc > 0.0 { 0.5 * (2.0 * mrc).atan2(mcc - mrr) } else { 0.0 };

    let components = components_by(h, w, Connectivity::Eight, |i| mask[i], |_, _| true);
    let background = components_by(h, w, Connectivity::Four, |i| !mask[i], |_, _| true);
    let euler = components.num_labels() as f64 - (background.num_labels() as f64 - 1.0);

    let mut perimeter = 0.0;
    let mut seen = HashSet::new();
    for (i, &l) in components.labels().iter().enumerate() {
        if l > 0 && seen.insert(l) {
            perimeter += contour_length(&mask, h, w, (i / w, i % w));
        }
    }

    let centers: Vec<(f64, f64)> = local.iter().map(|&(r, c)| (r as f64, c as f64)).collect();
    let hull = convex_hull(&centers);
    let convex_area = hull_fill(&hull, h, w) as f64;
    let hull_perimeter = polygon_perimeter(&hull);

    let solidity = area / convex_area;
    let roughness = if hull_perimeter > 0.0 { perimeter / hull_perimeter } else { 1.0 };
    let shape_factor = if perimeter > 0.0 { 4.0 * PI * area / (perimeter * perimeter) } else { 1.0 };
    let ellipticity = if major > 0.0 { minor / major } else { 1.0 };
    let roundness = if major > 0.0 { 4.0 * area / (PI * major * major) } else { 1.0 };
    [
        area,
        convex_area,
        eccentricity,
        (4.0 * area / PI).sqrt(),
        euler,
        major,
        minor,
        orientation,
        perimeter,
        solidity,
        hull_perimeter,
        roughness,
        shape_factor,
        ellipticity,
        roundness,
    ]
}

pub fn morphology_features(labels: &LabelMap, table: &EntityTable) -> Result<FeatureMatrix> {
    check_table(labels, table)?;
    let pixels = pixels_by_label(labels);
    let mut data = Vec::with_capacity(table.len() * MORPHOLOGY_NAMES.len());
    for e in &table.entities {
        let px = &pixels[e.id as usize];
        if px.is_empty() {
            return Err(Error::input(format!("entity {} has no pixels", e.id)));
        }
        data.extend(shape_of(px));
    }
    FeatureMatrix::new(table.ids(), MORPHOLOGY_NAMES.iter().map(|s| s.to_string()).collect(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlcmParams {
    pub levels: usize,
    pub offsets: Vec<(isize, isize)>,
    pub symmetric: bool,
    pub normalize: bool,
}

impl Default for GlcmParams {
    fn default() -> Self {
        Self {
            levels: 32,
            offsets: vec![(0, 1), (1, 0), (1, 1), (1, -1)],
            symmetric: true,
            normalize: true,
        }
    }
}

impl GlcmParams {
    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.levels) {
            return Err(Error::param(format!("gray levels must be in 2..=256, got {}", self.levels)));
        }
        if self.offsets.is_empty() || self.offsets.contains(&(0, 0)) {
            return Err(Error::param("offsets must be non-empty and non-zero"));
        }
        Ok(())
    }

    pub fn quantize(&self, gray: u8) -> usize {
        gray as usize * self.levels / 256
    }
}

pub const GLCM_NAMES: [&str; 6] = [
    "glcm_contrast",
    "glcm_dissimilarity",
    "glcm_homogeneity",
    "glcm_asm",
    "glcm_energy",
    "glcm_dispersion",
];

/// Texture statistics of one co-occurrence matrix.
pub fn glcm_statistics(p: &[f64], levels: usize) -> [f64; 6] {
    let (mut contrast, mut dissimilarity, mut homogeneity, mut asm, mut mu) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let v = p[i * levels + j];
            let d = i as f64 - j as f64;
            contrast += v * d * d;
            dissimilarity += v * d.abs();
            homogeneity += v / (1.0 + d * d);
            asm += v * v;
            mu += v * i as f64;
        }
    }
    let dispersion = dispersion(p, levels, mu);
    [contrast, dissimilarity, homogeneity, asm, asm.sqrt(), dispersion]
}

/// Variance of the row index under `p`.
fn dispersion(p: &[f64], levels: usize, mu: f64) -> f64 {
    (0..levels)
        .map(|i| {
            let row: f64 = p[i * levels..(i + 1) * levels].iter().sum();
            row * (i as f64 - mu).powi(2)
        })
        .sum()
}

/// GLCM features plus the ids of entities without any co-occurring pair,
/// whose features are zero.
pub fn glcm_features_detailed(
    img: &Image,
    labels: &LabelMap,
    table: &EntityTable,
    params: &GlcmParams,
) -> Result<(FeatureMatrix, Vec<u32>)> {
    params.validate()?;
    if (img.height(), img.width()) != (labels.height(), labels.width()) {
        return Err(Error::shape("image and label map sizes differ"));
    }
    check_table(labels, table)?;
    let gray = to_gray(img);
    let (h, w) = (labels.height() as isize, labels.width() as isize);
    let g = params.levels;
    let pixels = pixels_by_label(labels);
    let mut data = Vec::with_capacity(table.len() * 6);
    let mut flagged = Vec::new();
    let mut counts = vec![0.0f64; g * g];
    for e in &table.entities {
        let mut sum = [0.0f64; 6];
        let mut used = 0;
        for &(dr, dc) in &params.offsets {
            counts.iter_mut().for_each(|v| *v = 0.0);
            let mut pairs = 0.0;
            for &(r, c) in &pixels[e.id as usize] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h || nc >= w || labels.get(nr as usize, nc as usize) != e.id {
                    continue;
                }
                let a = params.quantize(gray.get(r, c));
                let b = params.quantize(gray.get(nr as usize, nc as usize));
                counts[a * g + b] += 1.0;
                pairs += 1.0;
                if params.symmetric {
                    counts[b * g + a] += 1.0;
                    pairs += 1.0;
                }
            }
            if pairs == 0.0 {
                continue;
            }
            if params.normalize {
                counts.iter_mut().for_each(|v| *v /= pairs);
            }
            for (s, v) in sum.iter_mut().zip(glcm_statistics(&counts, g)) {
                *s += v;
            }
            used += 1;
        }
        if used == 0 {
            warn!("entity {} has no co-occurring pixel pair; GLCM features set to 0", e.id);
            flagged.push(e.id);
            data.extend([0.0; 6]);
        } else {
            data.extend(sum.map(|s| s / used as f64));
        }
    }
    let m = FeatureMatrix::new(table.ids(), GLCM_NAMES.iter().map(|s| s.to_string()).collect(), data)?;
    Ok((m, flagged))
}

pub fn glcm_features(img: &Image, labels: &LabelMap, table: &EntityTable, params: &GlcmParams) -> Result<FeatureMatrix> {
    glcm_features_detailed(img, labels, table, params).map(|(m, _)| m)
}

pub const CROWDEDNESS_NAMES: [&str; 2] = ["crowdedness_mean", "crowdedness_variance"];

/// Mean and population variance of each entity's distances to its
/// `min(k, N-1)` nearest other entities.
pub fn crowdedness_features(table: &EntityTable, k: usize) -> Result<FeatureMatrix> {
    let n = table.len();
    if n < 2 {
        return Err(Error::input(format!("crowdedness needs at least 2 entities, got {n}")));
    }
    if k == 0 {
        return Err(Error::param("crowdedness neighbor count must be >= 1"));
    }
    let k = k.min(n - 1);
    let pts = table.centroids();
    let mut data = Vec::with_capacity(2 * n);
    let mut dist = Vec::with_capacity(n - 1);
    for (i, a) in pts.iter().enumerate() {
        dist.clear();
        dist.extend(
            pts.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()),
        );
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, f64::total_cmp);
        }
        let near = &mut dist[..k];
        near.sort_by(f64::total_cmp);
        let mean = near.iter().sum::<f64>() / k as f64;
        let var = near.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / k as f64;
        data.extend([mean, var]);
    }
    FeatureMatrix::new(table.ids(), CROWDEDNESS_NAMES.iter().map(|s| s.to_string()).collect(), data)
}

/// Column-wise concatenation; with `min_max`, each column is rescaled to
/// [0, 1] and constant columns become 0.
pub fn assemble_features(parts: &[FeatureMatrix], min_max: bool) -> Result<FeatureMatrix> {
    let Some(first) = parts.first() else {
        return Err(Error::input("no feature blocks to assemble"));
    };
    let n = first.rows();
    let mut names = Vec::new();
    for p in parts {
        if p.ids != first.ids {
            return Err(Error::shape("feature blocks disagree on entity rows"));
        }
        names.extend(p.names.iter().cloned());
    }
    let d = names.len();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    if min_max {
        for j in 0..d {
            let col = (0..n).map(|i| data[i * d + j]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let v = &mut data[i * d + j];
                *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
            }
        }
    }
    FeatureMatrix::new(first.ids.clone(), names, data)
}

/// Reads `id,f0,f1,...` and orders the rows by the table's ids.
pub fn load_external_features(path: impl AsRef<Path>, table: &EntityTable) -> Result<FeatureMatrix> {
    let raw = FeatureMatrix::load_csv(path)?;
    let mut rows = BTreeMap::new();
    for (i, &id) in raw.ids.iter().enumerate() {
        if rows.insert(id, i).is_some() {
            return Err(Error::input(format!("entity id {id} appears twice")));
        }
    }
    let mut data = Vec::with_capacity(table.len() * raw.cols());
    for id in table.ids() {
        let i = rows
            .remove(&id)
            .ok_or_else(|| Error::input(format!("external features missing entity id {id}")))?;
        data.extend_from_slice(raw.row(i));
    }
    if let Some(id) = rows.keys().next() {
        return Err(Error::input(format!("external features have unknown entity id {id}")));
    }
    FeatureMatrix::new(table.ids(), raw.names, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureParams {
    pub glcm: GlcmParams,
    pub crowdedness_k: usize,
    pub min_max: bool,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            glcm: GlcmParams::default(),
            crowdedness_k: 5,
            min_max: false,
        }
    }
}

/// Morphology, GLCM and (for two or more entities) crowdedness features.
pub fn extract_features(img: &Image, labels: &LabelMap, table: &EntityTable, params: &FeatureParams) -> Result<FeatureMatrix> {
    let mut parts = vec![
        morphology_features(labels, table)?,
        glcm_features(img, labels, table, &params.glcm)?,
    ];
    if table.len() >= 2 {
        parts.push(crowdedness_features(table, params.crowdedness_k)?);
    } else {
        let data = vec![0.0; 2 * table.len()];
        parts.push(FeatureMatrix::new(table.ids(), CROWDEDNESS_NAMES.iter().map(|s| s.to_string()).collect(), data)?);
    }
    assemble_features(&parts, params.min_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_map(side: usize, pad: usize) -> LabelMap {
        let n = side + 2 * pad;
        let labels = (0..n * n)
            .map(|i| {
                let (r, c) = (i / n, i % n);
                u32::from((pad..pad + side).contains(&r) && (pad..pad + side).contains(&c))
            })
            .collect();
        LabelMap::new(n, n, labels).unwrap()
    }

    #[test]
    fn filled_square() {
        let lm = square_map(10, 3);
        let f = morphology_features(&lm, &EntityTable::from_label_map(&lm)).unwrap();
        let at = |name| f.get(0, f.column_index(name).unwrap());
        assert_eq!(at("area"), 100.0);
        assert_eq!(at("convex_area"), 100.0);
        assert_eq!(at("euler_number"), 1.0);
        assert_eq!(at("solidity"), 1.0);
        assert!((at("ellipticity") - 1.0).abs() < 1e-12);
        assert!(at("eccentricity").abs() < 1e-6);
        assert!((at("perimeter") - 36.0).abs() < 1e-12);
        assert!((at("convex_hull_perimeter") - 36.0).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_fallbacks() {
        let lm = square_map(1, 2);
        let f = morphology_features(&lm, &EntityTable::from_label_map(&lm)).unwrap();
        let row = f.row(0);
        assert_eq!(row[0], 1.0);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[7], 0.0);
        assert!(row.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn orientation_follows_major_axis() {
        let mut labels = vec![0u32; 20 * 20];
        for c in 2..18 {
            labels[10 * 20 + c] = 1;
            labels[11 * 20 + c] = 1;
        }
        let lm = LabelMap::new(20, 20, labels).unwrap();
        let f = morphology_features(&lm, &EntityTable::from_label_map(&lm)).unwrap();
        assert!(f.get(0, 7).abs() < 1e-12);
        let t = LabelMap::new(20, 20, (0..400).map(|i| lm.labels()[(i % 20) * 20 + i / 20]).collect()).unwrap();
        let g = morphology_features(&t, &EntityTable::from_label_map(&t)).unwrap();
        assert!((g.get(0, 7).abs() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn hull_of_collinear_points() {
        let hull = convex_hull(&[(0.0, 0.0), (0.0, 1.0), (0.0, 2.0)]);
        assert_eq!(hull, vec![(0.0, 0.0), (0.0, 2.0)]);
        assert_eq!(polygon_perimeter(&hull), 4.0);
    }

    #[test]
    fn constant_entity_glcm() {
        let img = Image::filled(6, 6, [90, 90, 90]).unwrap();
        let lm = LabelMap::new(6, 6, vec![1; 36]).unwrap();
        let f = glcm_features(&img, &lm, &EntityTable::from_label_map(&lm), &GlcmParams::default()).unwrap();
        assert_eq!(f.row(0), &[0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn isolated_pixel_is_flagged() {
        let img = Image::filled(3, 3, [10, 10, 10]).unwrap();
        let lm = LabelMap::new(3, 3, vec![0, 0, 0, 0, 1, 0, 0, 0, 0]).unwrap();
        let (f, flagged) =
            glcm_features_detailed(&img, &lm, &EntityTable::from_label_map(&lm), &GlcmParams::default()).unwrap();
        assert_eq!(flagged, vec![1]);
        assert_eq!(f.row(0), &[0.0; 6]);
    }

    #[test]
    fn crowdedness_by_hand() {
        let t = EntityTable::from_centroids(&[(0.0, 0.0), (0.0, 10.0)]);
        let f = crowdedness_features(&t, 5).unwrap();
        assert_eq!(f.data, vec![10.0, 0.0, 10.0, 0.0]);
        let t = EntityTable::from_centroids(&[(0.0, 0.0), (0.0, 10.0), (0.0, 30.0)]);
        let f = crowdedness_features(&t, 2).unwrap();
        assert_eq!(f.row(1), &[15.0, 25.0]);
        assert!(crowdedness_features(&EntityTable::from_centroids(&[(0.0, 0.0)]), 1).is_err());
    }

    #[test]
    fn assemble_rules() {
        let ids = vec![1, 2, 3];
        let a = FeatureMatrix::new(ids.clone(), vec!["a".into(), "b".into()], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = FeatureMatrix::new(ids.clone(), vec!["c".into(), "d".into()], vec![7., 7., 8., 7., 9., 7.]).unwrap();
        assert_eq!(assemble_features(&[FeatureMatrix::empty(ids.clone()), a.clone()], false).unwrap(), a);
        let ab = assemble_features(&[a.clone(), b.clone()], false).unwrap();
        assert_eq!(ab.row(1), &[3., 4., 8., 7.]);
        let norm = assemble_features(&[a.clone(), b], true).unwrap();
        assert_eq!(norm.column(3), vec![0.0; 3]);
        assert_eq!(norm.column(0), vec![0.0, 0.5, 1.0]);
        assert!(assemble_features(&[a.clone(), a], false).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = FeatureMatrix::new(vec![4, 9], vec!["x".into()], vec![0.1 + 0.2, -1e-300]).unwrap();
        assert_eq!(FeatureMatrix::from_csv(&m.to_csv().unwrap()).unwrap(), m);
    }
}
