//! SLIC oversegmentation and hierarchical merging of adjacent superpixels by
//! mean CIELAB color.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{components_by, Connectivity, DisjointSet, Image, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicParams {
    /// Target number of superpixels.
    pub k: usize,
    pub compactness: f64,
    pub max_iterations: usize,
    /// Fragments smaller than this fraction of `S^2` are absorbed by a neighbor.
    pub min_size_fraction: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            k: 400,
            compactness: 10.0,
            max_iterations: 10,
            min_size_fraction: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeParams {
    /// Adjacent regions merge while their mean-color distance is below this.
    pub threshold: f64,
    /// Merging stops once this many regions remain.
    pub min_regions: Option<usize>,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self {
            threshold: 8.0,
            min_regions: None,
        }
    }
}

fn srgb_to_linear(v: u8) -> f64 {
    let c = v as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB (D65) to CIELAB.
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let f = |t: f64| {
        const EPS: f64 = 216.0 / 24389.0;
        const KAPPA: f64 = 24389.0 / 27.0;
        if t > EPS {
            t.cbrt()
        } else {
            (KAPPA * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.950_47), f(y), f(z / 1.088_83));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn image_to_lab(img: &Image) -> Vec<[f64; 3]> {
    let mut lut = std::collections::HashMap::new();
    img.pixels()
        .map(|p| *lut.entry(p).or_insert_with(|| rgb_to_lab(p)))
        .collect()
}

fn lab_dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[derive(Clone, Copy, Debug)]
struct Center {
    lab: [f64; 3],
    row: f64,
    col: f64,
}

fn grid_centers(lab: &[[f64; 3]], h: usize, w: usize, k: usize, s: f64) -> Vec<Center> {
    let rows = ((h as f64 / s).round() as usize).clamp(1, h);
    let cols = ((k as f64 / rows as f64).round() as usize).clamp(1, w);
    let (step_r, step_c) = (h as f64 / rows as f64, w as f64 / cols as f64);
    let gradient = |r: usize, c: usize| {
        let at = |r: usize, c: usize| &lab[r * w + c];
        let (ru, rd) = (r.saturating_sub(1), (r + 1).min(h - 1));
        let (cl, cr) = (c.saturating_sub(1), (c + 1).min(w - 1));
        lab_dist2(at(r, cr), at(r, cl)) + lab_dist2(at(rd, c), at(ru, c))
    };
    let mut centers = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let (fr, fc) = ((i as f64 + 0.5) * step_r - 0.5, (j as f64 + 0.5) * step_c - 0.5);
            let (r, c) = (fr.round() as usize, fc.round() as usize);
            let (mut best, mut best_g) = ((r, c), gradient(r, c));
            let mut moved = false;
            for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let g = gradient(nr, nc);
                    if g < best_g {
                        best = (nr, nc);
                        best_g = g;
                        moved = true;
                    }
                }
            }
            let (row, col) = if moved { (best.0 as f64, best.1 as f64) } else { (fr, fc) };
            centers.push(Center {
                lab: lab[best.0 * w + best.1],
                row,
                col,
            });
        }
    }
    centers
}

/// SLIC superpixels; labels are connected and numbered `1..=L` in
/// first-encounter raster order.
pub fn slic(img: &Image, params: &SlicParams) -> Result<LabelMap> {
    let (h, w) = (img.height(), img.width());
    if params.k == 0 || params.k > h * w {
        return Err(Error::param(format!(
            "superpixel count must be in 1..={}, got {}",
            h * w,
            params.k
        )));
    }
    if !(params.compactness > 0.0) || params.max_iterations == 0 {
        return Err(Error::param("compactness must be > 0 and iterations >= 1"));
    }
    let lab = image_to_lab(img);
    let s = ((h * w) as f64 / params.k as f64).sqrt();
    let mut centers = grid_centers(&lab, h, w, params.k, s);
    let spatial = (params.compactness / s).powi(2);
    let window = s.ceil() as isize;

    let mut assign = vec![usize::MAX; h * w];
    let mut best = vec![f64::INFINITY; h * w];
    for _ in 0..params.max_iterations {
        best.iter_mut().for_each(|b| *b = f64::INFINITY);
        assign.iter_mut().for_each(|a| *a = usize::MAX);
        for (ci, ctr) in centers.iter().enumerate() {
            let (cr, cc) = (ctr.row.round() as isize, ctr.col.round() as isize);
            let r0 = (cr - window).max(0) as usize;
            let r1 = (cr + window).min(h as isize - 1) as usize;
            let c0 = (cc - window).max(0) as usize;
            let c1 = (cc + window).min(w as isize - 1) as usize;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let p = r * w + c;
                    let dxy = (r as f64 - ctr.row).powi(2) + (c as f64 - ctr.col).powi(2);
                    let d = lab_dist2(&lab[p], &ctr.lab) + dxy * spatial;
                    if d < best[p] {
                        best[p] = d;
                        assign[p] = ci;
                    }
                }
            }
        }
        // pixels outside every window go to the globally nearest center
        for p in 0..h * w {
            if assign[p] != usize::MAX {
                continue;
            }
            let (r, c) = ((p / w) as f64, (p % w) as f64);
            let mut nearest = (f64::INFINITY, 0);
            for (ci, ctr) in centers.iter().enumerate() {
                let d = lab_dist2(&lab[p], &ctr.lab)
                    + ((r - ctr.row).powi(2) + (c - ctr.col).powi(2)) * spatial;
                if d < nearest.0 {
                    nearest = (d, ci);
                }
            }
            assign[p] = nearest.1;
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (p, &ci) in assign.iter().enumerate() {
            let acc = &mut sums[ci];
            acc[0] += lab[p][0];
            acc[1] += lab[p][1];
            acc[2] += lab[p][2];
            acc[3] += (p / w) as f64;
            acc[4] += (p % w) as f64;
            acc[5] += 1.0;
        }
        for (ctr, acc) in centers.iter_mut().zip(&sums) {
            if acc[5] > 0.0 {
                let n = acc[5];
                ctr.lab = [acc[0] / n, acc[1] / n, acc[2] / n];
                ctr.row = acc[3] / n;
                ctr.col = acc[4] / n;
            }
        }
    }

    let min_size = (params.min_size_fraction * s * s).floor() as usize;
    Ok(enforce_connectivity(&assign, h, w, min_size, 2 * params.k))
}

/// Splits labels into 4-connected fragments, folds fragments smaller than
/// `min_size` into their largest adjacent region, then folds the smallest
/// regions until at most `max_regions` remain.
fn enforce_connectivity(
    assign: &[usize],
    h: usize,
    w: usize,
    min_size: usize,
    max_regions: usize,
) -> LabelMap {
    let frags = components_by(h, w, Connectivity::Four, |_| true, |a, b| assign[a] == assign[b]);
    let n = frags.num_labels() as usize;
    let mut size = vec![0usize; n + 1];
    for &l in frags.labels() {
        size[l as usize] += 1;
    }
    let mut neighbors = vec![BTreeSet::new(); n + 1];
    for r in 0..h {
        for c in 0..w {
            let a = frags.get(r, c) as usize;
            for (nr, nc) in [(r, c + 1), (r + 1, c)] {
                if nr < h && nc < w {
                    let b = frags.get(nr, nc) as usize;
                    if a != b {
                        neighbors[a].insert(b);
                        neighbors[b].insert(a);
                    }
                }
            }
        }
    }
    let mut sets = DisjointSet::new(n + 1);
    let mut regions = n;
    let join = |sets: &mut DisjointSet, size: &mut Vec<usize>, neighbors: &mut Vec<BTreeSet<usize>>, root: usize| -> Option<usize> {
        let target = neighbors[root]
            .iter()
            .map(|&m| sets.find(m))
            .filter(|&m| m != root)
            .max_by(|&a, &b| size[a].cmp(&size[b]).then(b.cmp(&a)))?;
        let new_root = sets.union(root, target);
        let old = if new_root == root { target } else { root };
        size[new_root] += size[old];
        let moved = std::mem::take(&mut neighbors[old]);
        neighbors[new_root].extend(moved);
        Some(new_root)
    };
    for l in 1..=n {
        let mut root = sets.find(l);
        while size[root] < min_size {
            match join(&mut sets, &mut size, &mut neighbors, root) {
                Some(r) => {
                    root = r;
                    regions -= 1;
                }
                None => break,
            }
        }
    }
    if regions > max_regions {
        let mut by_size: BTreeSet<(usize, usize)> = (1..=n)
            .filter(|&l| sets.find(l) == l)
            .map(|l| (size[l], l))
            .collect();
        while regions > max_regions {
            let Some((_, root)) = by_size.pop_first() else { break };
            let before: Vec<(usize, usize)> = neighbors[root]
                .iter()
                .map(|&m| sets.find(m))
                .filter(|&m| m != root)
                .map(|m| (size[m], m))
                .collect();
            let Some(new_root) = join(&mut sets, &mut size, &mut neighbors, root) else { continue };
            for key in before {
                by_size.remove(&key);
            }
            by_size.insert((size[new_root], new_root));
            regions -= 1;
        }
    }
    let labels: Vec<u32> = frags
        .labels()
        .iter()
        .map(|&l| sets.find(l as usize) as u32)
        .collect();
    LabelMap::from_sparse(h, w, labels)
        .expect("fragment roots form a partition")
        .relabel_raster_order()
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    a: u32,
    b: u32,
    version: (u64, u64),
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then((self.a, self.b).cmp(&(other.a, other.b)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Pairs of distinct labels that touch under 8-connectivity, with `a < b`.
pub(crate) fn adjacent_pairs(labels: &LabelMap) -> BTreeSet<(u32, u32)> {
    let (h, w) = (labels.height(), labels.width());
    let mut pairs = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            let a = labels.get(r, c);
            for (dr, dc) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr >= h as isize || nc < 0 || nc >= w as isize {
                    continue;
                }
                let b = labels.get(nr as usize, nc as usize);
                if a != b && a != 0 && b != 0 {
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    pairs
}

/// Greedily merges the closest adjacent pair (mean CIELAB distance, ties
/// by smaller label pair) while that distance is below the threshold.
/// The output is a coarsening of `sp`, relabeled `1..=L` by ascending
/// surviving label.
pub fn merge_superpixels(img: &Image, sp: &LabelMap, params: &MergeParams) -> Result<LabelMap> {
    if (img.height(), img.width()) != (sp.height(), sp.width()) {
        return Err(Error::shape("label map and image sizes differ"));
    }
    if !(params.threshold >= 0.0) {
        return Err(Error::param(format!("merge threshold must be >= 0, got {}", params.threshold)));
    }
    let n = sp.num_labels() as usize;
    let lab = image_to_lab(img);
    let mut sum = vec![[0.0f64; 3]; n + 1];
    let mut count = vec![0usize; n + 1];
    for (p, &l) in sp.labels().iter().enumerate() {
        for k in 0..3 {
            sum[l as usize][k] += lab[p][k];
        }
        count[l as usize] += 1;
    }
    let mean = |sum: &[f64; 3], n: usize| sum.map(|s| s / n as f64);
    let mut neighbors = vec![BTreeSet::new(); n + 1];
    for (a, b) in adjacent_pairs(sp) {
        neighbors[a as usize].insert(b);
        neighbors[b as usize].insert(a);
    }
    let mut version = vec![0u64; n + 1];
    let mut alive = vec![true; n + 1];
    let mut regions = (1..=n).filter(|&l| count[l] > 0).count();
    let mut heap = BinaryHeap::new();
    let push = |heap: &mut BinaryHeap<Reverse<Candidate>>, a: u32, b: u32, sum: &[[f64; 3]], count: &[usize], version: &[u64]| {
        let (a, b) = (a.min(b), a.max(b));
        let d = lab_dist2(&mean(&sum[a as usize], count[a as usize]), &mean(&sum[b as usize], count[b as usize])).sqrt();
        heap.push(Reverse(Candidate {
            dist: d,
            a,
            b,
            version: (version[a as usize], version[b as usize]),
        }));
    };
    for a in 1..=n {
        for &b in &neighbors[a] {
            if (a as u32) < b {
                push(&mut heap, a as u32, b, &sum, &count, &version);
            }
        }
    }
    let floor = params.min_regions.unwrap_or(1).max(1);
    let mut parent: Vec<u32> = (0..=n as u32).collect();
    while let Some(Reverse(cand)) = heap.pop() {
        if cand.dist >= params.threshold || regions <= floor {
            break;
        }
        let (a, b) = (cand.a as usize, cand.b as usize);
        if !alive[a] || !alive[b] || cand.version != (version[a], version[b]) {
            continue;
        }
        // b is absorbed into a (a < b)
        alive[b] = false;
        parent[b] = a as u32;
        for k in 0..3 {
            sum[a][k] += sum[b][k];
        }
        count[a] += count[b];
        version[a] += 1;
        let moved: Vec<u32> = std::mem::take(&mut neighbors[b]).into_iter().collect();
        for m in moved {
            neighbors[m as usize].remove(&(b as u32));
            if m as usize != a {
                neighbors[m as usize].insert(a as u32);
                neighbors[a].insert(m);
            }
        }
        neighbors[a].remove(&(b as u32));
        regions -= 1;
        let adj: Vec<u32> = neighbors[a].iter().copied().collect();
        for m in adj {
            push(&mut heap, a as u32, m, &sum, &count, &version);
        }
    }
    let root = |mut l: u32| {
        while parent[l as usize] != l {
            l = parent[l as usize];
        }
        l
    };
    let labels: Vec<u32> = sp.labels().iter().map(|&l| if l == 0 { 0 } else { root(l) }).collect();
    LabelMap::from_sparse(sp.height(), sp.width(), labels)
}

/// SLIC followed by merging: the tissue components of an image.
pub fn tissue_components(img: &Image, slic_params: &SlicParams, merge: &MergeParams) -> Result<LabelMap> {
    merge_superpixels(img, &slic(img, slic_params)?, merge)
}
