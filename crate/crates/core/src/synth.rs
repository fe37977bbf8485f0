//! Seeded synthetic images: two-stain renderings with known ground truth,
//! disk fixtures for nuclei detection, and pseudo-tissue tiles used by the
//! benchmark and the demo pipeline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::Image;
use crate::stain::{od_to_intensity, StainMatrix, StainProfile};

/// Synthetic image together with the stains and concentrations that made it.
#[derive(Clone, Debug)]
pub struct StainFixture {
    pub image: Image,
    pub stains: StainMatrix,
    pub concentrations: Vec<[f64; 2]>,
}

/// Stain vectors jittered around the standard H&E directions.
pub fn random_stains(rng: &mut impl Rng) -> StainMatrix {
    let h0 = [0.65, 0.70, 0.29];
    let e0 = [0.07, 0.99, 0.11];
    let mut jitter = |v: [f64; 3]| v.map(|x: f64| (x + rng.random_range(-0.08..0.08)).max(0.02));
    let (h, e) = (jitter(h0), jitter(e0));
    StainMatrix::new(h, e).expect("jittered stains are positive")
}

/// Renders concentrations through `stains` into 8-bit RGB.
pub fn render(stains: &StainMatrix, conc: &[[f64; 2]], height: usize, width: usize) -> Image {
    let data = conc
        .iter()
        .flat_map(|&c| stains.compose(c).map(od_to_intensity))
        .collect();
    Image::new(height, width, data).expect("dimensions match")
}

/// Random per-pixel concentrations: some background, pure-stain pixels and
/// mixtures. `sparse` favours single-stain pixels.
pub fn random_concentrations(rng: &mut impl Rng, n: usize, sparse: bool) -> Vec<[f64; 2]> {
    let (p_h, p_e) = if sparse { (0.45, 0.45) } else { (0.3, 0.3) };
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < 0.15 {
                return [0.0, 0.0];
            }
            let u: f64 = rng.random();
            let mut mag = || rng.random_range(0.3..1.2);
            if u < p_h {
                [mag(), 0.0]
            } else if u < p_h + p_e {
                [0.0, mag()]
            } else {
                [mag(), mag()]
            }
        })
        .collect()
}

pub fn two_stain_fixture(seed: u64, side: usize, sparse: bool) -> StainFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stains = random_stains(&mut rng);
    let concentrations = random_concentrations(&mut rng, side * side, sparse);
    StainFixture {
        image: render(&stains, &concentrations, side, side),
        stains,
        concentrations,
    }
}

/// White canvas with filled hematoxylin disks of the given centers (row, col)
/// and radius, concentration `conc` in base-10 OD.
pub fn disk_image(height: usize, width: usize, centers: &[(f64, f64)], radius: f64, conc: f64) -> Image {
    let stains = StainProfile::default_he().stain_matrix;
    let rgb = stains.compose([conc, 0.0]).map(od_to_intensity);
    let mut img = Image::filled(height, width, [255, 255, 255]).expect("non-empty canvas");
    for &(cr, cc) in centers {
        let r0 = (cr - radius).floor().max(0.0) as usize;
        let r1 = ((cr + radius).ceil() as usize).min(height - 1);
        let c0 = (cc - radius).floor().max(0.0) as usize;
        let c1 = ((cc + radius).ceil() as usize).min(width - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (dr, dc) = (r as f64 - cr, c as f64 - cc);
                if dr * dr + dc * dc <= radius * radius {
                    img.set_pixel(r, c, rgb);
                }
            }
        }
    }
    img
}

/// Pale background, eosin-stained stroma bands and scattered hematoxylin
/// nuclei, with mild per-pixel noise.
pub fn pseudo_tissue(side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stains = StainProfile::default_he().stain_matrix;
    let n = side * side;
    let s = side as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(1.0..3.0) * std::f64::consts::TAU / s,
                rng.random_range(1.0..3.0) * std::f64::consts::TAU / s,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let mut conc = vec![[0.0f64; 2]; n];
    for r in 0..side {
        for c in 0..side {
            let f: f64 = waves
                .iter()
                .map(|&(a, b, ph, amp)| amp * (a * r as f64 + ph).sin() * (b * c as f64 - ph).cos())
                .sum();
            let i = r * side + c;
            if f > -0.3 {
                conc[i][1] = 0.25 + 0.15 * (f + 0.3).min(1.0);
            }
            conc[i][0] = 0.02;
        }
    }
    // nuclei, roughly one per 30x30 px of tissue
    let count = n / 900;
    for _ in 0..count {
        let cr = rng.random_range(0.0..s);
        let cc = rng.random_range(0.0..s);
        let i = (cr as usize).min(side - 1) * side + (cc as usize).min(side - 1);
        if conc[i][1] == 0.0 {
            continue;
        }
        let radius: f64 = rng.random_range(4.0..8.0);
        let strength = rng.random_range(0.6..1.0);
        let r0 = (cr - radius).max(0.0) as usize;
        let r1 = ((cr + radius) as usize).min(side - 1);
        let c0 = (cc - radius).max(0.0) as usize;
        let c1 = ((cc + radius) as usize).min(side - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (dr, dc) = (r as f64 - cr, c as f64 - cc);
                if dr * dr + dc * dc <= radius * radius {
                    conc[r * side + c][0] = strength;
                }
            }
        }
    }
    for c in &mut conc {
        c[0] = (c[0] + rng.random_range(-0.02..0.02)).max(0.0);
        c[1] = (c[1] + rng.random_range(-0.02..0.02)).max(0.0);
    }
    render(&stains, &conc, side, side)
}

/// Graph whose class is carried only by a few marked nodes.
#[derive(Clone, Debug)]
pub struct PlantedGraph {
    pub graph: crate::graph_build::EntityGraph,
    pub label: usize,
    pub marked: Vec<usize>,
}

/// `n` nodes with features `[signal, noise]` and random edges. Three marked
/// nodes carry signal +1 (label 1) or -1 (label 0); all others carry 0.
/// Noise is uniform in [-1, 1) on every node.
pub fn planted_graph(rng: &mut impl Rng, n: usize, edge_prob: f64) -> PlantedGraph {
    assert!(n >= 3, "planted graph needs at least 3 nodes");
    let label = rng.random_range(0..2usize);
    let mut nodes: Vec<usize> = (0..n).collect();
    let (chosen, _) = nodes.partial_shuffle(rng, 3);
    let mut marked = chosen.to_vec();
    marked.sort_unstable();
    let signal = if label == 1 { 1.0 } else { -1.0 };
    let mut features = Vec::with_capacity(n * 2);
    for v in 0..n {
        features.push(if marked.contains(&v) { signal } else { 0.0 });
        features.push(rng.random_range(-1.0..1.0));
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(edge_prob) {
                edges.push((u, v));
            }
        }
    }
    let centroids = (0..n).map(|v| ((v / 8) as f64 * 16.0, (v % 8) as f64 * 16.0)).collect();
    let graph = crate::graph_build::EntityGraph::new(n, edges, features, centroids, vec!["signal".into(), "noise".into()])
        .expect("valid planted graph");
    PlantedGraph { graph, label, marked }
}
