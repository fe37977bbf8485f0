use std::collections::{HashMap, VecDeque};

use histograph_core::raster::{
    connected_components, gaussian_blur, gaussian_kernel, otsu_threshold, read_ppm, to_gray,
    write_ppm, Connectivity, GrayImage, Image,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
}

/// Textbook between-class variance, recomputed from scratch for every split.
pub fn otsu_brute_force(hist: &[u64; 256]) -> u8 {
    let total: f64 = hist.iter().map(|&n| n as f64).sum();
    let mut best = (f64::NEG_INFINITY, 0u8);
    for t in 0..256usize {
        let n0: f64 = hist[..=t].iter().map(|&n| n as f64).sum();
        let n1 = total - n0;
        let s0: f64 = (0..=t).map(|i| i as f64 * hist[i] as f64).sum();
        let s1: f64 = (t + 1..256).map(|i| i as f64 * hist[i] as f64).sum();
        let var = if n0 == 0.0 || n1 == 0.0 {
            0.0
        } else {
            let (mu0, mu1) = (s0 / n0, s1 / n1);
            (n0 / total) * (n1 / total) * (mu0 - mu1).powi(2)
        };
        if var > best.0 {
            best = (var, t as u8);
        }
    }
    best.1
}

/// BFS flood fill; returns a component id per pixel (usize::MAX = background).
fn flood_fill(img: &GrayImage, eight: bool) -> Vec<usize> {
    let (h, w) = (img.height(), img.width());
    let mut comp = vec![usize::MAX; h * w];
    let mut next = 0;
    for start in 0..h * w {
        if img.data()[start] == 0 || comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if img.data()[q] != 0 && comp[q] == usize::MAX {
                        comp[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
        next += 1;
    }
    comp
}

#[test]
fn ppm_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = random_image(&mut rng, 64, 64);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.ppm");
    write_ppm(&img, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(read_ppm(&path).unwrap(), img);
    write_ppm(&read_ppm(&path).unwrap(), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn gray_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random_image(&mut rng, 8, 8);
    let gray = to_gray(&img);
    for r in 0..8 {
        for c in 0..8 {
            let [red, green, blue] = img.pixel(r, c).map(f64::from);
            let expect = (0.299 * red + 0.587 * green + 0.114 * blue).round() as u8;
            assert_eq!(gray.get(r, c), expect);
        }
    }
}

#[test]
fn blur_keeps_constant_images() {
    for sigma in [0.5, 1.0, 2.0, 4.0] {
        for v in [0u8, 1, 128, 254, 255] {
            let img = GrayImage::filled(17, 23, v).unwrap();
            assert_eq!(gaussian_blur(&img, sigma).unwrap(), img);
        }
    }
}

#[test]
fn blur_of_impulse_matches_dense_convolution() {
    let mut img = GrayImage::filled(9, 9, 0).unwrap();
    img.set(4, 4, 255);
    let blurred = gaussian_blur(&img, 1.0).unwrap();

    // dense 2-D kernel, built directly from the Gaussian and normalized in 2-D
    let radius = 3i64;
    let mut dense = vec![vec![0.0f64; 7]; 7];
    let mut sum = 0.0;
    for (i, row) in dense.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as i64 - radius, j as i64 - radius);
            *v = (-((x * x + y * y) as f64) / 2.0).exp();
            sum += *v;
        }
    }
    let expected_center = (255.0 * dense[3][3] / sum).round() as u8;
    assert_eq!(blurred.get(4, 4), expected_center);
    for r in 0..9 {
        for c in 0..9 {
            let (dr, dc) = (r as i64 - 4, c as i64 - 4);
            let expect = if dr.abs() <= radius && dc.abs() <= radius {
                255.0 * dense[(dr + radius) as usize][(dc + radius) as usize] / sum
            } else {
                0.0
            };
            assert!((blurred.get(r, c) as f64 - expect).abs() <= 0.5 + 1e-9);
        }
    }
    // monotone decay along the row through the peak
    for c in 4..8 {
        assert!(blurred.get(4, c) >= blurred.get(4, c + 1));
    }
    // mass is conserved up to rounding: less than one gray level per row
    let before: i64 = img.data().iter().map(|&v| v as i64).sum();
    let after: i64 = blurred.data().iter().map(|&v| v as i64).sum();
    assert!((before - after).abs() < 9, "{before} vs {after}");
    assert_eq!(gaussian_kernel(1.0).unwrap().len(), 7);
}

#[test]
fn otsu_matches_exhaustive_scan_on_1000_histograms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let mut hist = [0u64; 256];
        let sparse = rng.random_bool(0.3);
        for h in hist.iter_mut() {
            if !sparse || rng.random_bool(0.1) {
                *h = rng.random_range(0..1000);
            }
        }
        if hist.iter().sum::<u64>() == 0 {
            hist[0] = 1;
        }
        assert_eq!(otsu_threshold(&hist).unwrap(), otsu_brute_force(&hist));
    }
}

fn assert_same_partition(labels: &[u32], oracle: &[usize]) {
    let mut fwd: HashMap<u32, usize> = HashMap::new();
    let mut back: HashMap<usize, u32> = HashMap::new();
    for (&l, &o) in labels.iter().zip(oracle) {
        assert_eq!(l == 0, o == usize::MAX);
        if l == 0 {
            continue;
        }
        assert_eq!(*fwd.entry(l).or_insert(o), o);
        assert_eq!(*back.entry(o).or_insert(l), l);
    }
}

#[test]
fn components_match_flood_fill_on_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let data = (0..h * w).map(|_| u8::from(rng.random_bool(0.45))).collect();
        let img = GrayImage::new(h, w, data).unwrap();
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let lm = connected_components(&img, conn);
            let oracle = flood_fill(&img, eight);
            assert_same_partition(lm.labels(), &oracle);
            // oracle numbers components in first-encounter order too
            let n = oracle.iter().filter(|&&o| o != usize::MAX).max().map_or(0, |m| m + 1);
            assert_eq!(lm.num_labels() as usize, n);
            for (&l, &o) in lm.labels().iter().zip(&oracle) {
                if l > 0 {
                    assert_eq!(l as usize, o + 1);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ppm_encode_decode_identity(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, h, w);
        let bytes = histograph_core::raster::encode_ppm(&img);
        prop_assert_eq!(histograph_core::raster::decode_ppm(&bytes).unwrap(), img);
    }
}
