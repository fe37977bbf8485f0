//! Beer-Lambert optical density, Macenko and Vahadane stain estimation,
//! concentration fitting and stain normalization.
//!
//! Optical density uses `OD = -log10((I + 1) / 256)`, so an 8-bit intensity
//! maps into `[0, log10(256)]` and back without loss.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::stats::percentile;

/// `log10(256)`, the optical density of a zero-intensity channel.
pub const OD_MAX: f64 = 2.408_239_965_311_849_6;

/// Minimum number of tissue pixels the estimators accept.
pub const MIN_TISSUE_PIXELS: usize = 100;

fn od_lut() -> [f64; 256] {
    let mut lut = [0.0; 256];
    for (i, v) in lut.iter_mut().enumerate() {
        *v = -((i as f64 + 1.0) / 256.0).log10();
    }
    lut
}

pub fn intensity_to_od(i: u8) -> f64 {
    -((i as f64 + 1.0) / 256.0).log10()
}

pub fn od_to_intensity(od: f64) -> u8 {
    (256.0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
}

/// Per-pixel optical density, row-major.
pub fn rgb_to_od(img: &Image) -> Vec<[f64; 3]> {
    let lut = od_lut();
    img.pixels()
        .map(|[r, g, b]| [lut[r as usize], lut[g as usize], lut[b as usize]])
        .collect()
}

pub fn od_to_rgb(od: &[[f64; 3]], height: usize, width: usize) -> Result<Image> {
    if od.len() != height * width {
        return Err(Error::shape(format!(
            "{} optical densities for {height}x{width}",
            od.len()
        )));
    }
    let data = od
        .iter()
        .flat_map(|p| p.map(od_to_intensity))
        .collect();
    Image::new(height, width, data)
}

/// Hematoxylin and eosin absorption directions, each a unit vector of
/// per-channel (R, G, B) optical densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 2]", into = "[[f64; 3]; 2]")]
pub struct StainMatrix {
    columns: [[f64; 3]; 2],
}

impl TryFrom<[[f64; 3]; 2]> for StainMatrix {
    type Error = Error;

    fn try_from(columns: [[f64; 3]; 2]) -> Result<Self> {
        Self::new(columns[0], columns[1])
    }
}

impl From<StainMatrix> for [[f64; 3]; 2] {
    fn from(m: StainMatrix) -> Self {
        m.columns
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl StainMatrix {
    /// Normalizes both vectors to unit length. Components must be
    /// non-negative and each vector nonzero.
    pub fn new(hematoxylin: [f64; 3], eosin: [f64; 3]) -> Result<Self> {
        let mut columns = [hematoxylin, eosin];
        for col in &mut columns {
            if col.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::input(format!(
                    "stain vector components must be finite and non-negative: {col:?}"
                )));
            }
            let n = norm3(*col);
            if n == 0.0 {
                return Err(Error::input("zero stain vector"));
            }
            // already-unit vectors (e.g. deserialized ones) are kept bit-exact
            if (n - 1.0).abs() > 1e-12 {
                col.iter_mut().for_each(|x| *x /= n);
            }
        }
        Ok(Self { columns })
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.columns[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.columns[1]
    }

    pub fn column(&self, j: usize) -> [f64; 3] {
        self.columns[j]
    }

    /// Optical density of concentrations `c`.
    pub fn compose(&self, c: [f64; 2]) -> [f64; 3] {
        let [h, e] = self.columns;
        [
            h[0] * c[0] + e[0] * c[1],
            h[1] * c[0] + e[1] * c[1],
            h[2] * c[0] + e[2] * c[1],
        ]
    }

    /// Left pseudo-inverse `(W^T W)^-1 W^T`, rows per stain.
    fn pseudo_inverse(&self) -> Result<[[f64; 3]; 2]> {
        let [h, e] = self.columns;
        if norm3(cross3(h, e)) < 1e-6 {
            return Err(Error::SingularStainMatrix);
        }
        let (a, b, d) = (dot3(h, h), dot3(h, e), dot3(e, e));
        let det = a * d - b * b;
        let mut rows = [[0.0; 3]; 2];
        for ch in 0..3 {
            rows[0][ch] = (d * h[ch] - b * e[ch]) / det;
            rows[1][ch] = (a * e[ch] - b * h[ch]) / det;
        }
        Ok(rows)
    }
}

/// Stain matrix plus robust per-stain maximum concentrations; the target of
/// a normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainProfile {
    pub stain_matrix: StainMatrix,
    pub max_conc: [f64; 2],
}

impl StainProfile {
    /// Reference-free target: the widely used H&E reference vectors
    /// H = (0.5626, 0.7201, 0.4062), E = (0.2159, 0.8012, 0.5581) with
    /// maximum concentrations (1.9705, 1.0308) expressed in natural-log OD,
    /// rescaled here to this crate's base-10 OD.
    pub fn default_he() -> Self {
        let ln10 = std::f64::consts::LN_10;
        Self {
            stain_matrix: StainMatrix::new([0.5626, 0.7201, 0.4062], [0.2159, 0.8012, 0.5581])
                .expect("constant stain vectors are valid"),
            max_conc: [1.9705 / ln10, 1.0308 / ln10],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Per-pixel (hematoxylin, eosin) concentrations, clamped to be non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; 2]>,
}

impl ConcentrationMap {
    pub fn channel(&self, j: usize) -> Vec<f64> {
        self.data.iter().map(|c| c[j]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StainMethod {
    Macenko,
    Vahadane,
}

impl std::str::FromStr for StainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macenko" => Ok(Self::Macenko),
            "vahadane" => Ok(Self::Vahadane),
            other => Err(Error::param(format!("unknown stain method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StainParams {
    /// Pixels whose largest channel OD is at most `beta` count as background.
    pub beta: f64,
    /// Angle percentile (and `100 - alpha`) picking the extreme stain directions.
    pub alpha: f64,
    /// L1 weight on concentrations (Vahadane).
    pub lambda: f64,
    /// Maximum alternating iterations (Vahadane).
    pub iters: usize,
    /// Relative objective change that ends the Vahadane loop early.
    pub tol: f64,
}

impl Default for StainParams {
    fn default() -> Self {
        Self {
            beta: 0.15,
            alpha: 1.0,
            lambda: 0.1,
            iters: 50,
            tol: 1e-4,
        }
    }
}

fn tissue_od(od: &[[f64; 3]], beta: f64) -> Vec<[f64; 3]> {
    od.iter()
        .filter(|p| p[0].max(p[1]).max(p[2]) > beta)
        .copied()
        .collect()
}

fn check_tissue(n: usize) -> Result<()> {
    if n < MIN_TISSUE_PIXELS {
        return Err(Error::TooFewTissuePixels {
            found: n,
            required: MIN_TISSUE_PIXELS,
        });
    }
    Ok(())
}

/// Orders two candidate directions so hematoxylin (stronger red absorption)
/// comes first; `a` is the lower-angle candidate and wins ties.
fn label_stains(a: [f64; 3], b: [f64; 3]) -> Result<StainMatrix> {
    if b[0] > a[0] {
        StainMatrix::new(b, a)
    } else {
        StainMatrix::new(a, b)
    }
}

/// Flips a direction into the positive octant and renormalizes.
fn positive_direction(v: [f64; 3]) -> Result<[f64; 3]> {
    let s = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let v = v.map(|x| (s * x).max(0.0));
    let n = norm3(v);
    if n < 1e-12 {
        return Err(Error::DegenerateCovariance);
    }
    Ok(v.map(|x| x / n))
}

pub fn estimate_stains_macenko(img: &Image, beta: f64, alpha: f64) -> Result<StainMatrix> {
    macenko_from_od(&tissue_od(&rgb_to_od(img), beta), alpha)
}

/// Macenko estimation on already-filtered tissue optical densities.
pub fn macenko_from_od(tissue: &[[f64; 3]], alpha: f64) -> Result<StainMatrix> {
    check_tissue(tissue.len())?;
    if !(0.0..50.0).contains(&alpha) {
        return Err(Error::param(format!("alpha must be in [0, 50), got {alpha}")));
    }
    let n = tissue.len() as f64;
    let mut mean = [0.0; 3];
    for p in tissue {
        for c in 0..3 {
            mean[c] += p[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = Matrix3::<f64>::zeros();
    for p in tissue {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    cov /= n - 1.0;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 1e-12) || !(l2 > 1e-9 * l1) {
        return Err(Error::DegenerateCovariance);
    }
    let col = |k: usize| {
        let c = eig.eigenvectors.column(order[k]);
        [c[0], c[1], c[2]]
    };
    let (mut e1, e2) = (col(0), col(1));
    // orient the plane so the OD cloud sits around angle 0
    if dot3(mean, e1) < 0.0 {
        e1 = e1.map(|x| -x);
    }

    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|&p| dot3(p, e2).atan2(dot3(p, e1)))
        .collect();
    let lo = percentile(&mut angles, alpha).expect("non-empty");
    let hi = percentile(&mut angles, 100.0 - alpha).expect("non-empty");
    let direction = |phi: f64| {
        positive_direction([
            e1[0] * phi.cos() + e2[0] * phi.sin(),
            e1[1] * phi.cos() + e2[1] * phi.sin(),
            e1[2] * phi.cos() + e2[2] * phi.sin(),
        ])
    };
    label_stains(direction(lo)?, direction(hi)?)
}

/// Result of the sparse non-negative factorization `V ≈ W H`.
#[derive(Clone, Debug)]
pub struct Factorization {
    pub stains: StainMatrix,
    pub concentrations: Vec<[f64; 2]>,
    /// Objective after each accepted iteration; entry 0 is the initial value.
    pub objective: Vec<f64>,
}

fn objective(v: &[[f64; 3]], w: &[[f64; 3]; 2], h: &[[f64; 2]], lambda: f64) -> f64 {
    v.iter()
        .zip(h)
        .map(|(p, c)| {
            let mut r = 0.0;
            for ch in 0..3 {
                let d = p[ch] - w[0][ch] * c[0] - w[1][ch] * c[1];
                r += d * d;
            }
            r + lambda * (c[0] + c[1])
        })
        .sum()
}

/// Coordinate-descent non-negative lasso for one pixel, warm-started from `c`.
fn lasso_pixel(p: &[f64; 3], w: &[[f64; 3]; 2], sq: [f64; 2], c: &mut [f64; 2], lambda: f64) {
    for _ in 0..10 {
        let before = *c;
        for j in 0..2 {
            let o = 1 - j;
            let mut num = 0.0;
            for ch in 0..3 {
                num += w[j][ch] * (p[ch] - w[o][ch] * c[o]);
            }
            c[j] = ((num - 0.5 * lambda) / sq[j]).max(0.0);
        }
        if (c[0] - before[0]).abs() + (c[1] - before[1]).abs() < 1e-12 {
            break;
        }
    }
}

fn lasso_all(v: &[[f64; 3]], w: &[[f64; 3]; 2], h: &mut [[f64; 2]], lambda: f64) {
    let sq = [dot3(w[0], w[0]), dot3(w[1], w[1])];
    for (p, c) in v.iter().zip(h.iter_mut()) {
        lasso_pixel(p, w, sq, c, lambda);
    }
}

/// Alternating minimization of `||V - W H||_F^2 + lambda ||H||_1` with
/// `W, H >= 0` and unit-norm columns of `W`, starting from `init`.
///
/// H is updated by coordinate descent; W by a projected gradient step with
/// column renormalization, accepted only when the objective does not grow.
pub fn vahadane_factorize(
    v: &[[f64; 3]],
    init: StainMatrix,
    lambda: f64,
    iters: usize,
    tol: f64,
) -> Result<Factorization> {
    if !(lambda >= 0.0) {
        return Err(Error::param(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut w = init.columns;
    let pinv = init.pseudo_inverse()?;
    let mut h: Vec<[f64; 2]> = v
        .iter()
        .map(|p| [dot3(pinv[0], *p).max(0.0), dot3(pinv[1], *p).max(0.0)])
        .collect();
    let mut f = objective(v, &w, &h, lambda);
    let mut trace = vec![f];

    for iteration in 1..=iters {
        let f_prev = f;
        lasso_all(v, &w, &mut h, lambda);
        f = objective(v, &w, &h, lambda);

        // gradient of the fit term w.r.t. W, and the Lipschitz bound 2*||H H^T||
        let mut grad = [[0.0; 3]; 2];
        let mut hh = [0.0; 3];
        for (p, c) in v.iter().zip(&h) {
            for ch in 0..3 {
                let r = p[ch] - w[0][ch] * c[0] - w[1][ch] * c[1];
                grad[0][ch] -= 2.0 * r * c[0];
                grad[1][ch] -= 2.0 * r * c[1];
            }
            hh[0] += c[0] * c[0];
            hh[1] += c[0] * c[1];
            hh[2] += c[1] * c[1];
        }
        let tr = hh[0] + hh[2];
        let disc = ((hh[0] - hh[2]).powi(2) + 4.0 * hh[1] * hh[1]).sqrt();
        let lipschitz = tr + disc; // 2 * largest eigenvalue
        if lipschitz > 0.0 {
            let mut step = 1.0 / lipschitz;
            for _ in 0..12 {
                let mut cand = w;
                let mut norms = [0.0; 2];
                for j in 0..2 {
                    for ch in 0..3 {
                        cand[j][ch] = (w[j][ch] - step * grad[j][ch]).max(0.0);
                    }
                    norms[j] = norm3(cand[j]);
                }
                if norms.iter().all(|&n| n > 1e-12) {
                    for j in 0..2 {
                        cand[j].iter_mut().for_each(|x| *x /= norms[j]);
                    }
                    let cand_h: Vec<[f64; 2]> =
                        h.iter().map(|c| [c[0] * norms[0], c[1] * norms[1]]).collect();
                    let f_cand = objective(v, &cand, &cand_h, lambda);
                    if f_cand <= f {
                        w = cand;
                        h = cand_h;
                        f = f_cand;
                        break;
                    }
                }
                step *= 0.5;
            }
        }

        if f > f_prev + 1e-6 * f_prev.abs().max(1.0) {
            return Err(Error::ObjectiveIncrease {
                iteration,
                before: f_prev,
                after: f,
            });
        }
        if !f.is_finite() {
            return Err(Error::NonFinite(format!(
                "factorization objective at iteration {iteration}"
            )));
        }
        trace.push(f);
        if f_prev > 0.0 && (f_prev - f) / f_prev < tol {
            break;
        }
    }

    // hematoxylin labeling; the candidate closer to the Macenko hematoxylin
    // direction plays the lower-angle role on ties
    let (a, b) = (w[0], w[1]);
    let swap = b[0] > a[0];
    let stains = label_stains(a, b)?;
    if swap {
        h.iter_mut().for_each(|c| c.swap(0, 1));
    }
    Ok(Factorization {
        stains,
        concentrations: h,
        objective: trace,
    })
}

pub fn estimate_stains_vahadane(img: &Image, params: &StainParams) -> Result<StainMatrix> {
    let tissue = tissue_od(&rgb_to_od(img), params.beta);
    vahadane_from_od(&tissue, params).map(|f| f.stains)
}

pub fn vahadane_from_od(tissue: &[[f64; 3]], params: &StainParams) -> Result<Factorization> {
    let init = macenko_from_od(tissue, params.alpha)?;
    vahadane_factorize(tissue, init, params.lambda, params.iters, params.tol)
}

fn fit_od(od: &[[f64; 3]], stains: &StainMatrix) -> Result<Vec<[f64; 2]>> {
    let pinv = stains.pseudo_inverse()?;
    Ok(od
        .iter()
        .map(|p| [dot3(pinv[0], *p).max(0.0), dot3(pinv[1], *p).max(0.0)])
        .collect())
}

/// Least-squares concentrations per pixel, clamped to be non-negative.
pub fn fit_concentrations(img: &Image, stains: &StainMatrix) -> Result<ConcentrationMap> {
    Ok(ConcentrationMap {
        height: img.height(),
        width: img.width(),
        data: fit_od(&rgb_to_od(img), stains)?,
    })
}

fn robust_max(conc: &[[f64; 2]], od: &[[f64; 3]], beta: f64) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut vals: Vec<f64> = conc
            .iter()
            .zip(od)
            .filter(|(_, p)| p[0].max(p[1]).max(p[2]) > beta)
            .map(|(c, _)| c[j])
            .collect();
        *slot = percentile(&mut vals, 99.0).unwrap_or(0.0);
    }
    out
}

fn estimate_from_od(od: &[[f64; 3]], method: StainMethod, params: &StainParams) -> Result<StainMatrix> {
    let tissue = tissue_od(od, params.beta);
    match method {
        StainMethod::Macenko => macenko_from_od(&tissue, params.alpha),
        StainMethod::Vahadane => vahadane_from_od(&tissue, params).map(|f| f.stains),
    }
}

/// Stain matrix and 99th-percentile concentrations (over tissue pixels).
pub fn estimate_profile(img: &Image, method: StainMethod, params: &StainParams) -> Result<StainProfile> {
    let od = rgb_to_od(img);
    let stain_matrix = estimate_from_od(&od, method, params)?;
    let conc = fit_od(&od, &stain_matrix)?;
    Ok(StainProfile {
        stain_matrix,
        max_conc: robust_max(&conc, &od, params.beta),
    })
}

/// Maps `img` onto the stain appearance of `reference`, or of
/// [`StainProfile::default_he`] when none is given. Images without any
/// tissue pixel are returned unchanged.
pub fn normalize(
    img: &Image,
    method: StainMethod,
    reference: Option<&StainProfile>,
    params: &StainParams,
) -> Result<Image> {
    let od = rgb_to_od(img);
    if !od.iter().any(|p| p[0].max(p[1]).max(p[2]) > params.beta) {
        return Ok(img.clone());
    }
    let source = estimate_from_od(&od, method, params)?;
    let conc = fit_od(&od, &source)?;
    let src_max = robust_max(&conc, &od, params.beta);
    let target = reference.copied().unwrap_or_else(StainProfile::default_he);
    let scale = [0, 1].map(|j| {
        if src_max[j] > 0.0 {
            target.max_conc[j] / src_max[j]
        } else {
            0.0
        }
    });
    let out: Vec<[f64; 3]> = conc
        .iter()
        .map(|c| target.stain_matrix.compose([c[0] * scale[0], c[1] * scale[1]]))
        .collect();
    od_to_rgb(&out, img.height(), img.width())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn od_endpoints() {
        assert_eq!(intensity_to_od(255), 0.0);
        assert!((intensity_to_od(0) - OD_MAX).abs() < 1e-12);
        assert!((OD_MAX - 256f64.log10()).abs() < 1e-15);
        assert_eq!(od_to_intensity(0.0), 255);
        assert_eq!(od_to_intensity(OD_MAX), 0);
    }

    #[test]
    fn od_round_trip_is_exact_for_all_intensities() {
        for i in 0..=255u8 {
            let od = intensity_to_od(i);
            assert!((0.0..=OD_MAX).contains(&od));
            assert_eq!(od_to_intensity(od), i);
        }
        let data: Vec<u8> = (0..=255u8).flat_map(|i| [i, 255 - i, i / 2]).collect();
        let img = Image::new(16, 16, data).unwrap();
        assert_eq!(od_to_rgb(&rgb_to_od(&img), 16, 16).unwrap(), img);
    }

    #[test]
    fn stain_matrix_json_shape() {
        let p = StainProfile::default_he();
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(v["stain_matrix"].as_array().unwrap().len(), 2);
        assert_eq!(v["stain_matrix"][0].as_array().unwrap().len(), 3);
        assert_eq!(v["max_conc"].as_array().unwrap().len(), 2);
        assert_eq!(StainProfile::from_json(&p.to_json().unwrap()).unwrap(), p);
        assert!(StainProfile::from_json(r#"{"stain_matrix":[[-1,0,0],[0,1,0]],"max_conc":[1,1]}"#).is_err());
    }

    #[test]
    fn macenko_recovers_generating_stains() {
        for seed in 0..10 {
            let fx = synth::two_stain_fixture(seed, 96, false);
            let m = estimate_stains_macenko(&fx.image, 0.15, 1.0).unwrap();
            for j in 0..2 {
                assert!((norm3(m.column(j)) - 1.0).abs() < 1e-9);
                assert!(m.column(j).iter().all(|&x| x >= 0.0));
            }
            let eh = crate::stats::angle_deg(m.hematoxylin(), fx.stains.hematoxylin());
            let ee = crate::stats::angle_deg(m.eosin(), fx.stains.eosin());
            assert!(eh < 5.0 && ee < 5.0, "seed {seed}: {eh} {ee}");
        }
    }

    #[test]
    fn single_color_is_degenerate() {
        let img = Image::filled(20, 20, [120, 60, 150]).unwrap();
        assert!(matches!(
            estimate_stains_macenko(&img, 0.15, 1.0),
            Err(Error::DegenerateCovariance)
        ));
    }

    #[test]
    fn blank_image_has_too_few_tissue_pixels() {
        let img = Image::filled(20, 20, [255, 255, 255]).unwrap();
        assert!(matches!(
            estimate_stains_macenko(&img, 0.15, 1.0),
            Err(Error::TooFewTissuePixels { found: 0, .. })
        ));
    }

    #[test]
    fn vahadane_objective_never_increases() {
        let fx = synth::two_stain_fixture(3, 64, true);
        let tissue = tissue_od(&rgb_to_od(&fx.image), 0.15);
        let f = vahadane_from_od(&tissue, &StainParams { tol: 0.0, ..Default::default() }).unwrap();
        assert_eq!(f.objective.len(), 51);
        for pair in f.objective.windows(2) {
            assert!(pair[1] <= pair[0], "{pair:?}");
        }
    }

    #[test]
    fn vahadane_reconstructs_noiseless_low_rank_data() {
        let truth = StainMatrix::new([0.65, 0.70, 0.29], [0.07, 0.99, 0.11]).unwrap();
        let fx = synth::two_stain_fixture(11, 48, true);
        let v: Vec<[f64; 3]> = fx
            .concentrations
            .iter()
            .filter(|c| c[0] + c[1] > 0.0)
            .map(|&c| truth.compose(c))
            .collect();
        let init = StainMatrix::new([0.6, 0.75, 0.3], [0.15, 0.95, 0.2]).unwrap();
        let f = vahadane_factorize(&v, init, 0.0, 50, 0.0).unwrap();
        let resid = objective(&v, &f.stains.columns, &f.concentrations, 0.0).sqrt();
        let total = v.iter().map(|p| dot3(*p, *p)).sum::<f64>().sqrt();
        assert!(resid / total < 1e-3, "relative error {}", resid / total);
    }

    #[test]
    fn concentrations_of_white_and_exact_mixtures() {
        let w = StainMatrix::new([0.65, 0.70, 0.29], [0.07, 0.99, 0.11]).unwrap();
        assert_eq!(fit_od(&[[0.0; 3]], &w).unwrap(), vec![[0.0, 0.0]]);
        let c = fit_od(&[w.compose([2.0, 3.0])], &w).unwrap()[0];
        assert!((c[0] - 2.0).abs() < 1e-6 && (c[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn parallel_stains_are_singular() {
        let w = StainMatrix::new([0.6, 0.7, 0.3], [0.6, 0.7, 0.3]).unwrap();
        let img = Image::filled(2, 2, [10, 20, 30]).unwrap();
        assert!(matches!(
            fit_concentrations(&img, &w),
            Err(Error::SingularStainMatrix)
        ));
    }

    #[test]
    fn white_image_normalizes_to_white() {
        let img = Image::filled(8, 8, [255, 255, 255]).unwrap();
        for method in [StainMethod::Macenko, StainMethod::Vahadane] {
            assert_eq!(normalize(&img, method, None, &StainParams::default()).unwrap(), img);
        }
    }
}
