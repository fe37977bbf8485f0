//! Raster types, PPM/PGM I/O and the shared numeric kernels (blur, Otsu,
//! connected components) used by the preprocessing modules.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major triplets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions { height, width });
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "rgb buffer of {} bytes for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Image filled with one color.
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }
}

/// 8-bit single-channel raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions { height, width });
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "gray buffer of {} bytes for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.width + col] = v;
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut hist = [0u64; 256];
        for &v in &self.data {
            hist[v as usize] += 1;
        }
        hist
    }
}

/// Integer label raster: 0 is background, `1..=L` are entities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    #[serde(skip)]
    num_labels: u32,
}

impl LabelMap {
    /// Validates that labels form the contiguous set `{0,1,..,L}` (0 may be absent).
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions { height, width });
        }
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label buffer of {} entries for {height}x{width}",
                labels.len()
            )));
        }
        let max = labels.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; max as usize + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().skip(1).position(|s| !s) {
            return Err(Error::input(format!(
                "labels are not contiguous: label {} is missing below maximum {max}",
                missing + 1
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            num_labels: max,
        })
    }

    /// Accepts arbitrary label values and compacts them to `1..=L`, preserving
    /// the relative order of the original values.
    pub fn from_sparse(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label buffer of {} entries for {height}x{width}",
                labels.len()
            )));
        }
        let mut values: Vec<u32> = labels.iter().copied().filter(|&l| l > 0).collect();
        values.sort_unstable();
        values.dedup();
        let compact = labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    values.binary_search(&l).unwrap() as u32 + 1
                }
            })
            .collect();
        Self::new(height, width, compact)
    }

    /// Relabels `1..=L` in first-encounter raster order.
    pub fn relabel_raster_order(&self) -> Self {
        let mut map = vec![0u32; self.num_labels as usize + 1];
        let mut next = 0;
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    return 0;
                }
                if map[l as usize] == 0 {
                    next += 1;
                    map[l as usize] = next;
                }
                map[l as usize]
            })
            .collect();
        Self {
            height: self.height,
            width: self.width,
            labels,
            num_labels: self.num_labels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Largest label `L`.
    pub fn num_labels(&self) -> u32 {
        self.num_labels
    }

    /// Binary mask (0/255) of the nonzero labels.
    pub fn to_mask(&self) -> GrayImage {
        let data = self
            .labels
            .iter()
            .map(|&l| if l > 0 { 255 } else { 0 })
            .collect();
        GrayImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            height: usize,
            width: usize,
            labels: Vec<u32>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        Self::new(raw.height, raw.width, raw.labels)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_text(path.as_ref())?)
    }
}

/// One row of an [`EntityTable`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: u32,
    /// (row, col) in pixels.
    pub centroid: (f64, f64),
    /// (r0, c0, r1, c1), inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub area: usize,
}

/// Per-entity geometry of a [`LabelMap`], ordered by id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityTable {
    pub entities: Vec<Entity>,
}

impl EntityTable {
    pub fn from_label_map(labels: &LabelMap) -> Self {
        let n = labels.num_labels() as usize;
        let mut sum_r = vec![0f64; n];
        let mut sum_c = vec![0f64; n];
        let mut area = vec![0usize; n];
        let mut bbox = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
        for r in 0..labels.height() {
            for c in 0..labels.width() {
                let l = labels.get(r, c);
                if l == 0 {
                    continue;
                }
                let i = l as usize - 1;
                sum_r[i] += r as f64;
                sum_c[i] += c as f64;
                area[i] += 1;
                let b = &mut bbox[i];
                b.0 = b.0.min(r);
                b.1 = b.1.min(c);
                b.2 = b.2.max(r);
                b.3 = b.3.max(c);
            }
        }
        let entities = (0..n)
            .map(|i| Entity {
                id: i as u32 + 1,
                centroid: (sum_r[i] / area[i] as f64, sum_c[i] / area[i] as f64),
                bbox: bbox[i],
                area: area[i],
            })
            .collect();
        Self { entities }
    }

    /// Table from bare centroids, ids `1..=N`, unit area.
    pub fn from_centroids(centroids: &[(f64, f64)]) -> Self {
        let entities = centroids
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let (rr, cc) = (r.max(0.0) as usize, c.max(0.0) as usize);
                Entity {
                    id: i as u32 + 1,
                    centroid: (r, c),
                    bbox: (rr, cc, rr, cc),
                    area: 1,
                }
            })
            .collect();
        Self { entities }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entities.iter().map(|e| e.id).collect()
    }

    pub fn centroids(&self) -> Vec<(f64, f64)> {
        self.entities.iter().map(|e| e.centroid).collect()
    }

    /// CSV with columns id,centroid_row,centroid_col,area,bbox_r0,bbox_c0,bbox_r1,bbox_c1.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "id",
            "centroid_row",
            "centroid_col",
            "area",
            "bbox_r0",
            "bbox_c0",
            "bbox_r1",
            "bbox_c1",
        ])?;
        for e in &self.entities {
            w.write_record([
                e.id.to_string(),
                format!("{:.16e}", e.centroid.0),
                format!("{:.16e}", e.centroid.1),
                e.area.to_string(),
                e.bbox.0.to_string(),
                e.bbox.1.to_string(),
                e.bbox.2.to_string(),
                e.bbox.3.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a binary netpbm header with the given magic and returns
/// (width, height, payload offset).
fn parse_netpbm_header(bytes: &[u8], magic: &'static str) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader(format!(
                "expected {} at byte {start}",
                ["width", "height", "maxval"][i]
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("number out of range: {text}")))?;
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::MalformedHeader(
                "missing whitespace after maxval".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidDimensions {
            height: height as usize,
            width: width as usize,
        });
    }
    Ok((width as usize, height as usize, pos))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (width, height, offset) = parse_netpbm_header(bytes, "P6")?;
    let expected = width * height * 3;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    Image::new(height, width, payload[..expected].to_vec())
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    decode_ppm(&read_bytes(path.as_ref())?)
}

pub fn write_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    if img.height == 0 || img.width == 0 {
        return Err(Error::InvalidDimensions {
            height: img.height,
            width: img.width,
        });
    }
    write_file(path.as_ref(), &encode_ppm(img))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, offset) = parse_netpbm_header(bytes, "P5")?;
    let expected = width * height;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    GrayImage::new(height, width, payload[..expected].to_vec())
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&read_bytes(path.as_ref())?)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pgm(img))
}

/// ITU-R 601 luma, rounded.
pub fn to_gray(img: &Image) -> GrayImage {
    let data = img
        .pixels()
        .map(|[r, g, b]| {
            let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Normalized 1-D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

/// Separable Gaussian blur of a row-major float field with edge replication.
pub fn gaussian_blur_f64(
    data: &[f64],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<Vec<f64>> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; data.len()];
    for r in 0..height {
        let row = &data[r * width..(r + 1) * width];
        for c in 0..width {
            tmp[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * row[clamp(c as isize + k as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(r as isize + k as isize - radius, height) * width + c])
                .sum();
        }
    }
    Ok(out)
}

pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    let field: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let blurred = gaussian_blur_f64(&field, img.height, img.width, sigma)?;
    let data = blurred
        .into_iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(GrayImage {
        height: img.height,
        width: img.width,
        data,
    })
}

/// Otsu threshold over a 256-bin histogram: the smallest `t` maximizing the
/// between-class variance of the split `{0..=t}` / `{t+1..=255}`.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::input("empty histogram"));
    }
    let total_sum: u128 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as u128 * n as u128)
        .sum();
    let n = total as f64;
    let mut best_t = 0u8;
    let mut best = f64::NEG_INFINITY;
    let (mut n0, mut s0) = (0u64, 0u128);
    for t in 0..256usize {
        n0 += hist[t];
        s0 += t as u128 * hist[t] as u128;
        let n1 = total - n0;
        let var = if n0 == 0 || n1 == 0 {
            0.0
        } else {
            let w0 = n0 as f64 / n;
            let w1 = n1 as f64 / n;
            let mu0 = s0 as f64 / n0 as f64;
            let mu1 = (total_sum - s0) as f64 / n1 as f64;
            w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
        };
        if var > best {
            best = var;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

/// Pixel connectivity for component labeling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            _ => Err(Error::param(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }

    /// Neighbor offsets already visited by a raster scan.
    fn backward_offsets(self) -> &'static [(isize, isize)] {
        match self {
            Self::Four => &[(-1, 0), (0, -1)],
            Self::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
        }
    }

    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Self::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Self::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

pub(crate) struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub(crate) fn push(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Unions the sets, keeping the smaller root.
    pub(crate) fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        lo
    }
}

/// Labels the nonzero pixels by connected component, numbering components in
/// first-encounter raster order.
pub fn connected_components(binary: &GrayImage, connectivity: Connectivity) -> LabelMap {
    components_by(binary.height, binary.width, connectivity, |i| {
        binary.data[i] != 0
    }, |a, b| binary.data[a] != 0 && binary.data[b] != 0)
}

/// Two-pass union-find labeling. `fg(i)` selects labeled pixels and
/// `same(a, b)` decides whether two neighboring foreground pixels join.
pub(crate) fn components_by(
    height: usize,
    width: usize,
    connectivity: Connectivity,
    fg: impl Fn(usize) -> bool,
    same: impl Fn(usize, usize) -> bool,
) -> LabelMap {
    let mut provisional = vec![usize::MAX; height * width];
    let mut sets = DisjointSet::new(0);
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if !fg(i) {
                continue;
            }
            let mut label = usize::MAX;
            for &(dr, dc) in connectivity.backward_offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nc >= width as isize {
                    continue;
                }
                let j = nr as usize * width + nc as usize;
                if provisional[j] == usize::MAX || !same(i, j) {
                    continue;
                }
                label = if label == usize::MAX {
                    provisional[j]
                } else {
                    sets.union(label, provisional[j])
                };
            }
            provisional[i] = if label == usize::MAX { sets.push() } else { label };
        }
    }
    let mut final_label = vec![0u32; sets.parent.len()];
    let mut next = 0u32;
    let labels = provisional
        .iter()
        .map(|&p| {
            if p == usize::MAX {
                return 0;
            }
            let root = sets.find(p);
            if final_label[root] == 0 {
                next += 1;
                final_label[root] = next;
            }
            final_label[root]
        })
        .collect();
    LabelMap {
        height,
        width,
        labels,
        num_labels: next,
    }
}
