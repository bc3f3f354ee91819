//! Procedural synthetic faces with exact landmarks, dataset loading and splitting.
//!
//! Each face is the canonical template under a seeded similarity transform.
//! The drawn shapes (jaw outline, brows, nose, eyes, lips) use the landmarks
//! themselves as control points, so the returned [`LandmarkSet`] is exact.

use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{temp_sibling, ImageBuffer};
use crate::payload::{read_sidecar_lines, write_sidecar, LandmarkSet, SidecarRecord, NUM_LANDMARKS};
use crate::template::{TEMPLATE, TEMPLATE_RADIUS};

/// Similarity-transform jitter bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub translation_px: f64,
    pub rotation_rad: f64,
    /// Scale is drawn from `[1 - scale, 1 + scale]`.
    pub scale: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter { translation_px: 0.0, rotation_rad: 0.0, scale: 0.0 };

    pub fn default_for(canvas: usize) -> Self {
        Jitter { translation_px: 0.05 * canvas as f64, rotation_rad: 0.12, scale: 0.08 }
    }
}

/// RGB colour ranges in `[0, 1]`, each channel drawn independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    pub skin: ([f64; 3], [f64; 3]),
    pub background: ([f64; 3], [f64; 3]),
    pub lips: ([f64; 3], [f64; 3]),
    pub features: ([f64; 3], [f64; 3]),
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            skin: ([0.45, 0.30, 0.22], [0.95, 0.80, 0.70]),
            background: ([0.05, 0.05, 0.05], [0.95, 0.95, 0.95]),
            lips: ([0.45, 0.10, 0.12], [0.85, 0.40, 0.45]),
            features: ([0.05, 0.03, 0.02], [0.35, 0.25, 0.20]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticFaceParams {
    pub seed: u64,
    pub canvas: usize,
    pub jitter: Jitter,
    pub palette: Palette,
}

impl SyntheticFaceParams {
    pub fn new(seed: u64, canvas: usize) -> Self {
        Self { seed, canvas, jitter: Jitter::default_for(canvas), palette: Palette::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if ![64, 128, 256].contains(&self.canvas) {
            return Err(Error::InvalidParameter(format!("canvas {} not in {{64, 128, 256}}", self.canvas)));
        }
        let j = self.jitter;
        if j.translation_px < 0.0 || j.rotation_rad < 0.0 || !(0.0..1.0).contains(&j.scale) {
            return Err(Error::InvalidParameter(format!("bad jitter {j:?}")));
        }
        // Rotation preserves distance from the centre, so the per-axis reach is bounded by this.
        let s = self.canvas as f64;
        let reach = (1.0 + j.scale) * TEMPLATE_RADIUS * s + j.translation_px;
        if reach >= s / 2.0 {
            return Err(Error::InvalidParameter(format!("jitter {j:?} can push landmarks off a {s}px canvas")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image: ImageBuffer,
    pub landmarks: LandmarkSet,
    pub source_name: String,
}

/// 2x3 affine transform `[a b tx; c d ty]` applied to column vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] };

    /// Rotate by `angle` and scale by `scale` about `center`, then translate.
    pub fn similarity(center: [f64; 2], angle: f64, scale: f64, translation: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let (a, b, cc, d) = (scale * c, -scale * s, scale * s, scale * c);
        let tx = center[0] - a * center[0] - b * center[1] + translation[0];
        let ty = center[1] - cc * center[0] - d * center[1] + translation[1];
        Affine { m: [[a, b, tx], [cc, d, ty]] }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.m;
        [m[0][0] * p[0] + m[0][1] * p[1] + m[0][2], m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]]
    }

    pub fn inverse(&self) -> Affine {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Affine { m: [[a, b, -(a * m[0][2] + b * m[1][2])], [c, d, -(c * m[0][2] + d * m[1][2])]] }
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &Affine) -> Affine {
        let (a, b) = (&self.m, &first.m);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
            }
        }
        Affine { m }
    }
}

fn draw_colour(rng: &mut impl Rng, range: ([f64; 3], [f64; 3])) -> [f64; 3] {
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = rng.gen_range(range.0[c]..=range.1[c]);
    }
    out
}

/// Supersampled coverage rasterizer over an RGB float canvas in `[0, 1]`.
struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
}

const SUBSAMPLES: usize = 4;

impl Canvas {
    fn paint(&mut self, colour: [f64; 3], inside: impl Fn(f64, f64) -> bool, bbox: [f64; 4]) {
        let s = self.size as isize;
        let x0 = (bbox[0].floor() as isize - 1).clamp(0, s);
        let x1 = (bbox[2].ceil() as isize + 1).clamp(0, s);
        let y0 = (bbox[1].floor() as isize - 1).clamp(0, s);
        let y1 = (bbox[3].ceil() as isize + 1).clamp(0, s);
        let step = 1.0 / SUBSAMPLES as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUBSAMPLES {
                    for sx in 0..SUBSAMPLES {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        hits += usize::from(inside(px, py));
                    }
                }
                if hits > 0 {
                    let alpha = hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64;
                    let px = &mut self.rgb[y as usize * self.size + x as usize];
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - alpha) + colour[c] * alpha;
                    }
                }
            }
        }
    }

    fn fill_polygon(&mut self, colour: [f64; 3], poly: &[[f64; 2]]) {
        self.paint(colour, |x, y| point_in_polygon(poly, x, y), bbox(poly, 0.0));
    }

    fn stroke(&mut self, colour: [f64; 3], line: &[[f64; 2]], width: f64) {
        let half = width / 2.0;
        self.paint(colour, |x, y| line.windows(2).any(|seg| segment_distance(seg[0], seg[1], x, y) <= half), bbox(line, half));
    }

    fn fill_circle(&mut self, colour: [f64; 3], centre: [f64; 2], radius: f64) {
        let b = [centre[0] - radius, centre[1] - radius, centre[0] + radius, centre[1] + radius];
        self.paint(colour, |x, y| (x - centre[0]).powi(2) + (y - centre[1]).powi(2) <= radius * radius, b);
    }
}

fn bbox(points: &[[f64; 2]], pad: f64) -> [f64; 4] {
    let mut b = [f64::MAX, f64::MAX, f64::MIN, f64::MIN];
    for p in points {
        b[0] = b[0].min(p[0] - pad);
        b[1] = b[1].min(p[1] - pad);
        b[2] = b[2].max(p[0] + pad);
        b[3] = b[3].max(p[1] + pad);
    }
    b
}

fn point_in_polygon(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
    }
    inside
}

fn segment_distance(a: [f64; 2], b: [f64; 2], x: f64, y: f64) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    ((x - a[0] - t * dx).powi(2) + (y - a[1] - t * dy).powi(2)).sqrt()
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p[0], acc.1 + p[1]));
    [sx / n, sy / n]
}

/// Render one face; identical parameters give a pixel-identical image.
pub fn generate_synthetic_face(params: &SyntheticFaceParams) -> Result<DatasetRecord> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let s = params.canvas as f64;
    let j = params.jitter;
    let angle = if j.rotation_rad > 0.0 { rng.gen_range(-j.rotation_rad..=j.rotation_rad) } else { 0.0 };
    let scale = if j.scale > 0.0 { rng.gen_range(1.0 - j.scale..=1.0 + j.scale) } else { 1.0 };
    let mut shift = [0.0; 2];
    if j.translation_px > 0.0 {
        for v in &mut shift {
            *v = rng.gen_range(-j.translation_px..=j.translation_px);
        }
    }
    let transform = Affine::similarity([s / 2.0, s / 2.0], angle, scale, shift);
    let place = |p: [f64; 2]| transform.apply([p[0] * s, p[1] * s]);
    let points: Vec<[f64; 2]> = TEMPLATE.iter().map(|&p| place(p)).collect();

    let pal = params.palette;
    let bg_top = draw_colour(&mut rng, pal.background);
    let bg_bottom = draw_colour(&mut rng, pal.background);
    let skin = draw_colour(&mut rng, pal.skin);
    let lips = draw_colour(&mut rng, pal.lips);
    let features = draw_colour(&mut rng, pal.features);
    let iris = draw_colour(&mut rng, pal.features);

    let n = params.canvas;
    let mut canvas = Canvas { size: n, rgb: vec![[0.0; 3]; n * n] };
    for y in 0..n {
        let t = y as f64 / (n - 1) as f64;
        for x in 0..n {
            let noise: f64 = rng.gen_range(-0.015..0.015);
            let px = &mut canvas.rgb[y * n + x];
            for c in 0..3 {
                px[c] = bg_top[c] * (1.0 - t) + bg_bottom[c] * t + noise;
            }
        }
    }

    // Head: the jaw landmarks closed by a forehead arc.
    let mut head: Vec<[f64; 2]> = points[..17].to_vec();
    for k in 1..16 {
        let a = std::f64::consts::PI * k as f64 / 16.0;
        head.push(place([0.5 + 0.27 * a.cos(), 0.40 - 0.30 * a.sin()]));
    }
    canvas.fill_polygon(skin, &head);
    let shade = [skin[0] * 0.85, skin[1] * 0.82, skin[2] * 0.80];
    let unit = scale * s;

    canvas.stroke(features, &points[17..22], 0.022 * unit);
    canvas.stroke(features, &points[22..27], 0.022 * unit);
    canvas.stroke(shade, &points[27..31], 0.014 * unit);
    canvas.stroke(shade, &points[31..36], 0.014 * unit);

    for eye in [&points[36..42], &points[42..48]] {
        canvas.fill_polygon([0.95, 0.95, 0.93], eye);
        canvas.fill_circle(iris, centroid(eye), 0.014 * unit);
        canvas.stroke(features, &[eye[0], eye[1], eye[2], eye[3]], 0.006 * unit);
    }

    canvas.fill_polygon(lips, &points[48..60]);
    let mouth_inner = [lips[0] * 0.35, lips[1] * 0.25, lips[2] * 0.25];
    canvas.fill_polygon(mouth_inner, &points[60..68]);

    let mut data = vec![0.0f32; 3 * n * n];
    for (i, px) in canvas.rgb.iter().enumerate() {
        for c in 0..3 {
            // Store on the 8-bit grid so saving and reloading is lossless.
            let q = (px[c].clamp(0.0, 1.0) * 255.0).round() as f32;
            data[c * n * n + i] = q / 127.5 - 1.0;
        }
    }
    let image = ImageBuffer::new(crate::tensor::Tensor::from_vec(&[3, n, n], data))?;
    let landmarks = LandmarkSet::new(points, n as u32, n as u32)?;
    Ok(DatasetRecord { image, landmarks, source_name: format!("face_{:06}", params.seed) })
}

/// `count` faces with seeds `first_seed..first_seed + count`.
pub fn generate_synthetic_set(first_seed: u64, count: usize, canvas: usize) -> Result<Vec<DatasetRecord>> {
    (0..count as u64).into_par_iter().map(|i| generate_synthetic_face(&SyntheticFaceParams::new(first_seed + i, canvas))).collect()
}

/// Write `<source_name>.png` files plus a `landmarks.jsonl` sidecar into `dir`.
pub fn write_dataset(dir: &Path, records: &[DatasetRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    records.par_iter().try_for_each(|r| r.image.save_png(&dir.join(format!("{}.png", r.source_name))))?;
    let sidecar: Vec<SidecarRecord> =
        records.iter().map(|r| SidecarRecord::from_landmarks(format!("{}.png", r.source_name), &r.landmarks)).collect();
    let path = dir.join(SIDECAR_NAME);
    let tmp = temp_sibling(&path);
    {
        let mut out = BufWriter::new(std::fs::File::create(&tmp)?);
        write_sidecar(&mut out, &sidecar)?;
        std::io::Write::flush(&mut out)?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub const SIDECAR_NAME: &str = "landmarks.jsonl";

/// Pair sidecar records with their images, sorted by file name.
pub fn load_dataset(image_dir: &Path, sidecar: &Path) -> Result<Vec<DatasetRecord>> {
    let mut records = read_sidecar_lines(sidecar)?;
    records.sort_by(|a, b| a.1.file.cmp(&b.1.file));
    records
        .into_par_iter()
        .map(|(line, rec)| {
            let at = |message: String| Error::Record { path: sidecar.to_path_buf(), line, message };
            let path = image_dir.join(&rec.file);
            if !path.is_file() {
                return Err(at(format!("missing image {}", path.display())));
            }
            let image = ImageBuffer::load_png(&path).map_err(|e| at(e.to_string()))?;
            if image.width() != rec.width as usize || image.height() != rec.height as usize {
                return Err(at(format!(
                    "image is {}x{} but record says {}x{}",
                    image.width(),
                    image.height(),
                    rec.width,
                    rec.height
                )));
            }
            let landmarks = rec.landmarks().map_err(|e| at(e.to_string()))?;
            Ok(DatasetRecord { image, landmarks, source_name: crate::payload::source_name(Path::new(&rec.file)) })
        })
        .collect()
}

/// Partition sizes: floor each share, then hand the remainder to the largest
/// fractional parts (earlier partitions win ties).
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::InvalidParameter(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - sizes[b] as f64).partial_cmp(&(exact[a] - sizes[a] as f64)).unwrap().then(a.cmp(&b)));
    let mut remaining = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    Ok(sizes)
}

/// Seeded shuffle, then consecutive train/val/test slices.
pub fn split_dataset<R: Clone>(records: &[R], fractions: [f64; 3], seed: u64) -> Result<(Vec<R>, Vec<R>, Vec<R>)> {
    let sizes = split_sizes(records.len(), fractions)?;
    for ((name, &size), &f) in ["train", "val", "test"].iter().zip(&sizes).zip(&fractions) {
        if size == 0 && f > 0.0 {
            log::warn!("{name} partition is empty");
        }
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| records[i].clone()).collect::<Vec<R>>();
    Ok((take(0..sizes[0]), take(sizes[0]..sizes[0] + sizes[1]), take(sizes[0] + sizes[1]..records.len())))
}

pub fn landmark_count_ok(set: &LandmarkSet) -> bool {
    set.points.len() == NUM_LANDMARKS
}
