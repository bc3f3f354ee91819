//! Pixel-level image operators on NCHW tensors.
//!
//! Linear operators carry an exact adjoint so they can sit inside the training
//! graph. Median filtering and the real JPEG codec are evaluated on values only.

use image::codecs::jpeg::JpegEncoder;

use crate::autograd::LinearImageMap;
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::tensor::{Real, Tensor};

/// Sparse row matrix: output `i` is `sum(w * input[j])` over `rows[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
    inputs: usize,
}

impl SparseRows {
    pub fn new(rows: Vec<Vec<(usize, f64)>>, inputs: usize) -> Self {
        debug_assert!(rows.iter().flatten().all(|&(j, _)| j < inputs));
        Self { rows, inputs }
    }

    pub fn identity(n: usize) -> Self {
        Self::new((0..n).map(|i| vec![(i, 1.0)]).collect(), n)
    }

    pub fn outputs(&self) -> usize {
        self.rows.len()
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.inputs];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                rows[j].push((i, w));
            }
        }
        Self::new(rows, self.outputs())
    }

    /// `self * other`.
    pub fn compose(&self, other: &SparseRows) -> Self {
        assert_eq!(self.inputs, other.outputs());
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for &(k, w) in row {
                    for &(j, v) in &other.rows[k] {
                        match acc.iter_mut().find(|e| e.0 == j) {
                            Some(e) => e.1 += w * v,
                            None => acc.push((j, w * v)),
                        }
                    }
                }
                acc
            })
            .collect();
        Self::new(rows, other.inputs)
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn bilinear(inputs: usize, outputs: usize) -> Self {
        let ratio = inputs as f64 / outputs as f64;
        let rows = (0..outputs)
            .map(|i| {
                let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inputs - 1) as f64);
                let i0 = src.floor() as usize;
                let frac = src - i0 as f64;
                let i1 = (i0 + 1).min(inputs - 1);
                if frac == 0.0 || i1 == i0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - frac), (i1, frac)]
                }
            })
            .collect();
        Self::new(rows, inputs)
    }

    /// Normalized 1-D Gaussian with mirrored borders (edge sample not repeated).
    pub fn gaussian(n: usize, sigma: f64, kernel: usize) -> Self {
        let r = (kernel / 2) as isize;
        let taps: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = taps.iter().sum();
        let rows = (0..n as isize)
            .map(|i| {
                let mut row: Vec<(usize, f64)> = Vec::new();
                for (t, k) in (-r..=r).enumerate() {
                    let j = reflect101(i + k, n);
                    match row.iter_mut().find(|e| e.0 == j) {
                        Some(e) => e.1 += taps[t] / total,
                        None => row.push((j, taps[t] / total)),
                    }
                }
                row
            })
            .collect();
        Self::new(rows, n)
    }

    fn apply_strided<T: Real>(&self, src: &[T], dst: &mut [T], stride: usize) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = T::zero();
            for &(j, w) in row {
                acc = acc + T::lit(w) * src[j * stride];
            }
            dst[i * stride] = acc;
        }
    }
}

pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * n - 2;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable operator applied identically to every channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Separable {
    rows_y: SparseRows,
    rows_x: SparseRows,
    rows_y_t: SparseRows,
    rows_x_t: SparseRows,
}

impl Separable {
    pub fn new(rows_y: SparseRows, rows_x: SparseRows) -> Self {
        Self { rows_y_t: rows_y.transpose(), rows_x_t: rows_x.transpose(), rows_y, rows_x }
    }

    pub fn gaussian_blur(height: usize, width: usize, sigma: f64, kernel: usize) -> Self {
        Self::new(SparseRows::gaussian(height, sigma, kernel), SparseRows::gaussian(width, sigma, kernel))
    }

    /// Bilinear downscale by `factor` followed by bilinear upscale to the original size.
    pub fn down_up(height: usize, width: usize, factor: f64) -> Self {
        let axis = |n: usize| {
            let small = ((n as f64 * factor).round() as usize).max(1);
            SparseRows::bilinear(small, n).compose(&SparseRows::bilinear(n, small))
        };
        Self::new(axis(height), axis(width))
    }

    fn run<T: Real>(ry: &SparseRows, rx: &SparseRows, x: &Tensor<T>) -> Tensor<T> {
        let shape = x.shape();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (oh, ow) = (ry.outputs(), rx.outputs());
        let planes = x.len() / (h * w);
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        let mut out = vec![T::zero(); planes * oh * ow];
        let mut tmp = vec![T::zero(); h * ow];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                rx.apply_strided(&src[y * w..(y + 1) * w], &mut tmp[y * ow..(y + 1) * ow], 1);
            }
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for xx in 0..ow {
                ry.apply_strided(&tmp[xx..], &mut dst[xx..], ow);
            }
        }
        Tensor::from_vec(&out_shape, out)
    }
}

impl<T: Real> LinearImageMap<T> for Separable {
    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        Self::run(&self.rows_y, &self.rows_x, x)
    }

    fn adjoint(&self, g: &Tensor<T>) -> Tensor<T> {
        Self::run(&self.rows_y_t, &self.rows_x_t, g)
    }
}

/// Orthonormal luma / opponent-chroma basis; row 0 is luma.
const COLOUR_BASIS: [[f64; 3]; 3] = [
    [0.577_350_269_189_625_8, 0.577_350_269_189_625_8, 0.577_350_269_189_625_8],
    [0.707_106_781_186_547_6, -0.707_106_781_186_547_6, 0.0],
    [0.408_248_290_463_863, 0.408_248_290_463_863, -0.816_496_580_927_726],
];

fn dct8() -> [[f64; 8]; 8] {
    let mut d = [[0.0; 8]; 8];
    for (u, row) in d.iter_mut().enumerate() {
        let scale = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = scale * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / 16.0).cos();
        }
    }
    d
}

/// Simulated JPEG: keep only the low-frequency `keep x keep` DCT coefficients of
/// every 8x8 block, separately for luma and chroma.
#[derive(Debug, Clone, PartialEq)]
pub struct JpegMask {
    pub keep_luma: usize,
    pub keep_chroma: usize,
    dct: [[f64; 8]; 8],
}

impl JpegMask {
    pub fn new(keep_luma: usize, keep_chroma: usize) -> Result<Self> {
        if !(1..=8).contains(&keep_luma) || !(1..=8).contains(&keep_chroma) {
            return Err(Error::InvalidParameter(format!("JPEG mask keep sizes {keep_luma}/{keep_chroma} must be in 1..=8")));
        }
        Ok(Self { keep_luma, keep_chroma, dct: dct8() })
    }

    /// Project one padded plane (sides divisible by 8) onto the kept coefficients.
    fn mask_plane<T: Real>(&self, plane: &mut [T], h: usize, w: usize, keep: usize) {
        let d = &self.dct;
        let mut block = [[0.0f64; 8]; 8];
        let mut tmp = [[0.0f64; 8]; 8];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        block[y][x] = plane[(by + y) * w + bx + x].f64();
                    }
                }
                // Forward: C = D B D^T, restricted to the kept rows/columns.
                for u in 0..keep {
                    for x in 0..8 {
                        tmp[u][x] = (0..8).map(|y| d[u][y] * block[y][x]).sum();
                    }
                }
                let mut coef = [[0.0f64; 8]; 8];
                for u in 0..keep {
                    for v in 0..keep {
                        coef[u][v] = (0..8).map(|x| tmp[u][x] * d[v][x]).sum();
                    }
                }
                // Inverse: B = D^T C D.
                for u in 0..keep {
                    for x in 0..8 {
                        tmp[u][x] = (0..keep).map(|v| coef[u][v] * d[v][x]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let v: f64 = (0..keep).map(|u| d[u][y] * tmp[u][x]).sum();
                        plane[(by + y) * w + bx + x] = T::lit(v);
                    }
                }
            }
        }
    }

    fn colour<T: Real>(item: &[T], plane: usize, transpose: bool) -> Vec<T> {
        let mut out = vec![T::zero(); 3 * plane];
        for i in 0..plane {
            for r in 0..3 {
                let mut acc = 0.0;
                for c in 0..3 {
                    let m = if transpose { COLOUR_BASIS[c][r] } else { COLOUR_BASIS[r][c] };
                    acc += m * item[c * plane + i].f64();
                }
                out[r * plane + i] = T::lit(acc);
            }
        }
        out
    }

    fn run<T: Real>(&self, x: &Tensor<T>, adjoint: bool) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, 3, "JPEG mask needs RGB input");
        let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
        let mut out = Vec::with_capacity(x.len());
        for item in x.data().chunks(3 * h * w) {
            // The colour basis is orthogonal, so the adjoint swaps pad and crop.
            let opp = Self::colour(item, h * w, false);
            let mut result = Vec::with_capacity(3 * h * w);
            for (ch, plane) in opp.chunks(h * w).enumerate() {
                let keep = if ch == 0 { self.keep_luma } else { self.keep_chroma };
                let mut padded = if adjoint { zero_pad(plane, h, w, ph, pw) } else { reflect_pad(plane, h, w, ph, pw) };
                self.mask_plane(&mut padded, ph, pw, keep);
                result.extend(if adjoint { reflect_pad_adjoint(&padded, h, w, ph, pw) } else { crop(&padded, pw, h, w) });
            }
            out.extend(Self::colour(&result, h * w, true));
        }
        Tensor::from_vec(&[n, c, h, w], out)
    }
}

fn reflect_pad<T: Real>(plane: &[T], h: usize, w: usize, ph: usize, pw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); ph * pw];
    for y in 0..ph {
        let sy = reflect101(y as isize, h);
        for x in 0..pw {
            out[y * pw + x] = plane[sy * w + reflect101(x as isize, w)];
        }
    }
    out
}

fn reflect_pad_adjoint<T: Real>(padded: &[T], h: usize, w: usize, ph: usize, pw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    for y in 0..ph {
        let sy = reflect101(y as isize, h);
        for x in 0..pw {
            let i = sy * w + reflect101(x as isize, w);
            out[i] = out[i] + padded[y * pw + x];
        }
    }
    out
}

fn zero_pad<T: Real>(plane: &[T], h: usize, w: usize, ph: usize, pw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); ph * pw];
    for y in 0..h {
        out[y * pw..y * pw + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
    }
    out
}

fn crop<T: Real>(padded: &[T], pw: usize, h: usize, w: usize) -> Vec<T> {
    (0..h).flat_map(|y| padded[y * pw..y * pw + w].iter().copied()).collect()
}

impl<T: Real> LinearImageMap<T> for JpegMask {
    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, false)
    }

    fn adjoint(&self, g: &Tensor<T>) -> Tensor<T> {
        self.run(g, true)
    }
}

/// Per-channel median over a `kernel x kernel` window with mirrored borders.
pub fn median_blur<T: Real>(x: &Tensor<T>, kernel: usize) -> Tensor<T> {
    let shape = x.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let r = (kernel / 2) as isize;
    let mut out = Vec::with_capacity(x.len());
    let mut window: Vec<T> = Vec::with_capacity(kernel * kernel);
    for plane in x.data().chunks(h * w) {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                window.clear();
                for dy in -r..=r {
                    let sy = reflect101(y + dy, h);
                    for dx in -r..=r {
                        window.push(plane[sy * w + reflect101(xx + dx, w)]);
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
                out.push(*m);
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// Round trip through a baseline JPEG encoder and decoder.
pub fn jpeg_codec(image: &ImageBuffer, quality: u8) -> Result<ImageBuffer> {
    let rgb = image.to_rgb8();
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)?.to_rgb8();
    Ok(ImageBuffer::from_rgb8(&decoded))
}
