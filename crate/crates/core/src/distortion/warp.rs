//! Geometric face-swap proxy: independent affine warps of facial parts plus a
//! global jitter, composited with feathered masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::LinearImageMap;
use crate::dataset::Affine;
use crate::error::{Error, Result};
use crate::payload::{LandmarkSet, NUM_LANDMARKS};
use crate::template::Region;
use crate::tensor::{Real, Tensor};

pub const MAX_ATTEMPTS: usize = 10;

/// Which parts a proxy swap moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapTarget {
    /// Both eye/brow groups, nose and mouth, plus a global jitter.
    Full,
    /// A single region; everything else stays in place.
    Region(Region),
}

impl SwapTarget {
    pub fn name(self) -> String {
        match self {
            SwapTarget::Full => "full".into(),
            SwapTarget::Region(r) => r.name().into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(SwapTarget::Full);
        }
        Region::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .map(SwapTarget::Region)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown swap target {s:?}")))
    }

    /// Point groups that move together, in compositing priority order.
    fn groups(self) -> Vec<Vec<usize>> {
        let ids = |rs: &[Region]| rs.iter().flat_map(|r| r.indices()).collect::<Vec<usize>>();
        match self {
            SwapTarget::Full => vec![
                ids(&[Region::Mouth]),
                ids(&[Region::Nose]),
                ids(&[Region::RightBrow, Region::RightEye]),
                ids(&[Region::LeftBrow, Region::LeftEye]),
            ],
            SwapTarget::Region(r) => vec![ids(&[r])],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWarp {
    pub points: Vec<usize>,
    /// Full point transform for the group (global after local).
    pub transform: [[f64; 3]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpRecord {
    pub target: SwapTarget,
    pub magnitude_px: f64,
    pub global: [[f64; 3]; 2],
    pub groups: Vec<GroupWarp>,
    /// Ground-truth extrinsic landmarks after the warp.
    pub landmarks: LandmarkSet,
    /// Mean displacement over the points the warp is meant to move.
    pub mean_displacement_px: f64,
    pub attempts: usize,
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let s = points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

fn radius(points: &[[f64; 2]], c: [f64; 2]) -> f64 {
    points.iter().map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()).fold(1.0, f64::max)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Draw transforms until the warped landmarks stay on the canvas and move far enough.
pub fn draw_warp(lm: &LandmarkSet, target: SwapTarget, magnitude: f64, rng: &mut impl Rng) -> Result<WarpRecord> {
    if !(magnitude > 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidParameter(format!("warp magnitude {magnitude} must be positive")));
    }
    let pts = &lm.points;
    let groups = target.groups();
    for attempt in 1..=MAX_ATTEMPTS {
        let global = match target {
            SwapTarget::Full => {
                let c = centroid(pts);
                let angle = rng.gen_range(-1.0..=1.0) * 0.25 * magnitude / radius(pts, c);
                let shift = [rng.gen_range(-0.25..=0.25) * magnitude, rng.gen_range(-0.25..=0.25) * magnitude];
                Affine::similarity(c, angle, 1.0, shift)
            }
            SwapTarget::Region(_) => Affine::IDENTITY,
        };
        let mut warps = Vec::with_capacity(groups.len());
        for g in &groups {
            let gp: Vec<[f64; 2]> = g.iter().map(|&i| pts[i]).collect();
            let c = centroid(&gp);
            let angle = rng.gen_range(-1.0..=1.0) * 0.25 * magnitude / radius(&gp, c);
            let heading = rng.gen_range(0.0..std::f64::consts::TAU);
            let len = rng.gen_range(0.75..=1.25) * magnitude;
            let local = Affine::similarity(c, angle, 1.0, [len * heading.cos(), len * heading.sin()]);
            warps.push(GroupWarp { points: g.clone(), transform: global.compose(&local).m });
        }

        let mut moved: Vec<[f64; 2]> = pts.iter().map(|&p| global.apply(p)).collect();
        for w in &warps {
            let a = Affine { m: w.transform };
            for &i in &w.points {
                moved[i] = a.apply(pts[i]);
            }
        }
        let affected: Vec<usize> = match target {
            SwapTarget::Full => (0..NUM_LANDMARKS).collect(),
            SwapTarget::Region(r) => r.indices().collect(),
        };
        let mean = affected.iter().map(|&i| dist(moved[i], pts[i])).sum::<f64>() / affected.len() as f64;
        let (w, h) = (lm.width as f64, lm.height as f64);
        let in_bounds = moved.iter().all(|p| (0.0..=w).contains(&p[0]) && (0.0..=h).contains(&p[1]));
        if in_bounds && mean >= magnitude / 2.0 {
            return Ok(WarpRecord {
                target,
                magnitude_px: magnitude,
                global: global.m,
                groups: warps,
                landmarks: LandmarkSet::new(moved, lm.width, lm.height)?,
                mean_displacement_px: mean,
                attempts: attempt,
            });
        }
    }
    Err(Error::WarpOutOfBounds(MAX_ATTEMPTS))
}

/// Bilinear backward map: each output pixel reads four weighted input pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpMap {
    height: usize,
    width: usize,
    taps: Vec<[(u32, f64); 4]>,
}

impl WarpMap {
    /// Output pixels inside a group's (feathered) mask read through that group's
    /// inverse transform; the rest read through the inverse global transform.
    pub fn from_record(record: &WarpRecord, height: usize, width: usize) -> Self {
        let size = height.min(width) as f64;
        let margin = 0.03 * size;
        let feather = (1.5 * record.magnitude_px).max(0.06 * size);
        struct Mask {
            centre: [f64; 2],
            axes: [f64; 2],
            inverse: Affine,
        }
        let masks: Vec<Mask> = record
            .groups
            .iter()
            .map(|g| {
                let pts: Vec<[f64; 2]> = g.points.iter().map(|&i| record.landmarks.points[i]).collect();
                let c = centroid(&pts);
                let ax = pts.iter().map(|p| (p[0] - c[0]).abs()).fold(0.0, f64::max) + margin;
                let ay = pts.iter().map(|p| (p[1] - c[1]).abs()).fold(0.0, f64::max) + margin;
                Mask { centre: c, axes: [ax, ay], inverse: Affine { m: g.transform }.inverse() }
            })
            .collect();
        let global_inv = Affine { m: record.global }.inverse();

        let mut taps = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let mut remaining = 1.0;
                let mut src = [0.0, 0.0];
                for m in &masks {
                    let (dx, dy) = ((p[0] - m.centre[0]) / m.axes[0], (p[1] - m.centre[1]) / m.axes[1]);
                    let rho = (dx * dx + dy * dy).sqrt();
                    let outside = (rho - 1.0).max(0.0) * m.axes[0].min(m.axes[1]);
                    let weight = remaining * (1.0 - outside / feather).clamp(0.0, 1.0);
                    if weight > 0.0 {
                        let q = m.inverse.apply(p);
                        src = [src[0] + weight * q[0], src[1] + weight * q[1]];
                        remaining -= weight;
                    }
                }
                let q = global_inv.apply(p);
                src = [src[0] + remaining * q[0], src[1] + remaining * q[1]];
                taps.push(bilinear_taps(src[0] - 0.5, src[1] - 0.5, height, width));
            }
        }
        Self { height, width, taps }
    }

    fn run<T: Real>(&self, item: &[T], out: &mut [T], adjoint: bool) {
        let plane = self.height * self.width;
        for c in 0..item.len() / plane {
            let (src, dst) = (&item[c * plane..(c + 1) * plane], &mut out[c * plane..(c + 1) * plane]);
            for (i, t) in self.taps.iter().enumerate() {
                for &(j, w) in t {
                    if w != 0.0 {
                        if adjoint {
                            dst[j as usize] = dst[j as usize] + T::lit(w) * src[i];
                        } else {
                            dst[i] = dst[i] + T::lit(w) * src[j as usize];
                        }
                    }
                }
            }
        }
    }
}

fn bilinear_taps(x: f64, y: f64, height: usize, width: usize) -> [(u32, f64); 4] {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let idx = |yy: usize, xx: usize| (yy * width + xx) as u32;
    [
        (idx(y0, x0), (1.0 - fx) * (1.0 - fy)),
        (idx(y0, x1), fx * (1.0 - fy)),
        (idx(y1, x0), (1.0 - fx) * fy),
        (idx(y1, x1), fx * fy),
    ]
}

/// One warp per batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWarp(pub Vec<WarpMap>);

impl BatchWarp {
    fn run<T: Real>(&self, x: &Tensor<T>, adjoint: bool) -> Tensor<T> {
        let n = x.shape()[0];
        assert_eq!(n, self.0.len(), "one warp per batch item");
        let item = x.len() / n;
        let mut out = vec![T::zero(); x.len()];
        for (i, map) in self.0.iter().enumerate() {
            map.run(&x.data()[i * item..(i + 1) * item], &mut out[i * item..(i + 1) * item], adjoint);
        }
        Tensor::from_vec(x.shape(), out)
    }
}

impl<T: Real> LinearImageMap<T> for BatchWarp {
    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, false)
    }

    fn adjoint(&self, g: &Tensor<T>) -> Tensor<T> {
        self.run(g, true)
    }
}
