//! The manipulation operator: common distortions, a differentiable JPEG
//! simulator and proxy geometric face swaps.
//!
//! One [`ManipulationSpec`] is sampled per batch and applied to every item.

mod ops;
mod warp;

use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ops::{jpeg_codec, median_blur, JpegMask, Separable, SparseRows};
pub use warp::{draw_warp, BatchWarp, GroupWarp, SwapTarget, WarpMap, WarpRecord, MAX_ATTEMPTS};

use crate::autograd::{LinearImageMap, Var};
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::payload::LandmarkSet;
use crate::template::Region;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "pretrain")]
    Pretrain,
    #[serde(rename = "finetune")]
    Finetune,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(Error::InvalidParameter(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ManipulationKind {
    Identity,
    Resize,
    GausBlur,
    MedBlur,
    JpegTest,
    JpegMask,
    ProxySwap,
}

impl ManipulationKind {
    pub const COMMON: [ManipulationKind; 6] = [
        ManipulationKind::Identity,
        ManipulationKind::Resize,
        ManipulationKind::GausBlur,
        ManipulationKind::MedBlur,
        ManipulationKind::JpegTest,
        ManipulationKind::JpegMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ManipulationKind::Identity => "Identity",
            ManipulationKind::Resize => "Resize",
            ManipulationKind::GausBlur => "GausBlur",
            ManipulationKind::MedBlur => "MedBlur",
            ManipulationKind::JpegTest => "JpegTest",
            ManipulationKind::JpegMask => "JpegMask",
            ManipulationKind::ProxySwap => "ProxySwap",
        }
    }

    /// Case-insensitive; `-` and `_` are ignored (`gaus-blur`, `jpeg_mask`).
    pub fn parse(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_lowercase();
        Self::COMMON
            .into_iter()
            .chain([ManipulationKind::ProxySwap])
            .find(|k| k.name().to_lowercase() == key)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown manipulation kind {s:?}")))
    }
}

impl fmt::Display for ManipulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameter defaults and the finetune sampling range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionParams {
    pub resize_factor: f64,
    pub blur_sigma: f64,
    pub blur_kernel: usize,
    pub median_kernel: usize,
    pub jpeg_quality: u8,
    pub keep_luma: usize,
    pub keep_chroma: usize,
    pub swap_magnitude_px: f64,
    /// Finetune draws swap magnitudes uniformly from this range.
    pub swap_magnitude_range_px: (f64, f64),
}

impl Default for DistortionParams {
    fn default() -> Self {
        Self {
            resize_factor: 0.5,
            blur_sigma: 1.0,
            blur_kernel: 5,
            median_kernel: 5,
            jpeg_quality: 50,
            keep_luma: 5,
            keep_chroma: 3,
            swap_magnitude_px: 8.0,
            swap_magnitude_range_px: (4.0, 12.0),
        }
    }
}

impl DistortionParams {
    pub fn validate(&self) -> Result<()> {
        for kind in ManipulationKind::COMMON.into_iter().chain([ManipulationKind::ProxySwap]) {
            self.manipulation(kind, SwapTarget::Full).validate()?;
        }
        let (lo, hi) = self.swap_magnitude_range_px;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!("swap magnitude range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// The configured manipulation of `kind`.
    pub fn manipulation(&self, kind: ManipulationKind, target: SwapTarget) -> Manipulation {
        match kind {
            ManipulationKind::Identity => Manipulation::Identity,
            ManipulationKind::Resize => Manipulation::Resize { factor: self.resize_factor },
            ManipulationKind::GausBlur => Manipulation::GausBlur { sigma: self.blur_sigma, kernel: self.blur_kernel },
            ManipulationKind::MedBlur => Manipulation::MedBlur { kernel: self.median_kernel },
            ManipulationKind::JpegTest => Manipulation::JpegTest { quality: self.jpeg_quality },
            ManipulationKind::JpegMask => Manipulation::JpegMask { keep_luma: self.keep_luma, keep_chroma: self.keep_chroma },
            ManipulationKind::ProxySwap => Manipulation::ProxySwap { magnitude_px: self.swap_magnitude_px, target },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Manipulation {
    Identity,
    Resize { factor: f64 },
    GausBlur { sigma: f64, kernel: usize },
    MedBlur { kernel: usize },
    JpegTest { quality: u8 },
    JpegMask { keep_luma: usize, keep_chroma: usize },
    ProxySwap { magnitude_px: f64, target: SwapTarget },
}

impl Manipulation {
    pub fn kind(&self) -> ManipulationKind {
        match self {
            Manipulation::Identity => ManipulationKind::Identity,
            Manipulation::Resize { .. } => ManipulationKind::Resize,
            Manipulation::GausBlur { .. } => ManipulationKind::GausBlur,
            Manipulation::MedBlur { .. } => ManipulationKind::MedBlur,
            Manipulation::JpegTest { .. } => ManipulationKind::JpegTest,
            Manipulation::JpegMask { .. } => ManipulationKind::JpegMask,
            Manipulation::ProxySwap { .. } => ManipulationKind::ProxySwap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParameter(what));
        match *self {
            Manipulation::Resize { factor } if !(factor > 0.0 && factor <= 1.0) => bad(format!("resize factor {factor} not in (0, 1]")),
            Manipulation::GausBlur { sigma, kernel } if !(sigma > 0.0 && sigma.is_finite()) || kernel % 2 == 0 => {
                bad(format!("Gaussian blur needs sigma > 0 and an odd kernel (got {sigma}, {kernel})"))
            }
            Manipulation::MedBlur { kernel } if kernel % 2 == 0 => bad(format!("median kernel {kernel} must be odd")),
            Manipulation::JpegTest { quality } if !(1..=100).contains(&quality) => bad(format!("JPEG quality {quality} not in 1..=100")),
            Manipulation::JpegMask { keep_luma, keep_chroma } => JpegMask::new(keep_luma, keep_chroma).map(|_| ()),
            Manipulation::ProxySwap { magnitude_px, .. } if !(magnitude_px > 0.0 && magnitude_px.is_finite()) => {
                bad(format!("swap magnitude {magnitude_px} must be positive"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManipulationSpec {
    pub manipulation: Manipulation,
    pub seed: u64,
}

impl ManipulationSpec {
    pub fn new(manipulation: Manipulation, seed: u64) -> Self {
        Self { manipulation, seed }
    }

    pub fn identity() -> Self {
        Self::new(Manipulation::Identity, 0)
    }

    pub fn kind(&self) -> ManipulationKind {
        self.manipulation.kind()
    }
}

/// Swap variants in the finetune pool (Identity is the other member).
pub const FINETUNE_SWAP_TARGETS: [SwapTarget; 5] = [
    SwapTarget::Full,
    SwapTarget::Region(Region::Mouth),
    SwapTarget::Region(Region::Nose),
    SwapTarget::Region(Region::RightEye),
    SwapTarget::Region(Region::LeftEye),
];

/// Draw the manipulation for one batch.
pub fn sample_manipulation(stage: Stage, params: &DistortionParams, rng: &mut impl Rng) -> ManipulationSpec {
    let manipulation = match stage {
        Stage::Pretrain => {
            let kind = ManipulationKind::COMMON[rng.gen_range(0..ManipulationKind::COMMON.len())];
            params.manipulation(kind, SwapTarget::Full)
        }
        Stage::Finetune => {
            let pick = rng.gen_range(0..=FINETUNE_SWAP_TARGETS.len());
            if pick == FINETUNE_SWAP_TARGETS.len() {
                Manipulation::Identity
            } else {
                let (lo, hi) = params.swap_magnitude_range_px;
                let magnitude_px = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                Manipulation::ProxySwap { magnitude_px, target: FINETUNE_SWAP_TARGETS[pick] }
            }
        }
    };
    ManipulationSpec::new(manipulation, rng.gen())
}

enum Op<T: Real> {
    Identity,
    Linear(Rc<dyn LinearImageMap<T>>),
    Replace(Tensor<T>),
}

/// Result of manipulating a batch.
#[derive(Debug, Clone)]
pub struct Manipulated<X> {
    pub images: X,
    /// True extrinsic landmarks after the manipulation.
    pub landmarks: Vec<LandmarkSet>,
    /// One record per item for proxy swaps, empty otherwise.
    pub warps: Vec<WarpRecord>,
}

fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn plan<T: Real>(spec: &ManipulationSpec, x: &Tensor<T>, landmarks: &[LandmarkSet]) -> Result<(Op<T>, Vec<LandmarkSet>, Vec<WarpRecord>)> {
    spec.manipulation.validate()?;
    let (n, c, h, w) = x.dims4();
    if c != 3 {
        return Err(Error::Dimension { what: "image channels", expected: 3, actual: c });
    }
    if landmarks.len() != n {
        return Err(Error::Dimension { what: "landmark sets per batch", expected: n, actual: landmarks.len() });
    }
    for lm in landmarks {
        if lm.width as usize != w || lm.height as usize != h {
            return Err(Error::InvalidParameter(format!("landmarks for {}x{} on a {w}x{h} image", lm.width, lm.height)));
        }
    }
    let same = landmarks.to_vec();
    let op = match spec.manipulation {
        Manipulation::Identity => Op::Identity,
        Manipulation::Resize { factor } => Op::Linear(Rc::new(Separable::down_up(h, w, factor))),
        Manipulation::GausBlur { sigma, kernel } => Op::Linear(Rc::new(Separable::gaussian_blur(h, w, sigma, kernel))),
        Manipulation::JpegMask { keep_luma, keep_chroma } => Op::Linear(Rc::new(JpegMask::new(keep_luma, keep_chroma)?)),
        Manipulation::MedBlur { kernel } => Op::Replace(median_blur(x, kernel)),
        Manipulation::JpegTest { quality } => {
            let mut out = Vec::with_capacity(x.len());
            for i in 0..n {
                let img = ImageBuffer::new(x.batch_item(i).reshape(&[c, h, w]).cast())?;
                out.extend(jpeg_codec(&img, quality)?.tensor().data().iter().map(|&v| T::lit(v as f64)));
            }
            Op::Replace(Tensor::from_vec(x.shape(), out))
        }
        Manipulation::ProxySwap { magnitude_px, target } => {
            let records = landmarks
                .iter()
                .enumerate()
                .map(|(i, lm)| draw_warp(lm, target, magnitude_px, &mut ChaCha8Rng::seed_from_u64(item_seed(spec.seed, i))))
                .collect::<Result<Vec<_>>>()?;
            let maps = records.iter().map(|r| WarpMap::from_record(r, h, w)).collect();
            let moved = records.iter().map(|r| r.landmarks.clone()).collect();
            return Ok((Op::Linear(Rc::new(BatchWarp(maps))), moved, records));
        }
    };
    Ok((op, same, Vec::new()))
}

/// Manipulate an NCHW batch of values.
pub fn apply_tensor<T: Real>(spec: &ManipulationSpec, x: &Tensor<T>, landmarks: &[LandmarkSet]) -> Result<Manipulated<Tensor<T>>> {
    let (op, landmarks, warps) = plan(spec, x, landmarks)?;
    let images = match op {
        Op::Identity => x.clone(),
        Op::Linear(map) => map.apply(x),
        Op::Replace(v) => v,
    };
    Ok(Manipulated { images, landmarks, warps })
}

/// Manipulate a batch inside the autograd graph. Linear kinds propagate exact
/// gradients; median blur and the real codec pass gradients straight through.
pub fn apply_var<'t, T: Real>(spec: &ManipulationSpec, x: Var<'t, T>, landmarks: &[LandmarkSet]) -> Result<Manipulated<Var<'t, T>>> {
    let (op, landmarks, warps) = plan(spec, &x.value(), landmarks)?;
    let images = match op {
        Op::Identity => x,
        Op::Linear(map) => x.linear_map(map),
        Op::Replace(v) => x.straight_through(v),
    };
    Ok(Manipulated { images, landmarks, warps })
}

/// Manipulate one image; returns the image and its true landmarks.
pub fn apply(spec: &ManipulationSpec, image: &ImageBuffer, landmarks: &LandmarkSet) -> Result<(ImageBuffer, LandmarkSet)> {
    let out = apply_tensor(spec, &image.to_batch(), std::slice::from_ref(landmarks))?;
    let lm = out.landmarks.into_iter().next().expect("one item");
    Ok((ImageBuffer::from_batch(&out.images, 0), lm))
}

/// Like [`apply`], also returning the warp record for proxy swaps.
pub fn apply_with_record(
    spec: &ManipulationSpec,
    image: &ImageBuffer,
    landmarks: &LandmarkSet,
) -> Result<(ImageBuffer, LandmarkSet, Option<WarpRecord>)> {
    let out = apply_tensor(spec, &image.to_batch(), std::slice::from_ref(landmarks))?;
    let lm = out.landmarks.into_iter().next().expect("one item");
    Ok((ImageBuffer::from_batch(&out.images, 0), lm, out.warps.into_iter().next()))
}

/// Proxy swap of a single image with an explicit generator.
pub fn proxy_swap(image: &ImageBuffer, landmarks: &LandmarkSet, magnitude: f64, target: SwapTarget, rng: &mut impl Rng) -> Result<(ImageBuffer, WarpRecord)> {
    let record = draw_warp(landmarks, target, magnitude, rng)?;
    let map = BatchWarp(vec![WarpMap::from_record(&record, image.height(), image.width())]);
    let out = LinearImageMap::apply(&map, &image.to_batch());
    Ok((ImageBuffer::from_batch(&out, 0), record))
}
