//! `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key below is
//! optional; unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distortion::{DistortionParams, Stage};
use crate::error::{Error, Result};
use crate::forensics::CALIBRATED_TAU_PX;
use crate::model::ModelConfig;
use crate::payload::IdBits;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForensicsParams {
    pub tau_px: f64,
    /// Fall back to the nearest registry entry by Hamming distance.
    pub nearest_match: bool,
}

impl Default for ForensicsParams {
    fn default() -> Self {
        Self { tau_px: CALIBRATED_TAU_PX, nearest_match: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub distortion: DistortionParams,
    pub forensics: ForensicsParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            distortion: DistortionParams::default(),
            forensics: ForensicsParams::default(),
        }
    }
}

const STAGE_KEYS: [(&str, &str); 13] = [
    ("epochs", "passes over the training set"),
    ("batch_size", "images per step"),
    ("learning_rate", "Adam step size"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam denominator offset"),
    ("train_discriminator", "update the discriminator every step"),
    ("weight.enc", "image MSE weight"),
    ("weight.landmark", "landmark regression weight"),
    ("weight.id", "identifier BCE weight"),
    ("weight.adv", "adversarial weight"),
    ("weight.gen", "manipulation consistency weight (finetune)"),
    ("weight.stab", "clean-decoding stability weight (finetune)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidParameter(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// `(key, current value, description)` for every recognised key.
    pub fn entries(&self) -> Vec<(String, String, &'static str)> {
        let m = &self.model;
        let d = &self.distortion;
        let mut out = vec![
            ("seed".into(), self.seed.to_string(), "seed for every random choice"),
            ("model.image_size".into(), m.image_size.to_string(), "image side in pixels (64, 128 or 256)"),
            ("model.id_bits".into(), usize::from(m.id_bits).to_string(), "identifier bits (16 or 32)"),
            ("model.base_channels".into(), m.base_channels.to_string(), "network width"),
            ("model.se_reduction".into(), m.se_reduction.to_string(), "squeeze-excitation reduction"),
        ];
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            let w = &t.weights;
            let values = [
                t.epochs.to_string(),
                t.batch_size.to_string(),
                t.learning_rate.to_string(),
                t.beta1.to_string(),
                t.beta2.to_string(),
                t.eps.to_string(),
                t.train_discriminator.to_string(),
                w.enc.to_string(),
                w.landmark.to_string(),
                w.id.to_string(),
                w.adv.to_string(),
                w.gen.to_string(),
                w.stab.to_string(),
            ];
            for ((key, doc), value) in STAGE_KEYS.iter().zip(values) {
                out.push((format!("{name}.{key}"), value, *doc));
            }
        }
        out.extend([
            ("distortion.resize_factor".into(), d.resize_factor.to_string(), "Resize down-up factor"),
            ("distortion.blur_sigma".into(), d.blur_sigma.to_string(), "GausBlur sigma"),
            ("distortion.blur_kernel".into(), d.blur_kernel.to_string(), "GausBlur kernel size"),
            ("distortion.median_kernel".into(), d.median_kernel.to_string(), "MedBlur kernel size"),
            ("distortion.jpeg_quality".into(), d.jpeg_quality.to_string(), "JpegTest quality"),
            ("distortion.keep_luma".into(), d.keep_luma.to_string(), "JpegMask luma coefficients kept per axis"),
            ("distortion.keep_chroma".into(), d.keep_chroma.to_string(), "JpegMask chroma coefficients kept per axis"),
            ("distortion.swap_magnitude_px".into(), d.swap_magnitude_px.to_string(), "ProxySwap magnitude for evaluation"),
            ("distortion.swap_magnitude_min_px".into(), d.swap_magnitude_range_px.0.to_string(), "lowest finetune swap magnitude"),
            ("distortion.swap_magnitude_max_px".into(), d.swap_magnitude_range_px.1.to_string(), "highest finetune swap magnitude"),
            ("forensics.tau_px".into(), self.forensics.tau_px.to_string(), "detection threshold in pixels"),
            ("forensics.nearest_match".into(), self.forensics.nearest_match.to_string(), "trace to the nearest identifier when none matches"),
        ]);
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if let Some((stage, rest)) = key.split_once('.').filter(|(s, _)| *s == "pretrain" || *s == "finetune") {
            let t = if stage == "pretrain" { &mut self.pretrain } else { &mut self.finetune };
            let w = &mut t.weights;
            match rest {
                "epochs" => t.epochs = parse(key, value)?,
                "batch_size" => t.batch_size = parse(key, value)?,
                "learning_rate" => t.learning_rate = parse(key, value)?,
                "beta1" => t.beta1 = parse(key, value)?,
                "beta2" => t.beta2 = parse(key, value)?,
                "eps" => t.eps = parse(key, value)?,
                "train_discriminator" => t.train_discriminator = parse(key, value)?,
                "weight.enc" => w.enc = parse(key, value)?,
                "weight.landmark" => w.landmark = parse(key, value)?,
                "weight.id" => w.id = parse(key, value)?,
                "weight.adv" => w.adv = parse(key, value)?,
                "weight.gen" => w.gen = parse(key, value)?,
                "weight.stab" => w.stab = parse(key, value)?,
                _ => return Err(Error::InvalidParameter(format!("unknown key {key:?}"))),
            }
            return Ok(());
        }
        let d = &mut self.distortion;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "model.image_size" => self.model.image_size = parse(key, value)?,
            "model.id_bits" => self.model.id_bits = IdBits::try_from(parse::<usize>(key, value)?)?,
            "model.base_channels" => self.model.base_channels = parse(key, value)?,
            "model.se_reduction" => self.model.se_reduction = parse(key, value)?,
            "distortion.resize_factor" => d.resize_factor = parse(key, value)?,
            "distortion.blur_sigma" => d.blur_sigma = parse(key, value)?,
            "distortion.blur_kernel" => d.blur_kernel = parse(key, value)?,
            "distortion.median_kernel" => d.median_kernel = parse(key, value)?,
            "distortion.jpeg_quality" => d.jpeg_quality = parse(key, value)?,
            "distortion.keep_luma" => d.keep_luma = parse(key, value)?,
            "distortion.keep_chroma" => d.keep_chroma = parse(key, value)?,
            "distortion.swap_magnitude_px" => d.swap_magnitude_px = parse(key, value)?,
            "distortion.swap_magnitude_min_px" => d.swap_magnitude_range_px.0 = parse(key, value)?,
            "distortion.swap_magnitude_max_px" => d.swap_magnitude_range_px.1 = parse(key, value)?,
            "forensics.tau_px" => self.forensics.tau_px = parse(key, value)?,
            "forensics.nearest_match" => self.forensics.nearest_match = parse(key, value)?,
            _ => return Err(Error::InvalidParameter(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `text` on top of `self`; `origin` names the source in errors.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Config { path: origin.to_string(), line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            self.set(key.trim(), value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text, origin)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Training configuration for `stage` with the shared seed and distortions.
    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let base = match stage {
            Stage::Pretrain => self.pretrain,
            Stage::Finetune => self.finetune,
        };
        TrainConfig { stage, seed: self.seed, distortion: self.distortion, ..base }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config(Stage::Pretrain).validate()?;
        self.train_config(Stage::Finetune).validate()?;
        if !(self.forensics.tau_px > 0.0) {
            return Err(Error::InvalidParameter(format!("forensics.tau_px {} must be positive", self.forensics.tau_px)));
        }
        Ok(())
    }

    /// Every key with its value and a one-line comment; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, value, doc) in self.entries() {
            let _ = writeln!(s, "# {doc}\n{key} = {value}");
        }
        s
    }
}
