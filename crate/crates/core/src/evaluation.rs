//! Embed, attack and decode held-out examples; robustness and quality tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distortion::{apply, DistortionParams, ManipulationKind, ManipulationSpec, SwapTarget};
use crate::error::{Error, Result};
use crate::forensics::{aed_px_over, ber, image_quality, ImageQuality};
use crate::imaging::ImageBuffer;
use crate::model::ModelSet;
use crate::payload::{LandmarkSet, NUM_LANDMARKS};
use crate::template::Region;
use crate::training::{batch_tensors, Example};

const CHUNK: usize = 16;

/// Watermark every example and quantize to 8 bits, as if saved to PNG.
pub fn embed_examples(models: &ModelSet<f32>, examples: &[Example]) -> Result<Vec<ImageBuffer>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (images, payloads) = batch_tensors(&refs);
        let wm = models.encoder.encode(&images, &payloads)?;
        out.extend((0..chunk.len()).map(|i| ImageBuffer::from_batch(&wm, i).quantized()));
    }
    Ok(out)
}

/// Outcome of decoding one manipulated watermarked image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub kind: ManipulationKind,
    pub ber: f64,
    /// Decoded landmarks against the embedded ones.
    pub aed_recovery_px: f64,
    /// Decoded landmarks against the true landmarks of the manipulated image.
    pub aed_consistency_px: f64,
    /// Per-region consistency AED in [`Region::ALL`] order.
    pub region_aed_px: Vec<f64>,
    pub landmark_pred: Vec<f64>,
    pub extrinsic: LandmarkSet,
}

/// Apply `specs[i]` to `watermarked[i]`, decode, and score against `examples[i]`.
pub fn run_trials(models: &ModelSet<f32>, examples: &[Example], watermarked: &[ImageBuffer], specs: &[ManipulationSpec]) -> Result<Vec<Trial>> {
    if examples.len() != watermarked.len() || examples.len() != specs.len() {
        return Err(Error::Dimension { what: "trial inputs", expected: examples.len(), actual: watermarked.len().min(specs.len()) });
    }
    let mut trials = Vec::with_capacity(examples.len());
    for start in (0..examples.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(examples.len());
        let attacked = (start..end)
            .map(|i| apply(&specs[i], &watermarked[i], &examples[i].landmarks).map(|(img, lm)| (img.quantized(), lm)))
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<ImageBuffer> = attacked.iter().map(|(img, _)| img.clone()).collect();
        let decoded = models.decoder.decode(&ImageBuffer::batch(&images))?;
        for (k, ((_, extrinsic), d)) in attacked.into_iter().zip(decoded).enumerate() {
            let e = &examples[start + k];
            let (w, h) = (e.landmarks.width, e.landmarks.height);
            let ext: Vec<f64> = crate::payload::normalize_landmarks(&extrinsic)?.values().to_vec();
            let region_aed_px =
                Region::ALL.iter().map(|r| aed_px_over(&d.landmark_pred, &ext, w, h, r.indices())).collect::<Result<Vec<_>>>()?;
            trials.push(Trial {
                kind: specs[start + k].kind(),
                ber: ber(&d.id_logits, &e.id)?,
                aed_recovery_px: aed_px_over(&d.landmark_pred, e.landmark_target(), w, h, 0..NUM_LANDMARKS)?,
                aed_consistency_px: aed_px_over(&d.landmark_pred, &ext, w, h, 0..NUM_LANDMARKS)?,
                region_aed_px,
                landmark_pred: d.landmark_pred,
                extrinsic,
            });
        }
    }
    Ok(trials)
}

/// One spec per example for `kind`, seeded per image.
pub fn specs_for(kind: ManipulationKind, target: SwapTarget, params: &DistortionParams, count: usize, seed: u64) -> Vec<ManipulationSpec> {
    let m = params.manipulation(kind, target);
    (0..count).map(|i| ManipulationSpec::new(m, seed.wrapping_add(i as u64))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub ber: f64,
    pub aed_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub images: usize,
    pub quality: ImageQuality,
    /// Keyed by manipulation name.
    pub distortions: BTreeMap<String, BenchRow>,
}

/// Mean BER and recovery AED under each common distortion, plus mean PSNR/SSIM of the embedding.
pub fn bench(models: &ModelSet<f32>, examples: &[Example], params: &DistortionParams, seed: u64) -> Result<BenchReport> {
    if examples.is_empty() {
        return Err(Error::Empty("benchmark images"));
    }
    let watermarked = embed_examples(models, examples)?;
    let n = examples.len() as f64;
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for (e, w) in examples.iter().zip(&watermarked) {
        let q = image_quality(&e.image, w)?;
        psnr += q.psnr_db;
        ssim += q.ssim;
    }
    let mut distortions = BTreeMap::new();
    for kind in ManipulationKind::COMMON {
        let specs = specs_for(kind, SwapTarget::Full, params, examples.len(), seed);
        let trials = run_trials(models, examples, &watermarked, &specs)?;
        let row = BenchRow {
            ber: trials.iter().map(|t| t.ber).sum::<f64>() / n,
            aed_px: trials.iter().map(|t| t.aed_recovery_px).sum::<f64>() / n,
        };
        distortions.insert(kind.name().to_string(), row);
    }
    Ok(BenchReport { images: examples.len(), quality: ImageQuality { psnr_db: psnr / n, ssim: ssim / n }, distortions })
}
