//! Recovery metrics, the intrinsic/extrinsic landmark consistency check,
//! threshold calibration and identifier tracing.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::payload::{bipolar_to_hex, NormalizedLandmarkVector, SourceId, LANDMARK_DIM, NUM_LANDMARKS};
use crate::template::Region;

/// Reference detection threshold reported for the full-scale model, in pixels.
pub const REFERENCE_TAU_PX: f64 = 3.2375;

/// Youden threshold measured on the 64 px toy model; the default for `verify`.
pub const CALIBRATED_TAU_PX: f64 = 5.565;

/// Reference ROC AUC for common distortions vs. face swaps at full scale.
pub const REFERENCE_AUC: f64 = 0.9388;
/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Sign binarization with `B(0) = +1`.
pub fn binarize(logits: &[f64]) -> Vec<i8> {
    logits.iter().map(|&x| if x >= 0.0 { 1 } else { -1 }).collect()
}

/// Fraction of identifier bits whose sign disagrees with the truth.
pub fn ber(logits: &[f64], truth: &SourceId) -> Result<f64> {
    let bits = truth.bits();
    if logits.len() != bits.len() {
        return Err(Error::Dimension { what: "identifier logits", expected: bits.len(), actual: logits.len() });
    }
    let errors: f64 = binarize(logits).iter().zip(bits).map(|(&b, &t)| 0.5 * (b as f64 - t as f64).abs()).sum();
    Ok(errors / bits.len() as f64)
}

/// Average BER over a batch.
pub fn ber_batch(logits: &[Vec<f64>], truth: &[SourceId]) -> Result<f64> {
    if logits.len() != truth.len() {
        return Err(Error::Dimension { what: "batch size", expected: truth.len(), actual: logits.len() });
    }
    if logits.is_empty() {
        return Err(Error::Empty("BER batch"));
    }
    let mut total = 0.0;
    for (l, t) in logits.iter().zip(truth) {
        total += ber(l, t)?;
    }
    Ok(total / logits.len() as f64)
}

fn point_distance_px(a: &[f64], b: &[f64], i: usize, width: u32, height: u32) -> f64 {
    let dx = (a[2 * i] - b[2 * i]) * width as f64;
    let dy = (a[2 * i + 1] - b[2 * i + 1]) * height as f64;
    (dx * dx + dy * dy).sqrt()
}

fn check_landmark_vectors(a: &[f64], b: &[f64]) -> Result<()> {
    for v in [a, b] {
        if v.len() != LANDMARK_DIM {
            return Err(Error::Dimension { what: "landmark vector", expected: LANDMARK_DIM, actual: v.len() });
        }
    }
    Ok(())
}

/// Mean pixel distance over the points `indices`.
pub fn aed_px_over(a: &[f64], b: &[f64], width: u32, height: u32, indices: impl IntoIterator<Item = usize>) -> Result<f64> {
    check_landmark_vectors(a, b)?;
    let (mut total, mut count) = (0.0, 0usize);
    for i in indices {
        total += point_distance_px(a, b, i, width, height);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("landmark index set"));
    }
    Ok(total / count as f64)
}

/// Average Euclidean distance between two normalized landmark vectors, in pixels.
pub fn aed_px(a: &NormalizedLandmarkVector, b: &NormalizedLandmarkVector, width: u32, height: u32) -> Result<f64> {
    aed_px_over(a.values(), b.values(), width, height, 0..NUM_LANDMARKS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Real,
    Fake,
    /// The extrinsic landmarks were unavailable, so no comparison was possible.
    Undecidable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCheck {
    pub name: String,
    pub aed_px: f64,
    pub flagged: bool,
}

/// Global and per-region outcome of comparing intrinsic and extrinsic landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub verdict: Verdict,
    pub aed_global_px: f64,
    pub tau_px: f64,
    pub regions: Vec<RegionCheck>,
}

/// Global detection and per-region localization against `tau_px` (strict `>`).
pub fn consistency_check(
    intrinsic: &[f64],
    extrinsic: &[f64],
    width: u32,
    height: u32,
    tau_px: f64,
    regions: &[Region],
) -> Result<ConsistencyResult> {
    if !(tau_px > 0.0) {
        return Err(Error::InvalidParameter(format!("threshold {tau_px} must be positive")));
    }
    let aed_global_px = aed_px_over(intrinsic, extrinsic, width, height, 0..NUM_LANDMARKS)?;
    let regions = regions
        .iter()
        .map(|r| {
            let aed = aed_px_over(intrinsic, extrinsic, width, height, r.indices())?;
            Ok(RegionCheck { name: r.name().to_string(), aed_px: aed, flagged: aed > tau_px })
        })
        .collect::<Result<Vec<_>>>()?;
    let verdict = if aed_global_px > tau_px { Verdict::Fake } else { Verdict::Real };
    Ok(ConsistencyResult { verdict, aed_global_px, tau_px, regions })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    /// Sorted by ascending threshold; a sample counts as fake when its AED is at least the threshold.
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub tau_px: f64,
}

/// ROC over every distinct observed AED, trapezoidal AUC and the Youden-optimal
/// threshold (ties go to the smaller threshold).
pub fn calibrate_threshold(real_aeds: &[f64], fake_aeds: &[f64]) -> Result<ThresholdCalibration> {
    if real_aeds.is_empty() {
        return Err(Error::Empty("real AED list"));
    }
    if fake_aeds.is_empty() {
        return Err(Error::Empty("fake AED list"));
    }
    if real_aeds.iter().chain(fake_aeds).any(|v| !v.is_finite()) {
        return Err(Error::Domain("AED values must be finite".into()));
    }
    let mut real = real_aeds.to_vec();
    let mut fake = fake_aeds.to_vec();
    real.sort_by(f64::total_cmp);
    fake.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = real.iter().chain(&fake).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v < t);
    let roc: Vec<RocPoint> = candidates
        .iter()
        .map(|&t| RocPoint { fpr: at_least(&real, t) as f64 / nr, tpr: at_least(&fake, t) as f64 / nf, threshold: t })
        .collect();

    // Descending thresholds walk the curve from (0, 0) to (1, 1).
    let mut auc = 0.0;
    let (mut px, mut py) = (0.0, 0.0);
    for p in roc.iter().rev() {
        auc += (p.fpr - px) * (p.tpr + py) / 2.0;
        (px, py) = (p.fpr, p.tpr);
    }
    auc += (1.0 - px) * (1.0 + py) / 2.0;

    let mut best = roc[0];
    for p in &roc[1..] {
        if p.tpr - p.fpr > best.tpr - best.fpr {
            best = *p;
        }
    }
    Ok(ThresholdCalibration { roc, auc, tau_px: best.threshold })
}

/// Identifier hex to source name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceRegistry {
    entries: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RegistryLine {
    id_hex: String,
    source: String,
}

impl SourceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register `source`; an identifier may only be claimed once.
    pub fn insert(&mut self, id: &SourceId, source: impl Into<String>) -> Result<()> {
        let hex = id.to_hex();
        let source = source.into();
        match self.entries.get(&hex) {
            Some(existing) if *existing != source => {
                Err(Error::InvalidParameter(format!("identifier {hex} already registered to {existing:?}")))
            }
            _ => {
                self.entries.insert(hex, source);
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id_hex: &str) -> Option<&str> {
        self.entries.get(id_hex).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reg = Self::new();
        for (i, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let at = |message: String| Error::Record { path: path.to_path_buf(), line: i + 1, message };
            let rec: RegistryLine = serde_json::from_str(&line).map_err(|e| at(format!("malformed registry entry: {e}")))?;
            let id = SourceId::from_hex(&rec.id_hex).map_err(|e| at(e.to_string()))?;
            reg.insert(&id, rec.source).map_err(|e| at(e.to_string()))?;
        }
        Ok(reg)
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        for (id_hex, source) in &self.entries {
            serde_json::to_writer(&mut *out, &RegistryLine { id_hex: id_hex.clone(), source: source.clone() })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub id_hex: String,
    pub matched_source: Option<String>,
    /// Hamming distance to the matched entry (0 for an exact match).
    pub distance: Option<usize>,
}

fn hamming_hex(a: &str, b: &str) -> Option<usize> {
    if a.len() != b.len() {
        return None;
    }
    let x = u64::from_str_radix(a, 16).ok()?;
    let y = u64::from_str_radix(b, 16).ok()?;
    Some((x ^ y).count_ones() as usize)
}

/// Binarize and look up; with `nearest` the closest registered identifier of
/// the same width is reported when no exact match exists.
pub fn trace(logits: &[f64], registry: &SourceRegistry, nearest: bool) -> Result<TraceResult> {
    let bits = binarize(logits);
    SourceId::new(bits.clone())?;
    let id_hex = bipolar_to_hex(&bits);
    if let Some(src) = registry.get(&id_hex) {
        return Ok(TraceResult { matched_source: Some(src.to_string()), distance: Some(0), id_hex });
    }
    if nearest {
        let best = registry.entries().filter_map(|(k, v)| hamming_hex(&id_hex, k).map(|d| (d, v))).min_by_key(|&(d, _)| d);
        if let Some((d, src)) = best {
            return Ok(TraceResult { matched_source: Some(src.to_string()), distance: Some(d), id_hex });
        }
    }
    Ok(TraceResult { id_hex, matched_source: None, distance: None })
}

/// Everything `verify` reports for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForensicReport {
    pub verdict: Verdict,
    pub aed_global_px: Option<f64>,
    pub tau_px: f64,
    pub regions: Vec<RegionCheck>,
    pub id_bits: Vec<i8>,
    pub id_hex: String,
    pub matched_source: Option<String>,
    pub match_distance: Option<usize>,
    pub ber: Option<f64>,
}

/// Build a report from decoder output. Without extrinsic landmarks the verdict
/// is [`Verdict::Undecidable`].
pub fn forensic_report(
    landmark_pred: &[f64],
    id_logits: &[f64],
    extrinsic: Option<&[f64]>,
    width: u32,
    height: u32,
    tau_px: f64,
    registry: &SourceRegistry,
    truth: Option<&SourceId>,
) -> Result<ForensicReport> {
    let traced = trace(id_logits, registry, true)?;
    let (verdict, aed_global_px, regions) = match extrinsic {
        Some(ext) => {
            let c = consistency_check(landmark_pred, ext, width, height, tau_px, &Region::ALL)?;
            (c.verdict, Some(c.aed_global_px), c.regions)
        }
        None => (Verdict::Undecidable, None, Vec::new()),
    };
    Ok(ForensicReport {
        verdict,
        aed_global_px,
        tau_px,
        regions,
        id_bits: binarize(id_logits),
        id_hex: traced.id_hex,
        matched_source: traced.matched_source,
        match_distance: traced.distance,
        ber: truth.map(|t| ber(id_logits, t)).transpose()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageQuality {
    pub psnr_db: f64,
    pub ssim: f64,
}

fn to_255(img: &ImageBuffer) -> Vec<f64> {
    img.tensor().data().iter().map(|&v| (v as f64 + 1.0) * 127.5).collect()
}

/// PSNR over `[0, 255]` pixels, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same(a, b)?;
    let (x, y) = (to_255(a), to_255(b));
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn check_same(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::InvalidParameter(format!("image shapes differ: {:?} vs {:?}", a.tensor().shape(), b.tensor().shape())));
    }
    Ok(())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid positions,
/// averaged over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let (x, y) = (to_255(a), to_255(b));
    let g = gaussian_window();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // Separable filtering of x, y, x^2, y^2, xy.
    let filter = |plane: &[f64]| -> Vec<f64> {
        let mut rows = vec![0.0; h * ow];
        for r in 0..h {
            for c in 0..ow {
                rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * plane[r * w + c + k]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                out[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
            }
        }
        out
    };
    let mut total = 0.0;
    for ch in 0..3 {
        let px = &x[ch * h * w..(ch + 1) * h * w];
        let py = &y[ch * h * w..(ch + 1) * h * w];
        let prod = |f: &dyn Fn(f64, f64) -> f64| px.iter().zip(py).map(|(&p, &q)| f(p, q)).collect::<Vec<f64>>();
        let (mx, my) = (filter(px), filter(py));
        let (sxx, syy, sxy) = (filter(&prod(&|p, _| p * p)), filter(&prod(&|_, q| q * q)), filter(&prod(&|p, q| p * q)));
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (vx, vy, cov) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / 3.0)
}

pub fn image_quality(a: &ImageBuffer, b: &ImageBuffer) -> Result<ImageQuality> {
    Ok(ImageQuality { psnr_db: psnr(a, b)?, ssim: ssim(a, b)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::payload::derive_source_id;
    use crate::payload::IdBits;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn id16() -> SourceId {
        derive_source_id("face_000001", IdBits::Bits16)
    }

    #[test]
    fn ber_trivial_cases() {
        let id = id16();
        let agree: Vec<f64> = id.bits().iter().map(|&b| 3.0 * b as f64).collect();
        assert_eq!(ber(&agree, &id).unwrap(), 0.0);
        let flipped: Vec<f64> = agree.iter().map(|v| -v).collect();
        assert_eq!(ber(&flipped, &id).unwrap(), 1.0);
        let mut one = agree.clone();
        one[7] = -one[7];
        assert_eq!(ber(&one, &id).unwrap(), 0.0625);
        assert!(ber(&agree[..15], &id).is_err());
        assert_eq!(binarize(&[0.0, -0.0, -1e-300]), vec![1, 1, -1]);
    }

    fn uniform(v: f64) -> NormalizedLandmarkVector {
        NormalizedLandmarkVector::new(vec![v; LANDMARK_DIM]).unwrap()
    }

    #[test]
    fn aed_trivial_cases() {
        let a = uniform(0.1);
        assert_eq!(aed_px(&a, &a, 128, 128).unwrap(), 0.0);
        let b = NormalizedLandmarkVector::new((0..LANDMARK_DIM).map(|i| if i % 2 == 0 { 0.4 } else { 0.5 }).collect()).unwrap();
        assert!((aed_px(&a, &b, 128, 128).unwrap() - 64.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_rules() {
        let a = uniform(0.5);
        let same = consistency_check(a.values(), a.values(), 128, 128, 3.0, &Region::ALL).unwrap();
        assert_eq!(same.verdict, Verdict::Real);
        assert!(same.regions.iter().all(|r| !r.flagged));

        // Only mouth points move by 10 tau in pixels.
        let tau = 3.0;
        let mut moved = a.values().to_vec();
        for i in Region::Mouth.indices() {
            moved[2 * i] += 10.0 * tau / 128.0;
        }
        let r = consistency_check(a.values(), &moved, 128, 128, tau, &Region::ALL).unwrap();
        assert_eq!(r.verdict, Verdict::Fake);
        for reg in &r.regions {
            assert_eq!(reg.flagged, reg.name == "mouth", "{}", reg.name);
        }
        let mouth = r.regions.iter().find(|x| x.name == "mouth").unwrap();
        assert!((mouth.aed_px - 30.0).abs() < 1e-9);

        // AED exactly at the threshold stays real.
        let mut shifted = a.values().to_vec();
        for i in 0..NUM_LANDMARKS {
            shifted[2 * i] += 0.25;
        }
        let at = consistency_check(a.values(), &shifted, 16, 16, 4.0, &Region::ALL).unwrap();
        assert_eq!(at.aed_global_px, 4.0);
        assert_eq!(at.verdict, Verdict::Real);
        assert!(consistency_check(a.values(), a.values(), 16, 16, 0.0, &Region::ALL).is_err());
    }

    #[test]
    fn calibration_trivial_cases() {
        let c = calibrate_threshold(&[1.0, 1.0, 1.0], &[9.0, 9.0, 9.0]).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.tau_px, 9.0);
        let same = [1.0, 2.0, 3.0, 4.0];
        assert!((calibrate_threshold(&same, &same).unwrap().auc - 0.5).abs() < 1e-12);
        assert!(calibrate_threshold(&[], &[1.0]).is_err());
        assert!(calibrate_threshold(&[1.0], &[]).is_err());
    }

    #[test]
    fn trace_cases() {
        let mut reg = SourceRegistry::new();
        let ids: Vec<SourceId> = (0..20).map(|i| derive_source_id(&format!("face_{i:06}"), IdBits::Bits16)).collect();
        for (i, id) in ids.iter().enumerate() {
            reg.insert(id, format!("face_{i:06}")).unwrap();
        }
        let logits: Vec<f64> = ids[3].bits().iter().map(|&b| b as f64).collect();
        let exact = trace(&logits, &reg, false).unwrap();
        assert_eq!(exact.matched_source.as_deref(), Some("face_000003"));
        assert_eq!(exact.distance, Some(0));

        let mut noisy = logits.clone();
        noisy[0] = -noisy[0];
        let t = trace(&noisy, &reg, true).unwrap();
        // Exhaustive oracle over the registry.
        let bits = binarize(&noisy);
        let best = ids.iter().map(|id| id.bits().iter().zip(&bits).filter(|(a, b)| a != b).count()).min().unwrap();
        assert_eq!(t.distance, Some(best));
        assert_eq!(best, 1);
        assert_eq!(trace(&noisy, &reg, false).unwrap().matched_source.as_deref(), reg.get(&t.id_hex));

        let empty = trace(&logits, &SourceRegistry::new(), true).unwrap();
        assert_eq!(empty.matched_source, None);
        assert_eq!(empty.id_hex, ids[3].to_hex());
    }

    #[test]
    fn registry_round_trip_and_conflicts() {
        let mut reg = SourceRegistry::new();
        reg.insert(&id16(), "a").unwrap();
        assert!(reg.insert(&id16(), "b").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.jsonl");
        let mut buf = Vec::new();
        reg.write(&mut buf).unwrap();
        std::fs::write(&path, buf).unwrap();
        assert_eq!(SourceRegistry::load(&path).unwrap(), reg);
    }

    #[test]
    fn quality_closed_forms() {
        let a = ImageBuffer::filled(32, 32, 0.0);
        let q = image_quality(&a, &a).unwrap();
        assert_eq!(q.psnr_db, PSNR_CAP_DB);
        assert!((q.ssim - 1.0).abs() < 1e-12);
        let b = ImageBuffer::new(a.tensor().map(|v| v + 1.0 / 127.5)).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0 * 255.0f64.log10()).abs() < 1e-4);
    }

    #[test]
    fn report_without_extrinsic_is_undecidable() {
        let r = forensic_report(&[0.5; LANDMARK_DIM], &[1.0; 16], None, 64, 64, 3.0, &SourceRegistry::new(), None).unwrap();
        assert_eq!(r.verdict, Verdict::Undecidable);
        assert_eq!(r.aed_global_px, None);
        assert_eq!(r.id_hex, "ffff");
    }

    proptest! {
        #[test]
        fn ber_is_scale_invariant(seed in 0u64..1000, scale in 0.001f64..1000.0) {
            let id = derive_source_id(&seed.to_string(), IdBits::Bits32);
            let logits: Vec<f64> = (0..32).map(|i| ((seed as f64 + 1.0) * (i as f64 + 0.3)).sin()).collect();
            let scaled: Vec<f64> = logits.iter().map(|v| v * scale).collect();
            let b = ber(&logits, &id).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert_eq!(b, ber(&scaled, &id).unwrap());
        }

        #[test]
        fn aed_is_a_metric(a in prop::collection::vec(0.0f64..1.0, LANDMARK_DIM),
                           b in prop::collection::vec(0.0f64..1.0, LANDMARK_DIM),
                           c in prop::collection::vec(0.0f64..1.0, LANDMARK_DIM)) {
            let ab = aed_px_over(&a, &b, 64, 48, 0..NUM_LANDMARKS).unwrap();
            let ba = aed_px_over(&b, &a, 64, 48, 0..NUM_LANDMARKS).unwrap();
            let bc = aed_px_over(&b, &c, 64, 48, 0..NUM_LANDMARKS).unwrap();
            let ac = aed_px_over(&a, &c, 64, 48, 0..NUM_LANDMARKS).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert_eq!(aed_px_over(&a, &a, 64, 48, 0..NUM_LANDMARKS).unwrap(), 0.0);
        }

        #[test]
        fn raising_tau_never_flips_real_to_fake(shift in 0.0f64..0.2, tau in 0.1f64..20.0, extra in 0.0f64..20.0) {
            let a = vec![0.5; LANDMARK_DIM];
            let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
            let lo = consistency_check(&a, &b, 64, 64, tau, &Region::ALL).unwrap();
            let hi = consistency_check(&a, &b, 64, 64, tau + extra, &Region::ALL).unwrap();
            if lo.verdict == Verdict::Real {
                prop_assert_eq!(hi.verdict, Verdict::Real);
            }
        }

        #[test]
        fn calibration_auc_is_bounded(real in prop::collection::vec(0.0f64..10.0, 1..40), fake in prop::collection::vec(0.0f64..10.0, 1..40)) {
            let c = calibrate_threshold(&real, &fake).unwrap();
            prop_assert!((0.0..=1.0).contains(&c.auc));
            for pair in c.roc.windows(2) {
                prop_assert!(pair[0].threshold < pair[1].threshold);
                prop_assert!(pair[0].fpr >= pair[1].fpr && pair[0].tpr >= pair[1].tpr);
            }
        }
    }

    #[test]
    fn ssim_drops_for_noise() {
        let data: Vec<f32> = (0..3 * 32 * 32).map(|i| ((i * 7919) % 255) as f32 / 127.5 - 1.0).collect();
        let a = ImageBuffer::new(Tensor::from_vec(&[3, 32, 32], data)).unwrap();
        let b = ImageBuffer::filled(32, 32, 0.0);
        assert!(ssim(&a, &b).unwrap() < 0.5);
    }
}
