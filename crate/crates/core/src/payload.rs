//! The composite watermark: 136 normalized landmark coordinates followed by a
//! bipolar source identifier derived from a SHA-256 digest.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 68;
pub const LANDMARK_DIM: usize = 2 * NUM_LANDMARKS;

/// Identifier width. 16 bits is the default payload (152-D); 32 bits widens
/// it to 168-D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum IdBits {
    Bits16,
    Bits32,
}

impl IdBits {
    pub fn bits(self) -> usize {
        match self {
            IdBits::Bits16 => 16,
            IdBits::Bits32 => 32,
        }
    }

    pub fn payload_dim(self) -> usize {
        LANDMARK_DIM + self.bits()
    }

    pub fn from_payload_dim(dim: usize) -> Result<Self> {
        match dim {
            152 => Ok(IdBits::Bits16),
            168 => Ok(IdBits::Bits32),
            other => Err(Error::PayloadLength(other)),
        }
    }
}

impl TryFrom<usize> for IdBits {
    type Error = Error;
    fn try_from(bits: usize) -> Result<Self> {
        match bits {
            16 => Ok(IdBits::Bits16),
            32 => Ok(IdBits::Bits32),
            other => Err(Error::IdBits(other)),
        }
    }
}

impl From<IdBits> for usize {
    fn from(b: IdBits) -> usize {
        b.bits()
    }
}

impl fmt::Display for IdBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// 68 ordered landmarks in pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
    pub width: u32,
    pub height: u32,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, width: u32, height: u32) -> Result<Self> {
        let set = Self { points, width, height };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != NUM_LANDMARKS {
            return Err(Error::Dimension { what: "landmark points", expected: NUM_LANDMARKS, actual: self.points.len() });
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain(format!("image size {}x{} must be positive", self.width, self.height)));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, &[x, y]) in self.points.iter().enumerate() {
            if !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y) {
                return Err(Error::Domain(format!("landmark {i} at ({x}, {y}) outside {}x{}", self.width, self.height)));
            }
        }
        Ok(())
    }
}

/// Flattened `(x1/w, y1/h, ..., x68/w, y68/h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLandmarkVector(Vec<f64>);

impl NormalizedLandmarkVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != LANDMARK_DIM {
            return Err(Error::Dimension { what: "normalized landmarks", expected: LANDMARK_DIM, actual: values.len() });
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("normalized coordinate {i} = {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    /// Accepts any finite values; decoder predictions can leave `[0, 1]`.
    pub fn from_prediction(values: Vec<f64>) -> Result<Self> {
        if values.len() != LANDMARK_DIM {
            return Err(Error::Dimension { what: "landmark prediction", expected: LANDMARK_DIM, actual: values.len() });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.0[2 * i], self.0[2 * i + 1]]
    }
}

/// Bipolar identifier, every component `-1` or `+1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SourceId(Vec<i8>);

impl SourceId {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        IdBits::try_from(bits.len())?;
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::Domain("identifier components must be -1 or +1".into()));
        }
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[i8] {
        &self.0
    }

    pub fn width(&self) -> IdBits {
        IdBits::try_from(self.0.len()).expect("validated on construction")
    }

    /// Hex encoding, `+1 -> 1`, most significant bit first.
    pub fn to_hex(&self) -> String {
        bipolar_to_hex(&self.0)
    }

    pub fn from_hex(hex_str: &str) -> Result<Self> {
        let bytes = hex_decode(hex_str).ok_or_else(|| Error::Domain(format!("bad hex identifier {hex_str:?}")))?;
        let bits: Vec<i8> = bytes.iter().flat_map(|&b| (0..8).rev().map(move |k| if (b >> k) & 1 == 1 { 1 } else { -1 })).collect();
        Self::new(bits)
    }
}

pub(crate) fn bipolar_to_hex(bits: &[i8]) -> String {
    bits.chunks(8)
        .map(|chunk| {
            let byte = chunk.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b > 0)) << (8 - chunk.len());
            format!("{byte:02x}")
        })
        .collect()
}

fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

/// `[W_L ; W_ID]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LidMarkPayload {
    pub landmarks: NormalizedLandmarkVector,
    pub id: SourceId,
}

impl LidMarkPayload {
    pub fn dim(&self) -> usize {
        LANDMARK_DIM + self.id.0.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.dim());
        flat.extend_from_slice(self.landmarks.values());
        flat.extend(self.id.0.iter().map(|&b| f64::from(b)));
        flat
    }
}

pub fn normalize_landmarks(lm: &LandmarkSet) -> Result<NormalizedLandmarkVector> {
    lm.validate()?;
    let (w, h) = (lm.width as f64, lm.height as f64);
    let values = lm.points.iter().flat_map(|&[x, y]| [x / w, y / h]).collect();
    Ok(NormalizedLandmarkVector(values))
}

/// Inverse of [`normalize_landmarks`]. Predictions outside `[0, 1]` map
/// outside the image, so the result is not re-validated.
pub fn denormalize_landmarks(v: &NormalizedLandmarkVector, width: u32, height: u32) -> Result<LandmarkSet> {
    if width == 0 || height == 0 {
        return Err(Error::Domain(format!("image size {width}x{height} must be positive")));
    }
    let (w, h) = (width as f64, height as f64);
    let points = v.0.chunks(2).map(|p| [p[0] * w, p[1] * h]).collect();
    Ok(LandmarkSet { points, width, height })
}

/// SHA-256 of the UTF-8 name; the leading `bits / 8` digest bytes are read
/// most-significant bit first, `1 -> +1`, `0 -> -1`.
pub fn derive_source_id(name: &str, bits: IdBits) -> SourceId {
    let digest = Sha256::digest(name.as_bytes());
    let nbytes = bits.bits().div_ceil(8);
    let id = digest[..nbytes]
        .iter()
        .flat_map(|&byte| (0..8).rev().map(move |k| if (byte >> k) & 1 == 1 { 1i8 } else { -1 }))
        .take(bits.bits())
        .collect();
    SourceId(id)
}

/// Source name of an image path: the bare file stem.
pub fn source_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn compose_payload(landmarks: NormalizedLandmarkVector, id: SourceId) -> LidMarkPayload {
    LidMarkPayload { landmarks, id }
}

pub fn split_payload(flat: &[f64]) -> Result<(NormalizedLandmarkVector, SourceId)> {
    IdBits::from_payload_dim(flat.len())?;
    let landmarks = NormalizedLandmarkVector::new(flat[..LANDMARK_DIM].to_vec())?;
    let id = flat[LANDMARK_DIM..]
        .iter()
        .map(|&v| {
            if v == 1.0 {
                Ok(1)
            } else if v == -1.0 {
                Ok(-1)
            } else {
                Err(Error::Domain(format!("identifier component {v} is not bipolar")))
            }
        })
        .collect::<Result<Vec<i8>>>()?;
    Ok((landmarks, SourceId(id)))
}

/// One line of the landmark sidecar (JSON Lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarRecord {
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub points: Vec<[f64; 2]>,
}

impl SidecarRecord {
    pub fn from_landmarks(file: impl Into<String>, lm: &LandmarkSet) -> Self {
        Self { file: file.into(), width: lm.width, height: lm.height, points: lm.points.clone() }
    }

    pub fn landmarks(&self) -> Result<LandmarkSet> {
        LandmarkSet::new(self.points.clone(), self.width, self.height)
    }
}

/// Parse and validate a sidecar; errors carry the 1-based line number.
pub fn read_sidecar(path: &Path) -> Result<Vec<SidecarRecord>> {
    Ok(read_sidecar_lines(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Records paired with their 1-based line numbers.
pub fn read_sidecar_lines(path: &Path) -> Result<Vec<(usize, SidecarRecord)>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::Record { path: path.to_path_buf(), line: i + 1, message };
        let record: SidecarRecord = serde_json::from_str(&line).map_err(|e| at(format!("malformed record: {e}")))?;
        record.landmarks().map_err(|e| at(e.to_string()))?;
        records.push((i + 1, record));
    }
    Ok(records)
}

pub fn write_sidecar(out: &mut impl Write, records: &[SidecarRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
