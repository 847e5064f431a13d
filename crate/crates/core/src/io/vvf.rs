//! VVF1 volume files.
//!
//! Layout: the ASCII magic `VVF1`, a little-endian `u32` header length `H`,
//! `H` bytes of UTF-8 JSON header, then the raw little-endian payload with x
//! fastest, then y, then z, and channels as contiguous blocks.
//!
//! Header fields: `kind` (`image`, `labels`, `prob`, `field`), `dims`,
//! `channels`, `spacing_mm`, `dtype`, and for label maps `num_structures`.
//! Label maps are stored as `u8`. Real-valued kinds are stored as `f32` when
//! every value is exactly representable in single precision and as `f64`
//! otherwise, so reading back always reproduces the in-memory volume bit for
//! bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::TrustVolume;
use crate::volume::{GridGeometry, LabelVolume, ProbVolume, ScalarVolume};
use crate::warp::DisplacementField;

pub const MAGIC: [u8; 4] = *b"VVF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Labels,
    Prob,
    Field,
}

impl VolumeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VolumeKind::Image => "image",
            VolumeKind::Labels => "labels",
            VolumeKind::Prob => "prob",
            VolumeKind::Field => "field",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
    F64,
}

impl Dtype {
    pub fn as_str(&self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: VolumeKind,
    pub dims: [usize; 3],
    pub channels: usize,
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_structures: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Image(ScalarVolume),
    Labels(LabelVolume),
    Prob(ProbVolume),
    Field(DisplacementField),
}

impl Volume {
    pub fn kind(&self) -> VolumeKind {
        match self {
            Volume::Image(_) => VolumeKind::Image,
            Volume::Labels(_) => VolumeKind::Labels,
            Volume::Prob(_) => VolumeKind::Prob,
            Volume::Field(_) => VolumeKind::Field,
        }
    }

    pub fn geom(&self) -> &GridGeometry {
        match self {
            Volume::Image(v) => v.geom(),
            Volume::Labels(v) => v.geom(),
            Volume::Prob(v) => v.geom(),
            Volume::Field(v) => v.geom(),
        }
    }

    fn wrong(self, expected: VolumeKind) -> Error {
        Error::WrongKind {
            expected: expected.as_str().into(),
            found: self.kind().as_str().into(),
        }
    }

    pub fn into_image(self) -> Result<ScalarVolume> {
        match self {
            Volume::Image(v) => Ok(v),
            other => Err(other.wrong(VolumeKind::Image)),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Volume::Labels(v) => Ok(v),
            other => Err(other.wrong(VolumeKind::Labels)),
        }
    }

    pub fn into_prob(self) -> Result<ProbVolume> {
        match self {
            Volume::Prob(v) => Ok(v),
            other => Err(other.wrong(VolumeKind::Prob)),
        }
    }

    pub fn into_field(self) -> Result<DisplacementField> {
        match self {
            Volume::Field(v) => Ok(v),
            other => Err(other.wrong(VolumeKind::Field)),
        }
    }
}

impl From<ScalarVolume> for Volume {
    fn from(v: ScalarVolume) -> Self {
        Volume::Image(v)
    }
}

impl From<LabelVolume> for Volume {
    fn from(v: LabelVolume) -> Self {
        Volume::Labels(v)
    }
}

impl From<ProbVolume> for Volume {
    fn from(v: ProbVolume) -> Self {
        Volume::Prob(v)
    }
}

impl From<DisplacementField> for Volume {
    fn from(v: DisplacementField) -> Self {
        Volume::Field(v)
    }
}

fn fits_f32(data: &[f64]) -> bool {
    data.iter()
        .all(|&v| (v as f32 as f64).to_bits() == v.to_bits())
}

fn encode_reals(data: &[f64], out: &mut Vec<u8>) -> Dtype {
    if fits_f32(data) {
        out.reserve(4 * data.len());
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Dtype::F32
    } else {
        out.reserve(8 * data.len());
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Dtype::F64
    }
}

fn decode_reals(payload: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect(),
        Dtype::U8 => payload.iter().map(|&b| b as f64).collect(),
    }
}

/// Serialize a volume to VVF1 bytes.
pub fn encode(v: &Volume) -> Vec<u8> {
    let g = v.geom();
    let mut payload = Vec::new();
    let (channels, dtype, num_structures) = match v {
        Volume::Image(s) => (1, encode_reals(s.data(), &mut payload), None),
        Volume::Labels(l) => {
            payload.extend_from_slice(l.data());
            (1, Dtype::U8, Some(l.num_structures()))
        }
        Volume::Prob(p) => (p.channels(), encode_reals(p.data(), &mut payload), None),
        Volume::Field(f) => (3, encode_reals(f.data(), &mut payload), None),
    };
    let header = Header {
        kind: v.kind(),
        dims: g.dims(),
        channels,
        spacing_mm: g.spacing(),
        dtype,
        num_structures,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Parse only the magic and header.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 4 {
        return Err(Error::HeaderParse(format!("file is only {} bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(Error::HeaderParse("missing header length".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8usize
        .checked_add(h)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::HeaderParse(format!("header length {h} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[8..end])
        .map_err(|e| Error::HeaderParse(e.to_string()))?;
    Ok((header, end))
}

/// Parse VVF1 bytes.
pub fn decode(bytes: &[u8]) -> Result<Volume> {
    let (header, start) = decode_header(bytes)?;
    let kind_ok = match header.kind {
        VolumeKind::Labels => header.dtype == Dtype::U8,
        _ => header.dtype != Dtype::U8,
    };
    if !kind_ok {
        return Err(Error::KindDtypeMismatch {
            kind: header.kind.as_str().into(),
            dtype: header.dtype.as_str().into(),
        });
    }
    let expected_channels = match header.kind {
        VolumeKind::Image | VolumeKind::Labels => Some(1),
        VolumeKind::Field => Some(3),
        VolumeKind::Prob => None,
    };
    if let Some(c) = expected_channels {
        if header.channels != c {
            return Err(Error::HeaderParse(format!(
                "kind `{}` needs {c} channel(s), header says {}",
                header.kind.as_str(),
                header.channels
            )));
        }
    }
    if header.channels == 0 {
        return Err(Error::HeaderParse("channels must be >= 1".into()));
    }
    let geom = GridGeometry::new(header.dims, header.spacing_mm)
        .map_err(|e| Error::HeaderParse(e.to_string()))?;
    let payload = &bytes[start..];
    let expected = geom
        .len()
        .checked_mul(header.channels)
        .and_then(|n| n.checked_mul(header.dtype.size()))
        .ok_or_else(|| Error::HeaderParse("dims overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::PayloadLengthMismatch {
            expected,
            actual: payload.len(),
        });
    }
    Ok(match header.kind {
        VolumeKind::Labels => {
            let data = payload.to_vec();
            let k = match header.num_structures {
                Some(k) => k,
                None => data.iter().copied().max().unwrap_or(0).max(1),
            };
            Volume::Labels(LabelVolume::new(geom, data, k)?)
        }
        VolumeKind::Image => Volume::Image(ScalarVolume::new(geom, decode_reals(payload, header.dtype))?),
        VolumeKind::Prob => Volume::Prob(ProbVolume::new(
            geom,
            header.channels,
            decode_reals(payload, header.dtype),
        )?),
        VolumeKind::Field => {
            Volume::Field(DisplacementField::new(geom, decode_reals(payload, header.dtype))?)
        }
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(v)).map_err(|e| Error::io(path, e))
}

/// Trust maps are single-channel `prob` volumes.
pub fn read_trust(path: impl AsRef<Path>) -> Result<TrustVolume> {
    let p = read_volume(path)?.into_prob()?;
    if p.channels() != 1 {
        return Err(Error::ChannelMismatch(p.channels(), 1));
    }
    TrustVolume::new(*p.geom(), p.data().to_vec())
}
