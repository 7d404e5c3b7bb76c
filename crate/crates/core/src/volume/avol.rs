//! AVOL container: magic, little-endian header length, `key = value` header
//! text, then the little-endian payload. Files store each channel with `z`
//! as the slowest axis and `x` the fastest; in memory `z` is fastest.

use std::path::Path;

use super::{LabelMap, VolumeSet, LABELS};
use crate::error::{Error, Result};
use crate::kv::{join, KvText};

pub const AVOL_MAGIC: &[u8; 8] = b"AVOL0001";

#[derive(Clone, Debug, PartialEq)]
pub struct AvolHeader {
    pub extents: [usize; 3],
    pub channels: usize,
    pub spacing: [f64; 3],
    pub axis_order: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

/// Decoded AVOL file with the payload in memory order `[c, x, y, z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Avol {
    pub header: AvolHeader,
    pub payload: Payload,
}

/// Index of `(x, y, z)` in file order within one channel.
fn file_index([nx, ny, _]: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (z * ny + y) * nx + x
}

fn reorder<T: Copy>(src: &[T], dims: [usize; 3], channels: usize, to_file: bool) -> Vec<T> {
    let n: usize = dims.iter().product();
    let mut out = src.to_vec();
    for c in 0..channels {
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let mem = c * n + (x * dims[1] + y) * dims[2] + z;
                    let file = c * n + file_index(dims, x, y, z);
                    if to_file {
                        out[file] = src[mem];
                    } else {
                        out[mem] = src[file];
                    }
                }
            }
        }
    }
    out
}

impl Avol {
    pub fn new(header: AvolHeader, payload: Payload) -> Result<Self> {
        let expected = header.channels * header.extents.iter().product::<usize>();
        if payload.len() != expected || header.extents.contains(&0) || header.channels == 0 {
            return Err(Error::shape(format!(
                "AVOL {:?} × {} needs {expected} values, got {}",
                header.extents,
                header.channels,
                payload.len()
            )));
        }
        Ok(Self { header, payload })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut kv = KvText::new("AVOL header");
        kv.push("extents", join(&h.extents));
        kv.push("channels", h.channels);
        kv.push("spacing", join(&h.spacing));
        kv.push("dtype", self.payload.dtype());
        kv.push("axis_order", &h.axis_order);
        let text = kv.render();
        let mut out = Vec::with_capacity(12 + text.len() + self.payload.len() * 4);
        out.extend_from_slice(AVOL_MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        match &self.payload {
            Payload::F32(v) => {
                for x in reorder(v, h.extents, h.channels, true) {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::U8(v) => out.extend(reorder(v, h.extents, h.channels, true)),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic = bytes.get(..8).unwrap_or(bytes);
        if magic != AVOL_MAGIC {
            if magic.starts_with(b"AVOL") && magic.len() == 8 {
                return Err(Error::UnsupportedVersion {
                    what: "AVOL",
                    found: String::from_utf8_lossy(&magic[4..]).into_owned(),
                });
            }
            return Err(Error::BadMagic {
                what: "AVOL volume",
                expected: String::from_utf8_lossy(AVOL_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let len_bytes: [u8; 4] = bytes
            .get(8..12)
            .ok_or(Error::PayloadLength { expected: 12, actual: bytes.len() })?
            .try_into()
            .expect("four bytes");
        let hlen = u32::from_le_bytes(len_bytes) as usize;
        let text = bytes.get(12..12 + hlen).ok_or(Error::PayloadLength { expected: 12 + hlen, actual: bytes.len() })?;
        let text = std::str::from_utf8(text)
            .map_err(|_| Error::Format { what: "AVOL header", detail: "header is not UTF-8".into() })?;
        let kv = KvText::parse(text, "AVOL header")?;
        kv.only(&["extents", "channels", "spacing", "dtype", "axis_order"])?;
        let header = AvolHeader {
            extents: kv.parse_array("extents")?,
            channels: kv.parse_value("channels")?,
            spacing: kv.parse_array("spacing")?,
            axis_order: kv.require("axis_order")?.to_string(),
        };
        if header.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(kv.bad("spacing", kv.require("spacing")?));
        }
        let count = header.channels * header.extents.iter().product::<usize>();
        let body = &bytes[12 + hlen..];
        let dtype = kv.require("dtype")?;
        let width = match dtype {
            "f32" => 4,
            "u8" => 1,
            other => return Err(kv.bad("dtype", other)),
        };
        if body.len() != count * width {
            return Err(Error::PayloadLength { expected: count * width, actual: body.len() });
        }
        let payload = if width == 4 {
            let raw: Vec<f32> =
                body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
            if raw.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("AVOL payload".into()));
            }
            Payload::F32(reorder(&raw, header.extents, header.channels, false))
        } else {
            Payload::U8(reorder(body, header.extents, header.channels, false))
        };
        Avol::new(header, payload)
    }

    pub fn into_volume(self) -> Result<VolumeSet> {
        match self.payload {
            Payload::F32(v) => {
                VolumeSet::with_spacing(self.header.extents, self.header.channels, self.header.spacing, v)
            }
            Payload::U8(_) => Err(Error::Format { what: "AVOL volume", detail: "expected dtype f32, found u8".into() }),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self.payload {
            Payload::U8(v) if self.header.channels == 1 => {
                if let Some(&bad) = v.iter().find(|l| !LABELS.contains(l)) {
                    return Err(Error::InvalidLabel(bad));
                }
                LabelMap::new(self.header.extents, v)
            }
            _ => Err(Error::Format { what: "AVOL labels", detail: "expected one u8 channel".into() }),
        }
    }
}

impl From<&VolumeSet> for Avol {
    fn from(v: &VolumeSet) -> Self {
        Avol {
            header: AvolHeader {
                extents: v.dims(),
                channels: v.channels(),
                spacing: v.spacing(),
                axis_order: "xyz".into(),
            },
            payload: Payload::F32(v.data().to_vec()),
        }
    }
}

impl From<&LabelMap> for Avol {
    fn from(l: &LabelMap) -> Self {
        Avol {
            header: AvolHeader { extents: l.dims(), channels: 1, spacing: [1.0; 3], axis_order: "xyz".into() },
            payload: Payload::U8(l.data().to_vec()),
        }
    }
}

pub fn write_avol(path: impl AsRef<Path>, avol: &Avol) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, avol.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_avol(path: impl AsRef<Path>) -> Result<Avol> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Avol::from_bytes(&bytes)
}
