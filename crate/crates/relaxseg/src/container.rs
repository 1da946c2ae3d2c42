//! Single-sample binary container.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `UMRV`                  |
//! | 4      | 2    | version (1)                   |
//! | 6      | 2    | m_total                       |
//! | 8      | 2    | n_regions                     |
//! | 10     | 12   | H, W, T (u32 each)            |
//! | 22     | 1    | dtype (0 = f32)               |
//! | 23     | ..   | modalities, then label, row-major |
//!
//! The sample id is not stored; it is the file stem.

use std::fs;
use std::path::Path;

use relaxseg_core::data::{ModalityVolume, MultiModalSample};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"UMRV";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub m_total: u16,
    pub n_regions: u16,
    pub dims: [u32; 3],
}

impl Header {
    fn voxels(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    /// Total file size implied by the header.
    pub fn file_len(&self) -> u64 {
        HEADER_LEN as u64 + (self.m_total as u64 + self.n_regions as u64) * self.voxels() * 4
    }
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

pub fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected {:?}", &bytes[..4], MAGIC)));
    }
    let version = u16_at(bytes, 4);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let h = Header {
        m_total: u16_at(bytes, 6),
        n_regions: u16_at(bytes, 8),
        dims: [u32_at(bytes, 10), u32_at(bytes, 14), u32_at(bytes, 18)],
    };
    if bytes[22] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(bytes[22]));
    }
    if h.m_total == 0 || h.n_regions == 0 {
        return Err(Error::format(6, "m_total and n_regions must be nonzero"));
    }
    if h.dims.contains(&0) {
        return Err(Error::format(10, format!("zero dimension in {:?}", h.dims)));
    }
    Ok(h)
}

pub fn encode(sample: &MultiModalSample) -> Result<Vec<u8>> {
    sample.validate()?;
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit the container header")))
    };
    let dims = sample.dims();
    let mut dims32 = [0u32; 3];
    for (d, &s) in dims32.iter_mut().zip(&dims) {
        *d = u32::try_from(s).map_err(|_| Error::Config(format!("dimension {s} does not fit the container header")))?;
    }
    let header = Header {
        m_total: narrow(sample.m_total(), "m_total")?,
        n_regions: narrow(sample.n_regions, "n_regions")?,
        dims: dims32,
    };
    let mut out = Vec::with_capacity(header.file_len() as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header.m_total.to_le_bytes());
    out.extend_from_slice(&header.n_regions.to_le_bytes());
    for d in header.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(DTYPE_F32);
    for v in sample.modalities.iter().flat_map(|m| &m.data).chain(&sample.label) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    debug_assert_eq!(out.len() as u64, header.file_len());
    Ok(out)
}

pub fn decode(bytes: &[u8], sample_id: &str) -> Result<MultiModalSample> {
    let h = parse_header(bytes)?;
    let expected = h.file_len();
    if bytes.len() as u64 != expected {
        return Err(Error::format(
            (bytes.len() as u64).min(expected),
            format!("payload size mismatch: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let vox = h.voxels() as usize;
    let dims = h.dims.map(|d| d as usize);
    let floats = |start: usize, n: usize| -> Vec<f32> {
        bytes[start..start + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
    };
    let mut modalities = Vec::with_capacity(h.m_total as usize);
    for m in 0..h.m_total as usize {
        let start = HEADER_LEN + 4 * m * vox;
        let vol = ModalityVolume { modality_id: m, dims, data: floats(start, vox) };
        vol.validate().map_err(|e| Error::format(start as u64, e.to_string()))?;
        modalities.push(vol);
    }
    let label_start = HEADER_LEN + 4 * h.m_total as usize * vox;
    let label = floats(label_start, h.n_regions as usize * vox);
    MultiModalSample::new(sample_id.to_string(), modalities, h.n_regions as usize, label)
        .map_err(|e| Error::format(label_start as u64, e.to_string()))
}

pub fn write_sample(sample: &MultiModalSample, path: &Path) -> Result<()> {
    let bytes = encode(sample)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a container; the sample id is the file stem.
pub fn read_sample(path: &Path) -> Result<MultiModalSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    decode(&bytes, id)
}
