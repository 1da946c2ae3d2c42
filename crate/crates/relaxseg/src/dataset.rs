//! Dataset directories (containers plus a manifest) and the train/test
//! split used by training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use relaxseg_core::data::MultiModalSample;
use relaxseg_core::eval::LabelledImage;
use relaxseg_core::synth::{generate_sample, SynthConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{read_sample, write_sample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONTAINER_EXT: &str = "umrv";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub dims: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub m_total: usize,
    pub n_regions: usize,
    pub samples: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(0, format!("manifest version {} unsupported", m.version)));
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn sample_id(index: usize) -> String {
    format!("sample_{index:05}")
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `true` if `dir` exists and has at least one entry.
pub fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Generates `cfg.n_samples` samples into `dir` as containers plus a
/// manifest. Refuses a nonempty directory unless `force`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    if !force && is_nonempty_dir(dir)? {
        return Err(Error::Refused(format!("{} is not empty (pass --force to overwrite)", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut s = generate_sample(cfg, i)?;
        s.sample_id = sample_id(i);
        let rel = format!("{}.{CONTAINER_EXT}", s.sample_id);
        write_sample(&s, &dir.join(&rel))?;
        samples.push(ManifestRecord { id: s.sample_id.clone(), path: rel, dims: s.dims() });
    }
    let manifest = Manifest { version: MANIFEST_VERSION, m_total: cfg.m_total, n_regions: cfg.n_regions, samples };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every sample listed in `dir`'s manifest, checking ids, dims and
/// channel counts against the manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<MultiModalSample>> {
    let manifest = Manifest::read(dir)?;
    let mut out = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let path: PathBuf = dir.join(&rec.path);
        let mut s = read_sample(&path)?;
        if s.dims() != rec.dims || s.m_total() != manifest.m_total || s.n_regions != manifest.n_regions {
            return Err(Error::format(
                0,
                format!(
                    "{} does not match its manifest record (dims {:?}, {} modalities)",
                    path.display(),
                    rec.dims,
                    manifest.m_total
                ),
            ));
        }
        s.sample_id = rec.id.clone();
        out.push(s);
    }
    Ok(out)
}

/// Generates samples in memory; ids follow [`sample_id`].
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<MultiModalSample>> {
    cfg.validate()?;
    (0..cfg.n_samples)
        .map(|i| {
            let mut s = generate_sample(cfg, i)?;
            s.sample_id = sample_id(i);
            Ok(s)
        })
        .collect()
}

/// Training and held-out samples as `(image [M,H,W,T], label [N,H,W,T])`.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<LabelledImage>,
    pub test: Vec<LabelledImage>,
}

impl Split {
    /// The last `n_test` samples are held out.
    pub fn new(samples: &[MultiModalSample], n_test: usize) -> Result<Self> {
        if n_test == 0 || n_test >= samples.len() {
            return Err(Error::Config(format!(
                "n_test must be in [1, {}) for {} samples",
                samples.len(),
                samples.len()
            )));
        }
        let pairs: Vec<LabelledImage> = samples.iter().map(|s| (s.stacked(), s.label_tensor())).collect();
        let cut = samples.len() - n_test;
        Ok(Split { train: pairs[..cut].to_vec(), test: pairs[cut..].to_vec() })
    }
}
