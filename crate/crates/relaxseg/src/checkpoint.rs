//! Stage checkpoints: parameters, optimizer moments and generator position,
//! written atomically and read back bit-exactly.
//!
//! Layout: magic `UMRC`, u16 version, u64 header length, a JSON header
//! (tag, network config, config hash, epoch, generator state, parameter
//! names and shapes), then every parameter as little-endian f64 in header
//! order, then the Adam first and second moments in the same order when
//! the header says they are present.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use relaxseg_core::net::{AdapterVariant, Network, NetworkConfig};
use relaxseg_core::optim::AdamState;
use relaxseg_core::param::ParamStore;
use relaxseg_core::rng::RngState;
use relaxseg_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ConfigHash;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"UMRC";
pub const VERSION: u16 = 1;
const PREFIX_LEN: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageTag {
    Recon,
    Contrastive,
    AdaptiveFT,
    SingleStageAblation,
    Supervised,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Recon => "Recon",
            StageTag::Contrastive => "Contrastive",
            StageTag::AdaptiveFT => "AdaptiveFT",
            StageTag::SingleStageAblation => "SingleStageAblation",
            StageTag::Supervised => "Supervised",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkRecord {
    in_channels: usize,
    n_classes: usize,
    levels: usize,
    base_channels: usize,
    aspp_dilations: [usize; 4],
    attention_window: [usize; 3],
    adapter_enabled: bool,
    adapter_variant: String,
}

impl From<&NetworkConfig> for NetworkRecord {
    fn from(c: &NetworkConfig) -> Self {
        NetworkRecord {
            in_channels: c.in_channels,
            n_classes: c.n_classes,
            levels: c.levels,
            base_channels: c.base_channels,
            aspp_dilations: c.aspp_dilations,
            attention_window: c.attention_window,
            adapter_enabled: c.adapter_enabled,
            adapter_variant: c.adapter_variant.as_str().into(),
        }
    }
}

impl NetworkRecord {
    fn to_config(&self) -> Result<NetworkConfig> {
        Ok(NetworkConfig {
            in_channels: self.in_channels,
            n_classes: self.n_classes,
            levels: self.levels,
            base_channels: self.base_channels,
            aspp_dilations: self.aspp_dilations,
            attention_window: self.attention_window,
            adapter_enabled: self.adapter_enabled,
            adapter_variant: AdapterVariant::parse(&self.adapter_variant)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    tag: StageTag,
    network: NetworkRecord,
    config_hash: ConfigHash,
    epoch: usize,
    rng_seed: u64,
    rng_stream: u64,
    /// Decimal, since JSON numbers cannot carry a u128.
    rng_word_pos: String,
    params: Vec<ParamRecord>,
    adam_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: StageTag,
    pub network: NetworkConfig,
    pub config_hash: ConfigHash,
    /// Completed epochs of the stage that wrote the checkpoint.
    pub epoch: usize,
    /// Training generator position after `epoch` epochs.
    pub rng: RngState,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(
        tag: StageTag,
        net: &Network,
        config_hash: ConfigHash,
        epoch: usize,
        rng: RngState,
        adam: Option<&AdamState>,
    ) -> Self {
        // freezing is a property of the running stage, not of the weights;
        // the file does not store it, so the in-memory copy does not either
        let mut params = net.params().clone();
        params.set_all_trainable(true);
        Checkpoint { tag, network: *net.config(), config_hash, epoch, rng, params, adam: adam.cloned() }
    }

    /// Errors unless the checkpoint carries `tag`; `what` names the
    /// consumer, e.g. "stage 3".
    pub fn require_tag(&self, tag: StageTag, what: &str) -> Result<()> {
        if self.tag != tag {
            return Err(relaxseg_core::Error::InvalidCheckpoint(format!(
                "{what} requires a {tag} checkpoint, got {}",
                self.tag
            ))
            .into());
        }
        Ok(())
    }

    /// Copies every parameter into `net`, which must have been built from
    /// an identical network config.
    pub fn restore_into(&self, net: &mut Network) -> Result<()> {
        if *net.config() != self.network {
            return Err(relaxseg_core::Error::InvalidCheckpoint(format!(
                "checkpoint network config {:?} does not match {:?}",
                self.network,
                net.config()
            ))
            .into());
        }
        let names: Vec<String> = self.params.entries().iter().map(|e| e.name.clone()).collect();
        // optimizer moments are indexed by position, so order must agree too
        if names.len() != net.params().len() || names.iter().zip(net.params().entries()).any(|(a, b)| *a != b.name) {
            return Err(relaxseg_core::Error::InvalidCheckpoint(format!(
                "checkpoint parameter set ({} entries) does not match the network's ({})",
                names.len(),
                net.params().len()
            ))
            .into());
        }
        net.copy_params_from(&self.params, &names)?;
        Ok(())
    }

    /// A network rebuilt from the stored config and parameters.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::new(self.network, 0)?;
        self.restore_into(&mut net)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = HeaderRecord {
            tag: self.tag,
            network: NetworkRecord::from(&self.network),
            config_hash: self.config_hash,
            epoch: self.epoch,
            rng_seed: self.rng.seed,
            rng_stream: self.rng.stream,
            rng_word_pos: self.rng.word_pos.to_string(),
            params: self
                .params
                .entries()
                .iter()
                .map(|e| ParamRecord { name: e.name.clone(), shape: e.value.shape().to_vec() })
                .collect(),
            adam_step: self.adam.as_ref().map(|a| a.step),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for e in self.params.entries() {
            put(e.value.data());
        }
        if let Some(a) = &self.adam {
            for m in &a.m {
                put(m);
            }
            for v in &a.v {
                put(v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint prefix"));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
        let body = PREFIX_LEN
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(6, format!("header length {hlen} exceeds file size {}", bytes.len())))?;
        let h: HeaderRecord = serde_json::from_slice(&bytes[PREFIX_LEN..body])
            .map_err(|e| Error::format(PREFIX_LEN as u64, format!("checkpoint header: {e}")))?;
        let numel: usize = h.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        let expected = body + 8 * numel * if h.adam_step.is_some() { 3 } else { 1 };
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected) as u64,
                format!("checkpoint size mismatch: expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let mut pos = body;
        let mut take = |n: usize| -> Vec<f64> {
            let v = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += 8 * n;
            v
        };
        let mut params = ParamStore::new();
        for p in &h.params {
            let data = take(p.shape.iter().product());
            params.add(&p.name, Tensor::from_vec(&p.shape, data)?);
        }
        let adam = h.adam_step.map(|step| {
            let sizes: Vec<usize> = h.params.iter().map(|p| p.shape.iter().product()).collect();
            let m = sizes.iter().map(|&n| take(n)).collect();
            let v = sizes.iter().map(|&n| take(n)).collect();
            AdamState { step, m, v }
        });
        let word_pos = h
            .rng_word_pos
            .parse::<u128>()
            .map_err(|_| Error::format(PREFIX_LEN as u64, format!("bad generator position {:?}", h.rng_word_pos)))?;
        Ok(Checkpoint {
            tag: h.tag,
            network: h.network.to_config()?,
            config_hash: h.config_hash,
            epoch: h.epoch,
            rng: RngState { seed: h.rng_seed, stream: h.rng_stream, word_pos },
            params,
            adam,
        })
    }

    /// Writes to a temporary file in the target directory, then renames it
    /// over `path`, so readers never observe a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Temp-file-then-rename write; creates the parent directory if needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
