//! The run configuration: one TOML file, every key optional, unknown keys
//! rejected, validated in full before any work starts.

use std::fmt;
use std::path::{Path, PathBuf};

use relaxseg_core::data::{incomplete_combinations, FillPolicy};
use relaxseg_core::losses::LossWeights;
use relaxseg_core::net::{AdapterVariant, NetworkConfig, DIM_DIVISOR};
use relaxseg_core::optim::AdamWConfig;
use relaxseg_core::perturb::PerturbConfig;
use relaxseg_core::synth::SynthConfig;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "RELAXSEG_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Directory of containers plus manifest; empty means generate in memory.
    pub path: String,
    pub volume_dims: [usize; 3],
    pub m_total: usize,
    pub n_regions: usize,
    pub noise_sigma: Vec<f64>,
    pub seed: u64,
    pub n_samples: usize,
    /// The last `n_test` samples are held out for evaluation.
    pub n_test: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        DatasetSection {
            path: String::new(),
            volume_dims: s.volume_dims,
            m_total: s.m_total,
            n_regions: s.n_regions,
            noise_sigma: s.noise_sigma,
            seed: s.seed,
            n_samples: s.n_samples,
            n_test: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub base_channels: usize,
    pub attention_window: [usize; 3],
    pub adapter: bool,
    /// One of `full`, `no-reverse`, `no-attention`, `conv-gate`.
    pub adapter_variant: String,
    pub seed: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let n = NetworkConfig::default();
        NetworkSection {
            base_channels: n.base_channels,
            attention_window: n.attention_window,
            adapter: n.adapter_enabled,
            adapter_variant: n.adapter_variant.as_str().into(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSection {
    pub dropout_p: f64,
    /// Channel shuffle during reconstruction pretraining.
    pub shuffle: bool,
    pub mask_ratio: f64,
    pub patch: [usize; 3],
}

impl Default for PerturbSection {
    fn default() -> Self {
        let p = PerturbConfig::default();
        PerturbSection { dropout_p: p.dropout_p, shuffle: p.shuffle, mask_ratio: p.mask_ratio, patch: p.patch }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub w_recon_l1: f64,
    pub w_recon_ssim: f64,
    pub w_ntxent: f64,
    pub w_dice: f64,
    pub w_fc: f64,
    pub w_pc: f64,
    pub tau: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            w_recon_l1: w.w_recon_l1,
            w_recon_ssim: w.w_recon_ssim,
            w_ntxent: w.w_ntxent,
            w_dice: w.w_dice,
            w_fc: w.w_fc,
            w_pc: w.w_pc,
            tau: w.tau,
        }
    }
}

/// Incomplete combinations visited per adapter-stage step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombosPerStep {
    All,
    /// A uniformly drawn subset of this size, rescaled to the full sum.
    Count(usize),
}

impl Serialize for CombosPerStep {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CombosPerStep::All => s.serialize_str("all"),
            CombosPerStep::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for CombosPerStep {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(CombosPerStep::Count(n)),
            Raw::S(s) if s == "all" => Ok(CombosPerStep::All),
            Raw::S(s) => {
                Err(serde::de::Error::custom(format!("combos_per_step must be \"all\" or an integer, got {s:?}")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Images per step; the contrastive stage needs exactly 2 (one pair).
    pub batch_size: usize,
    /// Adapter and single-stage runs only.
    pub combos_per_step: CombosPerStep,
    pub seed: u64,
    /// Channel shuffle of complete inputs (contrastive and supervised runs).
    pub shuffle: bool,
    /// Random flips and in-plane quarter turns.
    pub augment: bool,
}

impl Default for StageSection {
    fn default() -> Self {
        StageSection {
            epochs: 30,
            lr: 1e-4,
            weight_decay: 1e-5,
            warmup_epochs: 3,
            batch_size: 2,
            combos_per_step: CombosPerStep::All,
            seed: 1,
            shuffle: false,
            augment: true,
        }
    }
}

impl StageSection {
    /// Optimizer settings with warmup converted from epochs to steps.
    pub fn adamw(&self, steps_per_epoch: usize) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: (self.warmup_epochs * steps_per_epoch) as u64,
            ..AdamWConfig::default()
        }
    }

    fn validate(&self, name: &str, m_total: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("[{name}] {msg}")));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if let CombosPerStep::Count(n) = self.combos_per_step {
            let max = (1usize << m_total) - 2;
            if n == 0 || n > max {
                return bad(format!("combos_per_step must be in [1, {max}] or \"all\", got {n}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold: f64,
    pub n_perm: usize,
    /// `zero` or `copy`.
    pub fill_policy: String,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { threshold: 0.5, n_perm: 5, fill_policy: "zero".into(), seed: 99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub perturb: PerturbSection,
    pub losses: LossSection,
    /// Reconstruction pretraining.
    pub stage1: StageSection,
    /// Contrastive alignment.
    pub stage2: StageSection,
    /// Frozen-encoder adapter fine-tuning.
    pub stage3: StageSection,
    /// All objectives jointly from scratch (ablation).
    pub single: StageSection,
    /// Plain supervised training (baseline and partial pipelines).
    pub supervised: StageSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            network: NetworkSection::default(),
            perturb: PerturbSection::default(),
            losses: LossSection::default(),
            stage1: StageSection::default(),
            stage2: StageSection::default(),
            stage3: StageSection::default(),
            single: StageSection::default(),
            supervised: StageSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Reads and validates `path`, then applies [`OUTPUT_DIR_ENV`].
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })?
            }
            None => RunConfig::default(),
        };
        cfg.finish()
    }

    /// Applies [`OUTPUT_DIR_ENV`] and validates.
    pub fn finish(mut self) -> Result<Self> {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        let d = &self.dataset;
        if let Some(bad) = d.volume_dims.iter().find(|&&x| x % DIM_DIVISOR != 0) {
            return Err(Error::Config(format!(
                "volume_dims {:?}: {bad} is not divisible by {DIM_DIVISOR} (four stride-2 encoder levels)",
                d.volume_dims
            )));
        }
        if d.n_test == 0 || d.n_test >= d.n_samples {
            return Err(Error::Config(format!(
                "n_test must be in [1, n_samples), got {} of {}",
                d.n_test, d.n_samples
            )));
        }
        self.network_config()?.validate()?;
        self.perturb_validate()?;
        self.loss_weights().validate()?;
        for (name, s) in self.stages() {
            s.validate(name, d.m_total)?;
        }
        if self.stage2.batch_size != 2 {
            return Err(Error::Config(format!(
                "[stage2] batch_size must be 2 (one pair, four forward inputs), got {}",
                self.stage2.batch_size
            )));
        }
        if self.single.batch_size != 2 {
            return Err(Error::Config(format!("[single] batch_size must be 2, got {}", self.single.batch_size)));
        }
        let train = d.n_samples - d.n_test;
        for (name, s) in self.stages() {
            if s.batch_size > train {
                return Err(Error::Config(format!(
                    "[{name}] batch_size {} exceeds {train} training samples",
                    s.batch_size
                )));
            }
        }
        let e = &self.eval;
        if !(e.threshold > 0.0 && e.threshold < 1.0) {
            return Err(Error::Config(format!("eval.threshold must be in (0, 1), got {}", e.threshold)));
        }
        if e.n_perm == 0 {
            return Err(Error::Config("eval.n_perm must be >= 1".into()));
        }
        self.fill_policy()?;
        if d.m_total >= 2 {
            incomplete_combinations(d.m_total)?;
        }
        Ok(())
    }

    fn perturb_validate(&self) -> Result<()> {
        let p = &self.perturb;
        if !(0.0..1.0).contains(&p.dropout_p) {
            return Err(Error::Config(format!("perturb.dropout_p must be in [0, 1), got {}", p.dropout_p)));
        }
        if !(0.0..=1.0).contains(&p.mask_ratio) {
            return Err(Error::Config(format!("perturb.mask_ratio must be in [0, 1], got {}", p.mask_ratio)));
        }
        if p.patch.iter().zip(&self.dataset.volume_dims).any(|(p, d)| *p == 0 || d % p != 0) {
            return Err(Error::Config(format!(
                "perturb.patch {:?} must tile volume_dims {:?}",
                p.patch, self.dataset.volume_dims
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> [(&'static str, &StageSection); 5] {
        [
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
            ("stage3", &self.stage3),
            ("single", &self.single),
            ("supervised", &self.supervised),
        ]
    }

    pub fn synth_config(&self) -> SynthConfig {
        let d = &self.dataset;
        SynthConfig {
            volume_dims: d.volume_dims,
            m_total: d.m_total,
            n_regions: d.n_regions,
            noise_sigma: d.noise_sigma.clone(),
            seed: d.seed,
            n_samples: d.n_samples,
        }
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let n = &self.network;
        Ok(NetworkConfig {
            in_channels: self.dataset.m_total,
            n_classes: self.dataset.n_regions,
            base_channels: n.base_channels,
            attention_window: n.attention_window,
            adapter_enabled: n.adapter,
            adapter_variant: AdapterVariant::parse(&n.adapter_variant)?,
            ..NetworkConfig::default()
        })
    }

    pub fn perturb_config(&self) -> PerturbConfig {
        let p = &self.perturb;
        PerturbConfig { dropout_p: p.dropout_p, shuffle: p.shuffle, mask_ratio: p.mask_ratio, patch: p.patch }
    }

    pub fn loss_weights(&self) -> LossWeights {
        let l = &self.losses;
        LossWeights {
            w_recon_l1: l.w_recon_l1,
            w_recon_ssim: l.w_recon_ssim,
            w_ntxent: l.w_ntxent,
            w_dice: l.w_dice,
            w_fc: l.w_fc,
            w_pc: l.w_pc,
            tau: l.tau,
        }
    }

    pub fn fill_policy(&self) -> Result<FillPolicy> {
        match self.eval.fill_policy.as_str() {
            "zero" => Ok(FillPolicy::ZeroFill),
            "copy" => Ok(FillPolicy::CopyPresent),
            other => Err(Error::Config(format!("eval.fill_policy must be \"zero\" or \"copy\", got {other:?}"))),
        }
    }

    /// Identity of everything a checkpoint depends on: dataset, network,
    /// perturbation and loss sections. Stage schedules, evaluation settings
    /// and the output directory are excluded.
    pub fn hash(&self) -> ConfigHash {
        let canonical = serde_json::to_string(&(&self.dataset, &self.network, &self.perturb, &self.losses))
            .expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        ConfigHash(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
    }

    /// Every key with its default value, for `--help`.
    pub fn defaults_help() -> String {
        let mut s = String::from("CONFIG KEYS (TOML; every key optional, unknown keys rejected) and defaults:\n\n");
        s.push_str(&RunConfig::default().to_toml());
        s.push_str(&format!(
            "\n{OUTPUT_DIR_ENV} overrides output_dir. dataset.path = \"\" generates the dataset in memory.\n"
        ));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfigHash(pub u64);

impl fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[stage1]\nepoch = 3").is_err());
    }

    #[test]
    fn combos_per_step_forms() {
        let c = RunConfig::from_toml("[stage3]\ncombos_per_step = 4").unwrap();
        assert_eq!(c.stage3.combos_per_step, CombosPerStep::Count(4));
        let c = RunConfig::from_toml("[stage3]\ncombos_per_step = \"all\"").unwrap();
        assert_eq!(c.stage3.combos_per_step, CombosPerStep::All);
        assert!(RunConfig::from_toml("[stage3]\ncombos_per_step = \"some\"").is_err());
        let c = RunConfig::from_toml("[stage3]\ncombos_per_step = 15").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn dims_must_divide() {
        let c = RunConfig::from_toml("[dataset]\nvolume_dims = [32, 32, 12]").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_schedules() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.stage3.epochs = 1;
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.network.base_channels = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn help_lists_every_section() {
        let h = RunConfig::defaults_help();
        for key in ["output_dir", "[dataset]", "n_test", "[stage3]", "combos_per_step", "[eval]", "n_perm", "tau"] {
            assert!(h.contains(key), "help lacks {key}");
        }
    }
}
