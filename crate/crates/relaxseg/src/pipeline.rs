//! Stage orchestration: epochs, batching, augmentation, freezing, weight
//! transfer between stages, metrics logging, NaN aborts and resumable
//! checkpoints.
//!
//! Every random draw of a stage comes from one generator keyed by the
//! stage seed, and a checkpoint is taken at each epoch boundary with that
//! generator's position and the optimizer moments. Resuming from such a
//! checkpoint replays the remaining epochs bit-for-bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use relaxseg_core::augment::Augmentation;
use relaxseg_core::data::{incomplete_combinations, ModalityCombination};
use relaxseg_core::eval::LabelledImage;
use relaxseg_core::losses::LossWeights;
use relaxseg_core::net::{Network, NetworkConfig, ADAPTER_PREFIX, ENCODER_PREFIX, RECON_HEAD_PREFIX};
use relaxseg_core::optim::AdamW;
use relaxseg_core::rng::SeededRng;
use relaxseg_core::train::{self, StepReport};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, StageTag};
use crate::config::{CombosPerStep, ConfigHash, RunConfig, StageSection};
use crate::dataset::Split;
use crate::error::{Error, Result};

/// Losses kept for the diagnostics of an aborted run.
pub const HISTORY_LEN: usize = 32;
const TRAIN_STREAM: u64 = 0x7a11;
const HEAD_STREAM_SEED: u64 = 0x5e9;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub stage: StageTag,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
}

impl MetricsRecord {
    fn new(stage: StageTag, epoch: usize, r: &StepReport) -> Self {
        MetricsRecord {
            stage,
            epoch,
            step: r.step,
            lr: r.lr,
            loss: r.loss,
            terms: r.terms.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

/// Receives per-step metrics and per-epoch checkpoints.
pub trait Observer {
    fn step(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
    fn epoch_end(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct Quiet;
impl Observer for Quiet {}

/// Collects records in memory.
#[derive(Debug, Default)]
pub struct Recorder {
    pub records: Vec<MetricsRecord>,
}

impl Observer for Recorder {
    fn step(&mut self, r: &MetricsRecord) -> Result<()> {
        self.records.push(r.clone());
        Ok(())
    }
}

/// Appends JSON lines to a metrics file and, if a path is given, rewrites
/// the stage checkpoint at every epoch boundary.
pub struct FileObserver {
    log: BufWriter<File>,
    log_path: std::path::PathBuf,
    checkpoint_path: Option<std::path::PathBuf>,
}

impl FileObserver {
    pub fn create(log_path: &Path, checkpoint_path: Option<&Path>, append: bool) -> Result<Self> {
        if let Some(dir) = log_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(log_path)
            .map_err(|e| Error::io(log_path, e))?;
        Ok(FileObserver {
            log: BufWriter::new(file),
            log_path: log_path.to_path_buf(),
            checkpoint_path: checkpoint_path.map(Path::to_path_buf),
        })
    }
}

impl Observer for FileObserver {
    fn step(&mut self, r: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(self.log, "{line}").map_err(|e| Error::io(&self.log_path, e))
    }

    fn epoch_end(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(&self.log_path, e))?;
        match &self.checkpoint_path {
            Some(p) => ckpt.save(p),
            None => Ok(()),
        }
    }
}

impl Drop for FileObserver {
    fn drop(&mut self) {
        let _ = self.log.flush();
    }
}

fn augmented(item: &LabelledImage, rng: &mut SeededRng, on: bool) -> Result<LabelledImage> {
    if !on {
        return Ok(item.clone());
    }
    let s = item.0.shape();
    let aug = Augmentation::sample(rng, [s[1], s[2], s[3]]);
    Ok((aug.apply(&item.0)?, aug.apply(&item.1)?))
}

/// `k` distinct combinations drawn uniformly from `all`, in canonical order.
fn draw_combos(all: &[ModalityCombination], k: CombosPerStep, rng: &mut SeededRng) -> Vec<ModalityCombination> {
    match k {
        CombosPerStep::All => all.to_vec(),
        CombosPerStep::Count(k) => {
            let k = k.min(all.len());
            let mut idx: Vec<usize> = (0..all.len()).collect();
            for i in 0..k {
                let j = i + rng.below(all.len() - i);
                idx.swap(i, j);
            }
            let mut chosen = idx[..k].to_vec();
            chosen.sort_unstable();
            chosen.into_iter().map(|i| all[i]).collect()
        }
    }
}

/// Network for the contrastive stage: everything except the output heads
/// comes from the reconstruction checkpoint; both heads are redrawn.
pub fn init_stage2_from_stage1(ckpt: &Checkpoint, seed: u64) -> Result<Network> {
    ckpt.require_tag(StageTag::Recon, "stage 2")?;
    let mut net = Network::new(ckpt.network, seed)?;
    let names = net.transferable_names();
    net.copy_params_from(&ckpt.params, &names)?;
    net.reinit_heads(seed ^ HEAD_STREAM_SEED);
    Ok(net)
}

/// Network for the adapter stage: every non-adapter parameter comes from
/// `ckpt`; adapters are freshly built (zero-initialized output layers)
/// for `cfg`, whose adapter variant may differ from the checkpoint's.
pub fn init_stage3_from(ckpt: &Checkpoint, cfg: NetworkConfig, seed: u64) -> Result<Network> {
    let same_trunk = NetworkConfig { adapter_enabled: true, adapter_variant: ckpt.network.adapter_variant, ..cfg };
    if same_trunk != (NetworkConfig { adapter_enabled: true, ..ckpt.network }) {
        return Err(relaxseg_core::Error::InvalidCheckpoint(
            "checkpoint network differs from the configured one outside the adapters".into(),
        )
        .into());
    }
    if !cfg.adapter_enabled {
        return Err(Error::Config("the adapter stage needs network.adapter = true".into()));
    }
    let mut net = Network::new(cfg, seed)?;
    let names: Vec<String> =
        ckpt.params.entries().iter().map(|e| e.name.clone()).filter(|n| !n.starts_with(ADAPTER_PREFIX)).collect();
    net.copy_params_from(&ckpt.params, &names)?;
    Ok(net)
}

/// Runs stages against one configuration and data split.
pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub train: &'a [LabelledImage],
    hash: ConfigHash,
    weights: LossWeights,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, split: &'a Split) -> Result<Self> {
        Self::with_train(cfg, &split.train)
    }

    pub fn with_train(cfg: &'a RunConfig, train: &'a [LabelledImage]) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        Ok(Trainer { cfg, train, hash: cfg.hash(), weights: cfg.loss_weights() })
    }

    pub fn config_hash(&self) -> ConfigHash {
        self.hash
    }

    /// Freshly initialized network for the configured architecture.
    pub fn fresh_network(&self) -> Result<Network> {
        Ok(Network::new(self.cfg.network_config()?, self.cfg.network.seed)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn run<F>(
        &self,
        tag: StageTag,
        scfg: &StageSection,
        net: &mut Network,
        resume: Option<&Checkpoint>,
        obs: &mut dyn Observer,
        group: usize,
        mut step: F,
    ) -> Result<Checkpoint>
    where
        F: FnMut(&mut Network, &mut AdamW, &mut SeededRng, &[LabelledImage]) -> relaxseg_core::Result<StepReport>,
    {
        let n = self.train.len();
        if group == 0 || group > n {
            return Err(Error::Config(format!("{tag}: batch of {group} from {n} training samples")));
        }
        let steps_per_epoch = n / group;
        let mut opt = AdamW::new(scfg.adamw(steps_per_epoch), net.params())?;
        // each stage draws from its own stream even when seeds coincide
        let mut rng = SeededRng::with_stream(scfg.seed, TRAIN_STREAM + tag as u64);
        let mut start = 0;
        if let Some(ck) = resume {
            ck.require_tag(tag, "resume")?;
            if ck.config_hash != self.hash {
                return Err(Error::Refused(format!(
                    "resume checkpoint was written under config {} but the current config is {}",
                    ck.config_hash, self.hash
                )));
            }
            ck.restore_into(net)?;
            opt.state = ck.adam.clone().ok_or_else(|| {
                relaxseg_core::Error::InvalidCheckpoint("resume checkpoint lacks optimizer state".into())
            })?;
            rng = SeededRng::from_state(ck.rng);
            start = ck.epoch;
        }
        let mut history: Vec<f64> = Vec::with_capacity(HISTORY_LEN);
        let mut last = None;
        for epoch in start..scfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            for chunk in order.chunks_exact(group) {
                let batch: Vec<LabelledImage> =
                    chunk.iter().map(|&i| augmented(&self.train[i], &mut rng, scfg.augment)).collect::<Result<_>>()?;
                let report = step(net, &mut opt, &mut rng, &batch).map_err(|e| match e {
                    e @ relaxseg_core::Error::NonFinite { .. } => {
                        Error::Aborted { stage: tag.to_string(), source: e, history: history.clone() }
                    }
                    other => other.into(),
                })?;
                if history.len() == HISTORY_LEN {
                    history.remove(0);
                }
                history.push(report.loss);
                obs.step(&MetricsRecord::new(tag, epoch, &report))?;
            }
            let ck = Checkpoint::capture(tag, net, self.hash, epoch + 1, rng.state(), Some(&opt.state));
            obs.epoch_end(&ck)?;
            last = Some(ck);
        }
        Ok(last.unwrap_or_else(|| Checkpoint::capture(tag, net, self.hash, start, rng.state(), Some(&opt.state))))
    }

    /// Reconstruction pretraining under dropout, shuffle and patch masking.
    pub fn run_stage1(
        &self,
        net: &mut Network,
        resume: Option<&Checkpoint>,
        obs: &mut dyn Observer,
    ) -> Result<Checkpoint> {
        let s = &self.cfg.stage1;
        let perturb = self.cfg.perturb_config();
        let w = self.weights;
        self.run(StageTag::Recon, s, net, resume, obs, s.batch_size, |net, opt, rng, batch| {
            let images: Vec<_> = batch.iter().map(|(x, _)| x.clone()).collect();
            train::reconstruction_step(net, opt, rng, &images, &perturb, &w)
        })
    }

    /// Contrastive alignment plus Dice on one pair per step; the whole
    /// network trains.
    pub fn run_stage2(
        &self,
        net: &mut Network,
        resume: Option<&Checkpoint>,
        obs: &mut dyn Observer,
    ) -> Result<Checkpoint> {
        let s = &self.cfg.stage2;
        let w = self.weights;
        net.params_mut().set_all_trainable(true);
        self.run(StageTag::Contrastive, s, net, resume, obs, 2, |net, opt, rng, b| {
            train::contrastive_step(net, opt, rng, [(&b[0].0, &b[0].1), (&b[1].0, &b[1].1)], &w, s.shuffle)
        })
    }

    /// Adapter fine-tuning with the encoder and reconstruction head frozen.
    /// The encoder fingerprint is checked after every step and once more
    /// across the whole stage.
    pub fn run_stage3(
        &self,
        net: &mut Network,
        resume: Option<&Checkpoint>,
        obs: &mut dyn Observer,
    ) -> Result<Checkpoint> {
        self.run_adapter_stage(net, resume, obs, true)
    }

    /// [`Self::run_stage3`] with `frozen = false` trains the encoder too
    /// (ablation only).
    pub fn run_adapter_stage(
        &self,
        net: &mut Network,
        resume: Option<&Checkpoint>,
        obs: &mut dyn Observer,
        frozen: bool,
    ) -> Result<Checkpoint> {
        let s = &self.cfg.stage3;
        let w = self.weights;
        let all = incomplete_combinations(net.config().in_channels)?;
        let store = net.params_mut();
        store.set_all_trainable(true);
        store.set_trainable(RECON_HEAD_PREFIX, false);
        if frozen {
            store.set_trainable(ENCODER_PREFIX, false);
        }
        let before = net.params().fingerprint(ENCODER_PREFIX);
        let ck = self.run(StageTag::AdaptiveFT, s, net, resume, obs, s.batch_size, |net, opt, rng, batch| {
            let combos = draw_combos(&all, s.combos_per_step, rng);
            let (images, labels): (Vec<_>, Vec<_>) = batch.iter().cloned().unzip();
            if frozen {
                train::adaptive_step(net, opt, &images, &labels, &combos, all.len(), &w)
            } else {
                train::adaptive_step_unfrozen(net, opt, &images, &labels, &combos, all.len(), &w)
            }
        })?;
        if frozen && resume.is_none() && net.params().fingerprint(ENCODER_PREFIX) != before {
            return Err(
                relaxseg_core::Error::InvariantViolation("encoder changed during the adapter stage".into()).into()
            );
        }
        Ok(ck)
    }

    /// All objectives jointly from a fresh network (ablation).
    pub fn run_single(
        &self,
        net: &mut Network,
        resume: Option<&Checkpoint>,
        obs: &mut dyn Observer,
    ) -> Result<Checkpoint> {
        let s = &self.cfg.single;
        let w = self.weights;
        let perturb = self.cfg.perturb_config();
        let all = incomplete_combinations(net.config().in_channels)?;
        net.params_mut().set_all_trainable(true);
        self.run(StageTag::SingleStageAblation, s, net, resume, obs, 2, |net, opt, rng, b| {
            let combos = draw_combos(&all, s.combos_per_step, rng);
            train::joint_step(net, opt, rng, [(&b[0].0, &b[0].1), (&b[1].0, &b[1].1)], &perturb, &combos, all.len(), &w)
        })
    }

    /// Supervised Dice training on complete inputs.
    pub fn run_supervised(
        &self,
        net: &mut Network,
        resume: Option<&Checkpoint>,
        obs: &mut dyn Observer,
    ) -> Result<Checkpoint> {
        let s = &self.cfg.supervised;
        let w = self.weights;
        net.params_mut().set_all_trainable(true);
        self.run(StageTag::Supervised, s, net, resume, obs, s.batch_size, |net, opt, rng, batch| {
            let (images, labels): (Vec<_>, Vec<_>) = batch.iter().cloned().unzip();
            train::supervised_step(net, opt, rng, &images, &labels, &w, s.shuffle)
        })
    }
}
