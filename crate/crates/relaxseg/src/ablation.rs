//! Training recipes for the ablation grids, with prefix sharing: variants
//! that start with the same stages reuse one run of those stages.

use std::collections::HashMap;

use relaxseg_core::eval::{sweep_combinations, SweepResult};
use relaxseg_core::net::{AdapterVariant, Network};

use crate::checkpoint::{Checkpoint, StageTag};
use crate::config::RunConfig;
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::pipeline::{init_stage2_from_stage1, init_stage3_from, MetricsRecord, Observer, Trainer};
use crate::report::ComparisonRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    /// Reconstruction pretraining.
    Recon,
    /// Contrastive alignment.
    Contrastive,
    /// Supervised Dice on complete inputs.
    Supervised,
    /// Adapter fine-tuning.
    Adapt { variant: AdapterVariant, frozen: bool },
    /// All objectives jointly from scratch.
    Single,
}

impl Step {
    pub const ADAPT: Step = Step::Adapt { variant: AdapterVariant::Full, frozen: true };
}

impl std::fmt::Display for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Step::Recon => f.write_str("recon"),
            Step::Contrastive => f.write_str("contrastive"),
            Step::Supervised => f.write_str("supervised"),
            Step::Adapt { variant, frozen: true } => write!(f, "adapt:{}", variant.as_str()),
            Step::Adapt { variant, frozen: false } => write!(f, "adapt:{}:unfrozen", variant.as_str()),
            Step::Single => f.write_str("single"),
        }
    }
}

fn steps_label(steps: &[Step]) -> String {
    steps.iter().map(Step::to_string).collect::<Vec<_>>().join(" > ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recipe {
    pub name: String,
    pub steps: Vec<Step>,
}

impl Recipe {
    fn new(name: &str, steps: &[Step]) -> Self {
        Recipe { name: name.into(), steps: steps.to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Stage,
    Adapter,
    Compensation,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stage" => Ok(Axis::Stage),
            "adapter" => Ok(Axis::Adapter),
            "compensation" => Ok(Axis::Compensation),
            other => Err(Error::Usage(format!("unknown ablation axis {other:?} (stage, adapter, compensation)"))),
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Axis::Stage => "Stage ablation",
            Axis::Adapter => "Adapter ablation",
            Axis::Compensation => "Compensation-level ablation",
        }
    }

    pub fn recipes(self) -> Vec<Recipe> {
        use Step::*;
        match self {
            Axis::Stage => vec![
                Recipe::new("baseline", &[Supervised]),
                Recipe::new("+stage1", &[Recon, Supervised]),
                Recipe::new("+stage2", &[Recon, Contrastive]),
                Recipe::new("+stage3", &[Recon, Contrastive, Step::ADAPT]),
                Recipe::new("single-stage", &[Single]),
            ],
            Axis::Adapter => {
                let adapt = |variant, frozen| [Recon, Contrastive, Adapt { variant, frozen }];
                vec![
                    Recipe::new("full", &adapt(AdapterVariant::Full, true)),
                    Recipe::new("no-reverse", &adapt(AdapterVariant::NoReverse, true)),
                    Recipe::new("no-attention", &adapt(AdapterVariant::NoAttention, true)),
                    Recipe::new("conv-gate", &adapt(AdapterVariant::ConvGate, true)),
                    Recipe::new("unfrozen-encoder", &adapt(AdapterVariant::Full, false)),
                ]
            }
            // input level = reconstruction pretraining, feature level =
            // contrastive alignment, output level = adapter stage; a missing
            // feature level is replaced by supervised training so every
            // variant ends with a trained segmentation head
            Axis::Compensation => vec![
                Recipe::new("baseline", &[Supervised]),
                Recipe::new("input", &[Recon, Supervised]),
                Recipe::new("feature", &[Contrastive]),
                Recipe::new("output", &[Supervised, Step::ADAPT]),
                Recipe::new("input+feature", &[Recon, Contrastive]),
                Recipe::new("input+output", &[Recon, Supervised, Step::ADAPT]),
                Recipe::new("feature+output", &[Contrastive, Step::ADAPT]),
                Recipe::new("input+feature+output", &[Recon, Contrastive, Step::ADAPT]),
            ],
        }
    }
}

/// Prints one line per finished epoch to stderr.
struct Progress {
    label: String,
    sum: f64,
    count: usize,
    verbose: bool,
}

impl Observer for Progress {
    fn step(&mut self, r: &MetricsRecord) -> Result<()> {
        self.sum += r.loss;
        self.count += 1;
        Ok(())
    }

    fn epoch_end(&mut self, ck: &Checkpoint) -> Result<()> {
        if self.verbose {
            eprintln!("[{}] epoch {} mean loss {:.5}", self.label, ck.epoch, self.sum / self.count.max(1) as f64);
        }
        self.sum = 0.0;
        self.count = 0;
        Ok(())
    }
}

/// Runs recipes against one configuration, caching every stage prefix.
pub struct Experiment<'a> {
    cfg: &'a RunConfig,
    split: &'a Split,
    cache: HashMap<Vec<Step>, Checkpoint>,
    pub verbose: bool,
}

impl<'a> Experiment<'a> {
    pub fn new(cfg: &'a RunConfig, split: &'a Split) -> Result<Self> {
        cfg.validate()?;
        Ok(Experiment { cfg, split, cache: HashMap::new(), verbose: false })
    }

    /// Checkpoint after running `steps` in order from a fresh network.
    pub fn checkpoint(&mut self, steps: &[Step]) -> Result<Checkpoint> {
        if let Some(c) = self.cache.get(steps) {
            return Ok(c.clone());
        }
        let (last, prefix) = steps.split_last().ok_or_else(|| Error::Usage("empty recipe".into()))?;
        let prev = if prefix.is_empty() { None } else { Some(self.checkpoint(prefix)?) };
        let trainer = Trainer::new(self.cfg, self.split)?;
        let seed = self.cfg.network.seed;
        let mut net = match (last, &prev) {
            (Step::Single, None) | (Step::Recon, None) | (Step::Contrastive, None) | (Step::Supervised, None) => {
                trainer.fresh_network()?
            }
            (Step::Contrastive | Step::Supervised, Some(p)) if p.tag == StageTag::Recon => {
                init_stage2_from_stage1(p, seed)?
            }
            (Step::Adapt { variant, .. }, Some(p)) => {
                let cfg = relaxseg_core::net::NetworkConfig {
                    adapter_enabled: true,
                    adapter_variant: *variant,
                    ..self.cfg.network_config()?
                };
                init_stage3_from(p, cfg, seed)?
            }
            _ => return Err(Error::Usage(format!("unsupported recipe {steps:?}"))),
        };
        let mut obs = Progress { label: steps_label(steps), sum: 0.0, count: 0, verbose: self.verbose };
        let ck = match last {
            Step::Recon => trainer.run_stage1(&mut net, None, &mut obs)?,
            Step::Contrastive => trainer.run_stage2(&mut net, None, &mut obs)?,
            Step::Supervised => trainer.run_supervised(&mut net, None, &mut obs)?,
            Step::Adapt { frozen, .. } => trainer.run_adapter_stage(&mut net, None, &mut obs, *frozen)?,
            Step::Single => trainer.run_single(&mut net, None, &mut obs)?,
        };
        self.cache.insert(steps.to_vec(), ck.clone());
        Ok(ck)
    }

    pub fn network(&mut self, steps: &[Step]) -> Result<Network> {
        self.checkpoint(steps)?.to_network()
    }

    /// Sweep over every combination on the held-out split.
    pub fn sweep(&mut self, steps: &[Step]) -> Result<SweepResult> {
        let net = self.network(steps)?;
        Ok(sweep_combinations(&net, &self.split.test, self.cfg.fill_policy()?, self.cfg.eval.threshold)?)
    }

    /// Trains and sweeps every recipe of `axis`.
    pub fn run_axis(&mut self, axis: Axis) -> Result<Vec<(ComparisonRow, SweepResult)>> {
        axis.recipes()
            .into_iter()
            .map(|r| {
                let sweep = self.sweep(&r.steps)?;
                if self.verbose {
                    eprintln!(
                        "[{}] mean Dice {:.2}, std {:.2}",
                        r.name,
                        sweep.overall_mean_dice(),
                        sweep.overall_std_dice()
                    );
                }
                Ok((ComparisonRow::from_sweep(r.name, &sweep), sweep))
            })
            .collect()
    }
}
