//! Training-based criteria. Every run goes through one prefix-caching
//! [`Experiment`], so the stage-2 and stage-3 checkpoints used by the
//! frozen-encoder, ordering, shuffle and activation checks are trained once.

use relaxseg::ablation::{Axis, Experiment, Step};
use relaxseg::config::{CombosPerStep, RunConfig};
use relaxseg::dataset::{generate_dataset, Split};
use relaxseg_core::data::enumerate_combinations;
use relaxseg_core::eval::{activation_profile, shuffle_robustness, ShuffleResult};
use relaxseg_core::net::ENCODER_PREFIX;

use crate::Check;

const STAGE1: &[Step] = &[Step::Recon];
const STAGE2: &[Step] = &[Step::Recon, Step::Contrastive];
const STAGE3: &[Step] = &[Step::Recon, Step::Contrastive, Step::ADAPT];

/// Largest tolerated `|canonical - permuted mean|` per region, in Dice points.
const SHUFFLE_TOLERANCE: f64 = 1.0;
/// Required relative drop of the per-region std from baseline to three-stage.
const STD_REDUCTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Reduced,
    Full,
}

impl Scale {
    pub fn from_env() -> Self {
        match std::env::var("RELAXSEG_FULL_SCALE") {
            Ok(v) if !v.is_empty() && v != "0" => Scale::Full,
            _ => Scale::Reduced,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Reduced => "reduced (16^3, 24 train / 8 test, base 8, 8 epochs)",
            Scale::Full => "full (32x32x16, 64 train / 16 test, base 16, 30 epochs)",
        }
    }

    /// Run configuration. The shuffle-trained model is the main model: the
    /// channel shuffle is on in reconstruction pretraining (the default) and
    /// in the contrastive stage.
    fn config(self) -> RunConfig {
        let mut cfg = RunConfig::default();
        // soft Dice against a soft reference has a floor near 0.6 per
        // combination; at unit weight its gradient swamps the feature term
        cfg.losses.w_pc = 0.1;
        cfg.stage2.shuffle = true;
        match self {
            Scale::Full => {
                cfg.dataset.volume_dims = [32, 32, 16];
                cfg.dataset.n_samples = 80;
                cfg.dataset.n_test = 16;
            }
            Scale::Reduced => {
                cfg.dataset.volume_dims = [16, 16, 16];
                cfg.dataset.n_samples = 32;
                cfg.dataset.n_test = 8;
                cfg.network.base_channels = 8;
                for s in [&mut cfg.stage1, &mut cfg.stage2, &mut cfg.single, &mut cfg.supervised] {
                    s.epochs = 8;
                    s.lr = 2e-3;
                    s.warmup_epochs = 1;
                }
                cfg.stage3.epochs = 4;
                cfg.stage3.lr = 2e-3;
                cfg.stage3.warmup_epochs = 0;
                cfg.stage3.combos_per_step = CombosPerStep::Count(4);
                cfg.single.combos_per_step = CombosPerStep::Count(4);
            }
        }
        cfg
    }
}

fn leak<T>(v: T) -> &'static T {
    Box::leak(Box::new(v))
}

fn experiment(cfg: RunConfig) -> Experiment<'static> {
    let cfg = leak(cfg);
    let samples = generate_dataset(&cfg.synth_config()).expect("synthetic dataset");
    let split = leak(Split::new(&samples, cfg.dataset.n_test).expect("split"));
    let mut exp = Experiment::new(cfg, split).expect("valid acceptance config");
    exp.verbose = std::env::var_os("RELAXSEG_VERBOSE").is_some();
    exp
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2}")).collect();
    format!("[{}]", parts.join(", "))
}

pub struct Runs {
    main: Experiment<'static>,
    cfg: &'static RunConfig,
    split: &'static Split,
}

impl Runs {
    pub fn new(scale: Scale) -> Self {
        let cfg = leak(scale.config());
        let samples = generate_dataset(&cfg.synth_config()).expect("synthetic dataset");
        let split = leak(Split::new(&samples, cfg.dataset.n_test).expect("split"));
        let mut main = Experiment::new(cfg, split).expect("valid acceptance config");
        main.verbose = std::env::var_os("RELAXSEG_VERBOSE").is_some();
        Runs { main, cfg, split }
    }

    fn shuffle(&mut self, steps: &[Step]) -> Result<ShuffleResult, String> {
        let net = self.main.network(steps).map_err(|e| e.to_string())?;
        shuffle_on(&net, self.cfg, self.split)
    }

    /// The trainer checks the encoder fingerprint after every update; this
    /// compares the end points of the whole run as well.
    pub fn frozen_encoder(&mut self) -> Check {
        let before = self.main.network(STAGE2).map_err(|e| e.to_string())?.params().fingerprint(ENCODER_PREFIX);
        let after = self.main.network(STAGE3).map_err(|e| e.to_string())?.params().fingerprint(ENCODER_PREFIX);
        if before == after {
            Ok(format!("encoder fingerprint {before:016x} before and after"))
        } else {
            Err(format!("encoder fingerprint changed: {before:016x} -> {after:016x}"))
        }
    }

    /// Mean-Dice ordering, per-region dispersion and the single-stage gap.
    pub fn stage_ordering(&mut self) -> Check {
        let rows = self.main.run_axis(Axis::Stage).map_err(|e| e.to_string())?;
        let get = |name: &str| rows.iter().find(|(r, _)| r.variant == name).map(|(_, s)| s).expect("stage recipe");
        let (base, s1, s2, s3, single) =
            (get("baseline"), get("+stage1"), get("+stage2"), get("+stage3"), get("single-stage"));
        let means = [base, s1, s2, s3].map(|s| s.overall_mean_dice());
        let ordered = means.windows(2).all(|w| w[0] < w[1]);
        let std_ok = base.std_dice.iter().zip(&s3.std_dice).all(|(b, t)| *t <= (1.0 - STD_REDUCTION) * b);
        let single_ok = single.overall_mean_dice() < means[3];
        let detail = format!(
            "(a) mean Dice {} ordered={ordered}; (b) per-region std baseline {} vs three-stage {} reduced>=25%={std_ok}; \
             (c) single {:.2} < three-stage {:.2}={single_ok}",
            fmt_vec(&means),
            fmt_vec(&base.std_dice),
            fmt_vec(&s3.std_dice),
            single.overall_mean_dice(),
            means[3]
        );
        if ordered && std_ok && single_ok {
            Ok(detail)
        } else {
            Err(detail)
        }
    }

    /// Stage-2 model trained with channel shuffle against a control trained
    /// without any shuffle. Stage 2 is the last stage that sees complete
    /// inputs, so it is the model the permutation protocol measures.
    pub fn shuffle_robustness(&mut self) -> Check {
        let trained = self.shuffle(STAGE2)?;
        let mut control_cfg = self.cfg.clone();
        control_cfg.perturb.shuffle = false;
        control_cfg.stage2.shuffle = false;
        let mut control = experiment(control_cfg);
        let control_net = control.network(STAGE2).map_err(|e| e.to_string())?;
        let control_res = shuffle_on(&control_net, self.cfg, self.split)?;

        let gaps: Vec<f64> = trained.canonical.iter().zip(&trained.permuted_mean).map(|(a, b)| (a - b).abs()).collect();
        let within = gaps.iter().all(|g| *g <= SHUFFLE_TOLERANCE);
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (t_perm, c_perm) = (avg(&trained.permuted_mean), avg(&control_res.permuted_mean));
        let control_worse = c_perm < t_perm;
        let detail = format!(
            "shuffle-trained canonical {} permuted {} gaps {} within {SHUFFLE_TOLERANCE}={within}; \
             control canonical {} permuted {}; permuted mean control {c_perm:.2} < shuffle-trained {t_perm:.2}={control_worse}",
            fmt_vec(&trained.canonical),
            fmt_vec(&trained.permuted_mean),
            fmt_vec(&gaps),
            fmt_vec(&control_res.canonical),
            fmt_vec(&control_res.permuted_mean),
        );
        if within && control_worse {
            Ok(detail)
        } else {
            Err(detail)
        }
    }

    /// Summed activation gap over all combinations at each stage checkpoint.
    pub fn activation_gap(&mut self) -> Check {
        let combos = enumerate_combinations(self.cfg.dataset.m_total).map_err(|e| e.to_string())?;
        let policy = self.cfg.fill_policy().map_err(|e| e.to_string())?;
        let mut gaps = Vec::new();
        for steps in [STAGE1, STAGE2, STAGE3] {
            let net = self.main.network(steps).map_err(|e| e.to_string())?;
            let profile = activation_profile(&net, &self.split.test, &combos, policy).map_err(|e| e.to_string())?;
            gaps.push(profile.total_gap().map_err(|e| e.to_string())?);
        }
        let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
        let detail = format!("total gap stage1 {:.4}, stage2 {:.4}, stage3 {:.4}", gaps[0], gaps[1], gaps[2]);
        if decreasing {
            Ok(detail)
        } else {
            Err(detail)
        }
    }
}

fn shuffle_on(net: &relaxseg_core::net::Network, cfg: &RunConfig, split: &Split) -> Result<ShuffleResult, String> {
    shuffle_robustness(net, &split.test, cfg.eval.n_perm, cfg.eval.seed, cfg.eval.threshold).map_err(|e| e.to_string())
}
