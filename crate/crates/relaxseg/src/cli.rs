//! The `relaxseg` command line. [`run`] parses arguments, executes one
//! command and returns the process exit code: 0 on success, 1 for usage
//! and configuration errors, 2 for runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use relaxseg_core::data::{enumerate_combinations, ModalityCombination};
use relaxseg_core::eval::{activation_profile, shuffle_robustness, sweep_combinations};

use crate::ablation::{Axis, Experiment};
use crate::checkpoint::{write_atomic, Checkpoint, StageTag};
use crate::config::RunConfig;
use crate::dataset::{file_hash, generate_dataset, load_dataset, write_dataset, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::pipeline::{init_stage2_from_stage1, init_stage3_from, FileObserver, Trainer};
use crate::report::{self, ComparisonRow, ReportFormat};

#[derive(Debug, Parser)]
#[command(
    name = "relaxseg",
    version,
    about = "Missing-modality volumetric segmentation: data, training, evaluation, ablations"
)]
pub struct Cli {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stage1.epochs=2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    Single,
    Supervised,
}

impl StageArg {
    fn file_stem(self) -> &'static str {
        match self {
            StageArg::One => "stage1",
            StageArg::Two => "stage2",
            StageArg::Three => "stage3",
            StageArg::Single => "single",
            StageArg::Supervised => "supervised",
        }
    }

    fn tag(self) -> StageTag {
        match self {
            StageArg::One => StageTag::Recon,
            StageArg::Two => StageTag::Contrastive,
            StageArg::Three => StageTag::AdaptiveFT,
            StageArg::Single => StageTag::SingleStageAblation,
            StageArg::Supervised => StageTag::Supervised,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset as containers plus a manifest.
    GenData {
        /// Target directory; defaults to dataset.path, else <output_dir>/data.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite a nonempty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage; writes <output_dir>/<stage>.ckpt and a metrics log.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Prerequisite checkpoint (stage 2: Recon, stage 3: Contrastive);
        /// defaults to the previous stage's file in output_dir.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run of the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sweep all modality combinations, profile activations and test
    /// channel-permutation robustness; write reports.
    Eval {
        /// Defaults to <output_dir>/stage3.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of csv, md, png.
        #[arg(long, default_value = "csv,md,png")]
        report: String,
        /// Evaluate even if the checkpoint was trained under another config.
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Train and evaluate one ablation grid and write a comparison table.
    Ablate {
        /// stage, adapter or compensation.
        #[arg(long)]
        axis: String,
    },
}

/// Applies `key=value` overrides (dotted keys, TOML literal values; bare
/// words are taken as strings) to the TOML form of a config.
fn apply_overrides(text: &str, overrides: &[String]) -> Result<String> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    for o in overrides {
        let (key, raw) =
            o.split_once('=').ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut table = &mut doc;
        for p in &parts[..parts.len() - 1] {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Usage(format!("--set {key}: {p} is not a section")))?;
        }
        table.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(toml::to_string(&doc).expect("table serializes"))
}

/// Loads the config file (or defaults), applies overrides and the output
/// directory environment variable, and validates everything.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let text = apply_overrides(&text, overrides)?;
    RunConfig::from_toml(&text)?.finish()
}

fn load_split(cfg: &RunConfig) -> Result<Split> {
    let samples = if cfg.dataset.path.is_empty() {
        generate_dataset(&cfg.synth_config())?
    } else {
        let s = load_dataset(Path::new(&cfg.dataset.path))?;
        if s.len() != cfg.dataset.n_samples {
            return Err(Error::Config(format!(
                "dataset.n_samples is {} but {} holds {}",
                cfg.dataset.n_samples,
                cfg.dataset.path,
                s.len()
            )));
        }
        s
    };
    Split::new(&samples, cfg.dataset.n_test)
}

fn ckpt_path(cfg: &RunConfig, stem: &str) -> PathBuf {
    cfg.output_dir.join(format!("{stem}.ckpt"))
}

fn prerequisite(cfg: &RunConfig, given: Option<&Path>, stem: &str, tag: StageTag, what: &str) -> Result<Checkpoint> {
    let path = given.map(Path::to_path_buf).unwrap_or_else(|| ckpt_path(cfg, stem));
    if !path.exists() {
        return Err(Error::Usage(format!("{what} requires a {tag} checkpoint ({} not found)", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    ck.require_tag(tag, what).map_err(|e| Error::Usage(e.to_string()))?;
    if ck.config_hash != cfg.hash() {
        return Err(Error::Refused(format!(
            "{} was trained under config {} but the current config is {}",
            path.display(),
            ck.config_hash,
            cfg.hash()
        )));
    }
    Ok(ck)
}

fn cmd_gen_data(cfg: &RunConfig, out: Option<PathBuf>, force: bool) -> Result<()> {
    let dir = out.unwrap_or_else(|| {
        if cfg.dataset.path.is_empty() {
            cfg.output_dir.join("data")
        } else {
            PathBuf::from(&cfg.dataset.path)
        }
    });
    let synth = cfg.synth_config();
    let manifest = write_dataset(&dir, &synth, force)?;
    let [h, w, t] = synth.volume_dims;
    println!(
        "wrote {} samples ({h}x{w}x{t}, {} modalities, {} regions, seed {}) to {}",
        manifest.samples.len(),
        synth.m_total,
        synth.n_regions,
        synth.seed,
        dir.display()
    );
    println!("manifest sha256 {}", file_hash(&dir.join(MANIFEST_FILE))?);
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    stage: StageArg,
    init: Option<PathBuf>,
    resume: Option<PathBuf>,
    verbose: bool,
) -> Result<()> {
    let resume_ck = match &resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.require_tag(stage.tag(), "resume").map_err(|e| Error::Usage(e.to_string()))?;
            Some(ck)
        }
        None => None,
    };
    let split = load_split(cfg)?;
    let trainer = Trainer::new(cfg, &split)?;
    let seed = cfg.network.seed;
    let mut net = match (&resume_ck, stage) {
        (Some(ck), _) => ck.to_network()?,
        (None, StageArg::One | StageArg::Single | StageArg::Supervised) => trainer.fresh_network()?,
        (None, StageArg::Two) => {
            init_stage2_from_stage1(&prerequisite(cfg, init.as_deref(), "stage1", StageTag::Recon, "stage 2")?, seed)?
        }
        (None, StageArg::Three) => {
            let ck = prerequisite(cfg, init.as_deref(), "stage2", StageTag::Contrastive, "stage 3")?;
            init_stage3_from(&ck, cfg.network_config()?, seed)?
        }
    };
    let out = ckpt_path(cfg, stage.file_stem());
    let log = cfg.output_dir.join("metrics").join(format!("{}.jsonl", stage.file_stem()));
    let mut obs = FileObserver::create(&log, Some(&out), resume_ck.is_some())?;
    let t0 = std::time::Instant::now();
    let r = resume_ck.as_ref();
    let ck = match stage {
        StageArg::One => trainer.run_stage1(&mut net, r, &mut obs)?,
        StageArg::Two => trainer.run_stage2(&mut net, r, &mut obs)?,
        StageArg::Three => trainer.run_stage3(&mut net, r, &mut obs)?,
        StageArg::Single => trainer.run_single(&mut net, r, &mut obs)?,
        StageArg::Supervised => trainer.run_supervised(&mut net, r, &mut obs)?,
    };
    ck.save(&out)?;
    if verbose {
        eprintln!("trained in {:.1} s", t0.elapsed().as_secs_f64());
    }
    println!(
        "{} checkpoint after epoch {} written to {} (metrics: {})",
        ck.tag,
        ck.epoch,
        out.display(),
        log.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<PathBuf>, report: &str, allow_mismatch: bool) -> Result<()> {
    let formats = ReportFormat::parse_list(report)?;
    let path = checkpoint.unwrap_or_else(|| ckpt_path(cfg, "stage3"));
    let ck = Checkpoint::load(&path)?;
    if ck.config_hash != cfg.hash() && !allow_mismatch {
        return Err(Error::Refused(format!(
            "{} was trained under config {} but the current config is {} (pass --allow-config-mismatch to evaluate anyway)",
            path.display(),
            ck.config_hash,
            cfg.hash()
        )));
    }
    let net = ck.to_network()?;
    let split = load_split(cfg)?;
    let policy = cfg.fill_policy()?;
    let sweep = sweep_combinations(&net, &split.test, policy, cfg.eval.threshold)?;
    let combos: Vec<ModalityCombination> = enumerate_combinations(cfg.dataset.m_total)?;
    let profile = activation_profile(&net, &split.test, &combos, policy)?;
    let shuffle = shuffle_robustness(&net, &split.test, cfg.eval.n_perm, cfg.eval.seed, cfg.eval.threshold)?;

    // everything is rendered before the first write
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("eval").to_string();
    let dir = cfg.output_dir.join("reports");
    let regions: Vec<String> = (0..cfg.dataset.n_regions).map(|i| format!("R{i}")).collect();
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for f in &formats {
        match f {
            ReportFormat::Csv => {
                files.push((dir.join(format!("{stem}_sweep.csv")), report::sweep_to_csv(&sweep)?.into_bytes()));
                files.push((
                    dir.join(format!("{stem}_activation.csv")),
                    report::activation_to_csv(&profile)?.into_bytes(),
                ));
                files.push((dir.join(format!("{stem}_shuffle.csv")), report::shuffle_to_csv(&shuffle).into_bytes()));
            }
            ReportFormat::Markdown => {
                let mut md = format!("# Sweep of {} ({} checkpoint)\n\n", path.display(), ck.tag);
                md.push_str(&report::sweep_to_markdown(&sweep, &regions));
                md.push('\n');
                md.push_str(&report::diagnostics_markdown(&profile, &shuffle)?);
                files.push((dir.join(format!("{stem}_sweep.md")), md.into_bytes()));
            }
            ReportFormat::BoxPlot => {
                files.push((dir.join(format!("{stem}_sweep.png")), report::box_plot_png(&sweep)?));
            }
        }
    }
    for (p, bytes) in &files {
        write_atomic(p, bytes)?;
        println!("wrote {}", p.display());
    }
    println!(
        "{} combinations: mean Dice {:.2}, std {:.2}; permutation gap {:.2}; activation gap {:.4}",
        sweep.rows.len(),
        sweep.overall_mean_dice(),
        sweep.overall_std_dice(),
        shuffle.max_gap(),
        profile.total_gap()?
    );
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, axis: &str, verbose: bool) -> Result<()> {
    let axis = Axis::parse(axis)?;
    let split = load_split(cfg)?;
    let mut exp = Experiment::new(cfg, &split)?;
    exp.verbose = verbose;
    let rows: Vec<ComparisonRow> = exp.run_axis(axis)?.into_iter().map(|(r, _)| r).collect();
    let md = report::comparison_to_markdown(axis.title(), &rows);
    let name = format!("ablation_{}", format!("{axis:?}").to_lowercase());
    let dir = cfg.output_dir.join("reports");
    write_atomic(&dir.join(format!("{name}.md")), md.as_bytes())?;
    write_atomic(&dir.join(format!("{name}.csv")), report::comparison_to_csv(&rows).as_bytes())?;
    print!("{md}");
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData { out, force } => cmd_gen_data(&cfg, out, force),
        Command::Train { stage, init, resume } => cmd_train(&cfg, stage, init, resume, cli.verbose),
        Command::Eval { checkpoint, report, allow_config_mismatch } => {
            cmd_eval(&cfg, checkpoint, &report, allow_config_mismatch)
        }
        Command::Ablate { axis } => cmd_ablate(&cfg, &axis, cli.verbose),
    }
}

/// The clap command with every config default appended to `--help`.
pub fn command() -> clap::Command {
    Cli::command().after_help(RunConfig::defaults_help())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
