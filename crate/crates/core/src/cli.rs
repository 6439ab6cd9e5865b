//! Command-line front end.
//!
//! Each subcommand reads one section of a TOML run file (`[dataset]`,
//! `[train]`, `[eval]` or `[mmd]`). Flags are merged into that section
//! before it is deserialized, so a flag always wins over the file and a
//! field missing from both is reported by name.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetConfig, Domain, Split};
use crate::evalcluster::{cluster_report, embeddings_csv, pca_project};
use crate::mmd::{tpr_table, KernelConfig, TprConfig, TprTable};
use crate::nn::Checkpoint;
use crate::vae::{gradcheck_suite, latent_means, model_from_checkpoint, train_with, TrainConfig, Variant};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Relative error bound for `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const TRAIN_FILE: &str = "train.bin";
pub const EVAL_FILE: &str = "eval.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const TPR_CSV_FILE: &str = "tpr.csv";
pub const TPR_TEXT_FILE: &str = "tpr.txt";

#[derive(Debug, Parser)]
#[command(name = "csi-vae", version, about = "Cluster ULA channels by model order with a VAE")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the selected section.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads; 1 gives bit-identical results across machines.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw train and eval datasets.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one VAE variant on a DFT-domain training set.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training file; defaults to `<out>/train.bin`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// `identity` or `diagonal`.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Cluster eval-set latent means and export embeddings.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Eval file; defaults to `<out>/eval.bin`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Two-sample rejection rates between model orders.
    Mmd {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every layer and of a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Perturbs the analytic loss so the check must fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

const SECTIONS: [&str; 4] = ["dataset", "train", "eval", "mmd"];

/// Union of all sections a run file may hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<DatasetConfig>,
    pub train: Option<TrainConfig>,
    pub eval: Option<EvalConfig>,
    pub mmd: Option<MmdConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// k-means seed.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmdConfig {
    #[serde(default = "default_antennas")]
    pub num_antennas: usize,
    #[serde(default = "default_orders")]
    pub orders: Vec<usize>,
    /// Channels drawn per order; must cover two disjoint subsamples.
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    #[serde(default = "default_spread")]
    pub angle_spread: f64,
    #[serde(default)]
    pub kernel: KernelConfig,
    pub trials: usize,
    pub subsample: usize,
    pub permutations: usize,
    pub alpha: f64,
    pub seed: u64,
}

fn default_antennas() -> usize {
    32
}

fn default_orders() -> Vec<usize> {
    (1..=5).collect()
}

fn default_pool() -> usize {
    1000
}

fn default_spread() -> f64 {
    crate::channel_model::DEFAULT_ANGLE_SPREAD
}

impl MmdConfig {
    pub fn desk_scale(seed: u64) -> Self {
        let desk = TprConfig::desk_scale(seed);
        Self {
            num_antennas: default_antennas(),
            orders: default_orders(),
            pool_size: default_pool(),
            angle_spread: default_spread(),
            kernel: desk.kernel,
            trials: desk.trials,
            subsample: desk.subsample,
            permutations: desk.permutations,
            alpha: desk.alpha,
            seed,
        }
    }

    pub fn test_config(&self) -> TprConfig {
        TprConfig {
            kernel: self.kernel,
            trials: self.trials,
            subsample: self.subsample,
            permutations: self.permutations,
            alpha: self.alpha,
            seed: self.seed,
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::DomainMismatch(_) | Error::InsufficientSamples(_) => EXIT_CONFIG,
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated { .. }
        | Error::Malformed(_) => EXIT_IO,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Generate { common } => {
            init_threads(&common)?;
            cmd_generate(&common).map(|_| EXIT_OK)
        }
        Command::Train {
            common,
            data,
            variant,
            epochs,
        } => {
            init_threads(&common)?;
            let mut overrides = toml::Table::new();
            if let Some(v) = variant {
                overrides.insert("variant".into(), toml::Value::String(v));
            }
            if let Some(n) = epochs {
                overrides.insert("epochs".into(), toml::Value::Integer(n as i64));
            }
            let data = data.unwrap_or_else(|| common.out.join(TRAIN_FILE));
            cmd_train(&common, &data, overrides).map(|_| EXIT_OK)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            init_threads(&common)?;
            let data = data.unwrap_or_else(|| common.out.join(EVAL_FILE));
            let checkpoint = checkpoint.unwrap_or_else(|| common.out.join(CHECKPOINT_FILE));
            cmd_eval(&common, &checkpoint, &data).map(|_| EXIT_OK)
        }
        Command::Mmd { common } => {
            init_threads(&common)?;
            cmd_mmd(&common).map(|_| EXIT_OK)
        }
        Command::Gradcheck { common, corrupt } => {
            init_threads(&common)?;
            cmd_gradcheck(common.seed.unwrap_or(0), corrupt).map(|ok| if ok { EXIT_OK } else { EXIT_OTHER })
        }
    }
}

fn init_threads(common: &Common) -> Result<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Reads `[section]` from the run file (or `fallback` when either is absent), applies
/// `overrides` plus `--seed`, and deserializes the result.
fn load_section<T: DeserializeOwned>(
    common: &Common,
    section: &str,
    fallback: toml::Table,
    mut overrides: toml::Table,
) -> Result<T> {
    let mut table = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let mut file: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            // reject typos in section names up front; fields are checked later
            if let Some(key) = file.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
                return Err(Error::Config(format!(
                    "{}: unknown section `{key}`, expected one of {SECTIONS:?}",
                    path.display()
                )));
            }
            match file.remove(section) {
                Some(toml::Value::Table(t)) => t,
                Some(_) => return Err(Error::Config(format!("[{section}] must be a table"))),
                None => fallback,
            }
        }
        None => fallback,
    };
    if let Some(seed) = common.seed {
        overrides.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    table.extend(overrides);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("[{section}]: {e}")))
}

/// `value` as a table with its `seed` removed, so the seed must come from
/// a flag.
fn preset<T: Serialize>(value: &T) -> toml::Table {
    let mut table = toml::Table::try_from(value).expect("preset serializes");
    table.remove("seed");
    table
}

fn create_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

pub fn cmd_generate(common: &Common) -> Result<(PathBuf, PathBuf)> {
    let config: DatasetConfig = load_section(common, "dataset", preset(&DatasetConfig::desk_scale(0)), toml::Table::new())?;
    config.validate()?;
    create_out_dir(&common.out)?;
    let (train, eval) = dataset::generate(&config)?;
    let train_path = common.out.join(TRAIN_FILE);
    let eval_path = common.out.join(EVAL_FILE);
    for (ds, path) in [(&train, &train_path), (&eval, &eval_path)] {
        dataset::save(ds, path)?;
        dataset::save_sidecar(ds, &config, path)?;
        let counts: Vec<String> = config
            .model_orders
            .iter()
            .map(|&k| format!("{k} paths: {}", ds.labels().iter().filter(|&&l| l as usize == k).count()))
            .collect();
        println!("{} ({}): {}", path.display(), ds.len(), counts.join(", "));
    }
    Ok((train_path, eval_path))
}

pub fn cmd_train(common: &Common, data: &Path, overrides: toml::Table) -> Result<()> {
    let config: TrainConfig = load_section(common, "train", preset(&TrainConfig::new(Variant::Diagonal, 0)), overrides)?;
    config.validate()?;
    let train = dataset::load(data, Split::Train)?;
    create_out_dir(&common.out)?;
    let checkpoint_path = common.out.join(CHECKPOINT_FILE);
    let history_path = common.out.join(HISTORY_FILE);
    let mut rows = Vec::new();
    // the checkpoint on disk is always the last epoch that finished cleanly
    let result = train_with(&train, config, |stats, trainer| {
        trainer.checkpoint().save(&checkpoint_path)?;
        rows.push(*stats);
        let history = crate::vae::History {
            epochs: rows.clone(),
            stopped_early: false,
        };
        fs::write(&history_path, history.to_csv())?;
        println!(
            "epoch {:>3}  recon {:>10.4}  kl {:>8.4}  elbo {:>10.4}",
            stats.epoch, stats.recon, stats.kl, stats.total
        );
        Ok(())
    });
    let (_, history) = result?;
    if history.stopped_early {
        println!("stopped early after {} epochs", history.epochs.len());
    }
    println!("wrote {} and {}", checkpoint_path.display(), history_path.display());
    Ok(())
}

pub fn cmd_eval(common: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let trained = TrainConfig::from_toml(&ck.config)?;
    let mut fallback = toml::Table::new();
    fallback.insert("seed".into(), toml::Value::Integer(trained.seed as i64));
    let config: EvalConfig = load_section(common, "eval", fallback, toml::Table::new())?;
    if dataset::sidecar_path(data).exists() && dataset::load_sidecar_split(data)? == Split::Train {
        return Err(Error::Config(format!("{} is a training split; eval needs the eval split", data.display())));
    }
    let eval = dataset::load(data, Split::Eval)?;
    if eval.domain() != Domain::Dft {
        return Err(Error::DomainMismatch(format!(
            "checkpoint expects DFT-domain channels but {} is antenna-domain",
            data.display()
        )));
    }
    let model = model_from_checkpoint(&ck, eval.num_antennas())?;
    let latents = latent_means(&model, &eval)?;
    let mut rng = crate::rng::stream(config.seed, &[3]);
    let projection = pca_project(latents.view(), 2)?;
    create_out_dir(&common.out)?;
    fs::write(
        common.out.join(EMBEDDINGS_FILE),
        embeddings_csv(eval.labels(), latents.view(), Some(projection.view()))?,
    )?;
    let mut classes = eval.labels().to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        println!("labels hold a single class; wrote embeddings only");
        return Ok(());
    }
    let report = cluster_report(latents.view(), eval.labels(), &mut rng)?;
    let text = format_report(&report);
    fs::write(common.out.join(REPORT_FILE), &text)?;
    print!("{text}");
    Ok(())
}

pub fn format_report(report: &crate::evalcluster::ClusterReport) -> String {
    let mut text = format!(
        "agreement {:.4}\nsilhouette {:.4}\noutlier_fraction {:.4}\nconfusion (rows: paths, columns: clusters)\n",
        report.agreement, report.silhouette, report.outlier_fraction
    );
    for (class, row) in report.classes.iter().zip(&report.confusion) {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
        text.push_str(&format!("{class:>4} {}\n", cells.join("")));
    }
    text
}

pub fn cmd_mmd(common: &Common) -> Result<TprTable> {
    let config: MmdConfig = load_section(common, "mmd", preset(&MmdConfig::desk_scale(0)), toml::Table::new())?;
    let pools = dataset::generate_pools(
        config.num_antennas,
        &config.orders,
        config.pool_size,
        config.angle_spread,
        config.seed,
    )?;
    let table = tpr_table(&pools, &config.test_config())?;
    create_out_dir(&common.out)?;
    fs::write(common.out.join(TPR_CSV_FILE), table.to_csv())?;
    fs::write(common.out.join(TPR_TEXT_FILE), table.to_text())?;
    print!("{}", table.to_text());
    Ok(table)
}

/// Prints one line per check; true iff every check is within tolerance.
pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> Result<bool> {
    let mut reports: Vec<(String, crate::nn::GradCheckReport)> = crate::nn::layer_suite(seed)?
        .into_iter()
        .map(|(name, r)| (name.to_string(), r))
        .collect();
    reports.extend(gradcheck_suite(seed, corrupt)?);
    let mut ok = true;
    for (name, report) in &reports {
        let passed = report.passed(GRADCHECK_TOLERANCE);
        ok &= passed;
        let worst = report
            .worst
            .as_ref()
            .map(|(p, i)| format!("{p}[{i}]"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{} {name}: {} entries, max rel error {:.3e} at {worst}",
            if passed { "ok  " } else { "FAIL" },
            report.checked,
            report.max_rel_error
        );
    }
    Ok(ok)
}
