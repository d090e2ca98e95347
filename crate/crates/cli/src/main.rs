use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use wfc_cli::error::{CliError, EXIT_MISSING_LABELS, EXIT_THEORY_VIOLATION};
use wfc_cli::manifest::{RunManifest, RunStatus};
use wfc_cli::{evaluate, median, run_cell, sha256_file, CellSplit};
use wfc_core::io::{read_embeddings, write_embeddings};
use wfc_core::metrics::leakage;
use wfc_core::{
    demonic_balanced_accuracy, dto, gen_shift_pair, gen_synthetic, pretrain_demonic, pretrain_demonic_da,
    run_verification, train_wfc, train_wfc_with_validation, Activation, Dataset, DemonicBundle, DemonicConfig,
    DomainAdaptConfig, LayerSelector, ModelBundle, OptimizerKind, SyntheticSpec, TrainConfig, Variant, VerifyOptions,
};

#[derive(Parser)]
#[command(name = "wfc", version, about = "Wasserstein fair classification on frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic biased-embedding dataset (and a shifted target when --shift > 0).
    GenData(GenDataArgs),
    /// Pre-train the sensitive-attribute model, optionally adapted to a target domain.
    TrainDemonic(TrainDemonicArgs),
    /// Train a regularized classifier.
    Train(TrainCmdArgs),
    /// Score a trained classifier.
    Eval(EvalArgs),
    /// Numerically check the fairness identities and bounds.
    Verify(VerifyArgs),
    /// Train and score one classifier per (beta, seed) cell.
    SweepBeta(SweepArgs),
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite".into())
    }
}

fn bias(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..0.5).contains(&v) {
        Ok(v)
    } else {
        Err("must be in [0, 0.5)".into())
    }
}

fn nonneg(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err("must be >= 0".into())
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err("must be > 0".into())
    }
}

fn open_fraction(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err("must be in (0, 1)".into())
    }
}

fn pnorm(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 1.0 {
        Ok(v)
    } else {
        Err("must be >= 1".into())
    }
}

/// Comma-separated layer widths, e.g. `300,300`.
#[derive(Clone, Debug, PartialEq)]
struct Widths(Vec<usize>);

impl FromStr for Widths {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let w = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if w.contains(&0) {
            return Err("widths must be positive".into());
        }
        Ok(Widths(w))
    }
}

/// `a..b` (inclusive) or a comma-separated list.
#[derive(Clone, Debug, PartialEq)]
struct Seeds(Vec<u64>);

impl FromStr for Seeds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let seeds = if let Some((lo, hi)) = s.split_once("..") {
            let lo: u64 = lo.trim().parse().map_err(|e| format!("{lo:?}: {e}"))?;
            let hi: u64 = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
            (lo..=hi).collect()
        } else {
            s.split(',')
                .map(|p| p.trim().parse::<u64>().map_err(|e| format!("{p:?}: {e}")))
                .collect::<Result<Vec<_>, _>>()?
        };
        if seeds.is_empty() {
            return Err("empty seed list".into());
        }
        Ok(Seeds(seeds))
    }
}

/// `accuracy,fairness` in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Utopia(f64, f64);

impl FromStr for Utopia {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (acc, fair) = s.split_once(',').ok_or("expected accuracy,fairness")?;
        Ok(Utopia(parse_f64(acc.trim())?, parse_f64(fair.trim())?))
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// P(Y=1|A=1) = 0.5 + bias.
    #[arg(long, default_value_t = 0.3, value_parser = bias, allow_negative_numbers = true)]
    bias: f64,
    /// Scale of the attribute direction in the embeddings.
    #[arg(long, default_value_t = 2.0, value_parser = nonneg, allow_negative_numbers = true)]
    leak: f64,
    #[arg(long, default_value_t = 0.5, value_parser = positive, allow_negative_numbers = true)]
    noise: f64,
    /// Target-domain translation; > 0 writes source.wfce and target.wfce.
    #[arg(long, default_value_t = 0.0, value_parser = nonneg, allow_negative_numbers = true)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDemonicArgs {
    /// Labeled source embeddings (needs the attribute column).
    #[arg(long)]
    source: PathBuf,
    /// Unlabeled target embeddings; enables domain adaptation.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Weight of the source/target alignment term.
    #[arg(long, value_parser = nonneg, allow_negative_numbers = true, requires = "target")]
    eta: Option<f64>,
    #[arg(long, default_value = "300,300")]
    hidden: Widths,
    #[arg(long, default_value = "tanh")]
    activation: Activation,
    #[arg(long, default_value_t = 1e-4, value_parser = positive, allow_negative_numbers = true)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// Model batches per epoch (default: one pass over the data).
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 0.2, value_parser = open_fraction, allow_negative_numbers = true)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    critic_hidden: usize,
    #[arg(long, default_value = "rmsprop")]
    critic_optimizer: OptimizerKind,
    #[arg(long, default_value_t = 5e-5, value_parser = positive, allow_negative_numbers = true)]
    critic_lr: f64,
    /// Critic batches per epoch.
    #[arg(long, default_value_t = 20)]
    nc: usize,
    #[arg(long, default_value_t = 0.01, value_parser = positive, allow_negative_numbers = true)]
    clip: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Flags mirroring `TrainConfig`.
#[derive(Args, Clone)]
struct TrainArgs {
    /// Regularization weight.
    #[arg(long, default_value_t = 1.0, value_parser = nonneg, allow_negative_numbers = true)]
    beta: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Critic batches per epoch.
    #[arg(long, default_value_t = 20)]
    nc: usize,
    /// Classifier batches per epoch.
    #[arg(long, default_value_t = 5)]
    nd: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4, value_parser = positive, allow_negative_numbers = true)]
    lr: f64,
    #[arg(long, default_value_t = 5e-5, value_parser = positive, allow_negative_numbers = true)]
    critic_lr: f64,
    #[arg(long, default_value = "adam")]
    critic_optimizer: OptimizerKind,
    /// Critic weight-clipping bound.
    #[arg(long, default_value_t = 0.01, value_parser = positive, allow_negative_numbers = true)]
    clip: f64,
    /// first, last or output.
    #[arg(long, default_value = "last")]
    layer: LayerSelector,
    #[arg(long, default_value = "dp")]
    variant: Variant,
    /// Resample batches balanced over (y, a).
    #[arg(long)]
    bteo: bool,
    /// Use one-hot predicted groups instead of attribute-model representations.
    #[arg(long)]
    hard_labels: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ground-metric norm.
    #[arg(long = "p", default_value_t = 2.0, value_parser = pnorm, allow_negative_numbers = true)]
    pnorm: f64,
    #[arg(long, default_value = "300,300")]
    hidden: Widths,
    #[arg(long, default_value = "tanh")]
    activation: Activation,
    #[arg(long, default_value_t = 512)]
    critic_hidden: usize,
    /// Batches averaged for the logged dependency estimate.
    #[arg(long, default_value_t = 5)]
    iw_eval_batches: usize,
    /// Validation share when no --val file is given.
    #[arg(long, default_value_t = 0.2, value_parser = open_fraction, allow_negative_numbers = true)]
    val_fraction: f64,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig, CliError> {
        let config = TrainConfig {
            beta: self.beta,
            epochs: self.epochs,
            critic_iters: self.nc,
            classifier_iters: self.nd,
            batch_size: self.batch,
            classifier_lr: self.lr,
            critic_lr: self.critic_lr,
            critic_optimizer: self.critic_optimizer,
            clip: self.clip,
            layer: self.layer,
            variant: self.variant,
            bteo: self.bteo,
            hard_labels: self.hard_labels,
            seed: self.seed,
            pnorm: self.pnorm,
            hidden: self.hidden.0.clone(),
            activation: self.activation,
            critic_hidden: self.critic_hidden,
            iw_eval_batches: self.iw_eval_batches,
            val_fraction: self.val_fraction,
        };
        config.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainCmdArgs {
    /// Labeled training embeddings.
    #[arg(long)]
    data: PathBuf,
    /// Attribute-model bundle from train-demonic.
    #[arg(long)]
    demonic: PathBuf,
    /// Validation embeddings; otherwise --val-fraction of --data is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Ignore attribute columns (validation fairness then uses predicted groups).
    #[arg(long)]
    no_attributes: bool,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labeled test embeddings with attributes.
    #[arg(long)]
    data: PathBuf,
    /// Utopia point `accuracy,fairness` for the DTO.
    #[arg(long)]
    utopia: Option<Utopia>,
    /// Also train an attacker to measure attribute leakage.
    #[arg(long)]
    leakage: bool,
    #[arg(long, default_value_t = 0)]
    leakage_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 500)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturb a closed form so that verification must fail.
    #[arg(long, hide = true)]
    corrupt: bool,
    /// Directory for the report and manifest; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Labeled embeddings with attributes; split 60/20/20 per seed.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    demonic: PathBuf,
    #[arg(long, value_delimiter = ',', required = true, value_parser = nonneg, allow_negative_numbers = true)]
    betas: Vec<f64>,
    /// `1..5` or `1,2,3`.
    #[arg(long)]
    seeds: Seeds,
    /// DTO utopia; defaults to the best accuracy and fairness in the sweep.
    #[arg(long)]
    utopia: Option<Utopia>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

fn read_data(path: &Path) -> Result<Dataset, CliError> {
    read_embeddings(path).map_err(|e| {
        let code = wfc_cli::error::exit_code(&e);
        CliError::new(code, format!("{}: {e}", path.display()))
    })
}

fn read_demonic(path: &Path) -> Result<DemonicBundle, CliError> {
    DemonicBundle::read(path).map_err(|e| {
        let code = wfc_cli::error::exit_code(&e);
        CliError::new(code, format!("{}: {e}", path.display()))
    })
}

fn require_labels(data: &Dataset, path: &Path, attributes: bool) -> Result<(), CliError> {
    if data.y().is_none() {
        return Err(CliError::new(EXIT_MISSING_LABELS, format!("{}: no label column", path.display())));
    }
    if attributes && data.a().is_none() {
        return Err(CliError::new(
            EXIT_MISSING_LABELS,
            format!("{}: no sensitive attribute column", path.display()),
        ));
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<String, CliError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, format!("{text}\n"))?;
    Ok(text)
}

/// Run `body` under `manifest`, recording how it ended.
fn managed(manifest: &mut RunManifest, body: impl FnOnce() -> Result<(), CliError>) -> Result<(), CliError> {
    match body() {
        Ok(()) => manifest.finish(RunStatus::Complete),
        Err(e) => {
            let _ = manifest.finish(RunStatus::Failed);
            Err(e)
        }
    }
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        n: args.n,
        dim: args.dim,
        bias: args.bias,
        leak: args.leak,
        noise: args.noise,
        shift: args.shift,
        seed: args.seed,
    };
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let outputs: &[&str] = if spec.shift > 0.0 {
        &["source.wfce", "source.labels.csv", "target.wfce", "target.labels.csv"]
    } else {
        &["data.wfce", "data.labels.csv"]
    };
    let mut manifest = RunManifest::begin(&args.out, "gen-data", json!(spec), vec![spec.seed], &[], outputs)?;
    managed(&mut manifest, || {
        if spec.shift > 0.0 {
            let (source, target) = gen_shift_pair(&spec)?;
            write_embeddings(&source, &args.out.join("source.wfce"))?;
            // The target labels keep the attributes for scoring; training
            // commands only read the target embeddings.
            write_embeddings(&target.evaluation_dataset(), &args.out.join("target.wfce"))?;
        } else {
            write_embeddings(&gen_synthetic(&spec)?, &args.out.join("data.wfce"))?;
        }
        Ok(())
    })
}

#[derive(Serialize)]
struct DemonicSummary {
    mode: wfc_core::TrainingMode,
    source_balanced_accuracy: f64,
    target_balanced_accuracy: Option<f64>,
    final_alignment: Option<f64>,
}

fn train_demonic(args: TrainDemonicArgs) -> Result<(), CliError> {
    let config = DemonicConfig {
        hidden: args.hidden.0.clone(),
        activation: args.activation,
        lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch,
        batches_per_epoch: args.batches_per_epoch,
        holdout_fraction: args.holdout,
        seed: args.seed,
    };
    let da = args.target.as_ref().map(|_| DomainAdaptConfig {
        eta: args.eta.unwrap_or(1.0),
        critic_hidden: args.critic_hidden,
        critic_optimizer: args.critic_optimizer,
        critic_lr: args.critic_lr,
        critic_batches: args.nc,
        clip: args.clip,
    });
    let source = read_data(&args.source)?;
    if source.a().is_none() {
        return Err(CliError::new(
            EXIT_MISSING_LABELS,
            format!("{}: no sensitive attribute column", args.source.display()),
        ));
    }
    let target = args.target.as_deref().map(read_data).transpose()?;
    let mut inputs = vec![args.source.as_path()];
    inputs.extend(args.target.as_deref());
    let mut manifest = RunManifest::begin(
        &args.out,
        "train-demonic",
        json!({ "model": config, "domain_adaptation": da }),
        vec![config.seed],
        &inputs,
        &["demonic.wfcm", "summary.json"],
    )?;
    managed(&mut manifest, || {
        let mut bundle = match (&target, &da) {
            (Some(target), Some(da)) => {
                let mut b = pretrain_demonic_da(&source, &target.without_attributes(), &config, da)?;
                if target.a().is_some() {
                    b.target_balanced_accuracy = Some(demonic_balanced_accuracy(&b, target)?);
                }
                b
            }
            _ => pretrain_demonic(&source, &config)?,
        };
        bundle.alignment_trace.retain(|v| v.is_finite());
        bundle.write(&args.out.join("demonic.wfcm"))?;
        let summary = DemonicSummary {
            mode: bundle.mode,
            source_balanced_accuracy: bundle.source_balanced_accuracy,
            target_balanced_accuracy: bundle.target_balanced_accuracy,
            final_alignment: bundle.alignment_trace.last().copied(),
        };
        println!("{}", write_json(&args.out.join("summary.json"), &summary)?);
        Ok(())
    })
}

#[derive(Serialize)]
struct TrainSummary {
    selected_epoch: Option<usize>,
    val_acc: Option<f64>,
    val_fairness: Option<f64>,
    val_dto: Option<f64>,
    iw_estimate: Option<f64>,
    final_iw_estimate: Option<f64>,
    utopia: Option<(f64, f64)>,
    warnings: Vec<String>,
}

fn train(args: TrainCmdArgs) -> Result<(), CliError> {
    let config = args.train.config()?;
    let strip = |d: Dataset| if args.no_attributes { d.without_attributes() } else { d };
    let data = strip(read_data(&args.data)?);
    require_labels(&data, &args.data, false)?;
    let val = args.val.as_deref().map(read_data).transpose()?.map(strip);
    if let (Some(v), Some(p)) = (&val, &args.val) {
        require_labels(v, p, false)?;
    }
    let demonic = read_demonic(&args.demonic)?;
    let mut inputs = vec![args.data.as_path(), args.demonic.as_path()];
    inputs.extend(args.val.as_deref());
    let mut manifest = RunManifest::begin(
        &args.out,
        "train",
        json!({ "train": config, "no_attributes": args.no_attributes }),
        vec![config.seed],
        &inputs,
        &["model.wfcm", "train_log.csv", "summary.json"],
    )?;
    managed(&mut manifest, || {
        let mut model = match &val {
            Some(val) => train_wfc_with_validation(&data, val, &demonic, &config)?,
            None => train_wfc(&data, &demonic, &config)?,
        };
        model.demonic_id = Some(sha256_file(&args.demonic)?);
        model.write(&args.out.join("model.wfcm"))?;
        fs::write(args.out.join("train_log.csv"), model.log.to_csv()?)?;
        for w in &model.log.warnings {
            eprintln!("warning: {w}");
        }
        let selected = model.log.selected_epoch.and_then(|e| model.log.epochs.iter().find(|r| r.epoch == e));
        let summary = TrainSummary {
            selected_epoch: model.log.selected_epoch,
            val_acc: selected.map(|r| r.val_acc),
            val_fairness: selected.map(|r| r.val_fairness),
            val_dto: selected.map(|r| r.val_dto),
            iw_estimate: selected.map(|r| r.iw_estimate),
            final_iw_estimate: model.log.epochs.last().map(|r| r.iw_estimate),
            utopia: model.log.utopia,
            warnings: model.log.warnings.clone(),
        };
        println!("{}", write_json(&args.out.join("summary.json"), &summary)?);
        Ok(())
    })
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let model = ModelBundle::read(&args.model).map_err(|e| {
        let code = wfc_cli::error::exit_code(&e);
        CliError::new(code, format!("{}: {e}", args.model.display()))
    })?;
    let data = read_data(&args.data)?;
    require_labels(&data, &args.data, true)?;
    let mut manifest = RunManifest::begin(
        &args.out,
        "eval",
        json!({
            "utopia": args.utopia.map(|u| (u.0, u.1)),
            "leakage": args.leakage,
            "leakage_seed": args.leakage_seed,
        }),
        vec![args.leakage_seed],
        &[args.model.as_path(), args.data.as_path()],
        &["metrics.json"],
    )?;
    managed(&mut manifest, || {
        let mut report = evaluate(&model, &data, args.utopia.map(|u| (u.0, u.1)))?;
        if args.leakage {
            let reps = model.representations(&data)?;
            report.leakage = Some(leakage(reps.view(), data.require_a()?, args.leakage_seed)?);
        }
        println!("{}", write_json(&args.out.join("metrics.json"), &report)?);
        Ok(())
    })
}

fn verify(args: VerifyArgs) -> Result<(), CliError> {
    let opts = VerifyOptions {
        instances: args.instances,
        seed: args.seed,
        corrupt_closed_form: args.corrupt,
    };
    let run = || -> Result<(), CliError> {
        let report = run_verification(&opts)?;
        let text = match &args.out {
            Some(dir) => write_json(&dir.join("report.json"), &report)?,
            None => serde_json::to_string_pretty(&report)?,
        };
        println!("{text}");
        if report.pass {
            return Ok(());
        }
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|(_, c)| !c.pass)
            .map(|(k, _)| k.as_str())
            .collect();
        Err(CliError::new(EXIT_THEORY_VIOLATION, format!("violated checks: {}", failed.join(", "))))
    };
    match &args.out {
        Some(dir) => {
            let config = json!({
                "instances": opts.instances,
                "seed": opts.seed,
                "corrupt_closed_form": opts.corrupt_closed_form,
            });
            let mut manifest = RunManifest::begin(dir, "verify", config, vec![opts.seed], &[], &["report.json"])?;
            managed(&mut manifest, run)
        }
        None => run(),
    }
}

/// One row of the sweep CSV. `seed` is `median` on aggregate rows.
#[derive(Serialize)]
struct SweepRow {
    beta: f64,
    seed: String,
    status: &'static str,
    balanced_accuracy: Option<f64>,
    fairness: Option<f64>,
    dto: Option<f64>,
    leakage: Option<f64>,
    final_iw: Option<f64>,
    selected_epoch: Option<usize>,
    error: String,
}

fn sweep_beta(args: SweepArgs) -> Result<(), CliError> {
    let base = args.train.config()?;
    let data = read_data(&args.data)?;
    require_labels(&data, &args.data, true)?;
    let demonic = read_demonic(&args.demonic)?;
    let mut manifest = RunManifest::begin(
        &args.out,
        "sweep-beta",
        json!({
            "betas": args.betas,
            "train": base,
            "utopia": args.utopia.map(|u| (u.0, u.1)),
            "split": [0.6, 0.2, 0.2],
        }),
        args.seeds.0.clone(),
        &[args.data.as_path(), args.demonic.as_path()],
        &["sweep.csv"],
    )?;
    managed(&mut manifest, || {
        let cells: Vec<(f64, u64)> = args
            .betas
            .iter()
            .flat_map(|&b| args.seeds.0.iter().map(move |&s| (b, s)))
            .collect();
        let outcomes: Vec<_> = cells
            .par_iter()
            .map(|&(beta, seed)| {
                let config = TrainConfig { beta, seed, ..base.clone() };
                let result = CellSplit::new(&data, seed).and_then(|split| run_cell(&split, &demonic, &config, Some(seed)));
                match &result {
                    Ok(o) => eprintln!(
                        "beta {beta} seed {seed}: accuracy {:.2} fairness {:.2}",
                        o.balanced_accuracy, o.fairness
                    ),
                    Err(e) => eprintln!("beta {beta} seed {seed}: failed: {e}"),
                }
                result
            })
            .collect();
        if let Some(Err(e)) = outcomes.iter().find(|o| o.is_err()).filter(|_| outcomes.iter().all(|o| o.is_err())) {
            return Err(CliError::new(wfc_cli::error::exit_code(e), format!("every sweep cell failed: {e}")));
        }
        let utopia = args.utopia.map(|u| (u.0, u.1)).unwrap_or_else(|| {
            let ok = outcomes.iter().flatten();
            (
                ok.clone().map(|o| o.balanced_accuracy).fold(f64::MIN, f64::max),
                ok.map(|o| o.fairness).fold(f64::MIN, f64::max),
            )
        });

        let mut writer = csv::Writer::from_path(args.out.join("sweep.csv"))?;
        for (&(beta, seed), outcome) in cells.iter().zip(&outcomes) {
            writer.serialize(match outcome {
                Ok(o) => SweepRow {
                    beta,
                    seed: seed.to_string(),
                    status: "ok",
                    balanced_accuracy: Some(o.balanced_accuracy),
                    fairness: Some(o.fairness),
                    dto: Some(dto((o.balanced_accuracy, o.fairness), utopia)),
                    leakage: o.leakage,
                    final_iw: Some(o.final_iw),
                    selected_epoch: o.selected_epoch,
                    error: String::new(),
                },
                Err(e) => SweepRow {
                    beta,
                    seed: seed.to_string(),
                    status: "failed",
                    balanced_accuracy: None,
                    fairness: None,
                    dto: None,
                    leakage: None,
                    final_iw: None,
                    selected_epoch: None,
                    error: e.to_string(),
                },
            })?;
        }
        for &beta in &args.betas {
            let ok: Vec<_> = cells
                .iter()
                .zip(&outcomes)
                .filter(|((b, _), _)| *b == beta)
                .filter_map(|(_, o)| o.as_ref().ok())
                .collect();
            let acc = median(ok.iter().map(|o| o.balanced_accuracy));
            let fair = median(ok.iter().map(|o| o.fairness));
            writer.serialize(SweepRow {
                beta,
                seed: "median".into(),
                status: if ok.is_empty() { "failed" } else { "ok" },
                balanced_accuracy: acc,
                fairness: fair,
                dto: median(ok.iter().map(|o| dto((o.balanced_accuracy, o.fairness), utopia))),
                leakage: median(ok.iter().filter_map(|o| o.leakage)),
                final_iw: median(ok.iter().map(|o| o.final_iw)),
                selected_epoch: None,
                error: String::new(),
            })?;
        }
        writer.flush()?;
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainDemonic(a) => train_demonic(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Verify(a) => verify(a),
        Command::SweepBeta(a) => sweep_beta(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Parser)]
    struct Wrap {
        #[command(flatten)]
        train: TrainArgs,
    }

    #[test]
    fn train_flag_defaults_match_config_defaults() {
        let w = Wrap::try_parse_from(["x"]).unwrap();
        assert_eq!(w.train.config().unwrap(), TrainConfig::default());
    }

    #[test]
    fn seed_lists() {
        assert_eq!("1..5".parse::<Seeds>().unwrap().0, vec![1, 2, 3, 4, 5]);
        assert_eq!("3,1".parse::<Seeds>().unwrap().0, vec![3, 1]);
        assert!("5..1".parse::<Seeds>().is_err());
        assert!("a".parse::<Seeds>().is_err());
    }

    #[test]
    fn utopia_and_widths() {
        assert_eq!("83.7,90.8".parse::<Utopia>().unwrap(), Utopia(83.7, 90.8));
        assert!("83.7".parse::<Utopia>().is_err());
        assert_eq!("64,32".parse::<Widths>().unwrap().0, vec![64, 32]);
        assert!("64,0".parse::<Widths>().is_err());
    }
}
