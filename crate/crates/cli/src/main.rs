//! `dip`: validate → build-labels → mine-pairs → train → build-bank → eval.

mod provenance;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dip_core::config::{FeatureMode, RunConfig};
use dip_core::retrieval::{build_memory_bank, evaluate, LabelMode, MemoryBank};
use dip_core::tasks::{build_pseudo_labels, mine_pairs_from_manifest, PositivePairList};
use dip_core::tensor_store::{load_manifest, validate_dataset, write_f32, write_label_map, Dataset};
use dip_core::trainer::{load_head, save_head, train, PositiveMode};
use dip_core::Error;

use provenance::Provenance;

#[derive(Parser, Debug)]
#[command(name = "dip", version, about = "Dense in-context post-training and retrieval evaluation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "DIP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check every tensor referenced by a manifest.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Cluster segment features into pseudo-classes and write pseudo-label maps.
    BuildLabels(BuildLabelsArgs),
    /// Pair images with global-feature neighbours sharing a large pseudo-class.
    MinePairs(MinePairsArgs),
    /// Train the projection head on in-context episodes.
    Train(TrainArgs),
    /// Sample labelled patches into a memory bank.
    BuildBank(BuildBankArgs),
    /// Retrieval evaluation against a memory bank.
    Eval(EvalArgs),
    /// Run the embedded invariant checks.
    Selfcheck,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct BuildLabelsArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of pseudo-classes.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Independent k-means++ runs; the lowest inertia is kept.
    #[arg(long)]
    restarts: Option<usize>,
    /// Cluster only this many randomly chosen segments.
    #[arg(long)]
    cluster_sample: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct MinePairsArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    area_thresh: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PositiveArg {
    NearestNeighbor,
    TwoCrops,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    support_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    head_out_dim: Option<usize>,
    #[arg(long, value_enum)]
    positive: Option<PositiveArg>,
    /// Train with the positive example only.
    #[arg(long)]
    no_distractors: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Discrete,
    Continuous,
}

#[derive(Args, Debug)]
struct BuildBankArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Head checkpoint directory; features are projected through it.
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    bank_size: Option<usize>,
    #[arg(long)]
    data_fraction: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[command(flatten)]
    common: Common,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = Result<(), Failure>;

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    value
        .as_ref()
        .ok_or_else(|| Failure::Usage(format!("missing required flag --{flag}")))
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn print_config(cfg: &RunConfig) -> Outcome {
    print!("{}", cfg.to_toml());
    Ok(())
}

fn run_validate(manifest: &Path) -> Outcome {
    let m = load_manifest(manifest)?;
    let report = validate_dataset(&m);
    for v in &report.violations {
        println!("{v}");
    }
    println!(
        "{} records, {} violations",
        m.len(),
        report.violations.len()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Data(Error::Corruption {
            path: manifest.to_path_buf(),
            reason: format!("{} validation violations", report.violations.len()),
        }))
    }
}

fn run_build_labels(a: &BuildLabelsArgs, argv: &[String]) -> Outcome {
    let mut cfg = load_config(&a.common)?;
    if let Some(k) = a.k {
        cfg.labels.k = k;
    }
    if let Some(n) = a.max_iters {
        cfg.labels.max_iters = n;
    }
    if let Some(n) = a.restarts {
        cfg.labels.restarts = n;
    }
    if a.cluster_sample.is_some() {
        cfg.labels.cluster_sample = a.cluster_sample;
    }
    if a.common.print_config {
        return print_config(&cfg);
    }
    let manifest_path = required(&a.manifest, "manifest")?;
    let out = required(&a.out, "out")?;
    let manifest = load_manifest(manifest_path)?;
    let labels = build_pseudo_labels(&manifest, &cfg.label_config())?;

    create_dir(&out.join("labels"))?;
    let out_abs = std::path::absolute(out).map_err(|e| Failure::Data(Error::Io {
        path: out.clone(),
        source: e,
    }))?;
    let mut relabelled = manifest.clone();
    relabelled.root = out_abs.clone();
    relabelled.num_classes = Some(cfg.labels.k);
    for (rec, map) in relabelled.records.iter_mut().zip(&labels.maps) {
        let path = out_abs.join("labels").join(format!("{}.dipt", rec.id));
        write_label_map(&path, map)?;
        rec.labels = Some(path);
    }
    let c = &labels.model.centroids;
    let centroids: Vec<f32> = c.iter().map(|&v| v as f32).collect();
    write_f32(&out.join("centroids.dipt"), &[c.nrows() as u64, c.ncols() as u64], &centroids)?;
    relabelled.save(out.join("manifest.toml"))?;
    println!(
        "{} segments clustered into {} pseudo-classes ({} iterations, inertia {:e})",
        labels.segments,
        labels.model.k(),
        labels.model.iterations,
        labels.model.inertia
    );
    Provenance::new("build-labels", argv, &cfg)
        .input(manifest_path)?
        .write(out)
}

fn run_mine_pairs(a: &MinePairsArgs, argv: &[String]) -> Outcome {
    let mut cfg = load_config(&a.common)?;
    if let Some(t) = a.top {
        cfg.pairs.top_n = t;
    }
    if let Some(t) = a.area_thresh {
        cfg.pairs.area_thresh = t;
    }
    if a.common.print_config {
        return print_config(&cfg);
    }
    let manifest_path = required(&a.manifest, "manifest")?;
    let out = required(&a.out, "out")?;
    let manifest = load_manifest(manifest_path)?;
    let pairs = mine_pairs_from_manifest(&manifest, &cfg.pairs)?;
    create_dir(out)?;
    pairs.save(&out.join("pairs.toml"))?;
    println!("{} positive pairs", pairs.len());
    Provenance::new("mine-pairs", argv, &cfg)
        .input(manifest_path)?
        .write(out)
}

fn run_train(a: &TrainArgs, argv: &[String]) -> Outcome {
    let mut cfg = load_config(&a.common)?;
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    if let Some(v) = a.support_size {
        t.support_size = v;
    }
    if let Some(v) = a.tau {
        t.tau = v;
    }
    if let Some(v) = a.head_out_dim {
        t.head_out_dim = v;
    }
    if let Some(p) = a.positive {
        t.positive_mode = match p {
            PositiveArg::NearestNeighbor => PositiveMode::NearestNeighbor,
            PositiveArg::TwoCrops => PositiveMode::TwoCrops,
        };
    }
    if a.no_distractors {
        t.distractors = false;
    }
    if a.common.print_config {
        return print_config(&cfg);
    }
    let manifest_path = required(&a.manifest, "manifest")?;
    let pairs_path = required(&a.pairs, "pairs")?;
    let out = required(&a.out, "out")?;
    let manifest = load_manifest(manifest_path)?;
    let dataset = Dataset::load(&manifest)?;
    let pairs = PositivePairList::load(pairs_path)?;
    let (params, log) = train(&cfg.train, &dataset, &pairs)?;
    create_dir(out)?;
    let desc = save_head(&out.join("head"), &params)?;
    write_text(&out.join("train_log.csv"), &log.to_csv())?;
    if let Some(last) = log.steps.last() {
        println!("{} steps, final loss {:.6}, head {}", log.steps.len(), last.loss, desc.checksum);
    }
    Provenance::new("train", argv, &cfg)
        .input(manifest_path)?
        .input(pairs_path)?
        .write(out)
}

fn run_build_bank(a: &BuildBankArgs, argv: &[String]) -> Outcome {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.bank_size {
        cfg.bank.size = v;
    }
    if let Some(v) = a.data_fraction {
        cfg.bank.data_fraction = v;
    }
    if let Some(m) = a.mode {
        cfg.bank.mode = match m {
            ModeArg::Discrete => LabelMode::Discrete,
            ModeArg::Continuous => LabelMode::Continuous,
        };
    }
    if a.head.is_some() {
        cfg.bank.features = FeatureMode::Head;
    }
    if a.common.print_config {
        return print_config(&cfg);
    }
    let manifest_path = required(&a.manifest, "manifest")?;
    let out = required(&a.out, "out")?;
    if cfg.bank.features == FeatureMode::Head && a.head.is_none() {
        return Err(Failure::Usage("head features requested without --head".into()));
    }
    let head = a.head.as_deref().map(load_head).transpose()?;
    let manifest = load_manifest(manifest_path)?;
    let bank = build_memory_bank(&manifest, head.as_ref(), &cfg.bank_config())?;
    bank.save(out)?;
    println!("memory bank of {} rows x {} dims", bank.len(), bank.dim());
    let mut prov = Provenance::new("build-bank", argv, &cfg).input(manifest_path)?;
    if let Some(h) = &a.head {
        prov = prov.input(&h.join("head.toml"))?;
    }
    prov.write(out)
}

fn run_eval(a: &EvalArgs, argv: &[String]) -> Outcome {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = a.k {
        cfg.eval.k = v;
    }
    if let Some(v) = a.tau {
        cfg.eval.tau = v;
    }
    if a.head.is_some() {
        cfg.bank.features = FeatureMode::Head;
    }
    if a.common.print_config {
        return print_config(&cfg);
    }
    let manifest_path = required(&a.manifest, "manifest")?;
    let bank_path = required(&a.bank, "bank")?;
    let out = required(&a.out, "out")?;
    let head = a.head.as_deref().map(load_head).transpose()?;
    let manifest = load_manifest(manifest_path)?;
    let bank = MemoryBank::load(bank_path)?;
    let report = evaluate(&manifest, &bank, head.as_ref(), &cfg.eval)?;
    create_dir(out)?;
    write_text(&out.join("report.toml"), &report.to_toml())?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    match (report.miou, report.rmse) {
        (Some(m), _) => println!("mIoU {m:.4} over {} pixels", report.evaluated_pixels),
        (_, Some(r)) => println!("RMSE {r:.4} over {} pixels", report.evaluated_pixels),
        _ => {}
    }
    let mut prov = Provenance::new("eval", argv, &cfg)
        .input(manifest_path)?
        .input(&bank_path.join("bank.toml"))?;
    if let Some(h) = &a.head {
        prov = prov.input(&h.join("head.toml"))?;
    }
    prov.write(out)
}

fn run_selfcheck() -> Outcome {
    let outcomes = dip_core::selfcheck::run_selfcheck()?;
    let mut ok = true;
    for c in &outcomes {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Data(Error::Numeric("self-check failed".into())))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let argv = provenance::recorded_args(std::env::args().skip(1));
    let result = match &cli.command {
        Command::Validate { manifest } => run_validate(manifest),
        Command::BuildLabels(a) => run_build_labels(a, &argv),
        Command::MinePairs(a) => run_mine_pairs(a, &argv),
        Command::Train(a) => run_train(a, &argv),
        Command::BuildBank(a) => run_build_bank(a, &argv),
        Command::Eval(a) => run_eval(a, &argv),
        Command::Selfcheck => run_selfcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
