//! `sslforge` command line: one subcommand per pipeline stage plus the
//! end-to-end runner. Settings come from `--config` with flag overrides.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sslforge::corpus::synthetic::SplitSizes;
use sslforge::corpus::{generate_background, generate_synthetic, save_jsonl, SyntheticSpec};
use sslforge::eval::evaluate_model;
use sslforge::neural::{load_model, save_model};
use sslforge::pipeline::{
    load_dataset, report_from_dirs, run_pipeline, run_stage1, sweep_pool_size, write_sweep_csv, Inputs,
    PipelineConfig, Stage2,
};
use sslforge::selection::{FilterKind, SelectionMethod};
use sslforge::ssl::{save_epoch_log, train_ssl, Method};

#[derive(Parser, Debug)]
#[command(name = "sslforge", version, about = "Unlabeled-data selection and semi-supervised NLU training")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Pipeline config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Stage-2 budget.
    #[arg(long, global = true)]
    budget: Option<usize>,
    /// Selection method (random|submodular|committee) or SSL method
    /// (baseline|pl|kd|vat|cvt); may be given once for each.
    #[arg(long, global = true)]
    method: Vec<String>,
    /// Stage-1 domain threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus and a matching config.
    GenSynthetic(GenArgs),
    /// Train the domain filter and apply it to the pool.
    FilterDomain(FilterArgs),
    /// Stage-2 selection from a pool.
    Select(SelectArgs),
    /// Train a baseline or SSL model.
    Train(TrainArgs),
    /// Score a saved model on a labeled set.
    Evaluate(EvalArgs),
    /// Render the results table of finished run directories.
    Report(ReportArgs),
    /// Train across several selection budgets and emit the gain curve.
    SweepPoolSize(SweepArgs),
    /// Run every stage end to end.
    Run,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    labeled: usize,
    #[arg(long, default_value_t = 5000)]
    unlabeled: usize,
    #[arg(long, default_value_t = 200)]
    dev: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
    /// Out-of-domain negatives for the domain filter.
    #[arg(long, default_value_t = 2000)]
    background: usize,
    #[arg(long)]
    label_noise: Option<f64>,
    #[arg(long)]
    ood_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    labeled: Option<PathBuf>,
    #[arg(long)]
    background: Option<PathBuf>,
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    kind: Option<FilterKind>,
    /// Output directory for filter.json, kept.jsonl and pool.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    labeled: Option<PathBuf>,
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Calibration data for committee selection.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    min_count: Option<u64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    committee_n: Option<usize>,
    /// Selection file (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Also write the selected utterances here.
    #[arg(long)]
    out_data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    labeled: Option<PathBuf>,
    /// Unlabeled data for the SSL methods; defaults to the config's pool.
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for model.bin and epochs.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories; defaults to the workdir.
    dirs: Vec<PathBuf>,
    /// Emit CSV instead of text.
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(required = true)]
    budgets: Vec<usize>,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn configure(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    if let Some(w) = &g.workdir {
        cfg.paths.workdir = w.clone();
    }
    if let Some(b) = g.budget {
        cfg.stage2.budget = b;
    }
    for m in &g.method {
        if let Ok(sel) = m.parse::<SelectionMethod>() {
            cfg.stage2.method = sel;
        } else if let Ok(ssl) = m.parse::<Method>() {
            cfg.ssl.method = ssl;
        } else {
            bail!("unknown method {m:?}: expected random, submodular, committee, baseline, pl, kd, vat or cvt");
        }
    }
    if let Some(t) = g.threshold {
        cfg.stage1.threshold = t;
    }
    if let Some(a) = g.alpha {
        cfg.ssl.alpha = a;
    }
    if let Some(b) = g.beta {
        cfg.ssl.beta = b;
    }
    if let Some(d) = g.delta {
        cfg.ssl.delta = d;
    }
    if let Some(s) = cfg.seeds.first() {
        cfg.ssl.seed = *s;
    }
    Ok(cfg)
}

fn pick(flag: &Option<PathBuf>, from_config: &Path, what: &str) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.clone()),
        None if !from_config.as_os_str().is_empty() => Ok(from_config.to_path_buf()),
        None => bail!("no {what} path: pass --{what} or set paths.{what} in the config"),
    }
}

fn load(path: &Path) -> Result<sslforge::corpus::Dataset> {
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_synthetic(cfg: PipelineConfig, a: &GenArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        sizes: SplitSizes {
            labeled: a.labeled,
            unlabeled: a.unlabeled,
            test: a.test,
            dev: a.dev,
        },
        ..SyntheticSpec::default()
    };
    if let Some(n) = a.label_noise {
        spec.label_noise = n;
    }
    if let Some(f) = a.ood_fraction {
        spec.out_of_domain_fraction = f;
    }
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let c = generate_synthetic(&spec, seed)?;
    fs::create_dir_all(&a.out)?;
    let path = |name: &str| a.out.join(name);
    let rel = |name: &str| PathBuf::from(name);
    save_jsonl(&c.labeled, path("labeled.jsonl"))?;
    save_jsonl(&c.unlabeled, path("pool.jsonl"))?;
    save_jsonl(&c.unlabeled_gold, path("pool_gold.jsonl"))?;
    save_jsonl(&c.dev, path("dev.jsonl"))?;
    save_jsonl(&c.test, path("test.jsonl"))?;
    let mut cfg = cfg;
    cfg.domain = "synthetic".into();
    // relative to the config file
    cfg.paths.labeled = rel("labeled.jsonl");
    cfg.paths.pool = rel("pool.jsonl");
    cfg.paths.dev = rel("dev.jsonl");
    cfg.paths.test = rel("test.jsonl");
    if a.background > 0 {
        save_jsonl(&generate_background(&spec, a.background, seed)?, path("background.jsonl"))?;
        cfg.paths.background = Some(rel("background.jsonl"));
    }
    if cfg.paths.workdir.as_os_str().is_empty() {
        cfg.paths.workdir = rel("run");
    }
    cfg.save(path("config.json"))?;
    println!("wrote synthetic corpus and config to {}", a.out.display());
    Ok(())
}

fn filter_domain(mut cfg: PipelineConfig, a: &FilterArgs) -> Result<()> {
    if let Some(k) = a.kind {
        cfg.stage1.kind = k;
    }
    let bg = pick(&a.background, cfg.paths.background.as_deref().unwrap_or(Path::new("")), "background")?;
    let inputs = Inputs {
        labeled: load(&pick(&a.labeled, &cfg.paths.labeled, "labeled")?)?,
        pool: load(&pick(&a.pool, &cfg.paths.pool, "pool")?)?,
        dev: Default::default(),
        test: Default::default(),
        background: Some(load(&bg)?),
    };
    let out = run_stage1(&cfg.stage1, &inputs, &a.out)?;
    save_jsonl(&out.pool, a.out.join("pool.jsonl"))?;
    println!("kept {} of {} utterances", out.pool.len(), inputs.pool.len());
    Ok(())
}

fn select(mut cfg: PipelineConfig, a: &SelectArgs) -> Result<()> {
    if let Some(m) = a.min_count {
        cfg.stage2.min_count = m;
    }
    if let Some(r) = a.rho {
        cfg.stage2.rho = r;
    }
    if let Some(n) = a.committee_n {
        cfg.stage2.committee_n = n;
    }
    cfg.validate()?;
    let labeled = load(&pick(&a.labeled, &cfg.paths.labeled, "labeled")?)?;
    let pool = load(&pick(&a.pool, &cfg.paths.pool, "pool")?)?;
    let dev = if cfg.stage2.method == SelectionMethod::Committee {
        load(&pick(&a.dev, &cfg.paths.dev, "dev")?)?
    } else {
        Default::default()
    };
    let seed = cfg.seeds[0];
    let dir = a.out.parent().filter(|d| !d.as_os_str().is_empty());
    let stage2 = Stage2::prepare(&cfg.stage2, &cfg.ssl, &labeled, &dev, seed, dir)?;
    let sel = stage2.select(&labeled, &pool, cfg.stage2.budget)?;
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    sel.save(&a.out)?;
    if let Some(p) = &a.out_data {
        save_jsonl(&sel.apply(&pool)?, p)?;
    }
    println!("selected {} utterances with {}", sel.len(), cfg.stage2.method);
    Ok(())
}

fn train(mut cfg: PipelineConfig, a: &TrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.ssl.epochs = e;
    }
    let labeled = load(&pick(&a.labeled, &cfg.paths.labeled, "labeled")?)?;
    let dev = match pick(&a.dev, &cfg.paths.dev, "dev") {
        Ok(p) => load(&p)?,
        Err(_) => Default::default(),
    };
    let unlabeled = if cfg.ssl.method == Method::Baseline {
        Default::default()
    } else {
        load(&pick(&a.unlabeled, &cfg.paths.pool, "unlabeled")?)?
    };
    let out = train_ssl(&labeled, &unlabeled, &dev, &cfg.ssl)?;
    fs::create_dir_all(&a.out)?;
    save_model(&out.student.model, a.out.join("model.bin"))?;
    save_epoch_log(&out.student.log, a.out.join("epochs.csv"))?;
    if let Some(t) = &out.teacher {
        save_model(t, a.out.join("teacher.bin"))?;
    }
    println!(
        "trained {} for {} epochs (best {}), model in {}",
        cfg.ssl.method,
        out.student.log.len(),
        out.student.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn evaluate(cfg: PipelineConfig, a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let test = load(&pick(&a.test, &cfg.paths.test, "test")?)?;
    let m = evaluate_model(&model, &test)?;
    let text = serde_json::to_string_pretty(&m)? + "\n";
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn report(cfg: PipelineConfig, a: &ReportArgs) -> Result<()> {
    let dirs = if a.dirs.is_empty() { vec![cfg.paths.workdir.clone()] } else { a.dirs.clone() };
    let r = report_from_dirs(&dirs)?;
    if a.csv {
        print!("{}", r.table.to_csv()?);
    } else {
        print!("{}", r.render_text());
    }
    Ok(())
}

fn sweep(cfg: PipelineConfig, a: &SweepArgs) -> Result<()> {
    let inputs = Inputs::load(&cfg.paths)?;
    let points = sweep_pool_size(&cfg, &inputs, &a.budgets)?;
    match &a.out {
        Some(p) => {
            let mut buf = Vec::new();
            write_sweep_csv(&points, &mut buf)?;
            write_text(p, std::str::from_utf8(&buf)?)?;
        }
        None => {
            let stdout = std::io::stdout();
            write_sweep_csv(&points, stdout.lock())?;
        }
    }
    Ok(())
}

fn run(cfg: PipelineConfig) -> Result<()> {
    let s = run_pipeline(&cfg)?;
    print!("{}", s.report.render_text());
    std::io::stdout().flush()?;
    eprintln!("run directory: {}", s.workdir.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SSLFORGE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SSLFORGE_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    init_threads()?;
    let cfg = configure(&cli.global)?;
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(cfg, a),
        Command::FilterDomain(a) => filter_domain(cfg, a),
        Command::Select(a) => select(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Evaluate(a) => evaluate(cfg, a),
        Command::Report(a) => report(cfg, a),
        Command::SweepPoolSize(a) => sweep(cfg, a),
        Command::Run => run(cfg),
    }
}
