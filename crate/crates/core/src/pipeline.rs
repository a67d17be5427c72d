//! End-to-end runner: domain filter, stage-2 selection, SSL training and
//! evaluation, with every intermediate written under a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json  manifest.json  metrics.json  runs.json  report.txt  report.csv
//! seed-<s>/teacher/{model.bin,metrics.json,epochs.csv}
//! seed-<s>/stage1/{filter.json,kept.jsonl}
//! seed-<s>/stage2/{selection.jsonl,selected.jsonl,committee/...}
//! seed-<s>/student/{model.bin,metrics.json,epochs.csv[,pseudo.jsonl]}
//! ```
//!
//! `epochs.csv` files carry wall-clock times and are listed in the manifest
//! without a checksum; everything else is reproducible byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_jsonl, load_snips, save_jsonl, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, experiment_report, relative_error_reduction, Metrics, Report, RunRecord};
use crate::neural::{save_model, Model};
use crate::selection::{
    calibrate_threshold, random_select, save_curve_csv, stage1_filter, submodular_select, train_committee,
    train_domain_filter, Calibration, Committee, DomainFilterConfig, EntropyMode, FeatureWeighting,
    SelectionMethod, SelectionResult, SubmodularConfig,
};
use crate::ssl::{save_epoch_log, train_baseline, train_ssl_with_teacher, Method, SslConfig, TrainOutcome};

pub const STAGE_LOAD: &str = "load";
pub const STAGE_TEACHER: &str = "teacher";
pub const STAGE1: &str = "stage1";
pub const STAGE2: &str = "stage2";
pub const STAGE_STUDENT: &str = "student";
pub const STAGE_REPORT: &str = "report";

const VOLATILE: &[&str] = &["epochs.csv"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub labeled: PathBuf,
    pub pool: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    /// Out-of-domain negatives for the domain filter. Without them stage 1
    /// is skipped and the whole pool goes to stage 2.
    pub background: Option<PathBuf>,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub method: SelectionMethod,
    pub budget: usize,
    /// Committee size.
    pub committee_n: usize,
    /// Acceptable committee error rate for the entropy threshold.
    pub rho: f64,
    pub entropy_mode: EntropyMode,
    /// N-gram pruning for the submodular objective.
    pub min_count: u64,
    pub weighting: FeatureWeighting,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            method: SelectionMethod::Random,
            budget: 1000,
            committee_n: 4,
            rho: 0.20,
            entropy_mode: EntropyMode::MeanOfEntropies,
            min_count: 30,
            weighting: FeatureWeighting::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Domain label used in reports.
    pub domain: String,
    pub paths: Paths,
    pub stage1: DomainFilterConfig,
    pub stage2: Stage2Config,
    pub ssl: SslConfig,
    pub seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            domain: "default".into(),
            paths: Paths::default(),
            stage1: DomainFilterConfig::default(),
            stage2: Stage2Config::default(),
            ssl: SslConfig::default(),
            seeds: vec![0],
        }
    }
}

impl Paths {
    /// Joins relative paths onto `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.labeled);
        fix(&mut self.pool);
        fix(&mut self.dev);
        fix(&mut self.test);
        fix(&mut self.workdir);
        if let Some(b) = self.background.as_mut() {
            fix(b);
        }
    }
}

impl PipelineConfig {
    /// Reads a config; relative paths are taken relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            cfg.paths.resolve(dir);
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &serde_json::to_vec_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.ssl.validate()?;
        self.stage1.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.stage2.method == SelectionMethod::Committee && self.stage2.committee_n < 2 {
            return Err(Error::Config(format!(
                "a committee needs at least 2 members, got {}",
                self.stage2.committee_n
            )));
        }
        if !(0.0..=1.0).contains(&self.stage2.rho) {
            return Err(Error::Config(format!("rho {} outside [0,1]", self.stage2.rho)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn ssl_for_seed(&self, seed: u64) -> SslConfig {
        SslConfig {
            seed,
            ..self.ssl.clone()
        }
    }
}

/// Distinct member seeds derived from a run seed.
pub fn committee_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| seed.wrapping_mul(1_000_003).wrapping_add(i + 1)).collect()
}

/// A directory is read as SNIPS, anything else as JSON Lines.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        load_snips(path)
    } else {
        load_jsonl(path)
    }
}

#[derive(Debug, Clone)]
pub struct Inputs {
    pub labeled: Dataset,
    pub pool: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub background: Option<Dataset>,
}

impl Inputs {
    pub fn load(paths: &Paths) -> Result<Inputs> {
        let inputs = Inputs {
            labeled: load_dataset(&paths.labeled)?,
            pool: load_dataset(&paths.pool)?,
            dev: load_dataset(&paths.dev)?,
            test: load_dataset(&paths.test)?,
            background: paths.background.as_deref().map(load_dataset).transpose()?,
        };
        if !inputs.labeled.is_fully_labeled() || !inputs.test.is_fully_labeled() {
            return Err(Error::Input("labeled and test sets must carry intents and tags".into()));
        }
        Ok(inputs)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Stage-1 output: the pool passed on, plus the filter decision when one ran.
pub struct Stage1Output {
    pub pool: Dataset,
    pub kept: Option<SelectionResult>,
}

/// Trains the domain filter and keeps pool items scoring above its
/// threshold. Skipped without background data.
pub fn run_stage1(cfg: &DomainFilterConfig, inputs: &Inputs, dir: &Path) -> Result<Stage1Output> {
    let Some(bg) = &inputs.background else {
        log::info!("no background data; stage 1 passes the whole pool through");
        return Ok(Stage1Output {
            pool: inputs.pool.clone(),
            kept: None,
        });
    };
    mkdir(dir)?;
    let filter = train_domain_filter(&inputs.labeled, bg, cfg)?;
    filter.save(dir.join("filter.json"))?;
    let kept = stage1_filter(&filter, &inputs.pool, cfg.threshold)?;
    kept.save(dir.join("kept.jsonl"))?;
    log::info!("stage 1 kept {} of {} pool utterances", kept.len(), inputs.pool.len());
    Ok(Stage1Output {
        pool: kept.apply(&inputs.pool)?,
        kept: Some(kept),
    })
}

/// A stage-2 selector with any expensive state (the committee) built once,
/// so several budgets can share it.
pub struct Stage2 {
    pub method: SelectionMethod,
    pub committee: Option<Committee>,
    pub calibration: Option<Calibration>,
    submodular: SubmodularConfig,
    seed: u64,
}

impl Stage2 {
    /// Trains and calibrates the committee on `dev` when the method needs
    /// one; members and curves go to `dir` if given.
    pub fn prepare(
        cfg: &Stage2Config,
        ssl: &SslConfig,
        labeled: &Dataset,
        dev: &Dataset,
        seed: u64,
        dir: Option<&Path>,
    ) -> Result<Stage2> {
        let mut out = Stage2 {
            method: cfg.method,
            committee: None,
            calibration: None,
            submodular: SubmodularConfig {
                min_count: cfg.min_count,
                weighting: cfg.weighting,
            },
            seed,
        };
        if cfg.method == SelectionMethod::Committee {
            let member_cfg = SslConfig {
                method: Method::Baseline,
                ..ssl.clone()
            };
            let mut committee = train_committee(labeled, dev, &committee_seeds(seed, cfg.committee_n), &member_cfg)?;
            committee.mode = cfg.entropy_mode;
            let cal = calibrate_threshold(&committee, dev, cfg.rho)?;
            committee.tau_ic = cal.tau_ic;
            committee.tau_ner = cal.tau_ner;
            log::info!("committee thresholds: ic {:.4}, ner {:.4}", cal.tau_ic, cal.tau_ner);
            if let Some(dir) = dir {
                let cdir = dir.join("committee");
                mkdir(&cdir)?;
                for (i, m) in committee.members.iter().enumerate() {
                    save_model(m, cdir.join(format!("member-{i}.bin")))?;
                }
                save_curve_csv(&cal.ic_curve, cdir.join("calibration_ic.csv"))?;
                save_curve_csv(&cal.ner_curve, cdir.join("calibration_ner.csv"))?;
                write_json(
                    &cdir.join("thresholds.json"),
                    &serde_json::json!({
                        "tau_ic": cal.tau_ic,
                        "tau_ner": cal.tau_ner,
                        "ic_warning": cal.ic_warning,
                        "ner_warning": cal.ner_warning,
                    }),
                )?;
            }
            out.committee = Some(committee);
            out.calibration = Some(cal);
        }
        Ok(out)
    }

    pub fn select(&self, labeled: &Dataset, pool: &Dataset, budget: usize) -> Result<SelectionResult> {
        if budget > pool.len() {
            return Err(Error::Config(format!(
                "budget {budget} exceeds the {} utterances left after stage 1",
                pool.len()
            )));
        }
        match self.method {
            SelectionMethod::Random => random_select(pool, budget, self.seed),
            SelectionMethod::Submodular => submodular_select(labeled, pool, budget, &self.submodular),
            SelectionMethod::Committee => {
                let c = self.committee.as_ref().expect("committee prepared");
                crate::selection::committee_select(c, pool, budget, self.seed)
            }
        }
    }
}

fn save_outcome(out: &TrainOutcome, test: &Dataset, dir: &Path) -> Result<Metrics> {
    mkdir(dir)?;
    save_model(&out.model, dir.join("model.bin"))?;
    save_epoch_log(&out.log, dir.join("epochs.csv"))?;
    let mut m = evaluate_model(&out.model, test)?;
    m.epoch_seconds = out.log.iter().map(|e| e.seconds).collect();
    write_json(&dir.join("metrics.json"), &m)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub stage: String,
    pub status: String,
    /// Relative path to SHA-256; `None` for files with wall-clock content.
    pub files: BTreeMap<String, Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn checksum_dir(root: &Path, dir: &Path) -> Result<BTreeMap<String, Option<String>>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let sum = if VOLATILE.contains(&name) { None } else { Some(sha256_file(&path)?) };
            out.insert(rel, sum);
        }
    }
    Ok(out)
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub workdir: PathBuf,
    pub records: Vec<RunRecord>,
    pub report: Report,
    pub manifest: Manifest,
}

struct Recorder<'a> {
    root: &'a Path,
    manifest: Manifest,
}

impl Recorder<'_> {
    fn stage(&mut self, seed: u64, stage: &str, status: &str, dir: &Path) -> Result<()> {
        let files = checksum_dir(self.root, dir)?;
        self.manifest.stages.push(StageRecord {
            seed,
            stage: stage.to_string(),
            status: status.to_string(),
            files,
        });
        self.flush()
    }

    fn flush(&self) -> Result<()> {
        write_json(&self.root.join("manifest.json"), &self.manifest)
    }
}

/// Runs every seed of `cfg` in sequence: teacher baseline, stage 1,
/// stage 2, SSL student, evaluation, then the report over all seeds.
/// Stage failures carry the stage name; files written so far stay on disk.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let inputs = Inputs::load(&cfg.paths).map_err(|e| e.in_stage(STAGE_LOAD))?;
    run_with_inputs(cfg, &inputs)
}

/// [`run_pipeline`] over already loaded inputs.
pub fn run_with_inputs(cfg: &PipelineConfig, inputs: &Inputs) -> Result<RunSummary> {
    cfg.validate()?;
    let root = cfg.paths.workdir.as_path();
    mkdir(root)?;
    cfg.save(root.join("config.json"))?;
    let mut rec = Recorder {
        root,
        manifest: Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seeds: cfg.seeds.clone(),
            stages: Vec::new(),
        },
    };
    rec.flush()?;

    let mut records = Vec::new();
    let mut metrics: BTreeMap<String, BTreeMap<&str, Metrics>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let sdir = root.join(format!("seed-{seed}"));
        let ssl = cfg.ssl_for_seed(seed);
        let mut per_seed = BTreeMap::new();

        let tdir = sdir.join("teacher");
        let teacher = train_baseline(&inputs.labeled, &inputs.dev, &ssl.with_method(Method::Baseline))
            .and_then(|t| save_outcome(&t, &inputs.test, &tdir).map(|m| (t.model, m)))
            .map_err(|e| e.in_stage(STAGE_TEACHER))?;
        let (teacher, base_metrics) = teacher;
        rec.stage(seed, STAGE_TEACHER, "ok", &tdir)?;
        records.push(RunRecord {
            domain: cfg.domain.clone(),
            method: Method::Baseline,
            selection: None,
            seed,
            metrics: base_metrics.clone(),
        });
        per_seed.insert("baseline", base_metrics);

        if ssl.method != Method::Baseline {
            let student = run_student(cfg, inputs, &ssl, &teacher, seed, &sdir, &mut rec)?;
            records.push(RunRecord {
                domain: cfg.domain.clone(),
                method: ssl.method,
                selection: Some(cfg.stage2.method),
                seed,
                metrics: student.clone(),
            });
            per_seed.insert(ssl.method.as_str(), student);
        }
        metrics.insert(format!("seed-{seed}"), per_seed);
    }

    let report = experiment_report(&records).map_err(|e| e.in_stage(STAGE_REPORT))?;
    write_json(&root.join("metrics.json"), &metrics)?;
    write_json(&root.join("runs.json"), &records)?;
    write_file(&root.join("report.txt"), report.render_text().as_bytes())?;
    write_file(&root.join("report.csv"), report.table.to_csv()?.as_bytes())?;
    rec.flush()?;
    Ok(RunSummary {
        workdir: root.to_path_buf(),
        records,
        report,
        manifest: rec.manifest,
    })
}

fn run_student(
    cfg: &PipelineConfig,
    inputs: &Inputs,
    ssl: &SslConfig,
    teacher: &Model,
    seed: u64,
    sdir: &Path,
    rec: &mut Recorder<'_>,
) -> Result<Metrics> {
    let s1dir = sdir.join("stage1");
    let s1 = run_stage1(&cfg.stage1, inputs, &s1dir).map_err(|e| e.in_stage(STAGE1))?;
    rec.stage(seed, STAGE1, if s1.kept.is_some() { "ok" } else { "skipped" }, &s1dir)?;

    let s2dir = sdir.join("stage2");
    let selected = (|| {
        mkdir(&s2dir)?;
        let stage2 = Stage2::prepare(&cfg.stage2, ssl, &inputs.labeled, &inputs.dev, seed, Some(&s2dir))?;
        let sel = stage2.select(&inputs.labeled, &s1.pool, cfg.stage2.budget)?;
        sel.save(s2dir.join("selection.jsonl"))?;
        let d = sel.apply(&s1.pool)?;
        save_jsonl(&d, s2dir.join("selected.jsonl"))?;
        Ok(d)
    })()
    .map_err(|e: Error| e.in_stage(STAGE2))?;
    rec.stage(seed, STAGE2, "ok", &s2dir)?;

    let stdir = sdir.join("student");
    let m = (|| {
        let out = train_ssl_with_teacher(&inputs.labeled, &selected, &inputs.dev, ssl, Some(teacher))?;
        if let Some(p) = &out.pseudo {
            mkdir(&stdir)?;
            save_jsonl(p, stdir.join("pseudo.jsonl"))?;
        }
        save_outcome(&out.student, &inputs.test, &stdir)
    })()
    .map_err(|e: Error| e.in_stage(STAGE_STUDENT))?;
    rec.stage(seed, STAGE_STUDENT, "ok", &stdir)?;
    Ok(m)
}

/// One point of a pool-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub seed: u64,
    pub budget: usize,
    pub baseline_ic_error: f64,
    pub baseline_ner_f1: f64,
    pub ic_error: f64,
    pub ner_f1: f64,
    /// Relative IC error reduction over the baseline (negative is better).
    pub ic_rer: f64,
    /// Relative reduction of `1 − F1`.
    pub ner_rer: f64,
}

/// Trains the configured SSL method on selections of each size in
/// `budgets`, sharing the teacher, stage 1 and the stage-2 selector per seed.
pub fn sweep_pool_size(cfg: &PipelineConfig, inputs: &Inputs, budgets: &[usize]) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    if cfg.ssl.method == Method::Baseline {
        return Err(Error::Config("a pool-size sweep needs an SSL method, not the baseline".into()));
    }
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let ssl = cfg.ssl_for_seed(seed);
        let tout = train_baseline(&inputs.labeled, &inputs.dev, &ssl.with_method(Method::Baseline))
            .map_err(|e| e.in_stage(STAGE_TEACHER))?;
        let base = evaluate_model(&tout.model, &inputs.test)?;
        let scratch = cfg.paths.workdir.join(format!("sweep-seed-{seed}"));
        let s1 = run_stage1(&cfg.stage1, inputs, &scratch.join("stage1")).map_err(|e| e.in_stage(STAGE1))?;
        let stage2 = Stage2::prepare(&cfg.stage2, &ssl, &inputs.labeled, &inputs.dev, seed, None)
            .map_err(|e| e.in_stage(STAGE2))?;
        for &budget in budgets {
            let selected = stage2
                .select(&inputs.labeled, &s1.pool, budget)
                .and_then(|s| s.apply(&s1.pool))
                .map_err(|e| e.in_stage(STAGE2))?;
            let student = train_ssl_with_teacher(&inputs.labeled, &selected, &inputs.dev, &ssl, Some(&tout.model))
                .map_err(|e| e.in_stage(STAGE_STUDENT))?;
            let m = evaluate_model(&student.student.model, &inputs.test)?;
            log::info!("budget {budget}: ic error {:.4}, ner f1 {:.4}", m.ic_error, m.ner_f1);
            out.push(SweepPoint {
                seed,
                budget,
                baseline_ic_error: base.ic_error,
                baseline_ner_f1: base.ner_f1,
                ic_error: m.ic_error,
                ner_f1: m.ner_f1,
                ic_rer: relative_error_reduction(base.ic_error, m.ic_error).unwrap_or(f64::NAN),
                ner_rer: relative_error_reduction(1.0 - base.ner_f1, 1.0 - m.ner_f1).unwrap_or(f64::NAN),
            });
        }
    }
    Ok(out)
}

pub fn write_sweep_csv<W: std::io::Write>(points: &[SweepPoint], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for p in points {
        csv.serialize(p)?;
    }
    csv.flush().map_err(|e| Error::io("<sweep csv>", e))?;
    Ok(())
}

/// Report over the `runs.json` of one or more finished run directories.
pub fn report_from_dirs<P: AsRef<Path>>(dirs: &[P]) -> Result<Report> {
    let mut runs = Vec::new();
    for d in dirs {
        let path = d.as_ref().join("runs.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut r: Vec<RunRecord> = serde_json::from_str(&text)?;
        runs.append(&mut r);
    }
    experiment_report(&runs)
}
