use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ncg_core::analysis::{correlation_with_truth, empirical_ntic, transition_graph, ClassProbabilities};
use ncg_core::autodiff::fault;
use ncg_core::gradcheck::{run_suite, GradcheckConfig, SUITE_OPS};
use ncg_core::model::{checkpoint_precision, Checkpoint, ModelSpec, ModelState};
use ncg_core::rng::SeedSource;
use ncg_core::signals::{CsvColumns, Dataset, NoiseSpec};
use ncg_core::train::{evaluate_q, train_with, AdamState, RunLog, TrainConfig};
use ncg_core::{NcgError, Precision, Scalar};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataConfig, ExperimentConfig, ModelChoice};
use crate::svg::{line_chart, thin, Series};
use crate::{deterministic, CliError, GlobalArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RUNLOG_CSV: &str = "runlog.csv";
pub const RUNLOG_JSON: &str = "runlog.json";
pub const SUMMARY_FILE: &str = "summary.json";

const SWEEP_PARAMS: &[&str] = &["cos_theta", "theta", "tau", "n", "lr", "batch_size", "epochs", "offset"];

macro_rules! with_precision {
    ($p:expr, $f:ident ( $($a:expr),* $(,)? )) => {
        match $p {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}

fn resolve(g: &GlobalArgs) -> Result<(ExperimentConfig, ModelSpec), CliError> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = ExperimentConfig::default();
            if g.preset.as_deref() == Some(ncg_core::model::HAR_UCINET) {
                c.train = TrainConfig::har();
            }
            c
        }
    };
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output = o.clone();
    }
    if let Some(p) = &g.preset {
        cfg.model = ModelChoice::Preset(p.clone());
    }
    let spec = cfg.validate()?;
    Ok((cfg, spec))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(NcgError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(NcgError::from)? + "\n";
    write_text(path, &text)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Signals as `[channel][time]`, with optional ground truth.
pub struct Loaded {
    pub train: Vec<Vec<f64>>,
    pub test: Option<Vec<Vec<f64>>>,
    pub train_truth: Option<Vec<f64>>,
    pub test_truth: Option<Vec<f64>>,
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

fn load_data(cfg: &ExperimentConfig) -> Result<Loaded, CliError> {
    let from_dataset = |d: Dataset| Loaded {
        train: vec![d.train.samples],
        test: Some(vec![d.test.samples]),
        train_truth: d.train.truth,
        test_truth: d.test.truth,
    };
    match &cfg.data {
        DataConfig::Noise { .. } => {
            let mixture = cfg.data.mixture().expect("noise source");
            let (a, b) = cfg.data.seeds(cfg.train.seed);
            Ok(from_dataset(Dataset::generate(&mixture, a, b)?))
        }
        DataConfig::Dir { path } => Ok(from_dataset(Dataset::read(path)?)),
        DataConfig::Csv {
            train,
            test,
            columns,
            truth_column,
        } => {
            let pick = |path: &Path| -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>), CliError> {
                let table = CsvColumns::read(path)?;
                let truth_idx = truth_column.as_ref().map(|c| table.index_of(c)).transpose()?;
                let inputs: Vec<usize> = match columns {
                    Some(cols) => cols.iter().map(|c| table.index_of(c)).collect::<Result<_, _>>()?,
                    None => (0..table.columns.len()).filter(|&i| Some(i) != truth_idx).collect(),
                };
                if inputs.is_empty() {
                    return Err(CliError::Config(format!("{}: no input columns", path.display())));
                }
                let truth = truth_idx.map(|i| table.columns[i].clone());
                if let Some(t) = &truth {
                    if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(CliError::Config(format!("{}: truth values must lie in [0, 1]", path.display())));
                    }
                }
                Ok((inputs.iter().map(|&i| table.columns[i].clone()).collect(), truth))
            };
            let (train, train_truth) = pick(train)?;
            let (test, test_truth) = match test {
                Some(p) => {
                    let (t, tt) = pick(p)?;
                    (Some(t), tt)
                }
                None => (None, None),
            };
            Ok(Loaded {
                train,
                test,
                train_truth,
                test_truth,
            })
        }
    }
}

pub fn generate(g: &GlobalArgs) -> Result<(), CliError> {
    let (cfg, _) = resolve(g)?;
    let mixture = cfg
        .data
        .mixture()
        .ok_or_else(|| CliError::Config("generate needs a noise data source".into()))?;
    let (a, b) = cfg.data.seeds(cfg.train.seed);
    let data = Dataset::generate(&mixture, a, b)?;
    data.write(&cfg.output)?;
    eprintln!("wrote {} + {} samples to {}", mixture.n, mixture.n, cfg.output.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct Summary {
    seed: u64,
    precision: Precision,
    epochs_completed: usize,
    final_train_q: Option<f64>,
    final_test_q: Option<f64>,
    wall_time_seconds: f64,
    diverged_at: Option<usize>,
    parameters: usize,
}

pub struct TrainOutcome {
    pub final_q: Option<f64>,
    pub correlation: Option<f64>,
}

/// Trains per `cfg` into `cfg.output`; optionally scores the envelope
/// correlation on held-out data afterwards.
fn run_training<F: Scalar>(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    data: &Loaded,
    resume: bool,
    checkpoint_every: Option<usize>,
    score: bool,
    quiet: bool,
) -> Result<TrainOutcome, CliError> {
    let out = &cfg.output;
    create_dir(out)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let (mut model, mut opt, done, prior) = if resume && ck_path.exists() {
        let found = checkpoint_precision(&ck_path)?;
        if found != F::PRECISION {
            return Err(CliError::Config(format!(
                "checkpoint precision {found:?} does not match configured {:?}",
                F::PRECISION
            )));
        }
        let ck = Checkpoint::<F>::load(&ck_path)?;
        if &ck.model.spec != spec {
            return Err(CliError::Config("checkpoint model differs from the configured model".into()));
        }
        let opt = ck.optimizer.unwrap_or_else(|| AdamState::for_model(&ck.model));
        let log_path = out.join(RUNLOG_JSON);
        let prior: RunLog = if log_path.exists() {
            let text = fs::read_to_string(&log_path).map_err(io_err(&log_path))?;
            serde_json::from_str(&text).map_err(NcgError::from)?
        } else {
            RunLog::default()
        };
        (ck.model, opt, ck.epochs_completed, prior)
    } else {
        let model = ModelState::<F>::build(spec.clone(), &mut SeedSource::new(cfg.train.seed).stream("init"))?;
        let opt = AdamState::for_model(&model);
        (model, opt, 0, RunLog::default())
    };
    let train = refs(&data.train);
    let test = data.test.as_deref().map(refs);
    let total = cfg.train.epochs;
    let mut log = train_with(&mut model, &mut opt, done, &train, test.as_deref(), &cfg.train, |r, m, o| {
        if !quiet {
            let test = r.test_q.map(|q| format!(" test_Q={q:.5}")).unwrap_or_default();
            eprintln!("epoch {}/{total} train_Q={:.5}{test}", r.epoch, r.train_q);
        }
        if checkpoint_every.is_some_and(|k| k > 0 && r.epoch % k == 0) {
            let ck = Checkpoint {
                epochs_completed: r.epoch,
                optimizer: Some(o.clone()),
                ..Checkpoint::new(m.clone())
            };
            ck.save(&ck_path)?;
        }
        Ok(())
    })?;
    let mut records = prior.records;
    records.append(&mut log.records);
    log.records = records;
    if deterministic() {
        log.strip_timing();
    }
    let epochs_completed = log.records.last().map_or(done, |r| r.epoch);
    Checkpoint {
        epochs_completed,
        optimizer: Some(opt),
        ..Checkpoint::new(model.clone())
    }
    .save(&ck_path)?;
    log.write_csv(&out.join(RUNLOG_CSV))?;
    write_json(&out.join(RUNLOG_JSON), &log)?;
    let summary = Summary {
        seed: cfg.train.seed,
        precision: F::PRECISION,
        epochs_completed,
        final_train_q: log.final_train_q(),
        final_test_q: log.final_test_q(),
        wall_time_seconds: log.seconds,
        diverged_at: log.diverged_at,
        parameters: model.parameter_count(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    if let Some(epoch) = log.diverged_at {
        return Err(CliError::Failed(format!(
            "training diverged in epoch {epoch}; saved the state after epoch {epochs_completed}"
        )));
    }
    let correlation = if score {
        let (signal, truth) = eval_signal(data);
        match truth {
            Some(t) => Some(correlation_with_truth(&model.class_probabilities(&signal)?, t)?.best),
            None => None,
        }
    } else {
        None
    };
    Ok(TrainOutcome {
        final_q: summary.final_test_q.or(summary.final_train_q),
        correlation,
    })
}

pub fn train(g: &GlobalArgs, resume: bool, checkpoint_every: Option<usize>) -> Result<(), CliError> {
    let (cfg, spec) = resolve(g)?;
    let data = load_data(&cfg)?;
    with_precision!(cfg.train.precision, run_training(&cfg, &spec, &data, resume, checkpoint_every, false, false))?;
    Ok(())
}

/// Held-out signal when present, else the training signal.
fn eval_signal(data: &Loaded) -> (Vec<&[f64]>, Option<&[f64]>) {
    match &data.test {
        Some(t) => (refs(t), data.test_truth.as_deref()),
        None => (refs(&data.train), data.train_truth.as_deref()),
    }
}

#[derive(Serialize)]
struct CorrelationDoc {
    pearson: f64,
    best_class: usize,
    per_class: Vec<f64>,
    steps: usize,
    time_offset: isize,
}

#[derive(Serialize)]
struct EvalDoc {
    steps: usize,
    class_occupancy: Vec<f64>,
    empirical_ntic: f64,
    q: Option<f64>,
}

fn run_eval<F: Scalar>(cfg: &ExperimentConfig, ck_path: &Path, data: &Loaded) -> Result<(), CliError> {
    let ck = Checkpoint::<F>::load(ck_path)?;
    let model = ck.model;
    let out = &cfg.output;
    create_dir(out)?;
    let (signal, truth) = eval_signal(data);
    let s = model.class_probabilities(&signal)?;
    let off = s.time_offset();

    let mut series: Vec<Series> = (0..s.classes())
        .map(|c| {
            let pts = s
                .class_track(0, c)
                .into_iter()
                .enumerate()
                .map(|(t, p)| ((off + t as isize) as f64, p))
                .collect();
            Series::new(format!("class {c}"), thin(pts, 4000))
        })
        .collect();

    match (cfg.eval.correlation, truth) {
        (true, Some(truth)) => {
            let c = correlation_with_truth(&s, truth)?;
            write_json(
                &out.join("correlation.json"),
                &CorrelationDoc {
                    pearson: c.best,
                    best_class: c.best_class,
                    per_class: c.per_class,
                    steps: s.len(),
                    time_offset: off,
                },
            )?;
            eprintln!("pearson |r| = {:.4} (class {})", c.best, c.best_class);
        }
        (true, None) => eprintln!("warning: no ground truth; correlation skipped"),
        (false, _) => {}
    }
    if let Some(truth) = truth {
        let pts = (0..s.len())
            .map(|t| {
                let raw = off + t as isize;
                (raw as f64, truth[raw as usize])
            })
            .collect();
        series.push(Series {
            color: Some("#000000"),
            ..Series::new("truth", thin(pts, 4000))
        });
    }
    write_text(
        &out.join("overlay.svg"),
        &line_chart("Class probabilities", "time step", "probability", &series),
    )?;

    let graph = transition_graph(&s, cfg.eval.threshold)?;
    write_text(&out.join("transitions.json"), &graph.to_json()?)?;
    write_text(&out.join("transitions.dot"), &graph.to_dot())?;

    let classes = s.argmax_classes(0);
    let mut occupancy = vec![0.0; s.classes()];
    for &c in &classes {
        occupancy[c] += 1.0;
    }
    occupancy.iter_mut().for_each(|o| *o /= classes.len() as f64);
    let q = evaluate_q(&model, &signal, &cfg.train).ok();
    write_json(
        &out.join("eval.json"),
        &EvalDoc {
            steps: s.len(),
            class_occupancy: occupancy,
            empirical_ntic: empirical_ntic(&classes)?,
            q,
        },
    )?;

    let log_path = ck_path.with_file_name(RUNLOG_JSON);
    if log_path.exists() {
        let text = fs::read_to_string(&log_path).map_err(io_err(&log_path))?;
        let log: RunLog = serde_json::from_str(&text).map_err(NcgError::from)?;
        let mut curves = vec![Series::new(
            "train Q",
            log.records.iter().map(|r| (r.epoch as f64, r.train_q)).collect(),
        )];
        if log.records.iter().any(|r| r.test_q.is_some()) {
            curves.push(Series::new(
                "test Q",
                log.records.iter().filter_map(|r| r.test_q.map(|q| (r.epoch as f64, q))).collect(),
            ));
        }
        write_text(&out.join("training_curve.svg"), &line_chart("Training curve", "epoch", "Q", &curves))?;
    }
    Ok(())
}

pub fn eval(g: &GlobalArgs, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, _) = resolve(g)?;
    let ck_path = checkpoint.unwrap_or_else(|| cfg.output.join(CHECKPOINT_FILE));
    if !ck_path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} not found", ck_path.display())));
    }
    let precision = checkpoint_precision(&ck_path)?;
    let data = load_data(&cfg)?;
    with_precision!(precision, run_eval(&cfg, &ck_path, &data))
}

fn apply_param(base: &ExperimentConfig, param: &str, value: f64) -> Result<ExperimentConfig, CliError> {
    let mut cfg = base.clone();
    let int = || -> Result<usize, CliError> {
        if value >= 0.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(CliError::Config(format!("{param} needs a non-negative integer, got {value}")))
        }
    };
    match param {
        "cos_theta" | "theta" | "tau" | "n" => {
            let DataConfig::Noise { a, tau, n, .. } = &mut cfg.data else {
                return Err(CliError::Config(format!("sweeping {param} needs a noise data source")));
            };
            match param {
                "cos_theta" => *a = NoiseSpec::Ar1Cos { cos_theta: value },
                "theta" => *a = NoiseSpec::Ar1 { theta: value },
                "tau" => *tau = value,
                _ => *n = int()?,
            }
        }
        "lr" => cfg.train.lr = value,
        "batch_size" => cfg.train.batch_size = int()?,
        "epochs" => cfg.train.epochs = int()?,
        "offset" => {
            let mut spec = cfg.model.resolve().map_err(|e| CliError::Config(e.to_string()))?;
            spec.offset = int()?;
            cfg.model = ModelChoice::Spec(spec);
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown sweep parameter `{other}` (one of {})",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    Ok(cfg)
}

pub fn sweep(g: &GlobalArgs, param: &str, values: &[String], seeds: u64) -> Result<(), CliError> {
    let (base, _) = resolve(g)?;
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    if seeds == 0 {
        return Err(CliError::Config("sweep needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    for text in values {
        let value: f64 = text
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("sweep value `{text}` is not a number")))?;
        let cfg = apply_param(&base, param, value)?;
        let spec = cfg.validate()?;
        for i in 0..seeds {
            let mut c = cfg.clone();
            c.train.seed = base.train.seed + i;
            c.output = base
                .output
                .join("cells")
                .join(format!("{param}={}", text.trim()))
                .join(format!("seed={}", c.train.seed));
            cells.push((text.trim().to_owned(), c, spec.clone()));
        }
    }
    let threads = if deterministic() { 1 } else { g.threads.unwrap_or(1).max(1) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Failed(e.to_string()))?;
    let results: Vec<Result<TrainOutcome, CliError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|(_, cfg, spec)| {
                let data = load_data(cfg)?;
                with_precision!(cfg.train.precision, run_training(cfg, spec, &data, false, None, true, true))
            })
            .collect()
    });
    let mut csv = String::from("value,seed,pearson,final_Q,status\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for ((value, cfg, _), res) in cells.iter().zip(&results) {
        let row = match res {
            Ok(o) => format!("{value},{},{},{},ok\n", cfg.train.seed, fmt(o.correlation), fmt(o.final_q)),
            Err(e) => {
                eprintln!("cell {param}={value} seed={}: {e}", cfg.train.seed);
                let msg = e.to_string().replace([',', '\n'], " ");
                format!("{value},{},,,error: {msg}\n", cfg.train.seed)
            }
        };
        csv.push_str(&row);
    }
    create_dir(&base.output)?;
    write_text(&base.output.join("sweep.csv"), &csv)?;
    let failed = results.iter().filter(|r| r.is_err()).count();
    eprintln!("{} cells, {failed} failed", results.len());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckDoc<'a> {
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
    instances: usize,
    ops: &'a [ncg_core::gradcheck::OpSummary],
}

pub fn gradcheck(g: &GlobalArgs, instances: usize, inject_conv_sign_bug: bool) -> Result<(), CliError> {
    if instances == 0 {
        return Err(CliError::Config("instances must be positive".into()));
    }
    let cfg = GradcheckConfig::default();
    fault::set_conv_kernel_sign_flip(inject_conv_sign_bug);
    let start = Instant::now();
    let ops = run_suite(SUITE_OPS, instances, g.seed.unwrap_or(0), &cfg)?;
    fault::set_conv_kernel_sign_flip(false);
    println!(
        "{:<22} {:>9} {:>9} {:>6} {:>12} {:>12}  status",
        "op", "instances", "checked", "kinks", "max_abs_err", "max_rel_err"
    );
    for o in &ops {
        println!(
            "{:<22} {:>9} {:>9} {:>6} {:>12.3e} {:>12.3e}  {}",
            o.op,
            o.instances,
            o.report.checked,
            o.report.skipped_kinks,
            o.report.max_abs_err,
            o.report.max_rel_err,
            if o.passed() { "PASS" } else { "FAIL" }
        );
    }
    if !deterministic() {
        eprintln!("{:.1} s", start.elapsed().as_secs_f64());
    }
    if let Some(out) = &g.out {
        create_dir(out)?;
        write_json(
            &out.join("gradcheck.json"),
            &GradcheckDoc {
                h: cfg.h,
                rel_tol: cfg.rel_tol,
                abs_tol: cfg.abs_tol,
                instances,
                ops: &ops,
            },
        )?;
    }
    let failed: Vec<&str> = ops.iter().filter(|o| !o.passed()).map(|o| o.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
