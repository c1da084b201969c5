//! Synthetic noise benchmarks with known latent envelope, plus CSV I/O.
//!
//! Every source is zero-mean with unit variance. A mixture blends two
//! sources with the slowly varying envelope
//! `psi(t) = (1 + tanh(sin(2 pi t / tau))) / 2`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NcgError, Result};
use crate::rng::SeedSource;

pub const DEFAULT_TAU: f64 = 2000.0;
pub const DEFAULT_SAMPLES: usize = 500_000;

/// A noise source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// AR(1) process parameterized by the angle `theta` (radians).
    Ar1 { theta: f64 },
    /// AR(1) process parameterized by its lag-1 autocorrelation `cos(theta)`.
    Ar1Cos { cos_theta: f64 },
    Gaussian,
    Binary,
    TernaryBalanced,
    TernaryUnbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscreteKind {
    Binary,
    TernaryBalanced,
    TernaryUnbalanced,
}

impl DiscreteKind {
    /// Values drawn uniformly; each level set has mean 0 and variance 1.
    pub fn levels(self) -> Vec<f64> {
        let r3 = 3f64.sqrt();
        match self {
            DiscreteKind::Binary => vec![-1.0, 1.0],
            DiscreteKind::TernaryBalanced => {
                let a = 1.5f64.sqrt();
                vec![-a, 0.0, a]
            }
            DiscreteKind::TernaryUnbalanced => vec![-(1.0 + r3) / 2.0, (r3 - 1.0) / 2.0, 1.0],
        }
    }
}

impl NoiseSpec {
    /// AR(1) angle, when this is an AR(1) source.
    pub fn theta(&self) -> Option<f64> {
        match *self {
            NoiseSpec::Ar1 { theta } => Some(theta),
            NoiseSpec::Ar1Cos { cos_theta } => Some(cos_theta.acos()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Ar1 { theta } => check_theta(theta),
            NoiseSpec::Ar1Cos { cos_theta } => {
                if !(0.0..1.0).contains(&cos_theta) {
                    return Err(NcgError::invalid(format!(
                        "cos_theta must be in [0, 1), got {cos_theta}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn discrete_kind(&self) -> Option<DiscreteKind> {
        match self {
            NoiseSpec::Binary => Some(DiscreteKind::Binary),
            NoiseSpec::TernaryBalanced => Some(DiscreteKind::TernaryBalanced),
            NoiseSpec::TernaryUnbalanced => Some(DiscreteKind::TernaryUnbalanced),
            _ => None,
        }
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= std::f64::consts::FRAC_PI_2) {
        return Err(NcgError::invalid(format!(
            "AR(1) theta must be in (0, pi/2], got {theta}"
        )));
    }
    Ok(())
}

/// How a signal was produced, recorded alongside generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SignalMeta {
    Noise { spec: NoiseSpec },
    Mixture { a: NoiseSpec, b: NoiseSpec, tau: f64 },
    Csv { path: PathBuf, column: String },
    Custom,
}

/// A raw timeseries with an optional ground-truth envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub truth: Option<Vec<f64>>,
    pub meta: SignalMeta,
    pub seed: Option<u64>,
}

impl Signal {
    pub fn new(samples: Vec<f64>, truth: Option<Vec<f64>>, meta: SignalMeta) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(NcgError::invalid("signal samples must be finite"));
        }
        if let Some(truth) = &truth {
            if truth.len() != samples.len() {
                return Err(NcgError::invalid(format!(
                    "truth has {} samples, signal has {}",
                    truth.len(),
                    samples.len()
                )));
            }
            if truth.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(NcgError::invalid("truth values must lie in [0, 1]"));
            }
        }
        Ok(Self {
            samples,
            truth,
            meta,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn check_len(n: usize) -> Result<()> {
    if n == 0 {
        return Err(NcgError::invalid("signal length must be at least 1"));
    }
    Ok(())
}

fn ar1_samples<R: Rng + ?Sized>(theta: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let (c, s) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(n);
    // start in the stationary law N(0, 1)
    let mut x: f64 = rng.sample(StandardNormal);
    out.push(x);
    for _ in 1..n {
        let eta: f64 = rng.sample(StandardNormal);
        x = c * x + s * eta;
        out.push(x);
    }
    out
}

/// `x_t = cos(theta) x_{t-1} + sin(theta) eta_t` with standard normal
/// innovations, started from the stationary distribution.
pub fn gen_ar1<R: Rng + ?Sized>(theta: f64, n: usize, rng: &mut R) -> Result<Signal> {
    check_theta(theta)?;
    check_len(n)?;
    Signal::new(
        ar1_samples(theta, n, rng),
        None,
        SignalMeta::Noise {
            spec: NoiseSpec::Ar1 { theta },
        },
    )
}

/// Uniform iid draws from a discrete level set.
pub fn gen_discrete<R: Rng + ?Sized>(kind: DiscreteKind, n: usize, rng: &mut R) -> Result<Signal> {
    check_len(n)?;
    let spec = match kind {
        DiscreteKind::Binary => NoiseSpec::Binary,
        DiscreteKind::TernaryBalanced => NoiseSpec::TernaryBalanced,
        DiscreteKind::TernaryUnbalanced => NoiseSpec::TernaryUnbalanced,
    };
    Signal::new(discrete_samples(kind, n, rng), None, SignalMeta::Noise { spec })
}

fn discrete_samples<R: Rng + ?Sized>(kind: DiscreteKind, n: usize, rng: &mut R) -> Vec<f64> {
    let levels = kind.levels();
    (0..n).map(|_| levels[rng.random_range(0..levels.len())]).collect()
}

/// Any [`NoiseSpec`] source.
pub fn gen_noise<R: Rng + ?Sized>(spec: &NoiseSpec, n: usize, rng: &mut R) -> Result<Signal> {
    spec.validate()?;
    check_len(n)?;
    Signal::new(noise_samples(spec, n, rng), None, SignalMeta::Noise { spec: *spec })
}

fn noise_samples<R: Rng + ?Sized>(spec: &NoiseSpec, n: usize, rng: &mut R) -> Vec<f64> {
    if let Some(theta) = spec.theta() {
        return ar1_samples(theta, n, rng);
    }
    if let Some(kind) = spec.discrete_kind() {
        return discrete_samples(kind, n, rng);
    }
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `(1 + tanh(sin(2 pi t / tau))) / 2`, periodic in `t` with period `tau`.
pub fn envelope(t: f64, tau: f64) -> f64 {
    debug_assert!(tau > 0.0);
    0.5 * (1.0 + (2.0 * std::f64::consts::PI * t / tau).sin().tanh())
}

/// `psi(t) a_t + (1 - psi(t)) b_t` with the standard envelope; the envelope
/// is stored as the ground truth.
pub fn gen_mixture<R: Rng + ?Sized>(
    a: &NoiseSpec,
    b: &NoiseSpec,
    tau: f64,
    n: usize,
    rng: &mut R,
) -> Result<Signal> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(NcgError::invalid(format!("tau must be positive, got {tau}")));
    }
    let mut sig = gen_mixture_with(a, b, n, rng, |t| envelope(t as f64, tau))?;
    sig.meta = SignalMeta::Mixture { a: *a, b: *b, tau };
    Ok(sig)
}

/// Mixture under an arbitrary envelope with values in `[0, 1]`.
pub fn gen_mixture_with<R: Rng + ?Sized>(
    a: &NoiseSpec,
    b: &NoiseSpec,
    n: usize,
    rng: &mut R,
    psi: impl Fn(usize) -> f64,
) -> Result<Signal> {
    a.validate()?;
    b.validate()?;
    check_len(n)?;
    let xa = noise_samples(a, n, rng);
    let xb = noise_samples(b, n, rng);
    let truth: Vec<f64> = (0..n).map(psi).collect();
    let samples = truth
        .iter()
        .zip(xa.iter().zip(&xb))
        .map(|(&p, (&u, &v))| p * u + (1.0 - p) * v)
        .collect();
    Signal::new(samples, Some(truth), SignalMeta::Custom)
}

/// Parameters of a two-source mixture benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub a: NoiseSpec,
    pub b: NoiseSpec,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_samples")]
    pub n: usize,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

impl Default for MixtureConfig {
    /// Correlated-noise task with `cos(theta) = sqrt(3)/2`.
    fn default() -> Self {
        Self {
            a: NoiseSpec::Ar1Cos {
                cos_theta: 3f64.sqrt() / 2.0,
            },
            b: NoiseSpec::Gaussian,
            tau: DEFAULT_TAU,
            n: DEFAULT_SAMPLES,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        self.a.validate()?;
        self.b.validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(NcgError::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        check_len(self.n)
    }

    pub fn generate(&self, seed: u64) -> Result<Signal> {
        self.validate()?;
        let mut rng = SeedSource::new(seed).stream("signal");
        let mut sig = gen_mixture(&self.a, &self.b, self.tau, self.n, &mut rng)?;
        sig.seed = Some(seed);
        Ok(sig)
    }
}

/// Sidecar describing a generated train/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub mixture: MixtureConfig,
    pub train_seed: u64,
    pub test_seed: u64,
}

/// Independent train and test signals drawn from the same mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Signal,
    pub test: Signal,
    pub meta: Option<DatasetMeta>,
}

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const META_FILE: &str = "meta.json";

impl Dataset {
    pub fn generate(mixture: &MixtureConfig, train_seed: u64, test_seed: u64) -> Result<Self> {
        Ok(Self {
            train: mixture.generate(train_seed)?,
            test: mixture.generate(test_seed)?,
            meta: Some(DatasetMeta {
                mixture: mixture.clone(),
                train_seed,
                test_seed,
            }),
        })
    }

    /// Writes `train.csv`, `test.csv`, `truth.csv` (when the signals carry
    /// ground truth) and `meta.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| NcgError::io(dir, e))?;
        write_column(&dir.join(TRAIN_FILE), "x", &self.train.samples)?;
        write_column(&dir.join(TEST_FILE), "x", &self.test.samples)?;
        if let (Some(a), Some(b)) = (&self.train.truth, &self.test.truth) {
            write_columns(&dir.join(TRUTH_FILE), &["train_psi", "test_psi"], &[a, b])?;
        }
        if let Some(meta) = &self.meta {
            let path = dir.join(META_FILE);
            let text = serde_json::to_string_pretty(meta)? + "\n";
            fs::write(&path, text).map_err(|e| NcgError::io(path, e))?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Dataset::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let col = ColumnSelector::Index(0);
        let mut train = ingest_csv(&dir.join(TRAIN_FILE), &col)?;
        let mut test = ingest_csv(&dir.join(TEST_FILE), &col)?;
        let truth_path = dir.join(TRUTH_FILE);
        if truth_path.exists() {
            let cols = ingest_csv_multi(&truth_path)?;
            if cols.len() != 2 {
                return Err(NcgError::invalid(format!(
                    "{}: expected 2 truth columns",
                    truth_path.display()
                )));
            }
            train = Signal::new(train.samples, Some(cols[0].clone()), train.meta)?;
            test = Signal::new(test.samples, Some(cols[1].clone()), test.meta)?;
        }
        let meta_path = dir.join(META_FILE);
        let meta = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| NcgError::io(&meta_path, e))?;
            let meta: DatasetMeta = serde_json::from_str(&text)?;
            train.seed = Some(meta.train_seed);
            test.seed = Some(meta.test_seed);
            Some(meta)
        } else {
            None
        };
        Ok(Self { train, test, meta })
    }
}

/// Writes a single headed column, one value per line.
pub fn write_column(path: &Path, header: &str, values: &[f64]) -> Result<()> {
    write_columns(path, &[header], &[values])
}

pub fn write_columns(path: &Path, headers: &[&str], columns: &[&[f64]]) -> Result<()> {
    let n = columns.first().map_or(0, |c| c.len());
    let mut out = String::with_capacity(n * 24);
    out.push_str(&headers.join(","));
    out.push('\n');
    for i in 0..n {
        for (j, col) in columns.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{}", col[i]).expect("write to string");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| NcgError::io(path, e))
}

/// Which CSV column to read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnSelector {
    Index(usize),
    Name(String),
}

impl std::fmt::Display for ColumnSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ColumnSelector::Index(i) => write!(f, "#{i}"),
            ColumnSelector::Name(n) => f.write_str(n),
        }
    }
}

struct CsvTable {
    header: Option<Vec<String>>,
    // (line number, fields)
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => NcgError::io(path, io),
            other => NcgError::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let mut rows: Vec<(u64, Vec<String>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| NcgError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    // A first row that is not entirely numeric is a header.
    let header = match rows.first() {
        Some((_, fields)) if fields.iter().any(|f| f.parse::<f64>().is_err()) => Some(rows.remove(0).1),
        _ => None,
    };
    Ok(CsvTable { header, rows })
}

fn parse_cell(path: &Path, line: u64, cell: &str) -> Result<f64> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(NcgError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("`{cell}` is not a finite number"),
        }),
    }
}

/// Reads one numeric column. A non-numeric first row is treated as a header.
pub fn ingest_csv(path: &Path, column: &ColumnSelector) -> Result<Signal> {
    let table = read_table(path)?;
    let index = match column {
        ColumnSelector::Index(i) => *i,
        ColumnSelector::Name(name) => table
            .header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| NcgError::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("no column named `{name}`"),
            })?,
    };
    let mut samples = Vec::with_capacity(table.rows.len());
    for (line, fields) in &table.rows {
        let cell = fields.get(index).ok_or_else(|| NcgError::Parse {
            path: path.to_path_buf(),
            line: *line,
            msg: format!("missing column {index}"),
        })?;
        samples.push(parse_cell(path, *line, cell)?);
    }
    Signal::new(
        samples,
        None,
        SignalMeta::Csv {
            path: path.to_path_buf(),
            column: column.to_string(),
        },
    )
}

/// Reads every column, returning `[channel][time]`.
pub fn ingest_csv_multi(path: &Path) -> Result<Vec<Vec<f64>>> {
    Ok(CsvColumns::read(path)?.columns)
}

/// All columns of a numeric CSV file, with the header when present.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvColumns {
    pub path: PathBuf,
    pub header: Option<Vec<String>>,
    /// `[column][row]`.
    pub columns: Vec<Vec<f64>>,
}

impl CsvColumns {
    pub fn read(path: &Path) -> Result<Self> {
        let table = read_table(path)?;
        let width = table
            .header
            .as_ref()
            .map(Vec::len)
            .or_else(|| table.rows.first().map(|r| r.1.len()))
            .unwrap_or(0);
        let mut columns = vec![Vec::with_capacity(table.rows.len()); width];
        for (line, fields) in &table.rows {
            if fields.len() != width {
                return Err(NcgError::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    msg: format!("expected {width} columns, found {}", fields.len()),
                });
            }
            for (ch, cell) in columns.iter_mut().zip(fields) {
                ch.push(parse_cell(path, *line, cell)?);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            header: table.header,
            columns,
        })
    }

    pub fn index_of(&self, column: &ColumnSelector) -> Result<usize> {
        let found = match column {
            ColumnSelector::Index(i) => Some(*i).filter(|&i| i < self.columns.len()),
            ColumnSelector::Name(name) => self.header.as_ref().and_then(|h| h.iter().position(|c| c == name)),
        };
        found.ok_or_else(|| NcgError::Parse {
            path: self.path.clone(),
            line: 1,
            msg: format!("no column {column}"),
        })
    }

    pub fn column(&self, column: &ColumnSelector) -> Result<&[f64]> {
        Ok(&self.columns[self.index_of(column)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rng(seed: u64) -> crate::rng::StreamRng {
        SeedSource::new(seed).stream("test")
    }

    #[test]
    fn level_sets_have_zero_mean_unit_variance() {
        for kind in [
            DiscreteKind::Binary,
            DiscreteKind::TernaryBalanced,
            DiscreteKind::TernaryUnbalanced,
        ] {
            let l = kind.levels();
            let n = l.len() as f64;
            let mean = l.iter().sum::<f64>() / n;
            let var = l.iter().map(|v| v * v).sum::<f64>() / n;
            assert!(mean.abs() < 1e-15, "{kind:?} mean {mean}");
            assert!((var - 1.0).abs() < 1e-15, "{kind:?} var {var}");
        }
    }

    #[test]
    fn envelope_examples() {
        assert_eq!(envelope(0.0, 2000.0), 0.5);
        assert!((envelope(500.0, 2000.0) - 0.880797).abs() < 1e-6);
        for t in [0.0, 13.0, 777.0, 1999.5] {
            assert!((envelope(t + 2000.0, 2000.0) - envelope(t, 2000.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_range_is_enforced() {
        assert!(gen_ar1(0.0, 10, &mut rng(1)).is_err());
        assert!(gen_ar1(PI / 2.0 + 1e-9, 10, &mut rng(1)).is_err());
        assert!(gen_ar1(PI / 2.0, 10, &mut rng(1)).is_ok());
        assert!(gen_ar1(0.3, 0, &mut rng(1)).is_err());
        assert!(NoiseSpec::Ar1Cos { cos_theta: 1.0 }.validate().is_err());
    }

    #[test]
    fn generators_are_reproducible() {
        let a = gen_mixture(&NoiseSpec::Binary, &NoiseSpec::Gaussian, 100.0, 500, &mut rng(9)).unwrap();
        let b = gen_mixture(&NoiseSpec::Binary, &NoiseSpec::Gaussian, 100.0, 500, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        let c = gen_mixture(&NoiseSpec::Binary, &NoiseSpec::Gaussian, 100.0, 500, &mut rng(10)).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn mixture_truth_is_envelope() {
        let s = gen_mixture(&NoiseSpec::Gaussian, &NoiseSpec::Binary, 300.0, 1000, &mut rng(2)).unwrap();
        let truth = s.truth.unwrap();
        for (t, &v) in truth.iter().enumerate() {
            assert_eq!(v, envelope(t as f64, 300.0));
        }
        assert!(gen_mixture(&NoiseSpec::Gaussian, &NoiseSpec::Binary, 0.0, 10, &mut rng(2)).is_err());
    }

    #[test]
    fn unit_envelope_yields_pure_first_component() {
        let a = NoiseSpec::Binary;
        let mix = gen_mixture_with(&a, &NoiseSpec::Gaussian, 200, &mut rng(5), |_| 1.0).unwrap();
        let pure = noise_samples(&a, 200, &mut rng(5));
        assert_eq!(mix.samples, pure);
    }

    #[test]
    fn default_mixture_matches_benchmark_shape() {
        let cfg = MixtureConfig::default();
        assert_eq!(cfg.n, 500_000);
        assert_eq!(cfg.tau, 2000.0);
        assert!((cfg.a.theta().unwrap().cos() - 3f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn noise_spec_json_forms() {
        let s: NoiseSpec = serde_json::from_str(r#"{"kind":"ar1_cos","cos_theta":0.5}"#).unwrap();
        assert_eq!(s, NoiseSpec::Ar1Cos { cos_theta: 0.5 });
        let s: NoiseSpec = serde_json::from_str(r#"{"kind":"ternary_balanced"}"#).unwrap();
        assert_eq!(s, NoiseSpec::TernaryBalanced);
        assert!(serde_json::from_str::<NoiseSpec>(r#"{"kind":"ar1","theta":0.5,"x":1}"#).is_err());
    }

    #[test]
    fn csv_plain_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "1\n2\n3\n4\n").unwrap();
        let s = ingest_csv(&p, &ColumnSelector::Index(0)).unwrap();
        assert_eq!(s.samples, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(s.truth.is_none());
    }

    #[test]
    fn csv_named_column_and_scientific_notation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "time,value\n0,1e-3\n1,-2.5E2\n").unwrap();
        let s = ingest_csv(&p, &ColumnSelector::Name("value".into())).unwrap();
        assert_eq!(s.samples, vec![1e-3, -250.0]);
        assert!(ingest_csv(&p, &ColumnSelector::Name("nope".into())).is_err());
        let multi = ingest_csv_multi(&p).unwrap();
        assert_eq!(multi, vec![vec![0.0, 1.0], vec![1e-3, -250.0]]);
    }

    #[test]
    fn csv_bad_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "1\n2\nabc\n4\n").unwrap();
        let err = ingest_csv(&p, &ColumnSelector::Index(0)).unwrap_err();
        assert!(matches!(err, NcgError::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let cfg = MixtureConfig {
            n: 300,
            ..MixtureConfig::default()
        };
        let ds = Dataset::generate(&cfg, 1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.train.samples, ds.train.samples);
        assert_eq!(back.test.truth, ds.test.truth);
        assert_eq!(back.meta, ds.meta);
    }
}
