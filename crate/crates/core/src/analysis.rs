//! Evaluation of learned coarse-grainings and exact information measures for
//! finite Markov chains.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{NcgError, Result};
use crate::linalg;
use crate::loss::ClassDistributionSeries;
use crate::model::ModelState;
use crate::scalar::Scalar;
use crate::signals::Signal;

pub const DEFAULT_TRANSITION_THRESHOLD: f64 = 0.2;

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NcgError::invalid(format!("pearson: lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(NcgError::invalid("pearson needs at least two points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(NcgError::invalid("pearson: zero variance"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Anything that maps a raw signal to class distributions.
pub trait ClassProbabilities {
    /// Class distributions for a signal given as one slice per channel, as
    /// one batch item; `time_offset` is the raw index of step 0.
    fn class_probabilities(&self, channels: &[&[f64]]) -> Result<ClassDistributionSeries<f64>>;
}

impl<F: Scalar> ClassProbabilities for ModelState<F> {
    fn class_probabilities(&self, channels: &[&[f64]]) -> Result<ClassDistributionSeries<f64>> {
        let s = self.transform_channels(channels)?;
        Ok(ClassDistributionSeries::new_unchecked(s.values().cast(), s.time_offset()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCorrelation {
    /// Signed correlation of each class track with the envelope.
    pub per_class: Vec<f64>,
    pub best_class: usize,
    /// Largest `|r|` over classes.
    pub best: f64,
}

/// Correlation between class probabilities and the true envelope, on the
/// raw indices the model covers. Labels are arbitrary, so the score is the
/// largest absolute correlation over classes. A class whose track is
/// constant scores 0.
pub fn eval_envelope_correlation<M: ClassProbabilities + ?Sized>(
    model: &M,
    signal: &Signal,
) -> Result<EnvelopeCorrelation> {
    let truth = signal
        .truth
        .as_ref()
        .ok_or_else(|| NcgError::invalid("signal has no ground-truth envelope"))?;
    let s = model.class_probabilities(&[&signal.samples])?;
    correlation_with_truth(&s, truth)
}

/// [`eval_envelope_correlation`] on an already computed series.
pub fn correlation_with_truth(s: &ClassDistributionSeries<f64>, truth: &[f64]) -> Result<EnvelopeCorrelation> {
    let off = usize::try_from(s.time_offset()).map_err(|_| NcgError::invalid("negative time offset"))?;
    let truth = truth
        .get(off..off + s.len())
        .ok_or_else(|| NcgError::invalid("class series extends past the envelope"))?;
    let mut per_class = Vec::with_capacity(s.classes());
    for c in 0..s.classes() {
        let r = match pearson(&s.class_track(0, c), truth) {
            Ok(r) => r,
            Err(NcgError::InvalidArgument(msg)) if msg.contains("zero variance") => 0.0,
            Err(e) => return Err(e),
        };
        per_class.push(r);
    }
    let (best_class, best) = per_class
        .iter()
        .map(|r| r.abs())
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, r)| if r > acc.1 { (i, r) } else { acc });
    Ok(EnvelopeCorrelation {
        per_class,
        best_class,
        best,
    })
}

/// Empirical first-order transitions between argmax classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionGraph {
    pub labels: Vec<String>,
    /// Row-stochastic `P(next | prev)`; rows of classes never left are zero.
    pub matrix: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub probability: f64,
}

impl TransitionGraph {
    pub fn from_sequence(seq: &[usize], classes: usize, threshold: f64) -> Result<Self> {
        if seq.len() < 2 {
            return Err(NcgError::invalid("transition graph needs at least two steps"));
        }
        if let Some(&bad) = seq.iter().find(|&&c| c >= classes) {
            return Err(NcgError::invalid(format!("class {bad} out of range {classes}")));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for w in seq.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
        let matrix = counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect();
        Ok(Self {
            labels: (0..classes).map(|c| format!("class {c}")).collect(),
            matrix,
            counts,
            threshold,
        })
    }

    /// Edges with probability above the threshold.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for (from, row) in self.matrix.iter().enumerate() {
            for (to, &p) in row.iter().enumerate() {
                if p > self.threshold {
                    out.push(Edge { from, to, probability: p });
                }
            }
        }
        out
    }

    pub fn self_transition(&self, class: usize) -> f64 {
        self.matrix[class][class]
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            graph: &'a TransitionGraph,
            edges: Vec<Edge>,
        }
        Ok(serde_json::to_string_pretty(&Doc {
            graph: self,
            edges: self.edges(),
        })? + "\n")
    }

    /// Graphviz `digraph` with one node per class that occurs and one edge
    /// per retained transition.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph transitions {\n");
        for (i, label) in self.labels.iter().enumerate() {
            let seen = self.counts[i].iter().sum::<u64>() > 0 || self.counts.iter().any(|r| r[i] > 0);
            if seen {
                let _ = writeln!(out, "  {i} [label=\"{label}\"];");
            }
        }
        for e in self.edges() {
            let _ = writeln!(out, "  {} -> {} [label=\"{:.3}\"];", e.from, e.to, e.probability);
        }
        out.push_str("}\n");
        out
    }
}

/// Transition graph of the argmax classes of batch item 0.
pub fn transition_graph<F: Scalar>(s: &ClassDistributionSeries<F>, threshold: f64) -> Result<TransitionGraph> {
    TransitionGraph::from_sequence(&s.argmax_classes(0), s.classes(), threshold)
}

/// Entropy in nats of a probability vector (zero entries contribute 0).
fn h(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter().filter(|&x| x > 0.0).map(|x| -x * x.ln()).sum()
}

/// Stationary Markov chain on `X` with a deterministic coarse-graining
/// `Y = f(X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteProcess {
    /// `kernel[x][x'] = P(x' | x)`.
    pub kernel: Vec<Vec<f64>>,
    /// `map[x] = f(x)`.
    pub map: Vec<usize>,
    pub y_size: usize,
    pub stationary: Vec<f64>,
}

impl DiscreteProcess {
    pub fn new(kernel: Vec<Vec<f64>>, map: Vec<usize>, y_size: usize) -> Result<Self> {
        let n = kernel.len();
        if n == 0 || map.len() != n {
            return Err(NcgError::invalid("kernel and map must cover the same non-empty alphabet"));
        }
        for (i, row) in kernel.iter().enumerate() {
            if row.len() != n {
                return Err(NcgError::invalid(format!("kernel row {i} has {} entries", row.len())));
            }
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(NcgError::invalid(format!("kernel row {i} is not a distribution")));
            }
        }
        if map.iter().any(|&y| y >= y_size) {
            return Err(NcgError::invalid("map value outside the coarse alphabet"));
        }
        let stationary = stationary_distribution(&kernel)?;
        Ok(Self {
            kernel,
            map,
            y_size,
            stationary,
        })
    }

    pub fn x_size(&self) -> usize {
        self.kernel.len()
    }

    /// Same chain with `Y = X`.
    pub fn with_identity_map(&self) -> Self {
        Self {
            map: (0..self.x_size()).collect(),
            y_size: self.x_size(),
            ..self.clone()
        }
    }

    /// `P(x_t = x, x_{t+1} = x')` under the stationary distribution.
    fn pair(&self, x: usize, x2: usize) -> f64 {
        self.stationary[x] * self.kernel[x][x2]
    }
}

fn stationary_distribution(kernel: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = kernel.len();
    // The lazy chain (P + I) / 2 has the same fixed points and is aperiodic.
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..200_000 {
        let mut next = vec![0.0; n];
        for (x, row) in kernel.iter().enumerate() {
            for (x2, &p) in row.iter().enumerate() {
                next[x2] += pi[x] * p;
            }
        }
        let mut delta = 0.0f64;
        for (p, q) in pi.iter_mut().zip(&next) {
            let v = 0.5 * (*p + q);
            delta = delta.max((v - *p).abs());
            *p = v;
        }
        if delta < 1e-12 {
            return finish_stationary(kernel, pi);
        }
    }
    // Replace one balance equation by normalization and solve directly.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = kernel[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    let mut b = vec![0.0; n];
    for j in 0..n {
        a[(n - 1) * n + j] = 1.0;
    }
    b[n - 1] = 1.0;
    let pi = linalg::solve(&a, &b).ok_or_else(|| NcgError::invalid("no unique stationary distribution"))?;
    finish_stationary(kernel, pi)
}

fn finish_stationary(kernel: &[Vec<f64>], mut pi: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    let n = pi.len();
    for x2 in 0..n {
        let v: f64 = (0..n).map(|x| pi[x] * kernel[x][x2]).sum();
        if (v - pi[x2]).abs() > 1e-10 {
            return Err(NcgError::invalid("stationary distribution did not converge"));
        }
    }
    Ok(pi)
}

/// `H(X_{t+1}) - H(X_{t+1} | X_t)` in nats.
pub fn predictive_information(p: &DiscreteProcess) -> f64 {
    let n = p.x_size();
    let h_next = h((0..n).map(|x2| (0..n).map(|x| p.pair(x, x2)).sum::<f64>()));
    let h_joint = h((0..n).flat_map(|x| (0..n).map(move |x2| p.pair(x, x2))));
    let h_now = h(p.stationary.iter().copied());
    h_next - (h_joint - h_now)
}

/// `I(X_t : Y_{t+1}) - I(Y_{t+1} : X_t | Y_t)`, each term expanded into
/// entropies of marginals of the joint law of `(X_t, Y_t, Y_{t+1})`.
pub fn ntic(p: &DiscreteProcess) -> f64 {
    let (nx, ny) = (p.x_size(), p.y_size);
    // joint over (x, y') ; y is f(x)
    let mut x_y2 = vec![vec![0.0; ny]; nx];
    for (x, row) in x_y2.iter_mut().enumerate() {
        for x2 in 0..nx {
            row[p.map[x2]] += p.pair(x, x2);
        }
    }
    let mut y_y2 = vec![vec![0.0; ny]; ny];
    let mut x_y = vec![vec![0.0; ny]; nx];
    let mut px = vec![0.0; nx];
    let mut py = vec![0.0; ny];
    let mut py2 = vec![0.0; ny];
    for x in 0..nx {
        let y = p.map[x];
        for y2 in 0..ny {
            let v = x_y2[x][y2];
            y_y2[y][y2] += v;
            x_y[x][y] += v;
            px[x] += v;
            py[y] += v;
            py2[y2] += v;
        }
    }
    let flat = |m: &Vec<Vec<f64>>| h(m.iter().flatten().copied());
    let h_x = h(px);
    let h_y = h(py);
    let h_y2 = h(py2);
    let h_x_y2 = flat(&x_y2);
    let h_x_y = flat(&x_y);
    let h_y_y2 = flat(&y_y2);
    // (x, y, y') has the same law as (x, y') because y is a function of x
    let h_x_y_y2 = h_x_y2;
    let i_x_y2 = h_x + h_y2 - h_x_y2;
    let i_y2_x_given_y = h_y_y2 + h_x_y - h_y - h_x_y_y2;
    i_x_y2 - i_y2_x_given_y
}

/// `H(Y_{t+1}) - H(Y_{t+1} | Y_t)` computed from the coarse pair law
/// `P(y, y')` and conditionals `P(y' | y)`.
pub fn coarse_predictive_information(p: &DiscreteProcess) -> f64 {
    let ny = p.y_size;
    let mut joint = vec![vec![0.0; ny]; ny];
    for x in 0..p.x_size() {
        for x2 in 0..p.x_size() {
            joint[p.map[x]][p.map[x2]] += p.pair(x, x2);
        }
    }
    let mut h_next = 0.0;
    for y2 in 0..ny {
        let q: f64 = (0..ny).map(|y| joint[y][y2]).sum();
        if q > 0.0 {
            h_next -= q * q.ln();
        }
    }
    let mut h_cond = 0.0;
    for row in &joint {
        let py: f64 = row.iter().sum();
        if py == 0.0 {
            continue;
        }
        for &v in row {
            if v > 0.0 {
                h_cond -= v * (v / py).ln();
            }
        }
    }
    h_next - h_cond
}

/// Plug-in estimate of `H(Y_{t+1}) - H(Y_{t+1} | Y_t)` from a class
/// sequence. No bias correction.
pub fn empirical_ntic(seq: &[usize]) -> Result<f64> {
    if seq.len() < 2 {
        return Err(NcgError::invalid("need at least two steps"));
    }
    let k = seq.iter().max().copied().unwrap_or(0) + 1;
    let mut pairs = vec![0u64; k * k];
    for w in seq.windows(2) {
        pairs[w[0] * k + w[1]] += 1;
    }
    let n = (seq.len() - 1) as f64;
    let mut first = vec![0u64; k];
    let mut second = vec![0u64; k];
    for a in 0..k {
        for b in 0..k {
            first[a] += pairs[a * k + b];
            second[b] += pairs[a * k + b];
        }
    }
    let freq = |c: &[u64]| h(c.iter().map(|&c| c as f64 / n));
    let h_y2 = freq(&second);
    let h_pair = freq(&pairs);
    let h_y = freq(&first);
    Ok(h_y2 - (h_pair - h_y))
}
