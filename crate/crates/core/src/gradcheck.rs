//! Central finite-difference gradient checks.
//!
//! The harness rebuilds a computation from perturbed input tensors and
//! compares `(f(x + h) - f(x - h)) / 2h` with the reverse-mode gradient for
//! every input element. Elements whose perturbation moves any leaky-ReLU
//! input across zero are skipped and counted.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{BatchNormMode, Mode, RunningStats, Tape, Tensor, Var};
use crate::error::{NcgError, Result};
use crate::loss::ncg_loss_on_tape;
use crate::model::{LayerSpec, ModelSpec, ModelState};
use crate::rng::{SeedSource, StreamRng};

/// Analytic gradients smaller than this fall back to the absolute test.
pub const ABS_FALLBACK_BELOW: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub h: f64,
    /// Relative tolerance.
    pub rel_tol: f64,
    /// Absolute differences at or below this pass when the analytic
    /// gradient is tiny.
    pub abs_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    /// Largest relative error over elements that did not take the absolute
    /// fallback.
    pub max_rel_err: f64,
    /// Largest absolute difference over all checked elements.
    pub max_abs_err: f64,
    pub checked: usize,
    pub failures: usize,
    pub skipped_kinks: usize,
    /// `(input, element)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn merge(&mut self, other: &GradcheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self.failures += other.failures;
        self.skipped_kinks += other.skipped_kinks;
    }
}

/// A computation rebuilt from scratch for each evaluation: returns the tape,
/// the scalar output and the handles of the checked inputs.
pub trait Probe: Fn(&[Tensor<f64>]) -> Result<(Tape<f64>, Var, Vec<Var>)> {}
impl<T: Fn(&[Tensor<f64>]) -> Result<(Tape<f64>, Var, Vec<Var>)>> Probe for T {}

/// Checks all input elements of a computation.
pub fn gradcheck_fn(inputs: &[Tensor<f64>], probe: impl Probe, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (mut tape, out, vars) = probe(inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    let mut report = GradcheckReport::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let base = input.data()[e];
            work[i].data_mut()[e] = base + cfg.h;
            let (tp, op, _) = probe(&work)?;
            work[i].data_mut()[e] = base - cfg.h;
            let (tm, om, _) = probe(&work)?;
            work[i].data_mut()[e] = base;
            if tp.kink_signature() != tm.kink_signature() {
                report.skipped_kinks += 1;
                continue;
            }
            let fp = tp.value(op).data()[0];
            let fm = tm.value(om).data()[0];
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic[i].data()[e];
            report.checked += 1;
            let diff = (a - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(diff);
            if a.abs() < ABS_FALLBACK_BELOW && diff <= cfg.abs_tol {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, e));
            }
            if rel >= cfg.rel_tol {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

/// Checks a computation recorded directly on a tape whose leaves are the
/// inputs.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    gradcheck_fn(
        inputs,
        |ts: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars = ts.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
            let out = build(&mut tape, &vars)?;
            Ok((tape, out, vars))
        },
        cfg,
    )
}

/// Aggregate result for one op over many random instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpSummary {
    pub op: String,
    pub instances: usize,
    pub report: GradcheckReport,
}

impl OpSummary {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.instances > 0
    }
}

pub const SUITE_OPS: &[&str] = &[
    "conv1d",
    "leaky_relu",
    "batch_norm_train",
    "batch_norm_infer",
    "dropout",
    "softmax",
    "slice",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "neg_entropy_of_mean",
    "cross_entropy",
    "log_det_cov",
    "ncg_loss",
    "ncg_network",
];

/// Entries uniform in [-2, 2].
fn uniform(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect()).expect("shape")
}

/// Uniform entries at least `margin` away from zero.
fn off_zero(rng: &mut StreamRng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let mut t = uniform(rng, shape);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin } * (1.0 + rng.random::<f64>());
        }
    }
    t
}

fn dims(rng: &mut StreamRng) -> [usize; 3] {
    [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=8)]
}

/// Weighted sum with fixed random weights, so every output element gets a
/// distinct upstream gradient.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = SeedSource::new(seed).stream("projection");
    let w = tape.constant(uniform(&mut rng, &shape))?;
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn one_instance(op: &str, rng: &mut StreamRng, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let pseed: u64 = rng.random();
    match op {
        "conv1d" => {
            let [b, ci, _] = dims(rng);
            let co = rng.random_range(1..=3);
            let w = rng.random_range(1..=4);
            let t = w + rng.random_range(0..6);
            let inputs = [uniform(rng, &[b, ci, t]), uniform(rng, &[co, ci, w]), uniform(rng, &[co])];
            gradcheck(&inputs, |tp, v| {
                let y = tp.conv1d(v[0], v[1], v[2])?;
                project(tp, y, pseed)
            }, cfg)
        }
        "leaky_relu" => {
            let alpha = rng.random_range(0.0..0.3);
            let shape = dims(rng);
            let inputs = [off_zero(rng, &shape, 1e-3)];
            gradcheck(&inputs, |tp, v| {
                let y = tp.leaky_relu(v[0], alpha)?;
                project(tp, y, pseed)
            }, cfg)
        }
        "batch_norm_train" => {
            let [b, c, t] = dims(rng);
            let inputs = [uniform(rng, &[b, c, t]), uniform(rng, &[c]), uniform(rng, &[c])];
            gradcheck(&inputs, |tp, v| {
                let (y, _) = tp.batch_norm(v[0], v[1], v[2], BatchNormMode::Train)?;
                project(tp, y, pseed)
            }, cfg)
        }
        "batch_norm_infer" => {
            let [b, c, t] = dims(rng);
            let mut running = RunningStats::new(c);
            running.mean = uniform(rng, &[c]).into_data();
            running.var = (0..c).map(|_| rng.random_range(0.2..3.0)).collect();
            running.updates = 1;
            let inputs = [uniform(rng, &[b, c, t]), uniform(rng, &[c]), uniform(rng, &[c])];
            gradcheck(&inputs, |tp, v| {
                let (y, _) = tp.batch_norm(v[0], v[1], v[2], BatchNormMode::Infer(&running))?;
                project(tp, y, pseed)
            }, cfg)
        }
        "dropout" => {
            let rate = rng.random_range(0.0..0.7);
            let shape = dims(rng);
            let inputs = [uniform(rng, &shape)];
            gradcheck(&inputs, |tp, v| {
                let mut mask_rng = SeedSource::new(pseed).stream("mask");
                let y = tp.dropout(v[0], rate, Mode::Train, &mut mask_rng)?;
                project(tp, y, pseed)
            }, cfg)
        }
        "softmax" => {
            let shape = dims(rng);
            let axis = rng.random_range(0..3);
            let inputs = [uniform(rng, &shape)];
            gradcheck(&inputs, |tp, v| {
                let y = tp.softmax(v[0], axis)?;
                project(tp, y, pseed)
            }, cfg)
        }
        "slice" => {
            let shape = dims(rng);
            let axis = rng.random_range(0..3);
            let start = rng.random_range(0..shape[axis]);
            let len = rng.random_range(1..=shape[axis] - start);
            let inputs = [uniform(rng, &shape)];
            gradcheck(&inputs, |tp, v| {
                let y = tp.slice(v[0], axis, start, len)?;
                project(tp, y, pseed)
            }, cfg)
        }
        "add" | "sub" | "mul" => {
            let shape = dims(rng);
            let inputs = [uniform(rng, &shape), uniform(rng, &shape)];
            gradcheck(&inputs, |tp, v| {
                let y = match op {
                    "add" => tp.add(v[0], v[1])?,
                    "sub" => tp.sub(v[0], v[1])?,
                    _ => tp.mul(v[0], v[1])?,
                };
                project(tp, y, pseed)
            }, cfg)
        }
        "scale" => {
            let c = rng.random_range(-3.0..3.0);
            let shape = dims(rng);
            let inputs = [uniform(rng, &shape)];
            gradcheck(&inputs, |tp, v| {
                let y = tp.scale(v[0], c)?;
                project(tp, y, pseed)
            }, cfg)
        }
        "sum" | "mean" => {
            let shape = dims(rng);
            let inputs = [uniform(rng, &shape)];
            gradcheck(&inputs, |tp, v| {
                // square first so the reduction's gradient is not constant
                let sq = tp.mul(v[0], v[0])?;
                if op == "sum" { tp.sum(sq) } else { tp.mean(sq) }
            }, cfg)
        }
        "neg_entropy_of_mean" => {
            let shape = dims(rng);
            let k = rng.random_range(2..=5);
            let inputs = [uniform(rng, &[shape[0], k, shape[2]])];
            gradcheck(&inputs, |tp, v| {
                let s = tp.softmax(v[0], 1)?;
                tp.neg_entropy_of_mean(s)
            }, cfg)
        }
        "cross_entropy" => {
            let shape = dims(rng);
            let k = rng.random_range(2..=5);
            let sh = [shape[0], k, shape[2]];
            let inputs = [uniform(rng, &sh), uniform(rng, &sh)];
            gradcheck(&inputs, |tp, v| {
                let s = tp.softmax(v[0], 1)?;
                let p = tp.softmax(v[1], 1)?;
                tp.cross_entropy(s, p)
            }, cfg)
        }
        "log_det_cov" => {
            let d = rng.random_range(1..=3);
            let b = rng.random_range(1..=2);
            let t = rng.random_range(d + 3..d + 10);
            let inputs = [uniform(rng, &[b, d, t])];
            gradcheck(&inputs, |tp, v| tp.log_det_cov(v[0], 1e-6), cfg)
        }
        "ncg_loss" => {
            let b = rng.random_range(1..=2);
            let k = rng.random_range(2..=4);
            let t = rng.random_range(6..12);
            let delta = rng.random_range(1..t - 2);
            let inputs = [uniform(rng, &[b, k, t]), uniform(rng, &[b, k, t - 2])];
            gradcheck(&inputs, |tp, v| {
                let s = tp.softmax(v[0], 1)?;
                let shat = tp.softmax(v[1], 1)?;
                ncg_loss_on_tape(tp, s, 0, shat, 1, delta)
            }, cfg)
        }
        "ncg_network" => network_instance(rng, pseed, cfg),
        other => Err(NcgError::invalid(format!("no gradient check for `{other}`"))),
    }
}

/// `Q` of a small transform/predictor pair with respect to every parameter.
fn network_instance(rng: &mut StreamRng, pseed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let hidden = rng.random_range(2..=4);
    let spec = ModelSpec {
        input_channels: 1,
        transformer: vec![LayerSpec::new(3, hidden, true, 0.0), LayerSpec::new(1, 2, false, 0.0)],
        predictor: vec![LayerSpec::new(3, hidden, true, 0.2), LayerSpec::new(1, 2, false, 0.0)],
        classes: 2,
        offset: rng.random_range(5..8),
        alpha: 0.05,
        // A detached target is deliberately not the true gradient.
        stop_target_grad: false,
        allow_overlap: false,
    };
    let model = ModelState::<f64>::build(spec, rng)?;
    let window = uniform(rng, &[2, 1, 24]);
    let inputs: Vec<Tensor<f64>> = model
        .parameters()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    gradcheck_fn(
        &inputs,
        |ts: &[Tensor<f64>]| {
            let mut m = model.clone();
            for (dst, src) in m.parameters_mut().into_iter().zip(ts) {
                *dst = src.clone();
            }
            let mut drop_rng = SeedSource::new(pseed).stream("dropout");
            let pass = m.ncg_forward(&window, Mode::Train, Some(&mut drop_rng))?;
            Ok((pass.tape, pass.q, pass.params))
        },
        cfg,
    )
}

/// Runs `instances` random checks for each named op.
pub fn run_suite(ops: &[&str], instances: usize, seed: u64, cfg: &GradcheckConfig) -> Result<Vec<OpSummary>> {
    let seeds = SeedSource::new(seed);
    ops.iter()
        .map(|&op| {
            let mut rng = seeds.stream(op);
            let mut report = GradcheckReport::default();
            for _ in 0..instances {
                report.merge(&one_instance(op, &mut rng, cfg)?);
            }
            Ok(OpSummary {
                op: op.to_owned(),
                instances,
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_backward_is_caught() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = gradcheck(&[x], |tp, v| {
            let vals: Vec<f64> = tp.value(v[0]).data().iter().map(|a| a * a).collect();
            // true derivative is 2a; report 2a + 0.01
            let y = tp.custom("square", &[v[0]], Tensor::new(vec![3], vals)?, |ins, g| {
                let d = ins[0].data().iter().zip(g).map(|(a, g)| g * (2.0 * a + 0.01)).collect();
                vec![Some(d)]
            })?;
            tp.sum(y)
        }, &GradcheckConfig::default())
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures, 3);
    }

    #[test]
    fn correct_backward_passes() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = gradcheck(&[x], |tp, v| {
            let vals: Vec<f64> = tp.value(v[0]).data().iter().map(|a| a * a).collect();
            let y = tp.custom("square", &[v[0]], Tensor::new(vec![3], vals)?, |ins, g| {
                vec![Some(ins[0].data().iter().zip(g).map(|(a, g)| g * 2.0 * a).collect())]
            })?;
            tp.sum(y)
        }, &GradcheckConfig::default())
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn conv_sign_bug_is_caught() {
        crate::autodiff::fault::set_conv_kernel_sign_flip(true);
        let s = run_suite(&["conv1d"], 3, 1, &GradcheckConfig::default());
        crate::autodiff::fault::set_conv_kernel_sign_flip(false);
        assert!(!s.unwrap()[0].passed());
    }

    #[test]
    fn every_op_has_a_check() {
        let s = run_suite(SUITE_OPS, 2, 7, &GradcheckConfig::default()).unwrap();
        for o in s {
            assert!(o.passed(), "{}: {:?}", o.op, o.report);
        }
    }
}
