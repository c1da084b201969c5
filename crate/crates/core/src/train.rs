//! Adam training over shuffled minibatches of contiguous chunks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tensor};
use crate::error::{NcgError, Result};
use crate::model::{channel_len, windows_tensor, ModelState};
use crate::rng::SeedSource;
use crate::scalar::{Precision, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub epochs: usize,
    /// Raw samples per minibatch; rounded down to whole chunks (at least one).
    pub batch_size: usize,
    pub chunk_length: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip. Off by default.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            epochs: 200,
            batch_size: 50_000,
            chunk_length: 1000,
            seed: 0,
            precision: Precision::F64,
            clip: None,
        }
    }
}

impl TrainConfig {
    /// Activity-recognition protocol: 120-step chunks, lr 5e-3, 510 epochs.
    pub fn har() -> Self {
        Self {
            lr: 5e-3,
            epochs: 510,
            chunk_length: 120,
            batch_size: 120 * 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(NcgError::invalid("lr must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(NcgError::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps_adam > 0.0) {
            return Err(NcgError::invalid("eps_adam must be positive"));
        }
        if self.batch_size == 0 || self.chunk_length == 0 {
            return Err(NcgError::invalid("batch_size and chunk_length must be >= 1"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(NcgError::invalid("clip must be positive"));
            }
        }
        Ok(())
    }

    pub fn chunks_per_batch(&self) -> usize {
        (self.batch_size / self.chunk_length).max(1)
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    /// Steps taken so far.
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<F>>) -> Self {
        let m: Vec<Tensor<F>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_model(model: &ModelState<F>) -> Self {
        Self::new(model.parameters().into_iter().map(|(_, t)| t))
    }
}

/// One Adam update with bias correction.
///
/// `grads` pairs each gradient with its parameter name (used in errors). A
/// non-finite gradient aborts before anything is modified.
pub fn adam_step<F: Scalar>(
    params: &mut [&mut Tensor<F>],
    grads: &[(String, Tensor<F>)],
    state: &mut AdamState<F>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NcgError::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (p, (name, g)) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NcgError::shape("adam_step", format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(NcgError::NonFiniteGradient { name: name.clone() });
        }
    }
    let scale = match cfg.clip {
        Some(c) => {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.data())
                .map(|&x| x.to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt();
            F::of(if norm > c { c / norm } else { 1.0 })
        }
        None => F::one(),
    };
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let c1 = F::one() - b1.powi(t);
    let c2 = F::one() - b2.powi(t);
    let lr = F::of(cfg.lr);
    let eps = F::of(cfg.eps_adam);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].1.data();
        let m = state.m[i].data_mut();
        for (mk, &gk) in m.iter_mut().zip(g) {
            *mk = b1 * *mk + (F::one() - b1) * gk * scale;
        }
        let v = state.v[i].data_mut();
        for (vk, &gk) in v.iter_mut().zip(g) {
            let gk = gk * scale;
            *vk = b2 * *vk + (F::one() - b2) * gk * gk;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pk, &mk), &vk) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mk / c1;
            let vhat = vk / c2;
            *pk = *pk - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean minibatch loss over the epoch (training mode).
    pub train_q: f64,
    /// Held-out loss after the epoch (inference mode).
    pub test_q: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    /// Epoch at which the loss or a gradient went non-finite; the model was
    /// restored to the state after the preceding epoch.
    pub diverged_at: Option<usize>,
    pub seconds: f64,
}

impl RunLog {
    pub fn final_train_q(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_q)
    }

    pub fn final_test_q(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.test_q)
    }

    /// Zeroes wall-clock fields so logs from identical runs compare equal.
    pub fn strip_timing(&mut self) {
        self.seconds = 0.0;
        for r in &mut self.records {
            r.seconds = 0.0;
        }
    }

    /// `epoch,train_Q,test_Q,seconds`; a missing held-out value is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_Q,test_Q,seconds\n");
        for r in &self.records {
            let test = r.test_q.map(|q| q.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_q, test, r.seconds);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| NcgError::io(path, e))
    }
}

/// Chunk start indices covering `n` samples with non-overlapping chunks.
pub fn chunk_starts(n: usize, chunk_length: usize) -> Vec<usize> {
    (0..n / chunk_length).map(|i| i * chunk_length).collect()
}

/// Mean inference-mode loss over consecutive batches of chunks. `signal`
/// holds one slice per input channel.
pub fn evaluate_q<F: Scalar>(model: &ModelState<F>, signal: &[&[f64]], cfg: &TrainConfig) -> Result<f64> {
    let len = channel_len(signal, model.spec.input_channels)?;
    let starts = chunk_starts(len, cfg.chunk_length);
    if starts.is_empty() {
        return Err(NcgError::invalid("signal shorter than one chunk"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in starts.chunks(cfg.chunks_per_batch()) {
        let window = windows_tensor::<F>(signal, batch, cfg.chunk_length)?;
        let pass = model.ncg_forward(&window, Mode::Infer, None)?;
        total += pass.loss().to_f64_lossy();
        count += 1;
    }
    Ok(total / count as f64)
}

/// Trains from `epochs_done` up to `cfg.epochs`, updating `model` and
/// `optimizer` in place.
///
/// Chunk order for epoch `e` and dropout masks for batch `b` of epoch `e`
/// depend only on `(seed, e, b)`, so stopping after any epoch and resuming
/// from the saved state reproduces the uninterrupted run bit for bit.
/// `on_epoch` runs after every completed epoch (e.g. to write checkpoints).
/// Signals are given as one slice per input channel.
pub fn train_with<F: Scalar>(
    model: &mut ModelState<F>,
    optimizer: &mut AdamState<F>,
    epochs_done: usize,
    train: &[&[f64]],
    test: Option<&[&[f64]]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelState<F>, &AdamState<F>) -> Result<()>,
) -> Result<RunLog> {
    cfg.validate()?;
    let train_len = channel_len(train, model.spec.input_channels)?;
    if let Some(t) = test {
        channel_len(t, model.spec.input_channels)?;
    }
    if cfg.chunk_length < model.spec.min_window() {
        return Err(NcgError::invalid(format!(
            "chunk_length {} is below the model's minimum window {}",
            cfg.chunk_length,
            model.spec.min_window()
        )));
    }
    let starts = chunk_starts(train_len, cfg.chunk_length);
    if starts.is_empty() {
        return Err(NcgError::invalid("training signal shorter than one chunk"));
    }
    let seeds = SeedSource::new(cfg.seed);
    let per_batch = cfg.chunks_per_batch();
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let mut log = RunLog::default();
    let run_start = Instant::now();
    let mut good = (model.clone(), optimizer.clone());

    for epoch in epochs_done..cfg.epochs {
        let epoch_start = Instant::now();
        let mut order = starts.clone();
        order.shuffle(&mut seeds.stream_at("chunk-order", &[epoch as u64]));
        let mut sum_q = 0.0;
        let mut batches = 0usize;
        let mut diverged = false;
        for (b, batch) in order.chunks(per_batch).enumerate() {
            match train_batch(model, optimizer, &names, train, batch, cfg, &seeds, epoch, b) {
                Ok(q) => {
                    sum_q += q;
                    batches += 1;
                }
                Err(NcgError::NonFinite { .. } | NcgError::NonFiniteGradient { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let test_q = match (diverged, test) {
            (false, Some(t)) => match evaluate_q(model, t, cfg) {
                Ok(q) if q.is_finite() => Some(q),
                Ok(_) | Err(NcgError::NonFinite { .. }) => {
                    diverged = true;
                    None
                }
                Err(e) => return Err(e),
            },
            _ => None,
        };
        if diverged {
            *model = good.0;
            *optimizer = good.1;
            log.diverged_at = Some(epoch + 1);
            break;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_q: sum_q / batches as f64,
            test_q,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, model, optimizer)?;
        log.records.push(record);
        good = (model.clone(), optimizer.clone());
    }
    log.seconds = run_start.elapsed().as_secs_f64();
    Ok(log)
}

/// [`train_with`] without a per-epoch hook.
pub fn train<F: Scalar>(
    model: &mut ModelState<F>,
    optimizer: &mut AdamState<F>,
    epochs_done: usize,
    train: &[&[f64]],
    test: Option<&[&[f64]]>,
    cfg: &TrainConfig,
) -> Result<RunLog> {
    train_with(model, optimizer, epochs_done, train, test, cfg, |_, _, _| Ok(()))
}

#[allow(clippy::too_many_arguments)]
fn train_batch<F: Scalar>(
    model: &mut ModelState<F>,
    optimizer: &mut AdamState<F>,
    names: &[String],
    signal: &[&[f64]],
    batch: &[usize],
    cfg: &TrainConfig,
    seeds: &SeedSource,
    epoch: usize,
    index: usize,
) -> Result<f64> {
    let window = windows_tensor::<F>(signal, batch, cfg.chunk_length)?;
    let mut rng = seeds.stream_at("dropout", &[epoch as u64, index as u64]);
    let mut pass = model.ncg_forward(&window, Mode::Train, Some(&mut rng))?;
    let q = pass.loss();
    let grads = pass.tape.backward(pass.q)?;
    let named: Vec<(String, Tensor<F>)> = pass
        .params
        .iter()
        .zip(names)
        .map(|(&v, n)| (n.clone(), grads.get_or_zeros(v, pass.tape.value(v))))
        .collect();
    model.commit_stats(&pass.stats);
    adam_step(&mut model.parameters_mut(), &named, optimizer, cfg)?;
    Ok(q.to_f64_lossy())
}
