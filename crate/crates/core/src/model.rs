//! Transform and predictor networks.
//!
//! Both are stacks of valid 1-D convolutions. Hidden layers use optional
//! batch norm, leaky ReLU and optional dropout; the last layer of each stack
//! ends in a softmax over the `K` class channels. The transform maps the raw
//! window to class distributions `s`; the predictor reads a neighborhood of
//! `s` and emits `shat`, which is scored against `s` shifted `offset` raw
//! timesteps ahead.
//!
//! A stack with receptive field `r` assigns each output to the input index
//! `(r - 1) / 2` positions after the start of its receptive field.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, BatchStats, Mode, RunningStats, Tape, Tensor, Var};
use crate::error::{NcgError, Result};
use crate::loss::{align, ncg_loss_on_tape, Alignment, ClassDistributionSeries};
use crate::rng::StreamRng;
use crate::scalar::{Precision, Scalar};
use crate::train::AdamState;

pub const NOISE_DEFAULT: &str = "noise-default";
pub const HAR_UCINET: &str = "har-ucinet";

/// Hidden width used for the noise benchmarks.
pub const NOISE_HIDDEN_CHANNELS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub width: usize,
    pub channels: usize,
    #[serde(default)]
    pub batch_norm: bool,
    /// Dropout applied after this layer's activation. Must be 0 on the
    /// softmax layer.
    #[serde(default)]
    pub dropout: f64,
}

impl LayerSpec {
    pub fn new(width: usize, channels: usize, batch_norm: bool, dropout: f64) -> Self {
        Self {
            width,
            channels,
            batch_norm,
            dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "one")]
    pub input_channels: usize,
    pub transformer: Vec<LayerSpec>,
    pub predictor: Vec<LayerSpec>,
    pub classes: usize,
    /// Prediction offset in raw timesteps.
    pub offset: usize,
    pub alpha: f64,
    /// Cut gradients through the cross-entropy target branch.
    #[serde(default)]
    pub stop_target_grad: bool,
    /// Accept offsets at which predictor input and target share raw samples.
    #[serde(default)]
    pub allow_overlap: bool,
}

fn one() -> usize {
    1
}

fn receptive_field(layers: &[LayerSpec]) -> usize {
    layers.iter().map(|l| l.width.saturating_sub(1)).sum::<usize>() + 1
}

impl ModelSpec {
    /// Correlated/discrete noise segmentation network: transform filters
    /// 15-7-1, predictor filters 5-1-1, two classes, offset 50.
    pub fn noise_default() -> Self {
        Self::noise_with_filters(&[15, 7, 1])
    }

    /// Noise network with custom transform filter widths (e.g. `[25, 7, 1]`
    /// or `[3, 1, 1]`). Batch norm on the first two layers of each stack.
    pub fn noise_with_filters(widths: &[usize]) -> Self {
        let h = NOISE_HIDDEN_CHANNELS;
        let stack = |widths: &[usize]| -> Vec<LayerSpec> {
            let last = widths.len() - 1;
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| LayerSpec::new(w, if i == last { 2 } else { h }, i < 2 && i < last, 0.0))
                .collect()
        };
        Self {
            input_channels: 1,
            transformer: stack(widths),
            predictor: stack(&[5, 1, 1]),
            classes: 2,
            offset: 50,
            alpha: 0.05,
            stop_target_grad: false,
            allow_overlap: false,
        }
    }

    /// Activity-recognition network over 516 input features, 20 classes,
    /// 30% dropout, batch norm everywhere, offset 20.
    pub fn har_ucinet() -> Self {
        Self {
            input_channels: 516,
            transformer: vec![
                LayerSpec::new(5, 100, true, 0.3),
                LayerSpec::new(3, 100, true, 0.3),
                LayerSpec::new(1, 20, true, 0.0),
            ],
            predictor: vec![
                LayerSpec::new(5, 100, true, 0.3),
                LayerSpec::new(1, 100, true, 0.3),
                LayerSpec::new(1, 20, true, 0.0),
            ],
            classes: 20,
            offset: 20,
            alpha: 0.05,
            stop_target_grad: false,
            allow_overlap: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            NOISE_DEFAULT => Ok(Self::noise_default()),
            HAR_UCINET => Ok(Self::har_ucinet()),
            other => Err(NcgError::invalid(format!("unknown preset `{other}`"))),
        }
    }

    pub fn transformer_receptive_field(&self) -> usize {
        receptive_field(&self.transformer)
    }

    pub fn predictor_receptive_field(&self) -> usize {
        receptive_field(&self.predictor)
    }

    /// Raw index of transformed step 0, relative to the window start.
    pub fn transform_offset(&self) -> usize {
        (self.transformer_receptive_field() - 1) / 2
    }

    /// Index of the transformed step that predicted step 0 is assigned to.
    pub fn predict_offset(&self) -> usize {
        (self.predictor_receptive_field() - 1) / 2
    }

    /// Smallest offset at which the raw samples feeding a prediction and
    /// those feeding its target are disjoint.
    pub fn min_offset(&self) -> usize {
        let rp = self.predictor_receptive_field();
        let ahead = rp - 1 - self.predict_offset();
        self.transformer_receptive_field() - 1 + ahead + 1
    }

    /// Shortest raw window for which at least one prediction has a target.
    pub fn min_window(&self) -> usize {
        self.transformer_receptive_field() + self.predict_offset().max(self.predictor_receptive_field() - 1) + self.offset
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(NcgError::invalid("need at least two classes"));
        }
        if self.input_channels == 0 {
            return Err(NcgError::invalid("input_channels must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(NcgError::invalid("leaky ReLU slope must be >= 0"));
        }
        for (name, stack) in [("transformer", &self.transformer), ("predictor", &self.predictor)] {
            let last = stack
                .last()
                .ok_or_else(|| NcgError::invalid(format!("{name} has no layers")))?;
            if last.channels != self.classes {
                return Err(NcgError::invalid(format!(
                    "{name} must end in {} channels, ends in {}",
                    self.classes, last.channels
                )));
            }
            if last.dropout != 0.0 {
                return Err(NcgError::invalid(format!("{name}: no dropout on the softmax layer")));
            }
            for (i, l) in stack.iter().enumerate() {
                if l.width == 0 || l.channels == 0 {
                    return Err(NcgError::invalid(format!("{name} layer {i}: zero width or channels")));
                }
                if !(0.0..1.0).contains(&l.dropout) {
                    return Err(NcgError::invalid(format!("{name} layer {i}: dropout not in [0, 1)")));
                }
            }
        }
        if self.offset == 0 {
            return Err(NcgError::invalid("offset must be positive"));
        }
        if !self.allow_overlap && self.offset < self.min_offset() {
            return Err(NcgError::invalid(format!(
                "offset {} lets predictor input overlap its target; need >= {} (or allow_overlap)",
                self.offset,
                self.min_offset()
            )));
        }
        Ok(())
    }

    /// Prediction/target pairing for a raw window of `window` samples.
    pub fn alignment(&self, window: usize) -> Result<Alignment> {
        let rt = self.transformer_receptive_field();
        let rp = self.predictor_receptive_field();
        if window < rt || window - rt + 1 < rp {
            return Err(NcgError::invalid(format!("window {window} shorter than receptive fields")));
        }
        let s_len = window - rt + 1;
        let to = self.transform_offset() as isize;
        align(
            s_len,
            to,
            s_len - rp + 1,
            to + self.predict_offset() as isize,
            self.offset,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct NormState<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running: RunningStats<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct LayerState<F> {
    pub kernel: Tensor<F>,
    pub bias: Tensor<F>,
    pub norm: Option<NormState<F>>,
}

/// All trainable parameters and batch-norm statistics of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ModelState<F> {
    pub spec: ModelSpec,
    pub transformer: Vec<LayerState<F>>,
    pub predictor: Vec<LayerState<F>>,
}

fn init_stack<F: Scalar, R: Rng + ?Sized>(
    layers: &[LayerSpec],
    mut in_ch: usize,
    rng: &mut R,
) -> Vec<LayerState<F>> {
    layers
        .iter()
        .map(|l| {
            let fan_in = in_ch * l.width;
            let bound = (1.0 / fan_in as f64).sqrt();
            let kernel = (0..l.channels * fan_in)
                .map(|_| F::of(rng.random_range(-bound..bound)))
                .collect();
            let state = LayerState {
                kernel: Tensor::new(vec![l.channels, in_ch, l.width], kernel).expect("kernel shape"),
                bias: Tensor::zeros(&[l.channels]),
                norm: l.batch_norm.then(|| NormState {
                    gamma: Tensor::full(&[l.channels], F::one()),
                    beta: Tensor::zeros(&[l.channels]),
                    running: RunningStats::new(l.channels),
                }),
            };
            in_ch = l.channels;
            state
        })
        .collect()
}

/// Output of one recorded forward pass.
pub struct ForwardPass<F> {
    pub tape: Tape<F>,
    /// Transformed series `[batch, K, time]`.
    pub s: Var,
    /// Predicted series `[batch, K, time]`.
    pub shat: Var,
    /// Scalar loss `Q`.
    pub q: Var,
    /// Raw index of `s` step 0 within the window.
    pub s_offset: isize,
    /// Raw index of `shat` step 0 within the window.
    pub shat_offset: isize,
    /// Parameter handles, in [`ModelState::parameters`] order.
    pub params: Vec<Var>,
    /// Batch statistics per layer (transform then predictor), training mode only.
    pub stats: Vec<Option<BatchStats<F>>>,
}

impl<F: Scalar> ForwardPass<F> {
    pub fn loss(&self) -> F {
        self.tape.value(self.q).data()[0]
    }
}

struct StackRun<'a, F> {
    mode: Mode,
    track: bool,
    alpha: F,
    rng: Option<&'a mut StreamRng>,
}

impl<F: Scalar> StackRun<'_, F> {
    fn run(
        &mut self,
        tape: &mut Tape<F>,
        specs: &[LayerSpec],
        layers: &[LayerState<F>],
        mut x: Var,
        params: &mut Vec<Var>,
        stats: &mut Vec<Option<BatchStats<F>>>,
    ) -> Result<Var> {
        let last = layers.len() - 1;
        for (i, (spec, layer)) in specs.iter().zip(layers).enumerate() {
            let k = self.leaf(tape, &layer.kernel, params)?;
            let b = self.leaf(tape, &layer.bias, params)?;
            x = tape.conv1d(x, k, b)?;
            let mut layer_stats = None;
            if let Some(norm) = &layer.norm {
                let g = self.leaf(tape, &norm.gamma, params)?;
                let be = self.leaf(tape, &norm.beta, params)?;
                let mode = match self.mode {
                    Mode::Train => BatchNormMode::Train,
                    Mode::Infer => BatchNormMode::Infer(&norm.running),
                };
                let (y, st) = tape.batch_norm(x, g, be, mode)?;
                x = y;
                layer_stats = st;
            }
            stats.push(layer_stats);
            if i == last {
                x = tape.softmax(x, 1)?;
            } else {
                x = tape.leaky_relu(x, self.alpha)?;
                if spec.dropout > 0.0 && self.mode == Mode::Train {
                    let rng = self
                        .rng
                        .as_deref_mut()
                        .ok_or_else(|| NcgError::invalid("dropout in training mode needs a generator"))?;
                    x = tape.dropout(x, spec.dropout, self.mode, rng)?;
                }
            }
        }
        Ok(x)
    }

    fn leaf(&self, tape: &mut Tape<F>, t: &Tensor<F>, params: &mut Vec<Var>) -> Result<Var> {
        if self.track {
            let v = tape.param(t.clone())?;
            params.push(v);
            Ok(v)
        } else {
            tape.constant(t.clone())
        }
    }
}

impl<F: Scalar> ModelState<F> {
    /// Fresh network: kernels uniform in `±sqrt(1 / fan_in)`, zero biases,
    /// unit batch-norm scale.
    pub fn build<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let transformer = init_stack(&spec.transformer, spec.input_channels, rng);
        let predictor = init_stack(&spec.predictor, spec.classes, rng);
        Ok(Self {
            spec,
            transformer,
            predictor,
        })
    }

    fn layers(&self) -> impl Iterator<Item = (&'static str, usize, &LayerState<F>)> {
        let t = self.transformer.iter().enumerate().map(|(i, l)| ("transformer", i, l));
        let p = self.predictor.iter().enumerate().map(|(i, l)| ("predictor", i, l));
        t.chain(p)
    }

    /// Named trainable tensors in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (stack, i, l) in self.layers() {
            out.push((format!("{stack}.{i}.kernel"), &l.kernel));
            out.push((format!("{stack}.{i}.bias"), &l.bias));
            if let Some(n) = &l.norm {
                out.push((format!("{stack}.{i}.gamma"), &n.gamma));
                out.push((format!("{stack}.{i}.beta"), &n.beta));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for l in self.transformer.iter_mut().chain(self.predictor.iter_mut()) {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn commit_stats(&mut self, stats: &[Option<BatchStats<F>>]) {
        let layers = self.transformer.iter_mut().chain(self.predictor.iter_mut());
        for (layer, st) in layers.zip(stats) {
            if let (Some(norm), Some(st)) = (&mut layer.norm, st) {
                norm.running.update(st);
            }
        }
    }

    /// True when every batch-norm layer has running statistics.
    pub fn is_calibrated(&self) -> bool {
        self.layers()
            .all(|(_, _, l)| l.norm.as_ref().is_none_or(|n| n.running.is_calibrated()))
    }

    fn check_window(&self, window: &Tensor<F>) -> Result<()> {
        let s = window.shape();
        if s.len() != 3 || s[1] != self.spec.input_channels {
            return Err(NcgError::shape(
                "model input",
                format!(
                    "expected [batch, {}, time], got {s:?}",
                    self.spec.input_channels
                ),
            ));
        }
        Ok(())
    }

    /// Full forward pass on a raw window `[batch, input_channels, time]`,
    /// recording `s`, `shat` and `Q` on a fresh tape.
    ///
    /// In training mode every parameter is tracked and batch statistics are
    /// returned (not applied; see [`ModelState::commit_stats`]). Gradients
    /// reach the transform both through the predictor input and through the
    /// target branch unless `stop_target_grad` is set.
    pub fn ncg_forward(&self, window: &Tensor<F>, mode: Mode, rng: Option<&mut StreamRng>) -> Result<ForwardPass<F>> {
        self.check_window(window)?;
        let spec = &self.spec;
        let len = window.shape()[2];
        if len < spec.min_window() {
            return Err(NcgError::invalid(format!(
                "window of {len} samples is shorter than the minimum {}",
                spec.min_window()
            )));
        }
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut run = StackRun {
            mode,
            track: mode == Mode::Train,
            alpha: F::of(spec.alpha),
            rng,
        };
        let x = tape.constant(window.clone())?;
        let s = run.run(&mut tape, &spec.transformer, &self.transformer, x, &mut params, &mut stats)?;
        let shat = run.run(&mut tape, &spec.predictor, &self.predictor, s, &mut params, &mut stats)?;
        let s_offset = spec.transform_offset() as isize;
        let shat_offset = s_offset + spec.predict_offset() as isize;
        let q = if spec.stop_target_grad {
            // entropy-of-average keeps its gradient; only the CE target is cut
            let a = spec.alignment(len)?;
            let target = tape.slice(s, 2, a.target_start, a.len)?;
            let frozen = tape.detach(target)?;
            let pred = tape.slice(shat, 2, a.pred_start, a.len)?;
            let neg_h = tape.neg_entropy_of_mean(target)?;
            let ce = tape.cross_entropy(frozen, pred)?;
            tape.add(neg_h, ce)?
        } else {
            ncg_loss_on_tape(&mut tape, s, s_offset, shat, shat_offset, spec.offset)?
        };
        Ok(ForwardPass {
            tape,
            s,
            shat,
            q,
            s_offset,
            shat_offset,
            params,
            stats,
        })
    }

    /// Class distributions for a raw window (inference mode).
    pub fn transform(&self, window: &Tensor<F>) -> Result<ClassDistributionSeries<F>> {
        self.check_window(window)?;
        let rt = self.spec.transformer_receptive_field();
        if window.shape()[2] < rt {
            return Err(NcgError::invalid(format!(
                "window of {} samples is shorter than the transform receptive field {rt}",
                window.shape()[2]
            )));
        }
        let mut tape = Tape::new();
        let mut run = StackRun {
            mode: Mode::Infer,
            track: false,
            alpha: F::of(self.spec.alpha),
            rng: None,
        };
        let x = tape.constant(window.clone())?;
        let s = run.run(&mut tape, &self.spec.transformer, &self.transformer, x, &mut Vec::new(), &mut Vec::new())?;
        Ok(ClassDistributionSeries::new_unchecked(
            tape.value(s).clone(),
            self.spec.transform_offset() as isize,
        ))
    }

    /// Predictions from a transformed series (inference mode). Step `j` of
    /// the result targets raw index `time_offset + j + offset`.
    pub fn predict(&self, s: &ClassDistributionSeries<F>) -> Result<ClassDistributionSeries<F>> {
        if s.classes() != self.spec.classes {
            return Err(NcgError::shape("predict", format!("expected {} classes", self.spec.classes)));
        }
        let rp = self.spec.predictor_receptive_field();
        if s.len() < rp {
            return Err(NcgError::invalid(format!(
                "series of {} steps is shorter than the predictor receptive field {rp}",
                s.len()
            )));
        }
        let mut tape = Tape::new();
        let mut run = StackRun {
            mode: Mode::Infer,
            track: false,
            alpha: F::of(self.spec.alpha),
            rng: None,
        };
        let x = tape.constant(s.values().clone())?;
        let p = run.run(&mut tape, &self.spec.predictor, &self.predictor, x, &mut Vec::new(), &mut Vec::new())?;
        Ok(ClassDistributionSeries::new_unchecked(
            tape.value(p).clone(),
            s.time_offset() + self.spec.predict_offset() as isize,
        ))
    }

    /// Transforms a whole single-channel signal; see
    /// [`ModelState::transform_channels`].
    pub fn transform_signal(&self, samples: &[f64]) -> Result<ClassDistributionSeries<F>> {
        self.transform_channels(&[samples])
    }

    /// Transforms a whole multi-channel signal (one slice per input channel)
    /// in bounded-memory pieces. The result has one batch item and
    /// `len - rf + 1` steps.
    pub fn transform_channels(&self, channels: &[&[f64]]) -> Result<ClassDistributionSeries<F>> {
        const PIECE: usize = 8192;
        let len = channel_len(channels, self.spec.input_channels)?;
        let rt = self.spec.transformer_receptive_field();
        if len < rt {
            return Err(NcgError::invalid("signal shorter than the transform receptive field"));
        }
        let k = self.spec.classes;
        let total = len - rt + 1;
        let mut per_class: Vec<Vec<F>> = vec![Vec::with_capacity(total); k];
        let mut start = 0;
        while start < total {
            let outs = PIECE.min(total - start);
            let window = windows_tensor(channels, &[start], outs + rt - 1)?;
            let s = self.transform(&window)?;
            for (c, track) in per_class.iter_mut().enumerate() {
                track.extend_from_slice(&s.values().data()[c * outs..(c + 1) * outs]);
            }
            start += outs;
        }
        let data = per_class.concat();
        Ok(ClassDistributionSeries::new_unchecked(
            Tensor::new(vec![1, k, total], data)?,
            self.spec.transform_offset() as isize,
        ))
    }

    /// Training-mode forward over `windows` to populate batch-norm running
    /// statistics without touching parameters.
    pub fn calibrate(&mut self, windows: &Tensor<F>, rng: &mut StreamRng) -> Result<()> {
        let pass = self.ncg_forward(windows, Mode::Train, Some(rng))?;
        self.commit_stats(&pass.stats);
        Ok(())
    }

    /// Relabels classes: new class `i` is old class `perm[i]`. Applied to the
    /// transform output layer, predictor input and predictor output layer, it
    /// leaves `Q` unchanged.
    pub fn permute_classes(&mut self, perm: &[usize]) -> Result<()> {
        let k = self.spec.classes;
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(NcgError::invalid("not a permutation of the classes"));
        }
        let t_last = self.transformer.last_mut().expect("validated spec");
        permute_outputs(t_last, perm);
        permute_inputs(&mut self.predictor[0].kernel, perm);
        let p_last = self.predictor.last_mut().expect("validated spec");
        permute_outputs(p_last, perm);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new(self.clone()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Checkpoint::load(path)?.model)
    }
}

fn permute_outputs<F: Scalar>(layer: &mut LayerState<F>, perm: &[usize]) {
    let shape = layer.kernel.shape().to_vec();
    let row = shape[1] * shape[2];
    let old = layer.kernel.data().to_vec();
    let dst = layer.kernel.data_mut();
    for (new, &src) in perm.iter().enumerate() {
        dst[new * row..(new + 1) * row].copy_from_slice(&old[src * row..(src + 1) * row]);
    }
    let permute_vec = |t: &mut Tensor<F>| {
        let old = t.data().to_vec();
        for (new, &src) in perm.iter().enumerate() {
            t.data_mut()[new] = old[src];
        }
    };
    permute_vec(&mut layer.bias);
    if let Some(n) = &mut layer.norm {
        permute_vec(&mut n.gamma);
        permute_vec(&mut n.beta);
        let (m, v) = (n.running.mean.clone(), n.running.var.clone());
        for (new, &src) in perm.iter().enumerate() {
            n.running.mean[new] = m[src];
            n.running.var[new] = v[src];
        }
    }
}

fn permute_inputs<F: Scalar>(kernel: &mut Tensor<F>, perm: &[usize]) {
    let shape = kernel.shape().to_vec();
    let (co, ci, w) = (shape[0], shape[1], shape[2]);
    let old = kernel.data().to_vec();
    let dst = kernel.data_mut();
    for o in 0..co {
        for (new, &src) in perm.iter().enumerate().take(ci) {
            let d = (o * ci + new) * w;
            let s = (o * ci + src) * w;
            dst[d..d + w].copy_from_slice(&old[s..s + w]);
        }
    }
}

/// Common length of `channels`, which must number `expected`.
pub fn channel_len(channels: &[&[f64]], expected: usize) -> Result<usize> {
    if channels.len() != expected {
        return Err(NcgError::shape(
            "signal",
            format!("model expects {expected} channels, got {}", channels.len()),
        ));
    }
    let len = channels[0].len();
    if channels.iter().any(|c| c.len() != len) {
        return Err(NcgError::shape("signal", "channels differ in length"));
    }
    Ok(len)
}

/// `[batch, channels, len]` tensor of windows cut at `starts` from a signal
/// given as one slice per channel.
pub fn windows_tensor<F: Scalar>(channels: &[&[f64]], starts: &[usize], len: usize) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(starts.len() * channels.len() * len);
    for &s in starts {
        for ch in channels {
            let w = ch
                .get(s..s + len)
                .ok_or_else(|| NcgError::invalid(format!("window {s}..{} out of range", s + len)))?;
            data.extend(w.iter().map(|&v| F::of(v)));
        }
    }
    Tensor::new(vec![starts.len(), channels.len(), len], data)
}

pub const CHECKPOINT_FORMAT: &str = "ncg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk container: JSON object holding the spec, every parameter tensor
/// (`shape` + row-major `data`), batch-norm running statistics and,
/// optionally, optimizer state for resuming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Checkpoint<F> {
    pub format: String,
    pub version: u32,
    pub precision: Precision,
    pub epochs_completed: usize,
    pub model: ModelState<F>,
    #[serde(default)]
    pub optimizer: Option<AdamState<F>>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(model: ModelState<F>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            precision: F::PRECISION,
            epochs_completed: 0,
            model,
            optimizer: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)? + "\n";
        fs::write(path, text).map_err(|e| NcgError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NcgError::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(NcgError::invalid(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        if ck.precision != F::PRECISION {
            return Err(NcgError::invalid(format!(
                "{}: checkpoint precision {:?} does not match {:?}",
                path.display(),
                ck.precision,
                F::PRECISION
            )));
        }
        ck.model.spec.validate()?;
        Ok(ck)
    }
}

/// Reads only the precision tag of a checkpoint file.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    #[derive(Deserialize)]
    struct Head {
        precision: Precision,
    }
    let text = fs::read_to_string(path).map_err(|e| NcgError::io(path, e))?;
    Ok(serde_json::from_str::<Head>(&text)?.precision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSource;

    fn rng(seed: u64) -> StreamRng {
        SeedSource::new(seed).stream("model-test")
    }

    #[test]
    fn receptive_fields() {
        let n = ModelSpec::noise_default();
        assert_eq!(n.transformer_receptive_field(), 21);
        assert_eq!(n.predictor_receptive_field(), 5);
        assert!(n.offset >= n.min_offset());
        let h = ModelSpec::har_ucinet();
        assert_eq!(h.transformer_receptive_field(), 7);
        assert_eq!(h.predictor_receptive_field(), 5);
        // prediction centered at t reads raw up to t + 2 + 3; target at t + 20 reads from t + 17
        assert_eq!(h.min_offset(), 9);
        h.validate().unwrap();
    }

    #[test]
    fn presets_by_name() {
        assert_eq!(ModelSpec::preset(NOISE_DEFAULT).unwrap(), ModelSpec::noise_default());
        assert!(ModelSpec::preset("nope").is_err());
        let n = ModelSpec::noise_default();
        let bn: Vec<bool> = n.transformer.iter().chain(&n.predictor).map(|l| l.batch_norm).collect();
        assert_eq!(bn, vec![true, true, false, true, true, false]);
        assert_eq!(n.alpha, 0.05);
    }

    #[test]
    fn short_offset_rejected_unless_overridden() {
        let mut s = ModelSpec::noise_default();
        s.offset = 10;
        assert!(s.validate().is_err());
        assert!(ModelState::<f64>::build(s.clone(), &mut rng(0)).is_err());
        s.allow_overlap = true;
        s.validate().unwrap();
    }

    #[test]
    fn spec_must_end_in_classes() {
        let mut s = ModelSpec::noise_default();
        s.transformer.last_mut().unwrap().channels = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn parameter_order_matches() {
        let mut m = ModelState::<f64>::build(ModelSpec::noise_default(), &mut rng(1)).unwrap();
        let shapes: Vec<Vec<usize>> = m.parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> = m.parameters_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(m.parameters()[0].0, "transformer.0.kernel");
        assert_eq!(shapes[0], vec![32, 1, 15]);
    }

    #[test]
    fn infer_before_calibration_is_an_error() {
        let m = ModelState::<f64>::build(ModelSpec::noise_default(), &mut rng(2)).unwrap();
        let w = Tensor::zeros(&[1, 1, 100]);
        assert!(matches!(m.transform(&w), Err(NcgError::Uncalibrated)));
    }
}
