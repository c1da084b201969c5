use rand::Rng;

use super::tape::{Node, Var};
use super::{Mode, Tape, Tensor};
use crate::error::{NcgError, Result};
use crate::linalg;
use crate::scalar::Scalar;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Lower clamp on predicted probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

type CustomBackward<F> = Box<dyn Fn(&[&Tensor<F>], &[F]) -> Vec<Option<Vec<F>>>>;

pub(super) enum Op<F> {
    Leaf,
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    LeakyRelu {
        x: Var,
        alpha: F,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    NegEntropyOfMean {
        s: Var,
        class_mean: Vec<F>,
    },
    CrossEntropy {
        s: Var,
        shat: Var,
    },
    LogDetCov {
        x: Var,
        centered: Vec<F>,
        inverse: Vec<f64>,
    },
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: CustomBackward<F>,
    },
}

impl<F: Scalar> Op<F> {
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d { .. } => "conv1d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::Softmax { .. } => "softmax",
            Op::Slice { .. } => "slice",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::NegEntropyOfMean { .. } => "neg_entropy_of_mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::LogDetCov { .. } => "log_det_cov",
            Op::Custom { name, .. } => name,
        }
    }

    pub(super) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv1d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::LeakyRelu { x, .. }
            | Op::Dropout { x, .. }
            | Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::LogDetCov { x, .. } => vec![*x],
            Op::NegEntropyOfMean { s, .. } => vec![*s],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::CrossEntropy { s, shat } => vec![*s, *shat],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// Pushes `dL/d(input)` contributions for each input through `acc`.
    pub(super) fn backward(
        &self,
        nodes: &[Node<F>],
        out: &Tensor<F>,
        g: &[F],
        acc: &mut dyn FnMut(Var, Vec<F>),
    ) {
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match self {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernel,
                bias,
            } => {
                let (gi, gk, gb) = conv1d_backward(
                    val(*input),
                    val(*kernel),
                    g,
                    [wants(*input), wants(*kernel), wants(*bias)],
                );
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                if let Some(mut gk) = gk {
                    if super::fault::conv_kernel_sign_flipped() {
                        gk.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(*kernel, gk);
                }
                if let Some(gb) = gb {
                    acc(*bias, gb);
                }
            }
            Op::LeakyRelu { x, alpha } => {
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv >= *alpha * xv { gv } else { *alpha * gv })
                    .collect();
                acc(*x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = val(*x).shape();
                let (b, c, t) = (shape[0], shape[1], shape[2]);
                let gam = val(*gamma).data();
                let n = F::of((b * t) as f64);
                let mut gx = vec![F::zero(); b * c * t];
                let mut gg = vec![F::zero(); c];
                let mut gb = vec![F::zero(); c];
                for ch in 0..c {
                    let mut sum_dy = F::zero();
                    let mut sum_dy_xhat = F::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * t;
                        for k in base..base + t {
                            sum_dy += g[k];
                            sum_dy_xhat += g[k] * xhat[k];
                        }
                    }
                    gg[ch] = sum_dy_xhat;
                    gb[ch] = sum_dy;
                    for bi in 0..b {
                        let base = (bi * c + ch) * t;
                        for k in base..base + t {
                            gx[k] = if *train {
                                gam[ch] * inv_std[ch] / n
                                    * (n * g[k] - sum_dy - xhat[k] * sum_dy_xhat)
                            } else {
                                gam[ch] * inv_std[ch] * g[k]
                            };
                        }
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::Dropout { x, mask } => {
                acc(*x, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect());
            }
            Op::Softmax { x, axis } => {
                let (outer, k, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * k + j) * inner + i;
                        let dot: F = (0..k).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..k {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Slice { x, axis, start } => {
                let src = val(*x).shape();
                let (outer, len_in, inner) = split_axis(src, *axis);
                let len_out = out.shape()[*axis];
                let mut gx = vec![F::zero(); val(*x).len()];
                for o in 0..outer {
                    let dst = (o * len_in + start) * inner;
                    let from = o * len_out * inner;
                    gx[dst..dst + len_out * inner].copy_from_slice(&g[from..from + len_out * inner]);
                }
                acc(*x, gx);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
                acc(*b, g.iter().zip(av).map(|(&gv, &y)| gv * y).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / F::of(n as f64); n]);
            }
            Op::NegEntropyOfMean { s, class_mean } => {
                let shape = val(*s).shape();
                let (b, k, t) = (shape[0], shape[1], shape[2]);
                let n = F::of((b * t) as f64);
                let floor = F::of(PROB_FLOOR);
                let coef: Vec<F> = class_mean
                    .iter()
                    .map(|&m| g[0] * (m.max(floor).ln() + F::one()) / n)
                    .collect();
                let mut gs = vec![F::zero(); b * k * t];
                for bi in 0..b {
                    for (ki, &c) in coef.iter().enumerate() {
                        let base = (bi * k + ki) * t;
                        gs[base..base + t].iter_mut().for_each(|v| *v = c);
                    }
                }
                acc(*s, gs);
            }
            Op::CrossEntropy { s, shat } => {
                let sv = val(*s).data();
                let pv = val(*shat).data();
                let shape = val(*s).shape();
                let n = F::of((shape[0] * shape[2]) as f64);
                let floor = F::of(PROB_FLOOR);
                let scale = g[0] / n;
                if wants(*s) {
                    acc(*s, pv.iter().map(|&p| -scale * p.max(floor).ln()).collect());
                }
                if wants(*shat) {
                    let gp = sv
                        .iter()
                        .zip(pv)
                        .map(|(&sq, &p)| if p > floor { -scale * sq / p } else { F::zero() })
                        .collect();
                    acc(*shat, gp);
                }
            }
            Op::LogDetCov {
                x,
                centered,
                inverse,
            } => {
                let shape = val(*x).shape();
                let (b, d, t) = (shape[0], shape[1], shape[2]);
                let scale = g[0] * F::of(2.0 / (b * t) as f64);
                let inv: Vec<F> = inverse.iter().map(|&v| F::of(v)).collect();
                let mut gx = vec![F::zero(); b * d * t];
                for bi in 0..b {
                    for di in 0..d {
                        let row = (bi * d + di) * t;
                        for ei in 0..d {
                            let c = scale * inv[di * d + ei];
                            let src = (bi * d + ei) * t;
                            for ti in 0..t {
                                gx[row + ti] += c * centered[src + ti];
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Custom {
                inputs, backward, ..
            } => {
                let vals: Vec<&Tensor<F>> = inputs.iter().map(|v| val(*v)).collect();
                for (var, grad) in inputs.iter().zip(backward(&vals, g)) {
                    if let Some(grad) = grad {
                        acc(*var, grad);
                    }
                }
            }
        }
    }
}

/// (product of axes before, extent of axis, product of axes after)
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn expect_rank<F: Scalar>(op: &'static str, t: &Tensor<F>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(NcgError::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NcgError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn conv1d_forward<F: Scalar>(input: &Tensor<F>, kernel: &Tensor<F>, bias: &Tensor<F>) -> Vec<F> {
    let [b, ci, t] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let [co, _, w] = [kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]];
    let to = t - w + 1;
    let (x, k, bias) = (input.data(), kernel.data(), bias.data());
    let mut out = vec![F::zero(); b * co * to];
    for bi in 0..b {
        for o in 0..co {
            let row = &mut out[(bi * co + o) * to..(bi * co + o + 1) * to];
            row.iter_mut().for_each(|v| *v = bias[o]);
            for i in 0..ci {
                let src = &x[(bi * ci + i) * t..(bi * ci + i + 1) * t];
                for wi in 0..w {
                    let kv = k[(o * ci + i) * w + wi];
                    for (r, &s) in row.iter_mut().zip(&src[wi..wi + to]) {
                        *r += kv * s;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv1d_backward<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    g: &[F],
    wants: [bool; 3],
) -> (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>) {
    let [b, ci, t] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let [co, _, w] = [kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]];
    let to = t - w + 1;
    let (x, k) = (input.data(), kernel.data());

    let gi = wants[0].then(|| {
        let mut gi = vec![F::zero(); x.len()];
        for bi in 0..b {
            for o in 0..co {
                let grow = &g[(bi * co + o) * to..(bi * co + o + 1) * to];
                for i in 0..ci {
                    let dst = &mut gi[(bi * ci + i) * t..(bi * ci + i + 1) * t];
                    for wi in 0..w {
                        let kv = k[(o * ci + i) * w + wi];
                        for (d, &gv) in dst[wi..wi + to].iter_mut().zip(grow) {
                            *d += kv * gv;
                        }
                    }
                }
            }
        }
        gi
    });
    let gk = wants[1].then(|| {
        let mut gk = vec![F::zero(); k.len()];
        for bi in 0..b {
            for o in 0..co {
                let grow = &g[(bi * co + o) * to..(bi * co + o + 1) * to];
                for i in 0..ci {
                    let src = &x[(bi * ci + i) * t..(bi * ci + i + 1) * t];
                    for wi in 0..w {
                        let dot: F = grow
                            .iter()
                            .zip(&src[wi..wi + to])
                            .fold(F::zero(), |a, (&gv, &s)| a + gv * s);
                        gk[(o * ci + i) * w + wi] += dot;
                    }
                }
            }
        }
        gk
    });
    let gb = wants[2].then(|| {
        let mut gb = vec![F::zero(); co];
        for bi in 0..b {
            for (o, acc) in gb.iter_mut().enumerate() {
                let grow = &g[(bi * co + o) * to..(bi * co + o + 1) * to];
                *acc += grow.iter().fold(F::zero(), |a, &v| a + v);
            }
        }
        gb
    });
    (gi, gk, gb)
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance over batch and time.
    pub var: Vec<F>,
    pub count: usize,
}

/// Exponential moving averages used by batch norm at inference time.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub momentum: F,
    pub updates: u64,
}

impl<F: Scalar> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
            momentum: F::of(BN_MOMENTUM),
            updates: 0,
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.updates > 0
    }

    /// Folds in one batch. The running variance tracks the unbiased estimate.
    pub fn update(&mut self, batch: &BatchStats<F>) {
        let m = self.momentum;
        let n = F::of(batch.count as f64);
        let unbias = if batch.count > 1 { n / (n - F::one()) } else { F::one() };
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (F::one() - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = (F::one() - m) * *r + m * b * unbias;
        }
        self.updates += 1;
    }
}

pub enum BatchNormMode<'a, F> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with accumulated running statistics.
    Infer(&'a RunningStats<F>),
}

impl<F: Scalar> Tape<F> {
    /// Valid 1-D convolution (cross-correlation, no padding).
    ///
    /// `input` is `[batch, in_channels, time]`, `kernel` is
    /// `[out_channels, in_channels, width]`, `bias` is `[out_channels]`; the
    /// output is `[batch, out_channels, time - width + 1]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        expect_rank("conv1d", x, 3)?;
        expect_rank("conv1d", k, 3)?;
        expect_rank("conv1d", b, 1)?;
        let (xs, ks) = (x.shape(), k.shape());
        if xs[1] != ks[1] {
            return Err(NcgError::shape(
                "conv1d",
                format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
            ));
        }
        if b.len() != ks[0] {
            return Err(NcgError::shape(
                "conv1d",
                format!("bias length {} != out channels {}", b.len(), ks[0]),
            ));
        }
        if ks[2] == 0 || ks[2] > xs[2] {
            return Err(NcgError::shape(
                "conv1d",
                format!("kernel width {} does not fit time length {}", ks[2], xs[2]),
            ));
        }
        let shape = vec![xs[0], ks[0], xs[2] - ks[2] + 1];
        let out = conv1d_forward(x, k, b);
        self.push(
            Tensor::new(shape, out)?,
            Op::Conv1d {
                input,
                kernel,
                bias,
            },
        )
    }

    /// Elementwise `max(x, alpha * x)`.
    pub fn leaky_relu(&mut self, x: Var, alpha: F) -> Result<Var> {
        if alpha < F::zero() {
            return Err(NcgError::invalid("leaky_relu slope must be >= 0"));
        }
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e.max(alpha * e)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::LeakyRelu { x, alpha })
    }

    /// Per-channel normalization of a `[batch, channels, time]` tensor
    /// followed by the affine `gamma * xhat + beta`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into its [`RunningStats`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, F>,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let xv = self.value(x);
        expect_rank("batch_norm", xv, 3)?;
        let (b, c, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(NcgError::shape(
                "batch_norm",
                format!("gamma/beta must have {c} entries"),
            ));
        }
        let eps = F::of(BN_EPSILON);
        let n = b * t;
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(NcgError::invalid(
                        "batch_norm needs more than one value per channel in training mode",
                    ));
                }
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                let data = xv.data();
                for ch in 0..c {
                    let mut s = F::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * t;
                        s += data[base..base + t].iter().fold(F::zero(), |a, &v| a + v);
                    }
                    let mu = s / F::of(n as f64);
                    let mut ss = F::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * t;
                        ss += data[base..base + t]
                            .iter()
                            .fold(F::zero(), |a, &v| a + (v - mu) * (v - mu));
                    }
                    mean[ch] = mu;
                    var[ch] = ss / F::of(n as f64);
                }
                (mean, var, true)
            }
            BatchNormMode::Infer(stats) => {
                if !stats.is_calibrated() {
                    return Err(NcgError::Uncalibrated);
                }
                if stats.mean.len() != c {
                    return Err(NcgError::shape("batch_norm", "running stats channel count"));
                }
                (stats.mean.clone(), stats.var.clone(), false)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let data = xv.data();
        let mut xhat = vec![F::zero(); data.len()];
        let mut out = vec![F::zero(); data.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * t;
                for k in base..base + t {
                    xhat[k] = (data[k] - mean[ch]) * inv_std[ch];
                    out[k] = gv[ch] * xhat[k] + bv[ch];
                }
            }
        }
        let out = Tensor::new(vec![b, c, t], out)?;
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count: n,
        });
        let var_out = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok((var_out, stats))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NcgError::invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let v = self.value(x);
        let mask: Vec<F> = (0..v.len())
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&e, &m)| e * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x, mask })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.shape().len() {
            return Err(NcgError::shape("softmax", format!("axis {axis} out of range")));
        }
        let (outer, k, inner) = split_axis(v.shape(), axis);
        let src = v.data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * k + j) * inner + i;
                let mx = (0..k).map(|j| src[idx(j)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for j in 0..k {
                    let e = (src[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..k {
                    out[idx(j)] /= z;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push(out, Op::Softmax { x, axis })
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.shape().len() || start + len > v.shape()[axis] {
            return Err(NcgError::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, v.shape()),
            ));
        }
        let (outer, len_in, inner) = split_axis(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * len_in + start) * inner;
            out.extend_from_slice(&v.data()[from..from + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, op)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * c).collect())?;
        self.push(out, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(F::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(NcgError::shape("mean", "empty tensor"));
        }
        let s = v.data().iter().fold(F::zero(), |a, &e| a + e) / F::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// `sum_k m_k ln m_k` where `m` is the mean of `s` (`[batch, K, time]`)
    /// over batch and time, i.e. the negative entropy of the average class
    /// distribution. Uses `0 ln 0 = 0`.
    pub fn neg_entropy_of_mean(&mut self, s: Var) -> Result<Var> {
        let v = self.value(s);
        expect_rank("neg_entropy_of_mean", v, 3)?;
        let (b, k, t) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        if b * t == 0 {
            return Err(NcgError::EmptyOverlap);
        }
        let mut class_mean = vec![F::zero(); k];
        for bi in 0..b {
            for (ki, m) in class_mean.iter_mut().enumerate() {
                let base = (bi * k + ki) * t;
                *m += v.data()[base..base + t].iter().fold(F::zero(), |a, &e| a + e);
            }
        }
        let n = F::of((b * t) as f64);
        class_mean.iter_mut().for_each(|m| *m /= n);
        let value = class_mean
            .iter()
            .filter(|&&m| m > F::zero())
            .fold(F::zero(), |a, &m| a + m * m.ln());
        self.push(Tensor::scalar(value), Op::NegEntropyOfMean { s, class_mean })
    }

    /// Mean over batch and time of `-sum_k s_k ln max(shat_k, floor)`, for
    /// aligned `[batch, K, time]` tensors.
    pub fn cross_entropy(&mut self, s: Var, shat: Var) -> Result<Var> {
        let (sv, pv) = (self.value(s), self.value(shat));
        expect_rank("cross_entropy", sv, 3)?;
        same_shape("cross_entropy", sv, pv)?;
        let (b, t) = (sv.shape()[0], sv.shape()[2]);
        if b * t == 0 {
            return Err(NcgError::EmptyOverlap);
        }
        let floor = F::of(PROB_FLOOR);
        let total = sv
            .data()
            .iter()
            .zip(pv.data())
            .fold(F::zero(), |a, (&sq, &p)| a - sq * p.max(floor).ln());
        let value = total / F::of((b * t) as f64);
        self.push(Tensor::scalar(value), Op::CrossEntropy { s, shat })
    }

    /// `ln det(cov(x) + lambda I)` where `x` is `[batch, D, time]` and the
    /// covariance is taken over all batch and time samples (population
    /// normalization).
    pub fn log_det_cov(&mut self, x: Var, lambda: f64) -> Result<Var> {
        let v = self.value(x);
        expect_rank("log_det_cov", v, 3)?;
        let (b, d, t) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let n = b * t;
        if n <= d {
            return Err(NcgError::invalid(format!(
                "covariance of {d} dimensions needs more than {d} samples, got {n}"
            )));
        }
        let data = v.data();
        let mut mean = vec![F::zero(); d];
        for bi in 0..b {
            for (di, m) in mean.iter_mut().enumerate() {
                let base = (bi * d + di) * t;
                *m += data[base..base + t].iter().fold(F::zero(), |a, &e| a + e);
            }
        }
        mean.iter_mut().for_each(|m| *m /= F::of(n as f64));
        let mut centered = vec![F::zero(); data.len()];
        for bi in 0..b {
            for di in 0..d {
                let base = (bi * d + di) * t;
                for k in base..base + t {
                    centered[k] = data[k] - mean[di];
                }
            }
        }
        let mut cov = vec![0.0f64; d * d];
        for bi in 0..b {
            for di in 0..d {
                let a = &centered[(bi * d + di) * t..(bi * d + di + 1) * t];
                for ei in di..d {
                    let c = &centered[(bi * d + ei) * t..(bi * d + ei + 1) * t];
                    let dot: f64 = a.iter().zip(c).map(|(&p, &q)| p.to_f64_lossy() * q.to_f64_lossy()).sum();
                    cov[di * d + ei] += dot;
                }
            }
        }
        for di in 0..d {
            for ei in di..d {
                let c = cov[di * d + ei] / n as f64 + if di == ei { lambda } else { 0.0 };
                cov[di * d + ei] = c;
                cov[ei * d + di] = c;
            }
        }
        if cov.iter().any(|c| !c.is_finite()) {
            return Err(NcgError::NonFinite { op: "log_det_cov" });
        }
        let (log_det, inverse) = linalg::spd_log_det_and_inverse(&cov, d)?;
        self.push(
            Tensor::scalar(F::of(log_det)),
            Op::LogDetCov {
                x,
                centered,
                inverse,
            },
        )
    }

    /// Records an op whose forward value was computed by the caller.
    ///
    /// `backward` receives the input values and the output gradient and
    /// returns one optional gradient per input.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<F>,
        backward: impl Fn(&[&Tensor<F>], &[F]) -> Vec<Option<Vec<F>>> + 'static,
    ) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
        )
    }
}
