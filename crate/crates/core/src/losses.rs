//! Tolerance-aware regression losses.
//!
//! Scalar forms ([`tolerance_error`], [`tolerance_error_clip`],
//! [`overflow_oracle`], [`symbolic_error`]) are used for reference checks and
//! certification; the graph forms in [`trace_loss`] are what training
//! differentiates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::interval::{trace_output_bounds, RobustSpec};
use crate::network::Network;
use crate::tensor::Tensor;

/// Samples per graph when evaluating (not training) a loss over a dataset.
pub const EVAL_CHUNK: usize = 32;

/// The interval `[lb − Δ, lb + Δ]` of acceptable predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToleranceBand {
    pub lb: f64,
    pub delta: f64,
}

impl ToleranceBand {
    pub fn new(lb: f64, delta: f64) -> Result<Self> {
        if !(delta >= 0.0) {
            return Err(Error::contract(format!("tolerance must be nonnegative, got {delta}")));
        }
        Ok(Self { lb, delta })
    }

    pub fn lower(&self) -> f64 {
        self.lb - self.delta
    }

    pub fn upper(&self) -> f64 {
        self.lb + self.delta
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower() <= x && x <= self.upper()
    }

    /// Shortest distance from `x` to the band.
    pub fn distance(&self, x: f64) -> f64 {
        if x < self.lower() {
            self.lower() - x
        } else if x > self.upper() {
            x - self.upper()
        } else {
            0.0
        }
    }
}

fn clip_nonneg(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.0
    }
}

/// Zero inside the band, otherwise the distance to the nearer band edge.
pub fn tolerance_error(pred: f64, band: ToleranceBand) -> f64 {
    let (lo, hi) = (band.lower(), band.upper());
    if lo <= pred && pred <= hi {
        0.0
    } else {
        (pred - lo).abs().min((pred - hi).abs())
    }
}

/// `max(clip≥0(lo − pred), clip≥0(pred − hi))`, the branch-free form of
/// [`tolerance_error`].
pub fn tolerance_error_clip(pred: f64, band: ToleranceBand) -> f64 {
    clip_nonneg(band.lower() - pred).max(clip_nonneg(pred - band.upper()))
}

/// Reference overflow of `[lower, upper]` beyond the band: the sum, over the
/// maximal pieces of `[lower, upper] \ band`, of the distance from each
/// piece's midpoint to the band. Pieces of measure zero are dropped.
pub fn overflow_oracle(lower: f64, upper: f64, band: ToleranceBand) -> f64 {
    debug_assert!(lower <= upper);
    let (lo, hi) = (band.lower(), band.upper());
    let mut pieces: Vec<(f64, f64)> = Vec::with_capacity(2);
    if lower < lo {
        pieces.push((lower, upper.min(lo)));
    }
    if upper > hi {
        pieces.push((lower.max(hi), upper));
    }
    pieces.into_iter().map(|(a, b)| band.distance(0.5 * (a + b))).sum()
}

/// Symbolic loss of an output bound: the mean of the endpoint tolerance
/// errors. Equal to [`overflow_oracle`] for every `lower ≤ upper`.
pub fn symbolic_error(lower: f64, upper: f64, band: ToleranceBand) -> f64 {
    0.5 * (tolerance_error_clip(lower, band) + tolerance_error_clip(upper, band))
}

/// Which training objective to evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    /// Mean over samples of `‖f(in) − lb‖²`.
    Mse,
    /// Interval tolerance loss with per-output tolerance.
    Interval { delta: Vec<f64> },
    /// Symbolic tolerance loss under `(l̃, κ)`-perturbation.
    Symbolic { spec: RobustSpec },
}

impl LossKind {
    pub fn validate_for(&self, net: &Network) -> Result<()> {
        match self {
            LossKind::Mse => Ok(()),
            LossKind::Interval { delta } => RobustSpec {
                delta: delta.clone(),
                layer_index: net.len(),
                kappa: 0.0,
            }
            .validate_for(net),
            LossKind::Symbolic { spec } => spec.validate_for(net),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Interval { .. } => "interval",
            LossKind::Symbolic { .. } => "symbolic",
        }
    }
}

/// Loss value with its per-sample terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub n: usize,
}

impl LossReport {
    fn from_per_sample(per_sample: Vec<f64>) -> Self {
        let n = per_sample.len();
        let value = per_sample.iter().sum::<f64>() / n as f64;
        Self { value, per_sample, n }
    }
}

/// Handles to a recorded loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTrace {
    /// Scalar mean over the batch.
    pub loss: Var,
    /// `[B]` per-sample sums over output dimensions.
    pub per_sample: Var,
}

/// Stacks inputs and labels of `samples` into `[B, ..]` and `[B, d]`.
pub fn stack_batch<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<(Tensor, Tensor)> {
    let samples: Vec<&Sample> = samples.into_iter().collect();
    if samples.is_empty() {
        return Err(Error::contract("batch must contain at least one sample"));
    }
    let inputs: Vec<&Tensor> = samples.iter().map(|s| &s.input).collect();
    let d = samples[0].label.len();
    let mut labels = Vec::with_capacity(d * samples.len());
    for s in &samples {
        if s.label.len() != d {
            return Err(Error::contract("samples in a batch have different label widths"));
        }
        labels.extend_from_slice(&s.label);
    }
    Ok((Tensor::stack(&inputs)?, Tensor::new(vec![samples.len(), d], labels)?))
}

fn band_edges(labels: &Tensor, delta: &[f64]) -> Result<(Tensor, Tensor)> {
    let d = labels.shape()[1];
    if delta.len() != d {
        return Err(Error::contract(format!(
            "tolerance has {} entries but labels have {d}",
            delta.len()
        )));
    }
    let mut lo = labels.clone();
    let mut hi = labels.clone();
    for (i, (l, h)) in lo.data_mut().iter_mut().zip(hi.data_mut().iter_mut()).enumerate() {
        let band = ToleranceBand {
            lb: *l,
            delta: delta[i % d],
        };
        *l = band.lower();
        *h = band.upper();
    }
    Ok((lo, hi))
}

/// Graph form of [`tolerance_error_clip`], elementwise.
fn trace_tolerance_error(g: &mut Graph, pred: Var, lo: Var, hi: Var) -> Result<Var> {
    let below = g.sub(lo, pred)?;
    let below = g.clip_nonneg(below);
    let above = g.sub(pred, hi)?;
    let above = g.clip_nonneg(above);
    g.max(below, above)
}

fn finish(g: &mut Graph, err: Var) -> Result<LossTrace> {
    let sq = g.mul(err, err)?;
    let per_sample = g.sum_last_axis(sq)?;
    let loss = g.reduce_mean(per_sample);
    Ok(LossTrace { loss, per_sample })
}

/// Records `kind` for the batch `inputs` with `labels: [B, d]`.
pub fn trace_loss(
    net: &Network,
    g: &mut Graph,
    params: &crate::network::BoundParams,
    inputs: Var,
    labels: &Tensor,
    kind: &LossKind,
) -> Result<LossTrace> {
    match kind {
        LossKind::Mse => {
            let pred = net.trace(g, params, inputs, 0..net.len())?;
            let lab = g.constant(labels.clone());
            let diff = g.sub(pred, lab)?;
            finish(g, diff)
        }
        LossKind::Interval { delta } => {
            let pred = net.trace(g, params, inputs, 0..net.len())?;
            let (lo, hi) = band_edges(labels, delta)?;
            let (lo, hi) = (g.constant(lo), g.constant(hi));
            let err = trace_tolerance_error(g, pred, lo, hi)?;
            finish(g, err)
        }
        LossKind::Symbolic { spec } => {
            let (lower, upper) = trace_output_bounds(net, g, params, inputs, spec.layer_index, spec.kappa)?;
            let (lo, hi) = band_edges(labels, &spec.delta)?;
            let (lo, hi) = (g.constant(lo), g.constant(hi));
            let e_lower = trace_tolerance_error(g, lower, lo, hi)?;
            let e_upper = trace_tolerance_error(g, upper, lo, hi)?;
            let sum = g.add(e_lower, e_upper)?;
            let err = g.mul_scalar(sum, 0.5);
            finish(g, err)
        }
    }
}

/// Evaluates `kind` over `samples` without recording gradients.
pub fn evaluate(net: &Network, samples: &[Sample], kind: &LossKind) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(Error::contract("loss needs at least one sample (N >= 1)"));
    }
    kind.validate_for(net)?;
    let mut per_sample = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let (inputs, labels) = stack_batch(chunk)?;
        net.check_batch(&inputs, 0)?;
        let mut g = Graph::new();
        let params = net.bind(&mut g, false);
        let x = g.constant(inputs);
        let t = trace_loss(net, &mut g, &params, x, &labels, kind)?;
        per_sample.extend_from_slice(g.value(t.per_sample).data());
    }
    Ok(LossReport::from_per_sample(per_sample))
}

/// Mean-squared error `(1/N) Σ ‖f(in) − lb‖²`.
pub fn mse_loss(net: &Network, samples: &[Sample]) -> Result<LossReport> {
    evaluate(net, samples, &LossKind::Mse)
}

/// Interval tolerance loss `(1/N) Σ Σ_j e^Δ_j(f_j(in), lb_j)²`.
pub fn interval_tolerance_loss(net: &Network, samples: &[Sample], delta: &[f64]) -> Result<LossReport> {
    evaluate(net, samples, &LossKind::Interval { delta: delta.to_vec() })
}

/// Symbolic tolerance loss over the output bounds of each sample.
pub fn symbolic_tolerance_loss(net: &Network, samples: &[Sample], spec: &RobustSpec) -> Result<LossReport> {
    evaluate(net, samples, &LossKind::Symbolic { spec: spec.clone() })
}

/// Loss over one batch together with gradients for every parameter, in the
/// order of [`Network::parameters`].
pub fn loss_and_gradients(net: &Network, batch: &[&Sample], kind: &LossKind) -> Result<(LossReport, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::contract("loss needs at least one sample (N >= 1)"));
    }
    let (inputs, labels) = stack_batch(batch.iter().copied())?;
    net.check_batch(&inputs, 0)?;
    let mut g = Graph::new();
    let params = net.bind(&mut g, true);
    let x = g.constant(inputs);
    let t = trace_loss(net, &mut g, &params, x, &labels, kind)?;
    let per_sample = g.value(t.per_sample).data().to_vec();
    let mut grads = g.backward(t.loss)?;
    let out = params
        .vars()
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();
    Ok((LossReport::from_per_sample(per_sample), out))
}
