//! Boxed-domain bound propagation under feature-level perturbation.
//!
//! The feature vector at the input of layer `l̃` is widened by `±κ` in every
//! dimension and pushed through layers `l̃..=L`. Affine layers use the
//! sign-split rule `L = W⁺·l + W⁻·u + b`, `U = W⁺·u + W⁻·l + b`, which is built
//! from monotone rounded operations only, so bounds are monotone in `κ` in
//! floating point as well. Runs of consecutive dense layers are fused into
//! one affine map first, so a purely affine suffix yields the exact reachable
//! interval. `κ = 0` evaluates the point directly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::network::{BoundParams, LayerKind, Network};
use crate::tensor::{Padding, Tensor};

/// Elementwise lower/upper bounds over a common shape.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalTensor {
    lower: Tensor,
    upper: Tensor,
}

impl IntervalTensor {
    pub fn new(lower: Tensor, upper: Tensor) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::dim("interval", lower.shape(), upper.shape()));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower.data()[i] <= upper.data()[i])) {
            return Err(Error::contract(format!(
                "interval lower bound exceeds upper bound at {i}: {} > {}",
                lower.data()[i],
                upper.data()[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    /// The degenerate box `[x, x]`.
    pub fn point(x: Tensor) -> Self {
        Self {
            lower: x.clone(),
            upper: x,
        }
    }

    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor {
        &self.upper
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    pub fn contains(&self, x: &Tensor) -> bool {
        x.shape() == self.shape()
            && x.data()
                .iter()
                .zip(self.lower.data().iter().zip(self.upper.data()))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    /// Whether `other` lies inside `self` elementwise.
    pub fn encloses(&self, other: &IntervalTensor) -> bool {
        self.shape() == other.shape()
            && (0..self.lower.len())
                .all(|i| self.lower.data()[i] <= other.lower.data()[i] && other.upper.data()[i] <= self.upper.data()[i])
    }
}

/// Parameters of the provable-robustness criterion: output tolerance `Δ`,
/// perturbation layer `l̃` (1-based) and perturbation bound `κ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustSpec {
    pub delta: Vec<f64>,
    pub layer_index: usize,
    pub kappa: f64,
}

impl RobustSpec {
    pub fn new(delta: Vec<f64>, layer_index: usize, kappa: f64) -> Result<Self> {
        let spec = Self {
            delta,
            layer_index,
            kappa,
        };
        spec.check()?;
        Ok(spec)
    }

    /// Checks the invariants that do not depend on a network.
    pub fn check(&self) -> Result<()> {
        if let Some(d) = self.delta.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(Error::contract(format!(
                "tolerance must be finite and nonnegative, got {d}"
            )));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(Error::contract(format!(
                "kappa must be finite and nonnegative, got {}",
                self.kappa
            )));
        }
        if self.layer_index == 0 {
            return Err(Error::contract("perturbation layer index is 1-based"));
        }
        Ok(())
    }

    /// Checks the spec against a network's depth and output width.
    pub fn validate_for(&self, net: &Network) -> Result<()> {
        self.check()?;
        net.check_split(self.layer_index)?;
        if self.delta.len() != net.output_dim() {
            return Err(Error::contract(format!(
                "tolerance has {} entries but the network has {} outputs",
                self.delta.len(),
                net.output_dim()
            )));
        }
        Ok(())
    }
}

/// `[fv − κ, fv + κ]`.
pub fn widen(fv: &Tensor, kappa: f64) -> Result<IntervalTensor> {
    if !(kappa >= 0.0) {
        return Err(Error::contract(format!("kappa must be nonnegative, got {kappa}")));
    }
    Ok(IntervalTensor {
        lower: fv.add_scalar(-kappa),
        upper: fv.add_scalar(kappa),
    })
}

/// Box as a pair of endpoint tensors on a graph, with an optional pending
/// affine map `x ↦ M·x + b` collected from consecutive dense layers.
struct SymBox {
    lower: Var,
    upper: Var,
    pending: Option<(Var, Var)>,
}

impl SymBox {
    /// Applies the pending affine map with the sign-split rule
    /// `L = M⁺·l + M⁻·u + b`, `U = M⁺·u + M⁻·l + b`.
    fn materialize(&mut self, g: &mut Graph) -> Result<()> {
        if let Some((m, b)) = self.pending.take() {
            let pos = g.max_scalar(m, 0.0);
            let neg = g.min_scalar(m, 0.0);
            let lp = g.matmul_t(self.lower, pos)?;
            let un = g.matmul_t(self.upper, neg)?;
            let up = g.matmul_t(self.upper, pos)?;
            let ln = g.matmul_t(self.lower, neg)?;
            let lo = g.add(lp, un)?;
            let hi = g.add(up, ln)?;
            self.lower = g.add_bias(lo, b)?;
            self.upper = g.add_bias(hi, b)?;
        }
        Ok(())
    }

    fn bounds(&mut self, g: &mut Graph) -> Result<(Var, Var)> {
        self.materialize(g)?;
        Ok((self.lower, self.upper))
    }

    fn dense(&mut self, g: &mut Graph, w: Var, b: Var) -> Result<()> {
        self.pending = Some(match self.pending {
            None => (w, b),
            Some((m, c)) => {
                let wm = g.matmul(w, m)?;
                let units = g.value(c).shape()[0];
                let c_row = g.reshape(c, &[1, units])?;
                let wc = g.matmul_t(c_row, w)?;
                let out = g.value(wc).shape()[1];
                let wc = g.reshape(wc, &[out])?;
                (wm, g.add(wc, b)?)
            }
        });
        Ok(())
    }

    fn conv(&mut self, g: &mut Graph, k: Var, b: Var, stride: usize, padding: Padding) -> Result<()> {
        self.materialize(g)?;
        let pos = g.max_scalar(k, 0.0);
        let neg = g.min_scalar(k, 0.0);
        let lp = g.conv2d(self.lower, pos, stride, padding)?;
        let un = g.conv2d(self.upper, neg, stride, padding)?;
        let up = g.conv2d(self.upper, pos, stride, padding)?;
        let ln = g.conv2d(self.lower, neg, stride, padding)?;
        let lo = g.add(lp, un)?;
        let hi = g.add(up, ln)?;
        self.lower = g.add_bias(lo, b)?;
        self.upper = g.add_bias(hi, b)?;
        Ok(())
    }

    fn monotone(&mut self, g: &mut Graph, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<()> {
        self.materialize(g)?;
        self.lower = f(g, self.lower)?;
        self.upper = f(g, self.upper)?;
        Ok(())
    }

    fn reshape(&mut self, g: &mut Graph, shape: &[usize]) -> Result<()> {
        self.materialize(g)?;
        self.lower = g.reshape(self.lower, shape)?;
        self.upper = g.reshape(self.upper, shape)?;
        Ok(())
    }
}

/// Records the box propagation of `fv ± κ` (a batch at the input of layer
/// `l̃`) through layers `l̃..=L` and returns the output `(lower, upper)`.
pub fn trace_suffix_bounds(
    net: &Network,
    g: &mut Graph,
    params: &BoundParams,
    fv: Var,
    l_tilde: usize,
    kappa: f64,
) -> Result<(Var, Var)> {
    net.check_split(l_tilde)?;
    if !(kappa >= 0.0) {
        return Err(Error::contract(format!("kappa must be nonnegative, got {kappa}")));
    }
    if kappa == 0.0 {
        // The box is the single point `fv`; evaluating it directly keeps the
        // bound bit-identical to the prediction.
        let out = net.trace(g, params, fv, l_tilde - 1..net.len())?;
        return Ok((out, out));
    }
    let lower = g.add_scalar(fv, -kappa);
    let upper = g.add_scalar(fv, kappa);
    let mut sym = SymBox {
        lower,
        upper,
        pending: None,
    };
    for idx in l_tilde - 1..net.len() {
        let layer = &net.layers()[idx];
        let step = match &layer.kind {
            LayerKind::Dense { .. } => {
                let (w, b) = params.layer(idx).expect("dense layer has parameters");
                sym.dense(g, w, b)
            }
            LayerKind::Conv2d { stride, padding, .. } => {
                let (k, b) = params.layer(idx).expect("conv layer has parameters");
                sym.conv(g, k, b, *stride, *padding)
            }
            LayerKind::Relu => sym.monotone(g, |g, v| Ok(g.relu(v))),
            LayerKind::Maxpool2d { window, stride } => sym.monotone(g, |g, v| g.maxpool2d(v, *window, *stride)),
            LayerKind::Flatten => {
                let batch = g.value(sym.lower).shape()[0];
                let flat = net.shape_after(idx + 1).expect("in range")[0];
                sym.reshape(g, &[batch, flat])
            }
        };
        step.map_err(|e| Error::Layer {
            layer: layer.name.clone(),
            index: idx + 1,
            source: Box::new(e),
        })?;
    }
    sym.bounds(g)
}

/// Records the full bound computation for a batch of network inputs: point
/// evaluation of layers `1..l̃`, then box propagation of the remainder.
pub fn trace_output_bounds(
    net: &Network,
    g: &mut Graph,
    params: &BoundParams,
    inputs: Var,
    l_tilde: usize,
    kappa: f64,
) -> Result<(Var, Var)> {
    net.check_split(l_tilde)?;
    let fv = net.trace(g, params, inputs, 0..l_tilde - 1)?;
    trace_suffix_bounds(net, g, params, fv, l_tilde, kappa)
}

/// Output bound `[L, U]` of `net` at `input` under `(l̃, κ)`-perturbation.
pub fn output_bounds(net: &Network, input: &Tensor, spec: &RobustSpec) -> Result<IntervalTensor> {
    spec.validate_for(net)?;
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let batch = input.reshape(&shape)?;
    let (lower, upper) = output_bounds_batch(net, &batch, spec.layer_index, spec.kappa)?;
    let d = [net.output_dim()];
    IntervalTensor::new(lower.reshape(&d)?, upper.reshape(&d)?)
}

/// Batched output bounds; returns `([B, d_L], [B, d_L])`.
pub fn output_bounds_batch(net: &Network, inputs: &Tensor, l_tilde: usize, kappa: f64) -> Result<(Tensor, Tensor)> {
    net.check_batch(inputs, 0)?;
    let mut g = Graph::new();
    let params = net.bind(&mut g, false);
    let x = g.constant(inputs.clone());
    let (lo, hi) = trace_output_bounds(net, &mut g, &params, x, l_tilde, kappa)?;
    Ok((g.value(lo).clone(), g.value(hi).clone()))
}

/// Bounds of `g⁽ᴸ⁾(…g⁽ˡ̃⁾(fv))` over the whole box `fv ∈ [feature − κ, feature + κ]`.
pub fn suffix_bounds(net: &Network, l_tilde: usize, feature: &Tensor, kappa: f64) -> Result<IntervalTensor> {
    net.check_split(l_tilde)?;
    let mut shape = vec![1];
    shape.extend_from_slice(feature.shape());
    let batch = feature.reshape(&shape)?;
    net.check_batch(&batch, l_tilde - 1)?;
    let mut g = Graph::new();
    let params = net.bind(&mut g, false);
    let fv = g.constant(batch);
    let (lo, hi) = trace_suffix_bounds(net, &mut g, &params, fv, l_tilde, kappa)?;
    let d = [net.output_dim()];
    IntervalTensor::new(g.value(lo).reshape(&d)?, g.value(hi).reshape(&d)?)
}

fn box_on_graph(g: &mut Graph, b: &IntervalTensor) -> SymBox {
    SymBox {
        lower: g.constant(b.lower.clone()),
        upper: g.constant(b.upper.clone()),
        pending: None,
    }
}

fn box_from_graph(g: &mut Graph, mut sym: SymBox) -> Result<IntervalTensor> {
    let (lo, hi) = sym.bounds(g)?;
    IntervalTensor::new(g.value(lo).clone(), g.value(hi).clone())
}

/// Affine transformer for `W·x + b` over a box; `box` is `[in]` or `[B, in]`.
pub fn propagate_dense(bx: &IntervalTensor, weight: &Tensor, bias: &Tensor) -> Result<IntervalTensor> {
    let single = bx.shape().len() == 1;
    let bx = if single {
        let shape = [1, bx.shape()[0]];
        IntervalTensor {
            lower: bx.lower.reshape(&shape)?,
            upper: bx.upper.reshape(&shape)?,
        }
    } else {
        bx.clone()
    };
    let mut g = Graph::new();
    let mut sym = box_on_graph(&mut g, &bx);
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    sym.dense(&mut g, w, b)?;
    let out = box_from_graph(&mut g, sym)?;
    if single {
        let d = [out.shape()[1]];
        IntervalTensor::new(out.lower.reshape(&d)?, out.upper.reshape(&d)?)
    } else {
        Ok(out)
    }
}

/// Affine transformer for a convolution (optionally with bias) over a box of
/// shape `[h, w, c]` or `[B, h, w, c]`.
pub fn propagate_conv(
    bx: &IntervalTensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<IntervalTensor> {
    let mut g = Graph::new();
    let mut sym = box_on_graph(&mut g, bx);
    let k = g.constant(kernel.clone());
    let filters = *kernel.shape().last().unwrap_or(&0);
    let b = g.constant(bias.cloned().unwrap_or_else(|| Tensor::zeros(&[filters])));
    sym.conv(&mut g, k, b, stride, padding)?;
    box_from_graph(&mut g, sym)
}

/// Monotone nondecreasing maps handled by [`propagate_monotone`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Monotone {
    Relu,
    Maxpool { window: usize, stride: usize },
}

/// Applies a monotone map to both endpoints independently.
pub fn propagate_monotone(bx: &IntervalTensor, f: Monotone) -> Result<IntervalTensor> {
    let apply = |t: &Tensor| -> Result<Tensor> {
        match f {
            Monotone::Relu => Ok(t.relu()),
            Monotone::Maxpool { window, stride } => Ok(t.maxpool2d(window, stride)?.0),
        }
    };
    IntervalTensor::new(apply(&bx.lower)?, apply(&bx.upper)?)
}
