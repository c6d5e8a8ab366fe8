//! Layered networks with point evaluation split around a feature layer.
//!
//! Layer positions are 1-based to match the usual `g⁽¹⁾ … g⁽ᴸ⁾` numbering:
//! [`Network::forward_to`] with `l` applies layers `1..=l`, and
//! [`Network::forward_from`] with `l̃` applies layers `l̃..=L`.

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Padding, Tensor};

/// Name of the feature layer used for robust fine-tuning in the reference
/// architecture.
pub const FEATURE_LAYER: &str = "fc40";

/// Architecture-only description of a layer, used for construction and the
/// model file header.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        name: String,
        units: usize,
    },
    Conv2d {
        name: String,
        kernel_h: usize,
        kernel_w: usize,
        filters: usize,
        stride: usize,
        padding: Padding,
    },
    Relu {
        name: String,
    },
    Flatten {
        name: String,
    },
    Maxpool2d {
        name: String,
        window: usize,
        stride: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Dense { name, .. }
            | LayerSpec::Conv2d { name, .. }
            | LayerSpec::Relu { name }
            | LayerSpec::Flatten { name }
            | LayerSpec::Maxpool2d { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// `y = W·x + b` with `W: [out × in]`.
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    /// Cross-correlation with `kernel: [kh × kw × c × f]` plus per-filter bias.
    Conv2d {
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: Padding,
    },
    Relu,
    Flatten,
    Maxpool2d {
        window: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn is_affine(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    fn spec(&self) -> LayerSpec {
        let name = self.name.clone();
        match &self.kind {
            LayerKind::Dense { weight, .. } => LayerSpec::Dense {
                name,
                units: weight.shape()[0],
            },
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => LayerSpec::Conv2d {
                name,
                kernel_h: kernel.shape()[0],
                kernel_w: kernel.shape()[1],
                filters: kernel.shape()[3],
                stride: *stride,
                padding: *padding,
            },
            LayerKind::Relu => LayerSpec::Relu { name },
            LayerKind::Flatten => LayerSpec::Flatten { name },
            LayerKind::Maxpool2d { window, stride } => LayerSpec::Maxpool2d {
                name,
                window: *window,
                stride: *stride,
            },
        }
    }

    /// Weight and bias, for layers that have them.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match &self.kind {
            LayerKind::Dense { weight, bias } => Some((weight, bias)),
            LayerKind::Conv2d { kernel, bias, .. } => Some((kernel, bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match &mut self.kind {
            LayerKind::Dense { weight, bias } => Some((weight, bias)),
            LayerKind::Conv2d { kernel, bias, .. } => Some((kernel, bias)),
            _ => None,
        }
    }
}

/// Per-sample output shape of a layer given its input shape.
fn output_shape(spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let bad = |msg: String| Error::Contract(format!("layer `{}`: {msg}", spec.name()));
    match spec {
        LayerSpec::Dense { units, .. } => {
            if input.len() != 1 {
                return Err(bad(format!("dense layer needs a flat input, got {input:?}")));
            }
            if *units == 0 {
                return Err(bad("dense layer needs at least one unit".into()));
            }
            Ok(vec![*units])
        }
        LayerSpec::Conv2d {
            kernel_h,
            kernel_w,
            filters,
            stride,
            padding,
            ..
        } => {
            let [h, w, _] = *input else {
                return Err(bad(format!("conv2d needs an h×w×c input, got {input:?}")));
            };
            if *filters == 0 || *kernel_h == 0 || *kernel_w == 0 {
                return Err(bad("conv2d needs positive kernel size and filters".into()));
            }
            let (oh, ow) = ConvGeometry::output_hw(h, w, *kernel_h, *kernel_w, *stride, *padding)
                .ok_or_else(|| bad(format!("kernel {kernel_h}×{kernel_w} does not fit input {input:?}")))?;
            Ok(vec![oh, ow, *filters])
        }
        LayerSpec::Relu { .. } => Ok(input.to_vec()),
        LayerSpec::Flatten { .. } => Ok(vec![input.iter().product()]),
        LayerSpec::Maxpool2d { window, stride, .. } => {
            let [h, w, c] = *input else {
                return Err(bad(format!("maxpool2d needs an h×w×c input, got {input:?}")));
            };
            let (oh, ow) = ConvGeometry::output_hw(h, w, *window, *window, *stride, Padding::Valid)
                .ok_or_else(|| bad(format!("window {window} does not fit input {input:?}")))?;
            Ok(vec![oh, ow, c])
        }
    }
}

/// Parameter handles recorded on a [`Graph`] for one traced evaluation.
#[derive(Clone, Debug)]
pub struct BoundParams {
    per_layer: Vec<Option<(Var, Var)>>,
}

impl BoundParams {
    pub fn layer(&self, idx: usize) -> Option<(Var, Var)> {
        self.per_layer[idx]
    }

    /// Parameter handles in the same order as [`Network::parameters`].
    pub fn vars(&self) -> Vec<Var> {
        self.per_layer.iter().flatten().flat_map(|&(w, b)| [w, b]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    /// `shapes[l]` is the per-sample shape of `f⁽ˡ⁾`; `shapes[0]` is the input.
    shapes: Vec<Vec<usize>>,
}

impl Network {
    /// Builds a network with zero-valued parameters from an architecture.
    pub fn from_specs(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::contract(format!("invalid input shape {input_shape:?}")));
        }
        let mut seen = HashSet::new();
        let mut shapes = vec![input_shape.to_vec()];
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            if !seen.insert(spec.name().to_string()) {
                return Err(Error::contract(format!("duplicate layer name `{}`", spec.name())));
            }
            let input = shapes.last().expect("shapes starts non-empty");
            let out = output_shape(spec, input)?;
            let kind = match spec {
                LayerSpec::Dense { units, .. } => LayerKind::Dense {
                    weight: Tensor::zeros(&[*units, input[0]]),
                    bias: Tensor::zeros(&[*units]),
                },
                LayerSpec::Conv2d {
                    kernel_h,
                    kernel_w,
                    filters,
                    stride,
                    padding,
                    ..
                } => LayerKind::Conv2d {
                    kernel: Tensor::zeros(&[*kernel_h, *kernel_w, input[2], *filters]),
                    bias: Tensor::zeros(&[*filters]),
                    stride: *stride,
                    padding: *padding,
                },
                LayerSpec::Relu { .. } => LayerKind::Relu,
                LayerSpec::Flatten { .. } => LayerKind::Flatten,
                LayerSpec::Maxpool2d { window, stride, .. } => LayerKind::Maxpool2d {
                    window: *window,
                    stride: *stride,
                },
            };
            layers.push(Layer {
                name: spec.name().to_string(),
                kind,
            });
            shapes.push(out);
        }
        if layers.is_empty() {
            return Err(Error::contract("a network needs at least one layer"));
        }
        if shapes.last().map(Vec::len) != Some(1) {
            return Err(Error::contract(format!(
                "network output must be a vector, got {:?}",
                shapes.last()
            )));
        }
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
            shapes,
        })
    }

    /// The reference direct-perception architecture:
    /// conv 5×5×8 /2 → relu → conv 3×3×16 /2 → relu → flatten → dense 100 →
    /// relu → dense 40 (`fc40`) → relu → dense `output_dim`.
    pub fn default_architecture(input_shape: &[usize], output_dim: usize) -> Result<Self> {
        let conv = |name: &str, k: usize, filters: usize| LayerSpec::Conv2d {
            name: name.into(),
            kernel_h: k,
            kernel_w: k,
            filters,
            stride: 2,
            padding: Padding::Valid,
        };
        let relu = |name: &str| LayerSpec::Relu { name: name.into() };
        let dense = |name: &str, units: usize| LayerSpec::Dense {
            name: name.into(),
            units,
        };
        Self::from_specs(
            input_shape,
            &[
                conv("conv1", 5, 8),
                relu("relu1"),
                conv("conv2", 3, 16),
                relu("relu2"),
                LayerSpec::Flatten { name: "flatten".into() },
                dense("fc100", 100),
                relu("relu3"),
                dense(FEATURE_LAYER, 40),
                relu("relu4"),
                dense("output", output_dim),
            ],
        )
    }

    /// Number of layers `L`.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().expect("non-empty")[0]
    }

    /// Per-sample shape of `f⁽ˡ⁾` for `0 ≤ l ≤ L`.
    pub fn shape_after(&self, l: usize) -> Option<&[usize]> {
        self.shapes.get(l).map(Vec::as_slice)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// 1-based position of the layer called `name`.
    pub fn position_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name).map(|i| i + 1)
    }

    /// Resolves a layer name to the perturbation index `l̃`: the position
    /// right after that layer's activation (or right after the layer itself
    /// when no activation follows).
    pub fn perturbation_index_after(&self, name: &str) -> Result<usize> {
        let pos = self.position_of(name).ok_or_else(|| {
            Error::contract(format!(
                "no layer named `{name}`; available layers: {}",
                self.layer_names().join(", ")
            ))
        })?;
        let followed_by_relu = self.layers.get(pos).is_some_and(|l| matches!(l.kind, LayerKind::Relu));
        let after = if followed_by_relu { pos + 1 } else { pos };
        if after >= self.len() {
            return Err(Error::contract(format!(
                "layer `{name}` has no layers after it to perturb into"
            )));
        }
        Ok(after + 1)
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// `layer.weight` / `layer.bias` labels in parameter order.
    pub fn parameter_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.params().is_some())
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter on `g`, as variables when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.variable(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundParams {
            per_layer: self
                .layers
                .iter()
                .map(|l| l.params().map(|(w, b)| (leaf(w), leaf(b))))
                .collect(),
        }
    }

    /// Checks that `x` is a batch `[B, ..shape_after(before)]`.
    pub(crate) fn check_batch(&self, x: &Tensor, before: usize) -> Result<()> {
        let expected = &self.shapes[before];
        let ok = x.shape().len() == expected.len() + 1 && &x.shape()[1..] == expected.as_slice();
        if ok {
            return Ok(());
        }
        let (name, index) = match self.layers.get(before) {
            Some(l) => (l.name.clone(), before + 1),
            None => ("<output>".to_string(), before),
        };
        Err(Error::Layer {
            layer: name,
            index,
            source: Box::new(Error::dim("layer input", x.shape(), expected)),
        })
    }

    /// Records layers `range` (0-based, half-open) applied to the batch `x`.
    pub fn trace(&self, g: &mut Graph, params: &BoundParams, x: Var, range: Range<usize>) -> Result<Var> {
        let mut cur = x;
        for idx in range {
            let layer = &self.layers[idx];
            cur = self.trace_layer(g, params, idx, cur).map_err(|e| Error::Layer {
                layer: layer.name.clone(),
                index: idx + 1,
                source: Box::new(e),
            })?;
        }
        Ok(cur)
    }

    fn trace_layer(&self, g: &mut Graph, params: &BoundParams, idx: usize, x: Var) -> Result<Var> {
        match &self.layers[idx].kind {
            LayerKind::Dense { .. } => {
                let (w, b) = params.layer(idx).expect("dense layer has parameters");
                let y = g.matmul_t(x, w)?;
                g.add_bias(y, b)
            }
            LayerKind::Conv2d { stride, padding, .. } => {
                let (k, b) = params.layer(idx).expect("conv layer has parameters");
                let y = g.conv2d(x, k, *stride, *padding)?;
                g.add_bias(y, b)
            }
            LayerKind::Relu => Ok(g.relu(x)),
            LayerKind::Flatten => {
                let batch = g.value(x).shape()[0];
                let flat = self.shapes[idx + 1][0];
                g.reshape(x, &[batch, flat])
            }
            LayerKind::Maxpool2d { window, stride } => g.maxpool2d(x, *window, *stride),
        }
    }

    fn eval_batch(&self, x: &Tensor, range: Range<usize>) -> Result<Tensor> {
        self.check_batch(x, range.start)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.trace(&mut g, &params, xv, range)?;
        Ok(g.value(out).clone())
    }

    fn eval_single(&self, x: &Tensor, range: Range<usize>) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let batch = x.reshape(&shape)?;
        let end = range.end;
        let out = self.eval_batch(&batch, range)?;
        out.reshape(&self.shapes[end])
    }

    /// Prediction `f⁽ᴸ⁾(input)` for a single sample.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.eval_single(input, 0..self.len())
    }

    /// Predictions for a batch `[B, ..input_shape]`, returned as `[B, d_L]`.
    pub fn forward_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        self.eval_batch(inputs, 0..self.len())
    }

    /// Feature vector `f⁽ˡ⁾(input)`; `l = 0` returns the input unchanged.
    pub fn forward_to(&self, l: usize, input: &Tensor) -> Result<Tensor> {
        if l > self.len() {
            return Err(Error::contract(format!(
                "layer index {l} out of range 0..={}",
                self.len()
            )));
        }
        if l == 0 {
            let mut batch = vec![1];
            batch.extend_from_slice(input.shape());
            self.check_batch(&input.reshape(&batch)?, 0)?;
            return Ok(input.clone());
        }
        self.eval_single(input, 0..l)
    }

    /// Completes the computation from a feature vector at the input of layer
    /// `l̃` (1-based), i.e. `g⁽ᴸ⁾(…g⁽ˡ̃⁾(fv))`.
    pub fn forward_from(&self, l_tilde: usize, fv: &Tensor) -> Result<Tensor> {
        self.check_split(l_tilde)?;
        self.eval_single(fv, l_tilde - 1..self.len())
    }

    /// Batched variant of [`Network::forward_from`].
    pub fn forward_from_batch(&self, l_tilde: usize, fv: &Tensor) -> Result<Tensor> {
        self.check_split(l_tilde)?;
        self.eval_batch(fv, l_tilde - 1..self.len())
    }

    pub(crate) fn check_split(&self, l_tilde: usize) -> Result<()> {
        if l_tilde == 0 || l_tilde > self.len() {
            return Err(Error::contract(format!(
                "perturbation layer index {l_tilde} out of range 1..={}",
                self.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(name: &str, units: usize) -> LayerSpec {
        LayerSpec::Dense {
            name: name.into(),
            units,
        }
    }

    #[test]
    fn single_dense_layer() {
        let mut net = Network::from_specs(&[2], &[dense("d", 1)]).unwrap();
        if let LayerKind::Dense { weight, .. } = &mut net.layers_mut()[0].kind {
            *weight = Tensor::matrix(&[&[1.0, -1.0]]).unwrap();
        }
        let y = net.forward(&Tensor::vector(vec![3.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[2.0]);
    }

    #[test]
    fn relu_only_network() {
        let net = Network::from_specs(&[2], &[LayerSpec::Relu { name: "r".into() }]).unwrap();
        let y = net.forward(&Tensor::vector(vec![-1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn forward_to_bounds() {
        let net = Network::from_specs(&[2], &[dense("a", 3), dense("b", 1)]).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(net.forward_to(0, &x).unwrap(), x);
        assert_eq!(net.forward_to(2, &x).unwrap(), net.forward(&x).unwrap());
        assert!(matches!(net.forward_to(3, &x), Err(Error::Contract(_))));
        assert!(net.forward_from(0, &x).is_err());
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let net = Network::from_specs(&[2], &[dense("first", 3), dense("second", 1)]).unwrap();
        let err = net.forward(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap_err();
        assert!(err.to_string().contains("first"), "{err}");
        let err = net.forward_from(2, &Tensor::vector(vec![1.0])).unwrap_err();
        assert!(err.to_string().contains("second"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(Network::from_specs(&[2], &[dense("a", 3), dense("a", 1)]).is_err());
    }

    #[test]
    fn default_architecture_shape() {
        let net = Network::default_architecture(&[128, 320, 1], 1).unwrap();
        assert_eq!(net.output_dim(), 1);
        assert_eq!(net.shape_after(4).unwrap(), &[30, 78, 16]);
        assert_eq!(net.position_of(FEATURE_LAYER), Some(8));
        assert_eq!(net.perturbation_index_after(FEATURE_LAYER).unwrap(), 10);
        let y = net.forward(&Tensor::zeros(&[128, 320, 1])).unwrap();
        assert_eq!(y.shape(), &[1]);
        assert!(y.is_finite());
    }

    #[test]
    fn unknown_layer_lists_available() {
        let net = Network::from_specs(&[2], &[dense("a", 3), dense("b", 1)]).unwrap();
        let err = net.perturbation_index_after("fc40").unwrap_err().to_string();
        assert!(err.contains("a, b"), "{err}");
    }
}
