//! Single-step FGSM and the minimal-ε comparison between two models.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

/// Normalised pixel domain.
pub const PIXEL_MIN: f64 = -1.0;
pub const PIXEL_MAX: f64 = 1.0;
/// Multiplier from normalised ε to raw 8-bit pixel units.
pub const RAW_PIXEL_SCALE: f64 = 255.0 / 2.0;
/// Perturbed inputs evaluated per forward batch during the ε scan.
const SCAN_CHUNK: usize = 8;
/// Slack when comparing ε differences against the equality band, so that
/// grid spacing rounding does not decide the bucket.
const BAND_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Output deviation (label units) that counts as a successful attack.
    pub deviation_threshold: f64,
    /// Candidate step sizes, strictly increasing and positive.
    pub epsilon_grid: Vec<f64>,
    /// ε differences strictly below this count as roughly equal.
    pub equality_band: f64,
    /// Per-output tolerance defining an originally correct prediction.
    pub tolerance: Vec<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            deviation_threshold: 80.0,
            epsilon_grid: default_epsilon_grid(),
            equality_band: 0.05,
            tolerance: vec![10.0],
        }
    }
}

/// 0.005, 0.010, …, 0.500.
pub fn default_epsilon_grid() -> Vec<f64> {
    (1..=100).map(|k| k as f64 / 200.0).collect()
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.deviation_threshold > 0.0) {
            return Err(Error::contract("deviation threshold must be positive"));
        }
        if self.epsilon_grid.is_empty() || !(self.epsilon_grid[0] > 0.0) {
            return Err(Error::contract("epsilon grid must be non-empty and positive"));
        }
        if self.epsilon_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::contract("epsilon grid must be strictly increasing"));
        }
        if !(self.equality_band >= 0.0) {
            return Err(Error::contract("equality band must be nonnegative"));
        }
        if self.tolerance.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::contract("tolerance must be nonnegative"));
        }
        Ok(())
    }
}

/// Gradient of `Σ_j (f_j(input) − label_j)²` with respect to the input.
pub fn input_gradient(net: &Network, input: &Tensor, label: &[f64]) -> Result<Tensor> {
    if label.len() != net.output_dim() {
        return Err(Error::contract("label width does not match network output"));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let batch = input.reshape(&shape)?;
    net.check_batch(&batch, 0)?;
    let mut g = Graph::new();
    let params = net.bind(&mut g, false);
    let x = g.variable(batch);
    let pred = net.trace(&mut g, &params, x, 0..net.len())?;
    let lab = g.constant(Tensor::new(vec![1, label.len()], label.to_vec())?);
    let diff = g.sub(pred, lab)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.reduce_sum(sq);
    let grads = g.backward(loss)?;
    grads
        .get(x)
        .map(|t| t.reshape(input.shape()))
        .unwrap_or_else(|| Ok(Tensor::zeros(input.shape())))
}

/// `clamp(input + ε·sign(grad), −1, 1)` with `sign(0) = 0`.
pub fn apply_sign_step(input: &Tensor, grad: &Tensor, epsilon: f64) -> Result<Tensor> {
    input.zip_map(grad, "fgsm", |x, g| {
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        (x + epsilon * s).clamp(PIXEL_MIN, PIXEL_MAX)
    })
}

/// One FGSM step of size `epsilon` against the squared deviation loss.
pub fn fgsm_step(net: &Network, input: &Tensor, label: &[f64], epsilon: f64) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::contract("epsilon must be nonnegative"));
    }
    let grad = input_gradient(net, input, label)?;
    apply_sign_step(input, &grad, epsilon)
}

/// Largest absolute prediction-label difference over output dimensions.
fn deviation(pred: &[f64], label: &[f64]) -> f64 {
    pred.iter().zip(label).fold(0.0, |m, (p, l)| m.max((p - l).abs()))
}

/// Outcome of the minimal-ε search for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EpsilonSearch {
    /// First grid value whose perturbation reaches the threshold.
    Found { epsilon: f64 },
    /// No grid value reached the threshold.
    NotFound,
    /// The unperturbed prediction was not inside the tolerance band, or
    /// already deviated by the threshold.
    Ineligible { deviation: f64 },
}

impl EpsilonSearch {
    /// ε as a number, with `NotFound` mapped to +∞.
    pub fn as_value(&self) -> Option<f64> {
        match self {
            EpsilonSearch::Found { epsilon } => Some(*epsilon),
            EpsilonSearch::NotFound => Some(f64::INFINITY),
            EpsilonSearch::Ineligible { .. } => None,
        }
    }
}

/// Whether the unperturbed prediction is inside the tolerance band and below
/// the deviation threshold. Returns the deviation alongside.
pub fn is_eligible(net: &Network, input: &Tensor, label: &[f64], config: &AttackConfig) -> Result<(bool, f64)> {
    if config.tolerance.len() != label.len() {
        return Err(Error::contract("tolerance width does not match label width"));
    }
    let pred = net.forward(input)?;
    let dev = deviation(pred.data(), label);
    let in_band = pred
        .data()
        .iter()
        .zip(label)
        .zip(&config.tolerance)
        .all(|((p, l), d)| (p - l).abs() <= *d);
    Ok((in_band && dev < config.deviation_threshold, dev))
}

/// Smallest grid ε at which one FGSM step moves the prediction at least
/// `deviation_threshold` away from the label. The scan stops at the first
/// success; larger grid values are not checked because single-step FGSM is
/// not monotone in ε.
pub fn minimal_epsilon(net: &Network, input: &Tensor, label: &[f64], config: &AttackConfig) -> Result<EpsilonSearch> {
    config.validate()?;
    let (eligible, dev) = is_eligible(net, input, label, config)?;
    if !eligible {
        return Ok(EpsilonSearch::Ineligible { deviation: dev });
    }
    let grad = input_gradient(net, input, label)?;
    for chunk in config.epsilon_grid.chunks(SCAN_CHUNK) {
        let perturbed: Vec<Tensor> = chunk
            .iter()
            .map(|&eps| apply_sign_step(input, &grad, eps))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = perturbed.iter().collect();
        let preds = net.forward_batch(&Tensor::stack(&refs)?)?;
        let d = net.output_dim();
        for (row, &eps) in preds.data().chunks_exact(d).zip(chunk) {
            if deviation(row, label) >= config.deviation_threshold {
                return Ok(EpsilonSearch::Found { epsilon: eps });
            }
        }
    }
    Ok(EpsilonSearch::NotFound)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    ALarger,
    RoughlyEqual,
    BLarger,
}

impl Bucket {
    pub fn classify(eps_a: f64, eps_b: f64, band: f64) -> Bucket {
        if eps_a == eps_b {
            return Bucket::RoughlyEqual;
        }
        let diff = eps_a - eps_b;
        if diff.abs() < band - BAND_SLACK {
            Bucket::RoughlyEqual
        } else if diff > 0.0 {
            Bucket::ALarger
        } else {
            Bucket::BLarger
        }
    }

    pub fn swapped(self) -> Bucket {
        match self {
            Bucket::ALarger => Bucket::BLarger,
            Bucket::BLarger => Bucket::ALarger,
            Bucket::RoughlyEqual => Bucket::RoughlyEqual,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::ALarger => "a_larger",
            Bucket::RoughlyEqual => "roughly_equal",
            Bucket::BLarger => "b_larger",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub id: String,
    /// Minimal ε for model A; `None` when no grid value succeeded.
    pub eps_a: Option<f64>,
    pub eps_b: Option<f64>,
    pub bucket: Bucket,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub id: String,
    pub deviation_a: f64,
    pub deviation_b: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub a_larger: usize,
    pub roughly_equal: usize,
    pub b_larger: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketFractions {
    pub a_larger: f64,
    pub roughly_equal: f64,
    pub b_larger: f64,
}

/// Per-image minimal ε for two models and the bucketed summary.
///
/// A model that never reaches the threshold on the grid is treated as
/// needing ε = +∞ for that image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub skipped: Vec<SkippedImage>,
    pub counts: BucketCounts,
    pub fractions: BucketFractions,
    pub config: AttackConfig,
}

impl ComparisonReport {
    fn from_rows(rows: Vec<ComparisonRow>, skipped: Vec<SkippedImage>, config: AttackConfig) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract(
                "no image passed the precondition for both models; nothing to compare",
            ));
        }
        let mut counts = BucketCounts::default();
        for r in &rows {
            match r.bucket {
                Bucket::ALarger => counts.a_larger += 1,
                Bucket::RoughlyEqual => counts.roughly_equal += 1,
                Bucket::BLarger => counts.b_larger += 1,
            }
        }
        let n = rows.len() as f64;
        let fractions = BucketFractions {
            a_larger: counts.a_larger as f64 / n,
            roughly_equal: counts.roughly_equal as f64 / n,
            b_larger: counts.b_larger as f64 / n,
        };
        Ok(Self {
            rows,
            skipped,
            counts,
            fractions,
            config,
        })
    }

    /// Same comparison with the roles of A and B exchanged.
    pub fn swapped(&self) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| ComparisonRow {
                id: r.id.clone(),
                eps_a: r.eps_b,
                eps_b: r.eps_a,
                bucket: r.bucket.swapped(),
            })
            .collect();
        let skipped = self
            .skipped
            .iter()
            .map(|s| SkippedImage {
                id: s.id.clone(),
                deviation_a: s.deviation_b,
                deviation_b: s.deviation_a,
            })
            .collect();
        Self::from_rows(rows, skipped, self.config.clone()).expect("non-empty")
    }

    /// `(ε_A, ε_B)` pairs for found values, for scatter plots.
    pub fn scatter(&self) -> Vec<(f64, f64)> {
        self.rows.iter().filter_map(|r| Some((r.eps_a?, r.eps_b?))).collect()
    }

    /// Human-readable table; `raw_units` reports ε in 8-bit pixel units.
    pub fn to_table(&self, label_a: &str, label_b: &str, raw_units: bool) -> String {
        let scale = if raw_units { RAW_PIXEL_SCALE } else { 1.0 };
        let fmt = |e: Option<f64>| e.map_or_else(|| "not-found".to_string(), |v| format!("{:.4}", v * scale));
        let mut s = String::new();
        let unit = if raw_units {
            "raw pixel units"
        } else {
            "normalised units"
        };
        let _ = writeln!(s, "# minimal FGSM epsilon ({unit}); A = {label_a}, B = {label_b}");
        let _ = writeln!(s, "{:<32} {:>12} {:>12}  bucket", "id", "eps_A", "eps_B");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<32} {:>12} {:>12}  {}",
                r.id,
                fmt(r.eps_a),
                fmt(r.eps_b),
                r.bucket.as_str()
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "compared {} images ({} skipped: prediction outside tolerance for at least one model)",
            self.rows.len(),
            self.skipped.len()
        );
        let _ = writeln!(
            s,
            "A larger epsilon : {:>5} ({:6.2}%)",
            self.counts.a_larger,
            100.0 * self.fractions.a_larger
        );
        let _ = writeln!(
            s,
            "roughly equal    : {:>5} ({:6.2}%)  |diff| < {}",
            self.counts.roughly_equal,
            100.0 * self.fractions.roughly_equal,
            self.config.equality_band
        );
        let _ = writeln!(
            s,
            "B larger epsilon : {:>5} ({:6.2}%)",
            self.counts.b_larger,
            100.0 * self.fractions.b_larger
        );
        s
    }
}

/// Runs the minimal-ε search for both models on every image of `eval_set`
/// where both predictions start inside the tolerance band.
pub fn compare_models(
    net_a: &Network,
    net_b: &Network,
    eval_set: &[Sample],
    config: &AttackConfig,
) -> Result<ComparisonReport> {
    compare_models_with(net_a, net_b, eval_set, config, |_, _| {})
}

/// [`compare_models`] with a progress callback `(done, total)`.
pub fn compare_models_with(
    net_a: &Network,
    net_b: &Network,
    eval_set: &[Sample],
    config: &AttackConfig,
    mut progress: impl FnMut(usize, usize),
) -> Result<ComparisonReport> {
    config.validate()?;
    if net_a.input_shape() != net_b.input_shape() || net_a.output_dim() != net_b.output_dim() {
        return Err(Error::contract("models have different input or output shapes"));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (i, s) in eval_set.iter().enumerate() {
        let (ok_a, dev_a) = is_eligible(net_a, &s.input, &s.label, config)?;
        let (ok_b, dev_b) = is_eligible(net_b, &s.input, &s.label, config)?;
        if !(ok_a && ok_b) {
            skipped.push(SkippedImage {
                id: s.source_id.clone(),
                deviation_a: dev_a,
                deviation_b: dev_b,
            });
            progress(i + 1, eval_set.len());
            continue;
        }
        let ea = minimal_epsilon(net_a, &s.input, &s.label, config)?;
        let eb = minimal_epsilon(net_b, &s.input, &s.label, config)?;
        let (va, vb) = (ea.as_value().expect("eligible"), eb.as_value().expect("eligible"));
        let finite = |v: f64| v.is_finite().then_some(v);
        rows.push(ComparisonRow {
            id: s.source_id.clone(),
            eps_a: finite(va),
            eps_b: finite(vb),
            bucket: Bucket::classify(va, vb, config.equality_band),
        });
        progress(i + 1, eval_set.len());
    }
    ComparisonReport::from_rows(rows, skipped, config.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_step_example() {
        let x = Tensor::vector(vec![0.0, 0.0]);
        let g = Tensor::vector(vec![0.2, -0.3]);
        let y = apply_sign_step(&x, &g, 0.1).unwrap();
        assert_eq!(y.data(), &[0.1, -0.1]);
    }

    #[test]
    fn sign_step_clamps_and_ignores_zero_gradient() {
        let x = Tensor::vector(vec![0.95, -0.95, 0.3]);
        let g = Tensor::vector(vec![1.0, -1.0, 0.0]);
        let y = apply_sign_step(&x, &g, 0.1).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0, 0.3]);
    }

    #[test]
    fn default_grid() {
        let g = default_epsilon_grid();
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 0.005);
        assert_eq!(g[99], 0.5);
        assert!(AttackConfig::default().validate().is_ok());
    }

    #[test]
    fn config_validation() {
        let repeated = AttackConfig {
            epsilon_grid: vec![0.1, 0.1],
            ..AttackConfig::default()
        };
        assert!(repeated.validate().is_err());
        let zero = AttackConfig {
            deviation_threshold: 0.0,
            ..AttackConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn buckets() {
        assert_eq!(Bucket::classify(0.2, 0.1, 0.05), Bucket::ALarger);
        assert_eq!(Bucket::classify(0.1, 0.2, 0.05), Bucket::BLarger);
        assert_eq!(Bucket::classify(0.12, 0.1, 0.05), Bucket::RoughlyEqual);
        // Exactly the band apart is not "smaller than" the band.
        assert_eq!(Bucket::classify(0.15, 0.1, 0.05), Bucket::ALarger);
        assert_eq!(Bucket::classify(f64::INFINITY, 0.1, 0.05), Bucket::ALarger);
        assert_eq!(
            Bucket::classify(f64::INFINITY, f64::INFINITY, 0.05),
            Bucket::RoughlyEqual
        );
    }
}
