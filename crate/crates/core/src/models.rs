//! Norm-constrained feature extractors.
//!
//! An extractor is `x ↦ W_d σ(W_{d-1} σ(⋯ σ(W_1 x)))` with no biases; a
//! single layer is the linear class `x ↦ Wx`. Each extractor carries the
//! constraint that defines its hypothesis class, and
//! [`FeatureExtractor::project_to_budget`] rescales layers radially back
//! into that class.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Activation, DiffError, GraphBuilder, NodeId, Tensor};
use crate::norms::{matrix_norm, MatrixNorm, NormError, PNorm};

pub const MODEL_FORMAT: &str = "acl-model/1";

/// Relative tolerance below which a budget counts as met, so that projecting
/// twice changes nothing.
const PROJECTION_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    /// `|||W|||_p ≤ budget` on a single linear layer.
    Induced { p: PNorm, budget: f64 },
    /// `‖W_l‖_F ≤ budgets[l]`.
    Frobenius { budgets: Vec<f64> },
    /// `‖W_l‖_{1,∞} ≤ budgets[l]`.
    OneInf { budgets: Vec<f64> },
    Unconstrained,
}

impl Constraint {
    fn norm_for(&self) -> Option<MatrixNorm> {
        match self {
            Constraint::Induced { p, .. } => Some(MatrixNorm::Induced(*p)),
            Constraint::Frobenius { .. } => Some(MatrixNorm::Frobenius),
            Constraint::OneInf { .. } => Some(MatrixNorm::OneInf),
            Constraint::Unconstrained => None,
        }
    }

    fn budget(&self, layer: usize) -> Option<f64> {
        match self {
            Constraint::Induced { budget, .. } => Some(*budget),
            Constraint::Frobenius { budgets } | Constraint::OneInf { budgets } => {
                budgets.get(layer).copied()
            }
            Constraint::Unconstrained => None,
        }
    }

    pub fn is_constrained(&self) -> bool {
        !matches!(self, Constraint::Unconstrained)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    format: String,
    kind: ExtractorKind,
    activation: Activation,
    constraint: Constraint,
    layers: Vec<Tensor>,
}

impl FeatureExtractor {
    /// `x ↦ Wx` with `|||W|||_p ≤ budget`.
    pub fn linear(w: Tensor, p: PNorm, budget: f64) -> Result<Self, ModelError> {
        Self::build(
            ExtractorKind::Linear,
            vec![w],
            Activation::Relu,
            Constraint::Induced { p, budget },
        )
    }

    pub fn mlp(
        layers: Vec<Tensor>,
        activation: Activation,
        constraint: Constraint,
    ) -> Result<Self, ModelError> {
        if matches!(constraint, Constraint::Induced { .. }) {
            return Err(ModelError::Invalid("induced-norm constraints apply to linear extractors".into()));
        }
        Self::build(ExtractorKind::Mlp, layers, activation, constraint)
    }

    fn build(
        kind: ExtractorKind,
        layers: Vec<Tensor>,
        activation: Activation,
        constraint: Constraint,
    ) -> Result<Self, ModelError> {
        let e = Self { format: MODEL_FORMAT.into(), kind, activation, constraint, layers };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.format != MODEL_FORMAT {
            return Err(ModelError::Invalid(format!("unknown format tag `{}`", self.format)));
        }
        if self.layers.is_empty() {
            return Err(ModelError::Invalid("no layers".into()));
        }
        if self.kind == ExtractorKind::Linear && self.layers.len() != 1 {
            return Err(ModelError::Invalid("a linear extractor has exactly one layer".into()));
        }
        for (l, w) in self.layers.iter().enumerate() {
            if w.shape().len() != 2 {
                return Err(ModelError::Shape(format!("layer {l} is not a matrix")));
            }
            if l > 0 && w.cols() != self.layers[l - 1].rows() {
                return Err(ModelError::Shape(format!(
                    "layer {l} expects {} inputs but layer {} has {} outputs",
                    w.cols(),
                    l - 1,
                    self.layers[l - 1].rows()
                )));
            }
            if !w.all_finite() {
                return Err(ModelError::Invalid(format!("layer {l} has non-finite weights")));
            }
        }
        if let Constraint::Frobenius { budgets } | Constraint::OneInf { budgets } = &self.constraint {
            if budgets.len() != self.layers.len() {
                return Err(ModelError::Invalid(format!(
                    "{} budgets for {} layers",
                    budgets.len(),
                    self.layers.len()
                )));
            }
        }
        for l in 0..self.layers.len() {
            if let Some(b) = self.constraint.budget(l) {
                if !(b > 0.0) || !b.is_finite() {
                    return Err(ModelError::Invalid(format!("budget {b} must be positive and finite")));
                }
            }
        }
        if let Constraint::Induced { p, .. } = self.constraint {
            matrix_norm(&self.layers[0], MatrixNorm::Induced(p))?;
        }
        Ok(())
    }

    /// Uniform `(-a, a)` weights with `a = 1/√fan_in`, then projected.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        constraint: Constraint,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(ModelError::Shape(format!("need at least input and output widths, got {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let a = 1.0 / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.random_range(-a..a)).collect();
                Tensor::matrix(w[1], w[0], data)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let e = match constraint {
            Constraint::Induced { p, budget } if layers.len() == 1 => {
                Self::linear(layers.into_iter().next().expect("one layer"), p, budget)?
            }
            c => Self::mlp(layers, activation, c)?,
        };
        Ok(e.project_to_budget())
    }

    pub fn kind(&self) -> &ExtractorKind {
        &self.kind
    }

    pub fn is_linear(&self) -> bool {
        self.layers.len() == 1
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn constraint(&self) -> &Constraint {
        &self.constraint
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    /// Widths `h_0 = m, h_1, …, h_d = n`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|w| w.rows())).collect()
    }

    /// Same architecture and constraint with new weights.
    pub fn with_layers(&self, layers: Vec<Tensor>) -> Result<Self, ModelError> {
        for (a, b) in layers.iter().zip(&self.layers) {
            if a.shape() != b.shape() {
                return Err(ModelError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        if layers.len() != self.layers.len() {
            return Err(ModelError::Shape("layer count changed".into()));
        }
        let e = Self { layers, ..self.clone() };
        e.validate()?;
        Ok(e)
    }

    pub fn with_constraint(&self, constraint: Constraint) -> Result<Self, ModelError> {
        let e = Self { constraint, ..self.clone() };
        e.validate()?;
        Ok(e)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::Shape(format!(
                "input of length {} for an extractor expecting {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = self.layers[0].matvec(x);
        for w in &self.layers[1..] {
            h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            h = w.matvec(&h);
        }
        Ok(h)
    }

    /// Leaf names of the weight parameters, in layer order.
    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len()).map(|l| format!("w{l}")).collect()
    }

    /// Declare the weight leaves in a graph.
    pub fn declare_params(&self, b: &mut GraphBuilder) -> Result<Vec<NodeId>, DiffError> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, w)| b.leaf(&format!("w{l}"), w.shape()))
            .collect()
    }

    /// Append the forward pass applied to node `x`.
    pub fn append_forward(
        &self,
        b: &mut GraphBuilder,
        params: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId, DiffError> {
        let mut h = b.matvec(params[0], x)?;
        for &w in &params[1..] {
            h = b.activation(self.activation, h)?;
            h = b.matvec(w, h)?;
        }
        Ok(h)
    }

    /// Per-layer norms of the constrained kind (Frobenius when unconstrained).
    pub fn layer_norms(&self) -> Vec<f64> {
        let which = self.constraint.norm_for().unwrap_or(MatrixNorm::Frobenius);
        self.layers
            .iter()
            .map(|w| matrix_norm(w, which).expect("validated norm"))
            .collect()
    }

    /// Largest `norm - budget` over layers (≤ 0 when feasible).
    pub fn budget_violation(&self) -> f64 {
        if !self.constraint.is_constrained() {
            return f64::NEG_INFINITY;
        }
        self.layer_norms()
            .iter()
            .enumerate()
            .map(|(l, n)| n - self.constraint.budget(l).expect("constrained"))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rescale each layer whose constrained norm exceeds its budget.
    pub fn project_to_budget(&self) -> Self {
        let Some(which) = self.constraint.norm_for() else {
            return self.clone();
        };
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, w)| {
                let budget = self.constraint.budget(l).expect("constrained");
                let norm = matrix_norm(w, which).expect("validated norm");
                if norm > budget * (1.0 + PROJECTION_TOL) {
                    w.scaled(budget / norm)
                } else {
                    w.clone()
                }
            })
            .collect();
        Self { layers, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("extractor serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let e: Self = serde_json::from_str(s)?;
        e.validate()?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, d).unwrap()
    }

    #[test]
    fn identity_linear() {
        let e = FeatureExtractor::linear(eye(3), PNorm::TWO, 1.0).unwrap();
        assert_eq!(e.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        assert!(e.forward(&[1.0]).is_err());
    }

    #[test]
    fn single_layer_has_no_activation() {
        let e = FeatureExtractor::mlp(
            vec![eye(2).scaled(-1.0)],
            Activation::Relu,
            Constraint::Unconstrained,
        )
        .unwrap();
        assert_eq!(e.forward(&[1.0, 2.0]).unwrap(), vec![-1.0, -2.0]);
    }

    #[test]
    fn frobenius_projection_halves() {
        let w = eye(4); // ‖I₄‖_F = 2
        let e = FeatureExtractor::mlp(vec![w], Activation::Relu, Constraint::Frobenius { budgets: vec![1.0] })
            .unwrap();
        let p = e.project_to_budget();
        assert_eq!(p.layers()[0].data()[0], 0.5);
        assert!((p.layer_norms()[0] - 1.0).abs() < 1e-15);
        assert_eq!(p.project_to_budget(), p);
    }

    #[test]
    fn feasible_untouched() {
        let e = FeatureExtractor::linear(eye(2).scaled(0.3), PNorm::INF, 1.0).unwrap();
        assert_eq!(e.project_to_budget(), e);
    }

    #[test]
    fn one_inf_projection_hits_budget() {
        let w = Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let e = FeatureExtractor::mlp(vec![w], Activation::Tanh, Constraint::OneInf { budgets: vec![2.0] })
            .unwrap()
            .project_to_budget();
        assert!((e.layer_norms()[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn shape_chain_checked() {
        let bad = FeatureExtractor::mlp(
            vec![Tensor::zeros(&[3, 2]), Tensor::zeros(&[2, 4])],
            Activation::Relu,
            Constraint::Unconstrained,
        );
        assert!(bad.is_err());
        let bad = FeatureExtractor::mlp(
            vec![Tensor::zeros(&[3, 2])],
            Activation::Relu,
            Constraint::Frobenius { budgets: vec![1.0, 2.0] },
        );
        assert!(bad.is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = FeatureExtractor::init(
            &[4, 5, 3],
            Activation::LeakyRelu(0.1),
            Constraint::Frobenius { budgets: vec![1.0, 2.0] },
            &mut rng,
        )
        .unwrap();
        let s = e.to_json();
        assert!(s.contains("\"acl-model/1\""));
        assert_eq!(FeatureExtractor::from_json(&s).unwrap(), e);
        let lin = FeatureExtractor::linear(eye(2), PNorm::INF, 1.5).unwrap();
        assert_eq!(FeatureExtractor::from_json(&lin.to_json()).unwrap(), lin);
    }
}
