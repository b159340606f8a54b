//! Input-space adversaries on score-vector losses.
//!
//! Every loss attacked here has the form `ℓ(D·f(x′))` where `D` is a fixed
//! matrix of feature-space directions: `f(x⁺) − f(x_i⁻)` for a contrastive
//! tuple, the block-mean difference for a block tuple, or `μ_c − μ_{c′}` for
//! the mean classifier. Only the anchor `x` is perturbed.
//!
//! PGD ascends an objective whose maximizers are the loss maximizers (the
//! unclamped margin for hinge), so it keeps moving on the hinge's zero-loss
//! plateau. FGSM takes one step along the loss gradient itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Bindings, DiffError, Graph, GraphBuilder, Tensor};
use crate::losses::{append_attack_objective, append_loss, loss, LossError, LossKind};
use crate::models::{FeatureExtractor, ModelError};
use crate::norms::{vector_norm, PNorm};
use crate::synthdata::{TupleMode, TupleView};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("unsupported attack norm ℓ{0} for {1}")]
    UnsupportedNorm(PNorm, &'static str),
    #[error("invalid attack spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite gradient during attack")]
    NonFiniteGradient,
    #[error("exact adversary needs a linear extractor and a single score, {0}")]
    NotExact(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    ExactLinear,
}

fn default_steps() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub norm: PNorm,
    pub epsilon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Defaults to `ε/4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
}

impl AttackSpec {
    pub fn pgd(norm: PNorm, epsilon: f64) -> Self {
        Self { method: AttackMethod::Pgd, norm, epsilon, steps: 20, step_size: None, random_start: false }
    }

    pub fn fgsm(norm: PNorm, epsilon: f64) -> Self {
        Self { method: AttackMethod::Fgsm, ..Self::pgd(norm, epsilon) }
    }

    pub fn exact(norm: PNorm, epsilon: f64) -> Self {
        Self { method: AttackMethod::ExactLinear, ..Self::pgd(norm, epsilon) }
    }

    /// The trivial adversary (`ε = 0`).
    pub fn none() -> Self {
        Self::pgd(PNorm::INF, 0.0)
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_step_size(mut self, step: f64) -> Self {
        self.step_size = Some(step);
        self
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(AttackError::InvalidSpec(format!("radius {} must be finite and ≥ 0", self.epsilon)));
        }
        let n = self.norm.value();
        match self.method {
            AttackMethod::ExactLinear => {
                if !(n == 1.0 || n == 2.0 || self.norm.is_inf()) {
                    return Err(AttackError::UnsupportedNorm(self.norm, "the exact linear adversary"));
                }
            }
            AttackMethod::Fgsm | AttackMethod::Pgd => {
                if !(n == 2.0 || self.norm.is_inf()) {
                    return Err(AttackError::UnsupportedNorm(self.norm, "gradient attacks"));
                }
                if self.steps == 0 {
                    return Err(AttackError::InvalidSpec("steps must be ≥ 1".into()));
                }
                if let Some(s) = self.step_size {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(AttackError::InvalidSpec(format!("step size {s} must be positive")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Short label such as `pgd-linf`.
    pub fn label(&self) -> String {
        let m = match self.method {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::ExactLinear => "exact",
        };
        format!("{m}-l{}", self.norm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub point: Vec<f64>,
    pub loss: f64,
    pub clean_loss: f64,
}

/// Steepest-ascent direction for the unit `ℓp` ball: `sign(g)` for `ℓ∞`,
/// `g/‖g‖₂` for `ℓ2`, a signed basis vector at the largest `|g_j|` for `ℓ1`.
/// Zero gradients give a zero direction.
pub fn dual_direction(g: &[f64], p: PNorm) -> Vec<f64> {
    if p.is_inf() {
        g.iter().map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }).collect()
    } else if p.value() == 2.0 {
        let n = vector_norm(g, PNorm::TWO);
        if n == 0.0 {
            vec![0.0; g.len()]
        } else {
            g.iter().map(|v| v / n).collect()
        }
    } else {
        let mut out = vec![0.0; g.len()];
        let mut best = 0;
        for (j, v) in g.iter().enumerate() {
            if v.abs() > g[best].abs() {
                best = j;
            }
        }
        if g[best] != 0.0 {
            out[best] = g[best].signum();
        }
        out
    }
}

/// Project `x′` onto the `ℓp` ball of radius `ε` around `x`.
pub fn project_ball(x: &[f64], xp: &mut [f64], p: PNorm, eps: f64) {
    if p.is_inf() {
        for (v, &c) in xp.iter_mut().zip(x) {
            *v = v.clamp(c - eps, c + eps);
        }
    } else {
        let delta: Vec<f64> = xp.iter().zip(x).map(|(a, b)| a - b).collect();
        let n = vector_norm(&delta, p);
        if n > eps {
            let s = eps / n;
            for ((v, &c), d) in xp.iter_mut().zip(x).zip(&delta) {
                *v = c + d * s;
            }
        }
    }
}

/// Compiled graphs for `ℓ(D·f(x))` with `D` of a fixed number of rows.
#[derive(Debug, Clone)]
pub struct ScoreProgram {
    kind: LossKind,
    rows: usize,
    param_names: Vec<String>,
    loss: Graph,
    objective: Graph,
}

impl ScoreProgram {
    pub fn new(extractor: &FeatureExtractor, rows: usize, kind: LossKind) -> Result<Self, AttackError> {
        let build = |objective: bool| -> Result<Graph, DiffError> {
            let mut b = GraphBuilder::new();
            let params = extractor.declare_params(&mut b)?;
            let x = b.leaf("x", &[extractor.input_dim()])?;
            let d = b.leaf("dirs", &[rows, extractor.output_dim()])?;
            let fx = extractor.append_forward(&mut b, &params, x)?;
            let v = b.matvec(d, fx)?;
            let out = if objective {
                append_attack_objective(&mut b, kind, v)?
            } else {
                append_loss(&mut b, kind, v)?
            };
            b.finish(out)
        };
        Ok(Self {
            kind,
            rows,
            param_names: extractor.param_names(),
            loss: build(false)?,
            objective: build(true)?,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    fn bindings<'a>(
        &'a self,
        extractor: &'a FeatureExtractor,
        x: &'a Tensor,
        dirs: &'a Tensor,
    ) -> Bindings<'a> {
        let mut b = Bindings::new();
        for (name, w) in self.param_names.iter().zip(extractor.layers()) {
            b.insert(name, w);
        }
        b.insert("x", x);
        b.insert("dirs", dirs);
        b
    }

    pub fn loss_at(&self, extractor: &FeatureExtractor, x: &[f64], dirs: &Tensor) -> Result<f64, AttackError> {
        let xt = Tensor::vector(x.to_vec());
        Ok(self.loss.evaluate(&self.bindings(extractor, &xt, dirs))?)
    }

    fn grad(
        &self,
        graph: &Graph,
        extractor: &FeatureExtractor,
        x: &[f64],
        dirs: &Tensor,
    ) -> Result<(f64, Vec<f64>), AttackError> {
        let xt = Tensor::vector(x.to_vec());
        let (v, mut g) = graph.value_and_gradient(&self.bindings(extractor, &xt, dirs), &["x"])?;
        let g = g.remove("x").expect("requested").into_data();
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(AttackError::NonFiniteGradient);
        }
        Ok((v, g))
    }

    /// Attack `x` under `spec`. `seed` drives the random start, if any.
    pub fn attack(
        &self,
        spec: &AttackSpec,
        extractor: &FeatureExtractor,
        x: &[f64],
        dirs: &Tensor,
        seed: u64,
    ) -> Result<AttackOutcome, AttackError> {
        spec.validate()?;
        let clean = self.loss_at(extractor, x, dirs)?;
        if spec.epsilon == 0.0 {
            return Ok(AttackOutcome { point: x.to_vec(), loss: clean, clean_loss: clean });
        }
        let eps = spec.epsilon;
        match spec.method {
            AttackMethod::ExactLinear => {
                let (point, _) = exact_linear_adversary(extractor, x, dirs, spec.norm, eps)?;
                let l = self.loss_at(extractor, &point, dirs)?;
                Ok(AttackOutcome { point, loss: l, clean_loss: clean })
            }
            AttackMethod::Fgsm => {
                let (_, g) = self.grad(&self.loss, extractor, x, dirs)?;
                let mut xp: Vec<f64> = x
                    .iter()
                    .zip(dual_direction(&g, spec.norm))
                    .map(|(a, d)| a + eps * d)
                    .collect();
                project_ball(x, &mut xp, spec.norm, eps);
                let l = self.loss_at(extractor, &xp, dirs)?;
                if l < clean {
                    Ok(AttackOutcome { point: x.to_vec(), loss: clean, clean_loss: clean })
                } else {
                    Ok(AttackOutcome { point: xp, loss: l, clean_loss: clean })
                }
            }
            AttackMethod::Pgd => {
                let alpha = spec.step();
                let mut cur = x.to_vec();
                if spec.random_start {
                    random_start(x, &mut cur, spec.norm, eps, seed);
                }
                let mut best: Option<(f64, Vec<f64>)> = None;
                for t in 0..=spec.steps {
                    let (obj, g) = self.grad(&self.objective, extractor, &cur, dirs)?;
                    if best.as_ref().is_none_or(|(b, _)| obj > *b) {
                        best = Some((obj, cur.clone()));
                    }
                    if t == spec.steps {
                        break;
                    }
                    for (c, d) in cur.iter_mut().zip(dual_direction(&g, spec.norm)) {
                        *c += alpha * d;
                    }
                    project_ball(x, &mut cur, spec.norm, eps);
                }
                let (_, point) = best.expect("at least one iterate");
                let l = self.loss_at(extractor, &point, dirs)?;
                if l < clean {
                    Ok(AttackOutcome { point: x.to_vec(), loss: clean, clean_loss: clean })
                } else {
                    Ok(AttackOutcome { point, loss: l, clean_loss: clean })
                }
            }
        }
    }
}

fn random_start(x: &[f64], cur: &mut [f64], p: PNorm, eps: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if p.is_inf() {
        for (c, &v) in cur.iter_mut().zip(x) {
            *c = v + rng.random_range(-eps..=eps);
        }
    } else {
        let z: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let n = vector_norm(&z, PNorm::TWO).max(f64::MIN_POSITIVE);
        let u: f64 = rng.random();
        let r = eps * u.powf(1.0 / x.len() as f64);
        for ((c, &v), zi) in cur.iter_mut().zip(x).zip(&z) {
            *c = v + r * zi / n;
        }
    }
    project_ball(x, cur, p, eps);
}

/// Closed-form minimizer of the single score `f(x′)ᵀd` over the `ℓr` ball for
/// a linear extractor `f(x) = Wx`. `dirs` must have exactly one row `d`.
/// Returns `x − ε·dual(Wᵀd, r)` and the minimized score
/// `xᵀWᵀd − ε‖Wᵀd‖_{r*}`.
pub fn exact_linear_adversary(
    extractor: &FeatureExtractor,
    x: &[f64],
    dirs: &Tensor,
    r: PNorm,
    eps: f64,
) -> Result<(Vec<f64>, f64), AttackError> {
    if !extractor.is_linear() {
        return Err(AttackError::NotExact("got a multi-layer extractor".into()));
    }
    if dirs.rows() != 1 || dirs.shape().len() != 2 {
        return Err(AttackError::NotExact(format!("got {} scores", dirs.rows())));
    }
    if !(r.value() == 1.0 || r.value() == 2.0 || r.is_inf()) {
        return Err(AttackError::UnsupportedNorm(r, "the exact linear adversary"));
    }
    let w = &extractor.layers()[0];
    let g = w.matvec_t(dirs.row(0));
    let dir = dual_direction(&g, r);
    let point: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - eps * d).collect();
    let score = crate::diffcore::dot(x, &g) - eps * vector_norm(&g, r.dual());
    Ok((point, score))
}

/// Direction matrix `D` for a contrastive tuple: rows `f(x⁺) − f(x_i⁻)`, or the
/// single row `mean f(x⁺) − mean f(x⁻)` in block mode.
pub fn contrastive_dirs(
    extractor: &FeatureExtractor,
    tuple: &TupleView<'_>,
    mode: TupleMode,
) -> Result<Tensor, AttackError> {
    let n = extractor.output_dim();
    match mode {
        TupleMode::Pair { .. } => {
            let fp = extractor.forward(tuple.positives[0])?;
            let mut data = Vec::with_capacity(tuple.negatives.len() * n);
            for neg in &tuple.negatives {
                let fneg = extractor.forward(neg)?;
                data.extend(fp.iter().zip(&fneg).map(|(a, b)| a - b));
            }
            Ok(Tensor::matrix(tuple.negatives.len(), n, data).expect("consistent shapes"))
        }
        TupleMode::Block { b } => {
            let mut sp = vec![0.0; n];
            let mut sn = vec![0.0; n];
            for pos in &tuple.positives {
                sp.iter_mut().zip(extractor.forward(pos)?).for_each(|(a, v)| *a += v);
            }
            for neg in &tuple.negatives {
                sn.iter_mut().zip(extractor.forward(neg)?).for_each(|(a, v)| *a += v);
            }
            let s = 1.0 / b as f64;
            let data = sp.iter().zip(&sn).map(|(a, c)| a * s - c * s).collect();
            Ok(Tensor::matrix(1, n, data).expect("consistent shapes"))
        }
    }
}

/// Attack one contrastive tuple's anchor.
pub fn attack(
    spec: &AttackSpec,
    extractor: &FeatureExtractor,
    tuple: &TupleView<'_>,
    mode: TupleMode,
    kind: LossKind,
) -> Result<AttackOutcome, AttackError> {
    let dirs = contrastive_dirs(extractor, tuple, mode)?;
    ScoreProgram::new(extractor, dirs.rows(), kind)?.attack(spec, extractor, tuple.anchor, &dirs, 0)
}

/// `ℓ(D·f(x))` by direct evaluation, without a graph.
pub fn score_loss(
    extractor: &FeatureExtractor,
    kind: LossKind,
    x: &[f64],
    dirs: &Tensor,
) -> Result<f64, AttackError> {
    let fx = extractor.forward(x)?;
    Ok(loss(kind, &dirs.matvec(&fx))?)
}
