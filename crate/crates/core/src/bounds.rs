//! Generalization-bound calculators and an empirical Rademacher estimator.
//!
//! All constants are the explicit ones from the proofs (256 for the linear
//! class, 64√2 for the two MLP classes, and the concentration tail terms of
//! the generalization gap), not tuned values.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{contrastive_dirs, AttackError, AttackSpec, ScoreProgram};
use crate::diffcore::Tensor;
use crate::losses::{effective_bound, lipschitz_constant, loss_at_zero, LossError, LossKind};
use crate::models::{Constraint, FeatureExtractor, ModelError};
use crate::norms::{conversion_factor, PNorm};
use crate::par;
use crate::synthdata::{max_norm, ContrastiveBatch, LatentClassModel, TupleMode};
use crate::training::TupleProgram;

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("confidence δ = {0} must lie in (0, 1)")]
    BadDelta(f64),
    #[error("τ = {0} must be below 1")]
    TauTooLarge(f64),
    #[error("missing budgets: {0}")]
    MissingBudgets(String),
    #[error("enumeration of {0} class tuples exceeds the limit of {1}")]
    EnumerationTooLarge(f64, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
}

pub const CONSTANTS_PROVENANCE: &str = "proof-explicit";
pub const ENUMERATION_LIMIT: usize = 10_000_000;

/// Norm statistics of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataNorms {
    /// `max{‖X‖_{p,∞}, ‖X⁺‖_{p,∞}, ‖X⁻‖_{p,∞}}`.
    pub p_max: f64,
    /// The same with the dual exponent `p*`.
    pub p_star_max: f64,
    /// The same with `r*`, the dual of the attack norm.
    pub r_star_max: f64,
    pub x_pinf: f64,
    pub xpos_pinf: f64,
    pub xneg_pinf: f64,
    pub m: usize,
    #[serde(rename = "M")]
    pub num_samples: usize,
}

impl DataNorms {
    /// Norms of a batch, with `p` the norm of the data terms and `r` the attack norm.
    pub fn from_batch(batch: &ContrastiveBatch, p: PNorm, r: PNorm) -> Self {
        let m = batch.dim;
        let anchors = || batch.anchors.chunks_exact(m);
        let pos = || batch.positives.chunks_exact(m);
        let neg = || batch.negatives.chunks_exact(m);
        let all = |q: PNorm| max_norm(anchors(), q).max(max_norm(pos(), q)).max(max_norm(neg(), q));
        Self {
            p_max: all(p),
            p_star_max: all(p.dual()),
            r_star_max: all(r.dual()),
            x_pinf: max_norm(anchors(), p),
            xpos_pinf: max_norm(pos(), p),
            xneg_pinf: max_norm(neg(), p),
            m,
            num_samples: batch.len(),
        }
    }
}

/// `256·m·s(p*,p,m)·w²·√M·(P·P* + ε·R*·s(r*,p,m))` for the linear class
/// under an `ℓr` attack.
pub fn linear_bound(norms: &DataNorms, w: f64, p: PNorm, r: PNorm, eps: f64) -> f64 {
    let m = norms.m;
    let s_pp = conversion_factor(p.dual(), p, m);
    let s_rp = conversion_factor(r.dual(), p, m);
    256.0
        * m as f64
        * s_pp
        * w
        * w
        * (norms.num_samples as f64).sqrt()
        * (norms.p_max * norms.p_star_max + eps * norms.r_star_max * s_rp)
}

/// Proof-explicit generalization gap
/// `2·R_S(G)/M + 3B√(ln(4/δ)/M) + B√(ln(2/δ)/(2M))`.
pub fn ag_m(rad_g: f64, b: f64, delta: f64, num_samples: usize) -> Result<f64, BoundError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(BoundError::BadDelta(delta));
    }
    let m = num_samples as f64;
    Ok(2.0 * rad_g / m + 3.0 * b * ((4.0 / delta).ln() / m).sqrt() + b * ((2.0 / delta).ln() / (2.0 * m)).sqrt())
}

/// `(1/(1−τ))·(L̃_sun − τ·ℓ(0)) + AG_M/(1−τ)`.
pub fn supervised_risk_certificate(lsun: f64, ag: f64, tau: f64, kind: LossKind) -> Result<f64, BoundError> {
    if !(tau < 1.0) {
        return Err(BoundError::TauTooLarge(tau));
    }
    Ok((lsun - tau * loss_at_zero(kind, 1)) / (1.0 - tau) + ag / (1.0 - tau))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `linear`, `frobenius` or `one_inf`.
    pub class: String,
    /// Upper bound on `R_S(H)`.
    pub rademacher_bound: f64,
    /// `η·R_S(H)`, the bound on `R_S(G)`.
    pub rademacher_g: f64,
    pub ag_m: f64,
    pub components: BTreeMap<String, f64>,
    pub constants_provenance: String,
    pub eta: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub delta: f64,
    #[serde(rename = "M")]
    pub num_samples: usize,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl BoundReport {
    /// `(component, value)` rows, headline values first.
    pub fn table(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("rademacher_bound".to_string(), self.rademacher_bound),
            ("rademacher_g".into(), self.rademacher_g),
            ("ag_m".into(), self.ag_m),
            ("eta".into(), self.eta),
            ("B".into(), self.b),
            ("delta".into(), self.delta),
            ("M".into(), self.num_samples as f64),
            ("epsilon".into(), self.epsilon),
        ];
        rows.extend(self.components.iter().map(|(k, v)| (k.clone(), *v)));
        rows
    }
}

/// B-terms, `K` and the bound for the Frobenius-constrained MLP class.
#[derive(Debug, Clone, PartialEq)]
pub struct FrobeniusTerms {
    pub b_x_eps: f64,
    pub b_x: f64,
    pub b_xpos: f64,
    pub b_xneg: f64,
    pub k: f64,
    pub bound: f64,
}

fn width_term(widths: &[usize]) -> f64 {
    widths.windows(2).map(|w| (w[0] * w[1]) as f64).sum::<f64>().sqrt()
}

pub fn frobenius_terms(
    budgets: &[f64],
    widths: &[usize],
    lipschitz: f64,
    norms: &DataNorms,
    p: PNorm,
    eps: f64,
) -> FrobeniusTerms {
    let d = budgets.len();
    let m = norms.m as f64;
    let scale = lipschitz.powi(d as i32 - 1)
        * budgets.iter().product::<f64>()
        * 1f64.max(m.powf(0.5 - p.recip()));
    let b_x_eps = scale * (norms.x_pinf + eps);
    let b_xpos = scale * norms.xpos_pinf;
    let b_xneg = scale * norms.xneg_pinf;
    let k = 2.0 * b_x_eps * (b_xpos + b_xneg);
    let bound = 64.0
        * std::f64::consts::SQRT_2
        * width_term(widths)
        * (d as f64).sqrt()
        * k
        * (norms.num_samples as f64).sqrt();
    FrobeniusTerms { b_x_eps, b_x: scale * norms.x_pinf, b_xpos, b_xneg, k, bound }
}

/// B-terms, `K₀`, `K₁` and the bound for the `ℓ1,∞`-constrained MLP class.
#[derive(Debug, Clone, PartialEq)]
pub struct OneInfTerms {
    pub b1_x_eps: f64,
    pub b1_x: f64,
    pub b1_xpos: f64,
    pub b1_xneg: f64,
    pub bp_x_eps: f64,
    pub bp_x: f64,
    pub bp_xpos: f64,
    pub bp_xneg: f64,
    pub k0: f64,
    pub k1: f64,
    pub bound: f64,
}

pub fn one_inf_terms(
    budgets: &[f64],
    widths: &[usize],
    lipschitz: f64,
    norms: &DataNorms,
    p: PNorm,
    eps: f64,
) -> OneInfTerms {
    let d = budgets.len();
    let m = norms.m as f64;
    let l = lipschitz.powi(d as i32 - 1);
    let s1 = l * budgets.iter().product::<f64>();
    let sp = l
        * budgets.iter().zip(&widths[1..]).map(|(b, &h)| h as f64 * b).product::<f64>()
        * m.powf(1.0 - p.recip());
    let (b1_x_eps, b1_xpos, b1_xneg) = (s1 * (norms.x_pinf + eps), s1 * norms.xpos_pinf, s1 * norms.xneg_pinf);
    let (bp_x_eps, bp_xpos, bp_xneg) = (sp * (norms.x_pinf + eps), sp * norms.xpos_pinf, sp * norms.xneg_pinf);
    let k0 = 2.0 * b1_x_eps * (bp_xpos + bp_xneg);
    let k1 = k0 / 2.0 + bp_x_eps * (b1_xpos + b1_xneg);
    let bound = 64.0
        * std::f64::consts::SQRT_2
        * width_term(widths)
        * (d as f64 * k0 * k1).sqrt()
        * (norms.num_samples as f64).sqrt();
    OneInfTerms {
        b1_x_eps,
        b1_x: s1 * norms.x_pinf,
        b1_xpos,
        b1_xneg,
        bp_x_eps,
        bp_x: sp * norms.x_pinf,
        bp_xpos,
        bp_xneg,
        k0,
        k1,
        bound,
    }
}

/// Largest `|f(x′)ᵀ(f(x⁺) − f(x⁻))|` the linear class can produce.
fn linear_score_range(norms: &DataNorms, w: f64, p: PNorm, r: PNorm, eps: f64) -> f64 {
    let m = norms.m;
    // ‖δ‖_{p*} ≤ ε·m^{max(0, 1/p* − 1/r)} for ‖δ‖_r ≤ ε
    let widen = (m as f64).powf((p.dual().recip() - r.recip()).max(0.0));
    (norms.p_star_max + eps * widen) * conversion_factor(p.dual(), p, m) * w * w * 2.0 * norms.p_max
}

pub fn mlp_bound_frobenius(
    extractor: &FeatureExtractor,
    norms: &DataNorms,
    kind: LossKind,
    k: usize,
    p: PNorm,
    eps: f64,
    delta: f64,
) -> Result<BoundReport, BoundError> {
    let Constraint::Frobenius { budgets } = extractor.constraint() else {
        return Err(BoundError::MissingBudgets("Frobenius budgets are not declared".into()));
    };
    let t = frobenius_terms(budgets, &extractor.widths(), extractor.activation().lipschitz(), norms, p, eps);
    let mut c = BTreeMap::new();
    c.insert("K".into(), t.k);
    c.insert("B_X_eps".into(), t.b_x_eps);
    c.insert("B_X".into(), t.b_x);
    c.insert("B_Xpos".into(), t.b_xpos);
    c.insert("B_Xneg".into(), t.b_xneg);
    finish_report("frobenius", t.bound, t.k / 2.0, c, norms, kind, k, eps, delta)
}

pub fn mlp_bound_oneinf(
    extractor: &FeatureExtractor,
    norms: &DataNorms,
    kind: LossKind,
    k: usize,
    p: PNorm,
    eps: f64,
    delta: f64,
) -> Result<BoundReport, BoundError> {
    let Constraint::OneInf { budgets } = extractor.constraint() else {
        return Err(BoundError::MissingBudgets("ℓ1,∞ budgets are not declared".into()));
    };
    let t = one_inf_terms(budgets, &extractor.widths(), extractor.activation().lipschitz(), norms, p, eps);
    let mut c = BTreeMap::new();
    c.insert("K0".into(), t.k0);
    c.insert("K1".into(), t.k1);
    c.insert("B1inf_X_eps".into(), t.b1_x_eps);
    c.insert("B1inf_X".into(), t.b1_x);
    c.insert("B1inf_Xpos".into(), t.b1_xpos);
    c.insert("B1inf_Xneg".into(), t.b1_xneg);
    c.insert("Bprime_X_eps".into(), t.bp_x_eps);
    c.insert("Bprime_X".into(), t.bp_x);
    c.insert("Bprime_Xpos".into(), t.bp_xpos);
    c.insert("Bprime_Xneg".into(), t.bp_xneg);
    finish_report("one_inf", t.bound, t.k0 / 2.0, c, norms, kind, k, eps, delta)
}

/// Bound for the linear class `|||W|||_p ≤ w` under an `ℓr` attack.
pub fn linear_bound_report(
    w: f64,
    p: PNorm,
    r: PNorm,
    norms: &DataNorms,
    kind: LossKind,
    k: usize,
    eps: f64,
    delta: f64,
) -> Result<BoundReport, BoundError> {
    let m = norms.m;
    let mut c = BTreeMap::new();
    c.insert("P".into(), norms.p_max);
    c.insert("P_star".into(), norms.p_star_max);
    c.insert("R_star".into(), norms.r_star_max);
    c.insert("s(p*,p,m)".into(), conversion_factor(p.dual(), p, m));
    c.insert("s(r*,p,m)".into(), conversion_factor(r.dual(), p, m));
    let range = linear_score_range(norms, w, p, r, eps);
    finish_report("linear", linear_bound(norms, w, p, r, eps), range, c, norms, kind, k, eps, delta)
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    class: &str,
    rad_h: f64,
    score_range: f64,
    components: BTreeMap<String, f64>,
    norms: &DataNorms,
    kind: LossKind,
    k: usize,
    eps: f64,
    delta: f64,
) -> Result<BoundReport, BoundError> {
    let eta = lipschitz_constant(kind);
    let b = effective_bound(kind, k, -score_range, score_range)?;
    let rad_g = eta * rad_h;
    let mut notes = Vec::new();
    if k > 1 {
        notes.push(format!("η is the single-score constant, reused for k = {k}"));
    }
    Ok(BoundReport {
        class: class.into(),
        rademacher_bound: rad_h,
        rademacher_g: rad_g,
        ag_m: ag_m(rad_g, b, delta, norms.num_samples)?,
        components,
        constants_provenance: CONSTANTS_PROVENANCE.into(),
        eta,
        b,
        delta,
        num_samples: norms.num_samples,
        epsilon: eps,
        notes,
    })
}

/// Dispatch on the extractor's declared constraint. `attack_norm` is the
/// attack norm; for the MLP classes it is also the data norm.
pub fn bound_report(
    extractor: &FeatureExtractor,
    batch: &ContrastiveBatch,
    kind: LossKind,
    attack_norm: PNorm,
    eps: f64,
    delta: f64,
) -> Result<BoundReport, BoundError> {
    let k = batch.mode.scores();
    match extractor.constraint() {
        Constraint::Induced { p, budget } => {
            let norms = DataNorms::from_batch(batch, *p, attack_norm);
            linear_bound_report(*budget, *p, attack_norm, &norms, kind, k, eps, delta)
        }
        Constraint::Frobenius { .. } => {
            let norms = DataNorms::from_batch(batch, attack_norm, attack_norm);
            mlp_bound_frobenius(extractor, &norms, kind, k, attack_norm, eps, delta)
        }
        Constraint::OneInf { .. } => {
            let norms = DataNorms::from_batch(batch, attack_norm, attack_norm);
            mlp_bound_oneinf(extractor, &norms, kind, k, attack_norm, eps, delta)
        }
        Constraint::Unconstrained => {
            Err(BoundError::MissingBudgets("the extractor declares no norm budgets".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConstants {
    pub task: Vec<usize>,
    pub p_max: f64,
    pub rho_min_plus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteClassConstants {
    pub tau_k: f64,
    pub p_distinct: f64,
    pub alpha_rho: f64,
    pub beta: f64,
    /// `E[ℓ_{|I⁺|}(0⃗) | I⁺ ≠ ∅]`.
    pub expected_zero_loss: f64,
    pub tasks: Vec<TaskConstants>,
}

/// Exact enumeration over `(c⁺, c₁⁻, …, c_k⁻) ∈ C^{k+1}`.
pub fn finite_class_constants(
    model: &LatentClassModel,
    k: usize,
    kind: LossKind,
) -> Result<FiniteClassConstants, BoundError> {
    let c = model.num_classes();
    if k == 0 {
        return Err(BoundError::InvalidArgument("k must be ≥ 1".into()));
    }
    let total = (c as f64).powi(k as i32 + 1);
    if total > ENUMERATION_LIMIT as f64 {
        return Err(BoundError::EnumerationTooLarge(total, ENUMERATION_LIMIT));
    }
    let rho = &model.rho;
    let mut idx = vec![0usize; k + 1];
    let mut tau_k = 0.0;
    let mut p_none = 0.0;
    let mut p_distinct = 0.0;
    let mut zero_loss_mass = 0.0;
    // task -> (class -> P(Q = T, I⁺ = ∅, c⁺ = class))
    let mut table: BTreeMap<Vec<usize>, BTreeMap<usize, f64>> = BTreeMap::new();
    loop {
        let prob: f64 = idx.iter().map(|&i| rho[i]).product();
        let cp = idx[0];
        let hits = idx[1..].iter().filter(|&&x| x == cp).count();
        if hits > 0 {
            tau_k += prob;
            zero_loss_mass += prob * loss_at_zero(kind, hits);
        } else if prob > 0.0 {
            p_none += prob;
            let mut task = idx.clone();
            task.sort_unstable();
            task.dedup();
            if task.len() == k + 1 {
                p_distinct += prob;
            }
            *table.entry(task).or_default().entry(cp).or_insert(0.0) += prob;
        }
        // odometer
        let mut pos = 0;
        loop {
            if pos > k {
                break;
            }
            idx[pos] += 1;
            if idx[pos] < c {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
        if pos > k {
            break;
        }
    }
    if !(p_none > 0.0) {
        return Err(BoundError::TauTooLarge(1.0));
    }
    let tasks: Vec<TaskConstants> = table
        .into_iter()
        .map(|(task, per)| {
            let z: f64 = per.values().sum();
            let rho_min = task.iter().map(|c| per.get(c).copied().unwrap_or(0.0) / z).fold(f64::INFINITY, f64::min);
            TaskConstants { p_max: 1.0 / task.len() as f64, rho_min_plus: rho_min, task }
        })
        .collect();
    let worst = tasks.iter().map(|t| t.p_max / t.rho_min_plus).fold(0.0, f64::max);
    let alpha = worst / (1.0 - tau_k);
    let expected_zero_loss = if tau_k > 0.0 { zero_loss_mass / tau_k } else { 0.0 };
    Ok(FiniteClassConstants {
        tau_k,
        p_distinct: p_distinct / p_none,
        alpha_rho: alpha,
        beta: alpha * tau_k * expected_zero_loss,
        expected_zero_loss,
        tasks,
    })
}

/// A set of feature extractors the Rademacher supremum ranges over.
pub trait HypothesisClass: Sync {
    fn sample(&self, rng: &mut ChaCha8Rng) -> FeatureExtractor;
    fn project(&self, f: FeatureExtractor) -> FeatureExtractor;
    /// A single fixed hypothesis needs no search.
    fn is_singleton(&self) -> bool {
        false
    }
}

/// Exactly one hypothesis.
pub struct FixedHypothesis(pub FeatureExtractor);

impl HypothesisClass for FixedHypothesis {
    fn sample(&self, _rng: &mut ChaCha8Rng) -> FeatureExtractor {
        self.0.clone()
    }

    fn project(&self, _f: FeatureExtractor) -> FeatureExtractor {
        self.0.clone()
    }

    fn is_singleton(&self) -> bool {
        true
    }
}

/// Every extractor with the template's architecture that meets its budgets.
pub struct BudgetClass(pub FeatureExtractor);

impl HypothesisClass for BudgetClass {
    fn sample(&self, rng: &mut ChaCha8Rng) -> FeatureExtractor {
        let layers = self
            .0
            .layers()
            .iter()
            .map(|w| {
                let data = (0..w.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::new(w.shape().to_vec(), data).expect("same shape")
            })
            .collect();
        // scale up past the budget so projection lands on the boundary
        let f = self.0.with_layers(layers).expect("same architecture");
        let grown: Vec<Tensor> = f.layers().iter().map(|w| w.scaled(1e6)).collect();
        f.with_layers(grown).expect("same architecture").project_to_budget()
    }

    fn project(&self, f: FeatureExtractor) -> FeatureExtractor {
        f.project_to_budget()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RademacherConfig {
    pub n_sigma: usize,
    pub n_restarts: usize,
    #[serde(default = "default_ascent_steps")]
    pub ascent_steps: usize,
    /// Per-layer step as a fraction of the layer's norm.
    #[serde(default = "default_ascent_rate")]
    pub ascent_rate: f64,
    pub seed: u64,
}

fn default_ascent_steps() -> usize {
    100
}

fn default_ascent_rate() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_sigma: usize,
    /// Best objective per σ draw.
    pub per_sigma: Vec<f64>,
}

/// `g_f` on every tuple: the loss at the attacked anchor, and the attacked anchors.
fn g_values(
    f: &FeatureExtractor,
    batch: &ContrastiveBatch,
    attack: &AttackSpec,
    prog: &ScoreProgram,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), BoundError> {
    let mut vals = Vec::with_capacity(batch.len());
    let mut points = Vec::with_capacity(batch.len());
    for j in 0..batch.len() {
        let t = batch.tuple(j);
        let dirs = contrastive_dirs(f, &t, batch.mode)?;
        let out = prog.attack(attack, f, t.anchor, &dirs, 0)?;
        vals.push(out.loss);
        points.push(out.point);
    }
    Ok((vals, points))
}

/// Monte-Carlo lower estimate of `E_σ sup_f Σ_i σ_i g_f(z_i)` with
/// `g_f(z) = ℓ(inf_{x′} f(x′)ᵀ(f(x⁺) − f(x⁻)))`. The sup is approximated by
/// the best of several random feasible starts, each refined by projected
/// normalized ascent with the gradient taken at the attacked anchors.
pub fn empirical_rademacher(
    class: &dyn HypothesisClass,
    batch: &ContrastiveBatch,
    kind: LossKind,
    attack: &AttackSpec,
    config: &RademacherConfig,
) -> Result<RademacherEstimate, BoundError> {
    if config.n_sigma < 2 || config.n_restarts == 0 {
        return Err(BoundError::InvalidArgument("need ≥ 2 σ draws and ≥ 1 restart".into()));
    }
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let template = class.sample(&mut probe_rng);
    let prog = ScoreProgram::new(&template, batch.mode.scores(), kind)?;
    let tuple_prog = TupleProgram::new(&template, batch.mode, kind)?;
    let m = batch.len();

    let per_sigma = par::try_map_range(config.n_sigma, |s| -> Result<f64, BoundError> {
        let mut srng = ChaCha8Rng::seed_from_u64(par::derive_seed(config.seed ^ 0x5151_5151, s as u64));
        let sigma: Vec<f64> = (0..m).map(|_| if srng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let objective = |g: &[f64]| par::tree_sum(&sigma.iter().zip(g).map(|(a, b)| a * b).collect::<Vec<_>>());
        let mut best = f64::NEG_INFINITY;
        for restart in 0..config.n_restarts {
            let seed = par::derive_seed(par::derive_seed(config.seed, s as u64), restart as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut f = class.sample(&mut rng);
            let (vals, mut points) = g_values(&f, batch, attack, &prog)?;
            best = best.max(objective(&vals));
            if class.is_singleton() {
                continue;
            }
            for _ in 0..config.ascent_steps {
                let mut grad: Vec<Vec<f64>> = f.layers().iter().map(|w| vec![0.0; w.len()]).collect();
                for j in 0..m {
                    let t = batch.tuple(j);
                    let (_, g) = tuple_prog.value_and_weight_grad(&f, &points[j], &t)?;
                    for (acc, gl) in grad.iter_mut().zip(g) {
                        acc.iter_mut().zip(gl.data()).for_each(|(a, v)| *a += sigma[j] * v);
                    }
                }
                let layers = f
                    .layers()
                    .iter()
                    .zip(&grad)
                    .map(|(w, g)| {
                        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let wn = w.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
                        let step = if gn > 0.0 { config.ascent_rate * wn / gn } else { 0.0 };
                        let data = w.data().iter().zip(g).map(|(a, b)| a + step * b).collect();
                        Tensor::new(w.shape().to_vec(), data).expect("same shape")
                    })
                    .collect();
                f = class.project(f.with_layers(layers)?);
                let (vals, pts) = g_values(&f, batch, attack, &prog)?;
                points = pts;
                best = best.max(objective(&vals));
            }
        }
        Ok(best)
    })?;
    let (value, stderr) = par::mean_stderr(&per_sigma);
    Ok(RademacherEstimate { value, stderr, n_sigma: config.n_sigma, per_sigma })
}

/// Mode check shared by callers that need single-negative tuples.
pub fn require_single_score(mode: TupleMode) -> Result<(), BoundError> {
    if mode.scores() == 1 {
        Ok(())
    } else {
        Err(BoundError::InvalidArgument("this bound is stated for one negative per tuple".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_norms(m: usize, num: usize) -> DataNorms {
        DataNorms {
            p_max: 1.0,
            p_star_max: 1.0,
            r_star_max: 1.0,
            x_pinf: 1.0,
            xpos_pinf: 1.0,
            xneg_pinf: 1.0,
            m,
            num_samples: num,
        }
    }

    #[test]
    fn linear_bound_examples() {
        let n = unit_norms(1, 1);
        assert_eq!(linear_bound(&n, 1.0, PNorm::TWO, PNorm::TWO, 1.0), 512.0);
        assert_eq!(linear_bound(&n, 1.0, PNorm::TWO, PNorm::TWO, 0.0), 256.0);
        let a = linear_bound(&unit_norms(3, 10), 0.7, PNorm::INF, PNorm::TWO, 0.2);
        let b = linear_bound(&unit_norms(3, 20), 0.7, PNorm::INF, PNorm::TWO, 0.2);
        assert!((b / a - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ag_m_examples() {
        let v = ag_m(0.0, 1.0, 0.5, 10_000).unwrap();
        let expect = 3.0 * (8f64.ln() / 1e4).sqrt() + (4f64.ln() / 2e4).sqrt();
        assert!((v - expect).abs() < 1e-15);
        assert_eq!(ag_m(7.0, 0.0, 0.1, 7).unwrap(), 2.0);
        assert!(ag_m(1.0, 1.0, 1.0, 5).is_err());
        let a = ag_m(0.0, 2.0, 0.1, 100).unwrap();
        let b = ag_m(0.0, 2.0, 0.1, 400).unwrap();
        assert!((b - a / 2.0).abs() < 1e-15);
    }

    #[test]
    fn certificate_examples() {
        assert_eq!(supervised_risk_certificate(0.7, 0.2, 0.0, LossKind::Hinge).unwrap(), 0.7 + 0.2);
        assert_eq!(supervised_risk_certificate(1.0, 0.0, 0.5, LossKind::Hinge).unwrap(), 1.0);
        assert!(supervised_risk_certificate(1.0, 0.0, 1.0, LossKind::Hinge).is_err());
    }

    #[test]
    fn depth_one_terms() {
        let n = DataNorms { x_pinf: 2.0, xpos_pinf: 3.0, xneg_pinf: 4.0, ..unit_norms(4, 9) };
        let f = frobenius_terms(&[1.5], &[4, 2], 7.0, &n, PNorm::INF, 0.0);
        // max{1, 4^{1/2}} = 2
        assert_eq!(f.b_x, 1.5 * 2.0 * 2.0);
        assert_eq!(f.b_x_eps, f.b_x);
        let o = one_inf_terms(&[1.5], &[4, 2], 7.0, &n, PNorm::TWO, 0.0);
        assert_eq!(o.b1_x, 1.5 * 2.0);
        assert_eq!(o.bp_x, 2.0 * 1.5 * 4f64.powf(0.5) * 2.0);
        assert_eq!(o.b1_x_eps, o.b1_x);
    }

    #[test]
    fn finite_constants_small_cases() {
        let two = LatentClassModel::blobs(2, 1, 1.0, 1.0, None, 0).unwrap();
        let c = finite_class_constants(&two, 1, LossKind::Hinge).unwrap();
        assert!((c.tau_k - 0.5).abs() < 1e-15);
        assert_eq!(c.p_distinct, 1.0);
        assert_eq!(c.expected_zero_loss, 1.0);
        let four = LatentClassModel::blobs(4, 1, 1.0, 1.0, None, 0).unwrap();
        let c = finite_class_constants(&four, 2, LossKind::Logistic).unwrap();
        assert!((c.p_distinct - 2.0 / 3.0).abs() < 1e-12);
        assert!(c.alpha_rho >= 1.0 / (1.0 - c.tau_k));
    }

    #[test]
    fn enumeration_guard() {
        let big = LatentClassModel::blobs(100, 1, 1.0, 1.0, None, 0).unwrap();
        assert!(matches!(
            finite_class_constants(&big, 3, LossKind::Hinge),
            Err(BoundError::EnumerationTooLarge(..))
        ));
    }
}
