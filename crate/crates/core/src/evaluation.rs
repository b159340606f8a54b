//! Downstream evaluation: mean classifiers, supervised and unsupervised risks,
//! and Monte-Carlo estimators with standard errors.
//!
//! The supervised loss of a linear head `G` on `(x, c)` is
//! `ℓ({(G_c − G_{c′})·f(x)}_{c′≠c})`, so it is attacked through the same
//! [`ScoreProgram`] as the contrastive loss, with the difference rows as
//! directions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackError, AttackSpec, ScoreProgram};
use crate::diffcore::Tensor;
use crate::losses::LossKind;
use crate::models::{FeatureExtractor, ModelError};
use crate::par;
use crate::synthdata::{
    draw_distinct_classes, draw_task, sample_blocks, sample_labeled, sample_pairs, sample_stratified,
    task_distribution, DataError, DistPolicy, LatentClassModel, SupervisedTaskSet, TupleMode,
};
use crate::training::surrogate_losses;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {0} has no points")]
    EmptyClass(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    Lun,
    LsunAdv,
    LsunBlockAdv,
    Lsup,
    LsupMuAdv,
    AvgSupAdv,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub kind: RiskKind,
    pub value: f64,
    pub stderr: f64,
    #[serde(rename = "n")]
    pub n_samples: usize,
}

impl RiskEstimate {
    pub fn from_samples(kind: RiskKind, xs: &[f64]) -> Result<Self, EvalError> {
        if xs.len() < 2 {
            return Err(EvalError::InvalidArgument("a risk estimate needs at least 2 samples".into()));
        }
        let (value, stderr) = par::mean_stderr(xs);
        Ok(Self { kind, value, stderr, n_samples: xs.len() })
    }
}

/// Linear head `x ↦ G·f(x)` over an ordered list of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub rows: Tensor,
    pub class_order: Vec<usize>,
}

pub type MeanClassifier = LinearHead;

impl LinearHead {
    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn position(&self, class: usize) -> Option<usize> {
        self.class_order.iter().position(|&c| c == class)
    }

    /// Class with the largest score, first maximum on ties.
    pub fn predict(&self, features: &[f64]) -> usize {
        let s = self.rows.matvec(features);
        let mut best = 0;
        for i in 1..s.len() {
            if s[i] > s[best] {
                best = i;
            }
        }
        self.class_order[best]
    }

    /// Rows `G_c − G_{c′}` for every `c′ ≠ c`, in class order.
    pub fn margin_dirs(&self, pos: usize) -> Tensor {
        let n = self.rows.cols();
        let mut data = Vec::with_capacity((self.num_classes() - 1) * n);
        let own = self.rows.row(pos);
        for j in (0..self.num_classes()).filter(|&j| j != pos) {
            data.extend(own.iter().zip(self.rows.row(j)).map(|(a, b)| a - b));
        }
        Tensor::matrix(self.num_classes() - 1, n, data).expect("at least two classes")
    }
}

fn features(extractor: &FeatureExtractor, set: &SupervisedTaskSet) -> Result<Vec<Vec<f64>>, EvalError> {
    par::try_map_range(set.len(), |i| Ok(extractor.forward(set.point(i))?))
}

/// Rows are the per-class means of `f(x)` over the task set.
pub fn fit_mean_classifier(
    extractor: &FeatureExtractor,
    set: &SupervisedTaskSet,
) -> Result<MeanClassifier, EvalError> {
    let feats = features(extractor, set)?;
    let n = extractor.output_dim();
    let mut data = Vec::with_capacity(set.task.len() * n);
    for &c in &set.task {
        let members: Vec<Vec<f64>> = feats
            .iter()
            .zip(&set.labels)
            .filter(|(_, &l)| l == c)
            .map(|(f, _)| f.clone())
            .collect();
        if members.is_empty() {
            return Err(EvalError::EmptyClass(c));
        }
        let count = members.len() as f64;
        data.extend(par::tree_sum_vecs(&members).into_iter().map(|s| s / count));
    }
    Ok(LinearHead {
        rows: Tensor::matrix(set.task.len(), n, data).expect("consistent shapes"),
        class_order: set.task.clone(),
    })
}

/// Multinomial logistic regression on frozen features, full-batch gradient
/// descent from zero weights.
pub fn fit_logistic_head(
    extractor: &FeatureExtractor,
    set: &SupervisedTaskSet,
    steps: usize,
) -> Result<LinearHead, EvalError> {
    let feats = features(extractor, set)?;
    if feats.is_empty() {
        return Err(EvalError::InvalidArgument("empty training set for the head".into()));
    }
    let (k, n) = (set.task.len(), extractor.output_dim());
    let labels: Vec<usize> = set
        .labels
        .iter()
        .map(|l| set.task.iter().position(|c| c == l).expect("label in task"))
        .collect();
    let max_sq = feats.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
    let lr = 1.0 / max_sq.max(1e-12);
    let mut w = vec![0.0; k * n];
    for _ in 0..steps {
        let grads = par::map_range(feats.len(), |i| {
            let f = &feats[i];
            let logits: Vec<f64> = (0..k).map(|c| crate::diffcore::dot(&w[c * n..(c + 1) * n], f)).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut g = vec![0.0; k * n];
            for c in 0..k {
                let coef = e[c] / z - if c == labels[i] { 1.0 } else { 0.0 };
                for (gj, fj) in g[c * n..(c + 1) * n].iter_mut().zip(f) {
                    *gj = coef * fj;
                }
            }
            g
        });
        let total = par::tree_sum_vecs(&grads);
        let scale = lr / feats.len() as f64;
        w.iter_mut().zip(total).for_each(|(wi, gi)| *wi -= scale * gi);
    }
    Ok(LinearHead {
        rows: Tensor::matrix(k, n, w).expect("consistent shapes"),
        class_order: set.task.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedEval {
    pub risk: RiskEstimate,
    pub accuracy: RiskEstimate,
}

/// Per-point (attacked) margin loss and correctness of `head ∘ f`.
pub fn supervised_losses(
    extractor: &FeatureExtractor,
    head: &LinearHead,
    set: &SupervisedTaskSet,
    kind: LossKind,
    attack: Option<&AttackSpec>,
    seed: u64,
) -> Result<Vec<(f64, bool)>, EvalError> {
    if head.num_classes() < 2 {
        return Err(EvalError::InvalidArgument("a supervised task needs at least 2 classes".into()));
    }
    let spec = attack.copied().unwrap_or_else(AttackSpec::none);
    let prog = ScoreProgram::new(extractor, head.num_classes() - 1, kind)?;
    par::try_map_range(set.len(), |i| {
        let label = set.labels[i];
        let pos = head
            .position(label)
            .ok_or_else(|| EvalError::InvalidArgument(format!("label {label} not in head")))?;
        let dirs = head.margin_dirs(pos);
        let out = prog.attack(&spec, extractor, set.point(i), &dirs, par::derive_seed(seed, i as u64))?;
        let pred = head.predict(&extractor.forward(&out.point)?);
        Ok((out.loss, pred == label))
    })
}

pub fn supervised_risk(
    extractor: &FeatureExtractor,
    head: &LinearHead,
    set: &SupervisedTaskSet,
    kind: LossKind,
    attack: Option<&AttackSpec>,
    seed: u64,
) -> Result<SupervisedEval, EvalError> {
    let per = supervised_losses(extractor, head, set, kind, attack, seed)?;
    let losses: Vec<f64> = per.iter().map(|p| p.0).collect();
    let acc: Vec<f64> = per.iter().map(|p| if p.1 { 1.0 } else { 0.0 }).collect();
    let risk_kind = if attack.is_some_and(|a| a.epsilon > 0.0) { RiskKind::LsupMuAdv } else { RiskKind::Lsup };
    Ok(SupervisedEval {
        risk: RiskEstimate::from_samples(risk_kind, &losses)?,
        accuracy: RiskEstimate::from_samples(RiskKind::Accuracy, &acc)?,
    })
}

/// Per-tuple (attacked) contrastive losses on fresh tuples from the generator.
pub fn unsup_losses(
    extractor: &FeatureExtractor,
    model: &LatentClassModel,
    mode: TupleMode,
    kind: LossKind,
    attack: Option<&AttackSpec>,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<f64>, EvalError> {
    let data = match mode {
        TupleMode::Pair { k } => sample_pairs(model, n_mc, k, seed)?,
        TupleMode::Block { b } => sample_blocks(model, n_mc, b, seed)?,
    };
    let spec = attack.copied().unwrap_or_else(AttackSpec::none);
    Ok(surrogate_losses(extractor, &data, &spec, kind, seed)?)
}

pub fn unsup_risk(
    extractor: &FeatureExtractor,
    model: &LatentClassModel,
    mode: TupleMode,
    kind: LossKind,
    attack: Option<&AttackSpec>,
    n_mc: usize,
    seed: u64,
) -> Result<RiskEstimate, EvalError> {
    if n_mc < 100 {
        return Err(EvalError::InvalidArgument(format!("n_mc = {n_mc} is below 100")));
    }
    let losses = unsup_losses(extractor, model, mode, kind, attack, n_mc, seed)?;
    let risk_kind = match (attack.is_some_and(|a| a.epsilon > 0.0), mode) {
        (false, _) => RiskKind::Lun,
        (true, TupleMode::Pair { .. }) => RiskKind::LsunAdv,
        (true, TupleMode::Block { .. }) => RiskKind::LsunBlockAdv,
    };
    RiskEstimate::from_samples(risk_kind, &losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskDistribution {
    /// `k+1` distinct classes from `ρ^{k+1}` conditioned on distinctness.
    Distinct,
    /// Distinct classes of `(c⁺, c⁻…)` conditioned on `c_i⁻ ≠ c⁺`.
    Conditioned,
    /// Every class of the model, once.
    AllClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvalConfig {
    pub k: usize,
    pub tasks: TaskDistribution,
    pub n_tasks: usize,
    /// Points per class used to fit the mean classifier.
    pub n_fit_per_class: usize,
    /// Points drawn from `D_T` to estimate the risk of each task.
    pub n_eval: usize,
    #[serde(default)]
    pub trained_head: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvalReport {
    pub risk: RiskEstimate,
    pub accuracy: RiskEstimate,
    /// Per-task mean loss and accuracy.
    pub per_task: Vec<(f64, f64)>,
}

/// Average over tasks of the (attacked) mean-classifier risk. Each task fits a
/// fresh mean classifier and evaluates it on fresh points from uniform `D_T`;
/// the standard error comes from the spread across tasks.
pub fn avg_adv_sup_risk_mu(
    extractor: &FeatureExtractor,
    model: &LatentClassModel,
    kind: LossKind,
    attack: Option<&AttackSpec>,
    config: &TaskEvalConfig,
    seed: u64,
) -> Result<TaskEvalReport, EvalError> {
    if config.n_tasks < 2 || config.n_eval < 1 || config.n_fit_per_class < 1 {
        return Err(EvalError::InvalidArgument("need ≥ 2 tasks and ≥ 1 fit and eval point".into()));
    }
    if matches!(config.tasks, TaskDistribution::Distinct) && model.num_classes() < config.k + 1 {
        return Err(EvalError::InvalidArgument(format!(
            "{} classes cannot form distinct tasks of size {}",
            model.num_classes(),
            config.k + 1
        )));
    }
    let per_task = par::try_map_range(config.n_tasks, |t| -> Result<(f64, f64), EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, t as u64));
        let task = match config.tasks {
            TaskDistribution::Distinct => draw_distinct_classes(model, config.k, &mut rng)?,
            TaskDistribution::Conditioned => draw_task(model, config.k, &mut rng)?,
            TaskDistribution::AllClasses => (0..model.num_classes()).collect(),
        };
        let fit = sample_stratified(model, &task, config.n_fit_per_class, &mut rng);
        let head = if config.trained_head {
            fit_logistic_head(extractor, &fit, 200)?
        } else {
            fit_mean_classifier(extractor, &fit)?
        };
        let dist = task_distribution(model, &task, DistPolicy::Uniform);
        let eval = sample_labeled(model, &task, &dist, config.n_eval, &mut rng);
        let per = supervised_losses(extractor, &head, &eval, kind, attack, par::derive_seed(seed ^ 0xA5A5, t as u64))?;
        let losses: Vec<f64> = per.iter().map(|p| p.0).collect();
        let acc: Vec<f64> = per.iter().map(|p| if p.1 { 1.0 } else { 0.0 }).collect();
        Ok((par::mean(&losses), par::mean(&acc)))
    })?;
    let risks: Vec<f64> = per_task.iter().map(|p| p.0).collect();
    let accs: Vec<f64> = per_task.iter().map(|p| p.1).collect();
    Ok(TaskEvalReport {
        risk: RiskEstimate::from_samples(RiskKind::AvgSupAdv, &risks)?,
        accuracy: RiskEstimate::from_samples(RiskKind::Accuracy, &accs)?,
        per_task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norms::PNorm;
    use crate::synthdata::ClassSampler;

    fn point_classes() -> LatentClassModel {
        LatentClassModel::new(
            vec![0, 1],
            vec![0.5, 0.5],
            vec![
                ClassSampler { mean: vec![1.0, 0.0], std: 0.0 },
                ClassSampler { mean: vec![-1.0, 0.0], std: 0.0 },
            ],
            None,
        )
        .unwrap()
    }

    fn identity() -> FeatureExtractor {
        FeatureExtractor::linear(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), PNorm::TWO, 1.0)
            .unwrap()
    }

    #[test]
    fn mean_classifier_recovers_point_means() {
        let m = point_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = sample_stratified(&m, &[0, 1], 3, &mut rng);
        let head = fit_mean_classifier(&identity(), &set).unwrap();
        assert_eq!(head.rows.data(), &[1.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn empty_class_is_an_error() {
        let m = point_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut set = sample_stratified(&m, &[0], 2, &mut rng);
        set.task = vec![0, 1];
        assert!(matches!(fit_mean_classifier(&identity(), &set), Err(EvalError::EmptyClass(1))));
    }

    #[test]
    fn separated_points_have_zero_hinge_risk() {
        let m = point_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = sample_stratified(&m, &[0, 1], 5, &mut rng);
        let head = fit_mean_classifier(&identity(), &set).unwrap();
        // margin (μ₀ − μ₁)·x = 2 ≥ 1
        let r = supervised_risk(&identity(), &head, &set, LossKind::Hinge, None, 0).unwrap();
        assert_eq!(r.risk.value, 0.0);
        assert_eq!(r.accuracy.value, 1.0);
        let r0 = supervised_risk(
            &identity(),
            &head,
            &set,
            LossKind::Hinge,
            Some(&AttackSpec::pgd(PNorm::INF, 0.0)),
            0,
        )
        .unwrap();
        assert_eq!(r0.risk.value.to_bits(), r.risk.value.to_bits());
    }

    #[test]
    fn zero_extractor_has_unit_hinge_risk() {
        let zero = FeatureExtractor::linear(Tensor::zeros(&[2, 2]), PNorm::TWO, 1.0).unwrap();
        let r = unsup_risk(&zero, &point_classes(), TupleMode::Pair { k: 1 }, LossKind::Hinge, None, 200, 1)
            .unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.kind, RiskKind::Lun);
    }

    #[test]
    fn block_of_one_estimate_equals_pair() {
        let m = LatentClassModel::blobs(4, 3, 2.0, 0.5, None, 2).unwrap();
        let e = FeatureExtractor::linear(Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]).unwrap(), PNorm::TWO, 5.0)
            .unwrap();
        let a = Some(AttackSpec::pgd(PNorm::INF, 0.1));
        let p = unsup_risk(&e, &m, TupleMode::Pair { k: 1 }, LossKind::Logistic, a.as_ref(), 300, 5).unwrap();
        let b = unsup_risk(&e, &m, TupleMode::Block { b: 1 }, LossKind::Logistic, a.as_ref(), 300, 5).unwrap();
        assert_eq!(p.value, b.value);
    }

    #[test]
    fn logistic_head_fits_separable_data() {
        let m = LatentClassModel::blobs(3, 2, 6.0, 0.2, None, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = sample_stratified(&m, &[0, 1, 2], 30, &mut rng);
        let head = fit_logistic_head(&identity(), &set, 200).unwrap();
        let acc = supervised_risk(&identity(), &head, &set, LossKind::Logistic, None, 0).unwrap().accuracy;
        assert!(acc.value > 0.9, "{acc:?}");
    }
}
