//! Adversarial empirical risk minimization.
//!
//! Each iteration samples a minibatch with replacement, attacks every anchor
//! against the current extractor, and takes a momentum SGD step on the mean
//! attacked loss plus `λ·Σ_l ‖W_l‖_F` and coupled weight decay. Per-tuple work
//! runs in parallel; results are reduced in index order so the trajectory is
//! bit-identical with or without threads.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{contrastive_dirs, AttackError, AttackSpec, ScoreProgram};
use crate::diffcore::{Bindings, DiffError, Graph, GraphBuilder, Tensor};
use crate::losses::{append_loss, LossKind};
use crate::models::{FeatureExtractor, ModelError};
use crate::par;
use crate::synthdata::{ContrastiveBatch, TupleMode, TupleView};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub lambda: f64,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub attack: AttackSpec,
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to projecting whenever the extractor declares budgets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project_each_step: Option<bool>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: &str| Err(TrainError::Config(s.to_string()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be ≥ 0");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay must be ≥ 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        self.attack.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Minibatch mean attacked loss at the weights the step started from.
    pub risk: f64,
    /// `Σ_l ‖W_l‖_F` at the same weights.
    pub regularizer: f64,
    /// Constrained per-layer norms after the step.
    pub layer_norms: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let mut out = csv::Writer::from_writer(w);
        let layers = self.records.first().map_or(0, |r| r.layer_norms.len());
        let mut header = vec!["iteration".to_string(), "risk".into(), "regularizer".into()];
        header.extend((0..layers).map(|l| format!("norm{l}")));
        out.write_record(&header).map_err(std::io::Error::from)?;
        for r in &self.records {
            let mut rec = vec![r.iteration.to_string(), r.risk.to_string(), r.regularizer.to_string()];
            rec.extend(r.layer_norms.iter().map(|v| v.to_string()));
            out.write_record(&rec).map_err(std::io::Error::from)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Full contrastive loss graph over weights, anchor, positives and negatives.
pub struct TupleProgram {
    mode: TupleMode,
    param_names: Vec<String>,
    pos_names: Vec<String>,
    neg_names: Vec<String>,
    graph: Graph,
}

impl TupleProgram {
    pub fn new(extractor: &FeatureExtractor, mode: TupleMode, kind: LossKind) -> Result<Self, DiffError> {
        let m = extractor.input_dim();
        let pos_names: Vec<String> = (0..mode.positives()).map(|i| format!("pos{i}")).collect();
        let neg_names: Vec<String> = (0..mode.negatives()).map(|i| format!("neg{i}")).collect();
        let mut b = GraphBuilder::new();
        let params = extractor.declare_params(&mut b)?;
        let x = b.leaf("x", &[m])?;
        let fx = extractor.append_forward(&mut b, &params, x)?;
        let fwd = |b: &mut GraphBuilder, name: &str| -> Result<_, DiffError> {
            let leaf = b.leaf(name, &[m])?;
            extractor.append_forward(b, &params, leaf)
        };
        let fpos = pos_names.iter().map(|n| fwd(&mut b, n)).collect::<Result<Vec<_>, _>>()?;
        let fneg = neg_names.iter().map(|n| fwd(&mut b, n)).collect::<Result<Vec<_>, _>>()?;
        let scores = match mode {
            TupleMode::Pair { .. } => fneg
                .iter()
                .map(|&n| {
                    let d = b.sub(fpos[0], n)?;
                    b.dot(fx, d)
                })
                .collect::<Result<Vec<_>, _>>()?,
            TupleMode::Block { .. } => {
                let mp = b.mean(&fpos)?;
                let mn = b.mean(&fneg)?;
                let d = b.sub(mp, mn)?;
                vec![b.dot(fx, d)?]
            }
        };
        let v = b.stack(&scores)?;
        let out = append_loss(&mut b, kind, v)?;
        Ok(Self {
            mode,
            param_names: extractor.param_names(),
            pos_names,
            neg_names,
            graph: b.finish(out)?,
        })
    }

    /// Loss at anchor `x` (in place of the tuple's anchor) and its weight gradients.
    pub fn value_and_weight_grad(
        &self,
        extractor: &FeatureExtractor,
        x: &[f64],
        tuple: &TupleView<'_>,
    ) -> Result<(f64, Vec<Tensor>), DiffError> {
        debug_assert_eq!(tuple.positives.len(), self.mode.positives());
        let xt = Tensor::vector(x.to_vec());
        let pos: Vec<Tensor> = tuple.positives.iter().map(|p| Tensor::vector(p.to_vec())).collect();
        let neg: Vec<Tensor> = tuple.negatives.iter().map(|p| Tensor::vector(p.to_vec())).collect();
        let mut b = Bindings::new();
        for (n, w) in self.param_names.iter().zip(extractor.layers()) {
            b.insert(n, w);
        }
        b.insert("x", &xt);
        for (n, t) in self.pos_names.iter().zip(&pos) {
            b.insert(n, t);
        }
        for (n, t) in self.neg_names.iter().zip(&neg) {
            b.insert(n, t);
        }
        let wrt: Vec<&str> = self.param_names.iter().map(String::as_str).collect();
        let (v, mut g) = self.graph.value_and_gradient(&b, &wrt)?;
        let grads = self.param_names.iter().map(|n| g.remove(n).expect("requested")).collect();
        Ok((v, grads))
    }
}

/// `Σ_l ‖W_l‖_F` and its gradient.
fn regularizer(layers: &[Tensor]) -> (f64, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let grads = layers
        .iter()
        .map(|w| {
            let n = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            total += n;
            if n > 0.0 {
                w.data().iter().map(|v| v / n).collect()
            } else {
                vec![0.0; w.len()]
            }
        })
        .collect();
    (total, grads)
}

pub fn frobenius_sum(extractor: &FeatureExtractor) -> f64 {
    regularizer(extractor.layers()).0
}

/// Attacked loss of each tuple under `attack`.
pub fn surrogate_losses(
    extractor: &FeatureExtractor,
    data: &ContrastiveBatch,
    attack: &AttackSpec,
    kind: LossKind,
    seed: u64,
) -> Result<Vec<f64>, AttackError> {
    let prog = ScoreProgram::new(extractor, data.mode.scores(), kind)?;
    par::try_map_range(data.len(), |j| {
        let t = data.tuple(j);
        let dirs = contrastive_dirs(extractor, &t, data.mode)?;
        Ok(prog.attack(attack, extractor, t.anchor, &dirs, par::derive_seed(seed, j as u64))?.loss)
    })
}

/// Mean attacked loss over the whole dataset.
pub fn empirical_surrogate_risk(
    extractor: &FeatureExtractor,
    data: &ContrastiveBatch,
    attack: &AttackSpec,
    kind: LossKind,
) -> Result<f64, AttackError> {
    Ok(par::mean(&surrogate_losses(extractor, data, attack, kind, 0)?))
}

pub fn aerm_train(
    config: &TrainConfig,
    model: &FeatureExtractor,
    data: &ContrastiveBatch,
) -> Result<(FeatureExtractor, TrainReport), TrainError> {
    config.validate()?;
    if data.dim != model.input_dim() {
        return Err(TrainError::Config(format!(
            "data dimension {} does not match extractor input {}",
            data.dim,
            model.input_dim()
        )));
    }
    if data.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let project = config.project_each_step.unwrap_or(model.constraint().is_constrained());
    let program = TupleProgram::new(model, data.mode, config.loss)?;
    let scorer = ScoreProgram::new(model, data.mode.scores(), config.loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = model.clone();
    let mut velocity: Vec<Vec<f64>> = model.layers().iter().map(|w| vec![0.0; w.len()]).collect();
    let mut report = TrainReport::default();

    for it in 1..=config.iterations {
        let batch: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let attack_seed = par::derive_seed(config.seed, it as u64);
        let per_tuple = par::try_map_range(batch.len(), |i| -> Result<(f64, Vec<f64>), TrainError> {
            let t = data.tuple(batch[i]);
            let dirs = contrastive_dirs(&current, &t, data.mode)?;
            let adv = scorer.attack(
                &config.attack,
                &current,
                t.anchor,
                &dirs,
                par::derive_seed(attack_seed, i as u64),
            )?;
            let (l, grads) = program.value_and_weight_grad(&current, &adv.point, &t)?;
            Ok((l, grads.into_iter().flat_map(Tensor::into_data).collect()))
        })?;
        let losses: Vec<f64> = per_tuple.iter().map(|(l, _)| *l).collect();
        let grads: Vec<Vec<f64>> = per_tuple.into_iter().map(|(_, g)| g).collect();
        let n = batch.len() as f64;
        let risk = par::tree_sum(&losses) / n;
        if !risk.is_finite() {
            return Err(TrainError::NonFinite(it));
        }
        let mut flat: Vec<f64> = par::tree_sum_vecs(&grads).into_iter().map(|g| g / n).collect();
        let (reg, reg_grad) = regularizer(current.layers());

        let mut offset = 0;
        let mut layers = Vec::with_capacity(current.depth());
        for (l, w) in current.layers().iter().enumerate() {
            let g = &mut flat[offset..offset + w.len()];
            offset += w.len();
            if config.lambda != 0.0 {
                g.iter_mut().zip(&reg_grad[l]).for_each(|(a, r)| *a += config.lambda * r);
            }
            if config.weight_decay != 0.0 {
                g.iter_mut().zip(w.data()).for_each(|(a, x)| *a += config.weight_decay * x);
            }
            let v = &mut velocity[l];
            let mut data = w.data().to_vec();
            for ((vi, gi), wi) in v.iter_mut().zip(g.iter()).zip(data.iter_mut()) {
                *vi = config.momentum * *vi + gi;
                *wi -= config.lr * *vi;
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFinite(it));
            }
            layers.push(Tensor::new(w.shape().to_vec(), data).expect("same shape"));
        }
        current = current.with_layers(layers)?;
        if project {
            current = current.project_to_budget();
        }
        report.records.push(TrainRecord {
            iteration: it,
            risk,
            regularizer: reg,
            layer_norms: current.layer_norms(),
        });
    }
    Ok((current, report))
}
