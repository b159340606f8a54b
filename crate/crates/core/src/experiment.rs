//! Configuration-driven experiments: dataset generation, AERM training with
//! mean-classifier evaluation, and the regularizer and block-size sweeps.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attacks::AttackSpec;
use crate::diffcore::Activation;
use crate::evaluation::{fit_mean_classifier, supervised_risk, EvalError};
use crate::models::{Constraint, FeatureExtractor, ModelError};
use crate::par;
use crate::synthdata::{
    sample_blocks, sample_pairs, sample_stratified, ContrastiveBatch, DataError, LatentClassModel, TupleMode,
};
use crate::training::{aerm_train, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Where the latent-class model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// Uniform-ρ Gaussian blobs with seeded means.
    Blobs {
        num_classes: usize,
        dim: usize,
        separation: f64,
        std: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clamp: Option<f64>,
        #[serde(default)]
        means_seed: u64,
    },
    Explicit { model: LatentClassModel },
    /// JSON file holding a [`LatentClassModel`].
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Layer widths from input to output.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub constraint: Constraint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub mode: TupleMode,
    #[serde(rename = "M")]
    pub num_tuples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub attacks: Vec<AttackSpec>,
    /// Labeled points per class for the mean classifier.
    pub n_fit_per_class: usize,
    /// Labeled points per class for accuracy and risk.
    pub n_eval_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub model: ModelSpec,
    pub data: DataSpec,
    /// `train.seed` and `train.lambda` are overwritten per run.
    pub train: TrainConfig,
    pub eval: EvalSpec,
    #[serde(default = "default_lambdas")]
    pub lambda: Vec<f64>,
    #[serde(default = "default_block_sizes")]
    pub block_size_b: Vec<usize>,
    /// Monte-Carlo sample count for risk estimates.
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.002, 0.05, 0.2]
}

fn default_block_sizes() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

fn default_n_mc() -> usize {
    2000
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Parse and validate. Parse errors carry serde's line and column.
    pub fn from_json(s: &str) -> Result<Self, ExperimentError> {
        let c: Self = serde_json::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let s = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&s).map_err(|e| match e {
            ExperimentError::Config(msg) => ExperimentError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |s: &str| Err(ExperimentError::Config(s.to_string()));
        if self.lambda.is_empty() {
            return bad("lambda list is empty");
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return bad("lambda values must be finite and ≥ 0");
        }
        if self.block_size_b.is_empty() || self.block_size_b.contains(&0) {
            return bad("block_size_b must be a non-empty list of positive sizes");
        }
        if self.eval.attacks.is_empty() {
            return bad("eval.attacks is empty");
        }
        if self.eval.n_fit_per_class == 0 || self.eval.n_eval_per_class == 0 {
            return bad("eval sample counts must be ≥ 1");
        }
        if self.data.num_tuples == 0 {
            return bad("data.M must be ≥ 1");
        }
        if self.model.widths.len() < 2 {
            return bad("model.widths needs input and output widths");
        }
        if let GeneratorSpec::File { path } = &self.generator {
            if !path.exists() {
                return Err(ExperimentError::Config(format!("generator file {} does not exist", path.display())));
            }
        }
        for a in &self.eval.attacks {
            a.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        self.train.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let model = self.latent_model()?;
        if model.dim() != self.model.widths[0] {
            return Err(ExperimentError::Config(format!(
                "generator dimension {} does not match input width {}",
                model.dim(),
                self.model.widths[0]
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(s.as_bytes()))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn latent_model(&self) -> Result<LatentClassModel, ExperimentError> {
        Ok(match &self.generator {
            GeneratorSpec::Blobs { num_classes, dim, separation, std, clamp, means_seed } => {
                LatentClassModel::blobs(*num_classes, *dim, *separation, *std, *clamp, *means_seed)?
            }
            GeneratorSpec::Explicit { model } => {
                model.validate()?;
                model.clone()
            }
            GeneratorSpec::File { path } => {
                let s = fs::read_to_string(path).map_err(io_err(path))?;
                let m: LatentClassModel =
                    serde_json::from_str(&s).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
                m.validate()?;
                m
            }
        })
    }

    pub fn data_seed(&self) -> u64 {
        par::derive_seed(self.seed, 0)
    }

    pub fn init_seed(&self) -> u64 {
        par::derive_seed(self.seed, 1)
    }

    pub fn train_seed(&self) -> u64 {
        par::derive_seed(self.seed, 2)
    }

    pub fn eval_seed(&self) -> u64 {
        par::derive_seed(self.seed, 3)
    }

    pub fn training_set(&self, mode: TupleMode) -> Result<ContrastiveBatch, ExperimentError> {
        let model = self.latent_model()?;
        Ok(match mode {
            TupleMode::Pair { k } => sample_pairs(&model, self.data.num_tuples, k, self.data_seed())?,
            TupleMode::Block { b } => sample_blocks(&model, self.data.num_tuples, b, self.data_seed())?,
        })
    }

    pub fn initial_extractor(&self) -> Result<FeatureExtractor, ExperimentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed());
        Ok(FeatureExtractor::init(
            &self.model.widths,
            self.model.activation,
            self.model.constraint.clone(),
            &mut rng,
        )?)
    }
}

/// Write the training set as `batch.csv` plus `manifest.json` under `dir`.
pub fn gen_data(config: &ExperimentConfig, dir: &Path) -> Result<ContrastiveBatch, ExperimentError> {
    let batch = config.training_set(config.data.mode)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join("batch.csv");
    let f = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    batch.write_csv(std::io::BufWriter::new(f)).map_err(|e| match e {
        DataError::Io(source) => ExperimentError::Io { path: csv_path.clone(), source },
        other => other.into(),
    })?;
    write_json(&dir.join("manifest.json"), &batch.manifest())?;
    write_json(&dir.join("generator.json"), &config.latent_model()?)?;
    Ok(batch)
}

/// Read a dataset written by [`gen_data`].
pub fn load_data(dir: &Path) -> Result<ContrastiveBatch, ExperimentError> {
    let mpath = dir.join("manifest.json");
    let ms = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest = serde_json::from_str(&ms).map_err(|e| ExperimentError::Config(format!("{}: {e}", mpath.display())))?;
    let cpath = dir.join("batch.csv");
    let f = fs::File::open(&cpath).map_err(io_err(&cpath))?;
    Ok(ContrastiveBatch::read_csv(std::io::BufReader::new(f), &manifest)?)
}

pub fn load_model(path: &Path) -> Result<FeatureExtractor, ExperimentError> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    FeatureExtractor::from_json(&s).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn train(
    config: &ExperimentConfig,
    lambda: f64,
    mode: TupleMode,
) -> Result<(FeatureExtractor, TrainReport), ExperimentError> {
    let data = config.training_set(mode)?;
    let init = config.initial_extractor()?;
    let tc = TrainConfig { lambda, seed: config.train_seed(), ..config.train.clone() };
    Ok(aerm_train(&tc, &init, &data)?)
}

/// One `(attack, ε, metric, value)` evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub attack: String,
    pub epsilon: f64,
    pub metric: String,
    pub value: f64,
}

/// Fit a mean classifier over every class, then report clean and attacked
/// accuracy and margin risk per attack spec.
pub fn evaluate(config: &ExperimentConfig, extractor: &FeatureExtractor) -> Result<Vec<EvalRow>, ExperimentError> {
    let model = config.latent_model()?;
    let task: Vec<usize> = (0..model.num_classes()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.eval_seed());
    let fit = sample_stratified(&model, &task, config.eval.n_fit_per_class, &mut rng);
    let test = sample_stratified(&model, &task, config.eval.n_eval_per_class, &mut rng);
    let head = fit_mean_classifier(extractor, &fit)?;
    let kind = config.train.loss;
    let seed = par::derive_seed(config.eval_seed(), 1);
    let clean = supervised_risk(extractor, &head, &test, kind, None, seed)?;
    let mut rows = Vec::new();
    for spec in &config.eval.attacks {
        let adv = supervised_risk(extractor, &head, &test, kind, Some(spec), seed)?;
        let row = |metric: &str, value: f64| EvalRow {
            attack: spec.label(),
            epsilon: spec.epsilon,
            metric: metric.into(),
            value,
        };
        rows.push(row("clean_accuracy", clean.accuracy.value));
        rows.push(row("adv_accuracy", adv.accuracy.value));
        rows.push(row("clean_risk", clean.risk.value));
        rows.push(row("adv_risk", adv.risk.value));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub attack: String,
    pub epsilon: f64,
    pub metric: String,
    pub lambda: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRow {
    pub b: usize,
    pub metric: String,
    pub attack: String,
    pub epsilon: f64,
    pub value: f64,
}

/// Runs `n` independent points, concurrently when `parallel` is set.
fn run_points<T: Send, F>(n: usize, parallel: bool, f: F) -> Result<Vec<T>, ExperimentError>
where
    F: Fn(usize) -> Result<T, ExperimentError> + Sync + Send,
{
    if parallel {
        par::try_map_range(n, f)
    } else {
        (0..n).map(f).collect()
    }
}

/// Train at every λ with the configured tuple mode and evaluate each result.
pub fn sweep_regularizer(config: &ExperimentConfig, parallel: bool) -> Result<Vec<LambdaRow>, ExperimentError> {
    let per = run_points(config.lambda.len(), parallel, |i| {
        let lambda = config.lambda[i];
        let (f, _) = train(config, lambda, config.data.mode)?;
        Ok(evaluate(config, &f)?
            .into_iter()
            .map(|r| LambdaRow { attack: r.attack, epsilon: r.epsilon, metric: r.metric, lambda, value: r.value })
            .collect::<Vec<_>>())
    })?;
    Ok(per.into_iter().flatten().collect())
}

/// Train with block tuples at every `b` (λ from the train config) and evaluate.
pub fn sweep_block(config: &ExperimentConfig, parallel: bool) -> Result<Vec<BlockRow>, ExperimentError> {
    let per = run_points(config.block_size_b.len(), parallel, |i| {
        let b = config.block_size_b[i];
        let (f, _) = train(config, config.train.lambda, TupleMode::Block { b })?;
        Ok(evaluate(config, &f)?
            .into_iter()
            .map(|r| BlockRow { b, metric: r.metric, attack: r.attack, epsilon: r.epsilon, value: r.value })
            .collect::<Vec<_>>())
    })?;
    Ok(per.into_iter().flatten().collect())
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|source| ExperimentError::Io { path: PathBuf::from("<csv>"), source })?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(r: R) -> Result<Vec<T>, ExperimentError> {
    csv::Reader::from_reader(r).deserialize().map(|r| r.map_err(Into::into)).collect()
}

pub fn rows_to_string<T: Serialize>(rows: &[T]) -> Result<String, ExperimentError> {
    let mut buf = Vec::new();
    write_rows(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}
