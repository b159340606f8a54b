//! Finite latent-class generative model and its samplers.
//!
//! Each class `c` has probability `ρ(c)` and an isotropic Gaussian `D_c`
//! (mean, std), optionally clamped to a box so the input domain is bounded.
//! Samplers are driven by a single ChaCha8 stream per call; the draw order
//! for a block of size 1 is the same as for a pair with one negative, so the
//! two produce identical tuples from the same seed.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::norms::{vector_norm, PNorm};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid latent-class model: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("task rejection sampling exceeded {0} retries")]
    RetryCapExceeded(usize),
    #[error("malformed batch file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const TASK_RETRY_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSampler {
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentClassModel {
    pub classes: Vec<u32>,
    pub rho: Vec<f64>,
    pub per_class: Vec<ClassSampler>,
    /// Half-width `R_box` of the clamping box, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp: Option<f64>,
}

impl LatentClassModel {
    pub fn new(
        classes: Vec<u32>,
        rho: Vec<f64>,
        per_class: Vec<ClassSampler>,
        clamp: Option<f64>,
    ) -> Result<Self, DataError> {
        let m = Self { classes, rho, per_class, clamp };
        m.validate()?;
        Ok(m)
    }

    /// Uniform `ρ` over `num_classes` Gaussian blobs whose means are drawn
    /// from `seed` with norm about `separation`.
    pub fn blobs(
        num_classes: usize,
        dim: usize,
        separation: f64,
        std: f64,
        clamp: Option<f64>,
        seed: u64,
    ) -> Result<Self, DataError> {
        if num_classes == 0 || dim == 0 {
            return Err(DataError::InvalidModel("need at least one class and dimension".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = separation / (dim as f64).sqrt();
        let per_class = (0..num_classes)
            .map(|_| ClassSampler {
                mean: (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
                std,
            })
            .collect();
        Self::new(
            (0..num_classes as u32).collect(),
            vec![1.0 / num_classes as f64; num_classes],
            per_class,
            clamp,
        )
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |s: String| Err(DataError::InvalidModel(s));
        let c = self.classes.len();
        if c == 0 {
            return bad("no classes".into());
        }
        if self.rho.len() != c || self.per_class.len() != c {
            return bad(format!(
                "{c} classes but {} probabilities and {} samplers",
                self.rho.len(),
                self.per_class.len()
            ));
        }
        if self.rho.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return bad("probabilities must be finite and non-negative".into());
        }
        let total: f64 = self.rho.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("probabilities sum to {total}"));
        }
        let m = self.per_class[0].mean.len();
        if m == 0 {
            return bad("zero-dimensional inputs".into());
        }
        for (i, s) in self.per_class.iter().enumerate() {
            if s.mean.len() != m {
                return bad(format!("class {i} has dimension {} instead of {m}", s.mean.len()));
            }
            if !(s.std >= 0.0) || !s.std.is_finite() || s.mean.iter().any(|v| !v.is_finite()) {
                return bad(format!("class {i} has a non-finite mean or negative std"));
            }
        }
        if let Some(r) = self.clamp {
            if !(r > 0.0) || !r.is_finite() {
                return bad(format!("clamp radius {r} must be positive and finite"));
            }
        }
        let mut ids = self.classes.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != c {
            return bad("duplicate class ids".into());
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.per_class[0].mean.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("model serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Class index drawn from `ρ` by inverse CDF.
    pub fn sample_class<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.rho.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        self.rho.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub fn sample_point<R: Rng + ?Sized>(&self, class: usize, rng: &mut R, out: &mut Vec<f64>) {
        let s = &self.per_class[class];
        for &mu in &s.mean {
            let z: f64 = rng.sample(StandardNormal);
            let mut v = mu + s.std * z;
            if let Some(r) = self.clamp {
                v = v.clamp(-r, r);
            }
            out.push(v);
        }
    }

    /// Exact mean of `D_c` when no clamp is active (otherwise the unclamped mean).
    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.per_class[class].mean
    }
}

pub fn tau(model: &LatentClassModel) -> f64 {
    model.rho.iter().map(|p| p * p).sum()
}

pub fn tau_k(model: &LatentClassModel, k: usize) -> f64 {
    1.0 - model.rho.iter().map(|p| p * (1.0 - p).powi(k as i32)).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleMode {
    /// One positive and `k` negatives.
    Pair { k: usize },
    /// `b` positives and `b` negatives sharing one negative class.
    Block { b: usize },
}

impl TupleMode {
    pub fn positives(self) -> usize {
        match self {
            TupleMode::Pair { .. } => 1,
            TupleMode::Block { b } => b,
        }
    }

    pub fn negatives(self) -> usize {
        match self {
            TupleMode::Pair { k } => k,
            TupleMode::Block { b } => b,
        }
    }

    /// Length of the score vector fed to the loss.
    pub fn scores(self) -> usize {
        match self {
            TupleMode::Pair { k } => k,
            TupleMode::Block { .. } => 1,
        }
    }

    /// Number of negative-class labels recorded per tuple.
    pub fn negative_classes(self) -> usize {
        match self {
            TupleMode::Pair { k } => k,
            TupleMode::Block { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub mode: TupleMode,
    pub dim: usize,
    /// `M × m`, row-major.
    pub anchors: Vec<f64>,
    /// `M × P × m` with `P` positives per tuple.
    pub positives: Vec<f64>,
    /// `M × N × m` with `N` negatives per tuple.
    pub negatives: Vec<f64>,
    /// Generating class index of each tuple's anchor.
    pub anchor_class: Vec<usize>,
    /// Generating class index of each negative (one per tuple in block mode).
    pub negative_class: Vec<usize>,
    pub seed: u64,
    pub model_hash: String,
}

/// Borrowed view of one tuple.
#[derive(Debug, Clone)]
pub struct TupleView<'a> {
    pub anchor: &'a [f64],
    pub positives: Vec<&'a [f64]>,
    pub negatives: Vec<&'a [f64]>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.anchor_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_class.is_empty()
    }

    pub fn tuple(&self, j: usize) -> TupleView<'_> {
        let m = self.dim;
        let (p, n) = (self.mode.positives(), self.mode.negatives());
        TupleView {
            anchor: &self.anchors[j * m..(j + 1) * m],
            positives: (0..p)
                .map(|s| &self.positives[(j * p + s) * m..(j * p + s + 1) * m])
                .collect(),
            negatives: (0..n)
                .map(|s| &self.negatives[(j * n + s) * m..(j * n + s + 1) * m])
                .collect(),
        }
    }

    /// Every input vector in the batch (anchors, positives, negatives).
    pub fn all_points(&self) -> impl Iterator<Item = &[f64]> {
        self.anchors
            .chunks_exact(self.dim)
            .chain(self.positives.chunks_exact(self.dim))
            .chain(self.negatives.chunks_exact(self.dim))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["role".to_string(), "index".into(), "slot".into()];
        header.extend((0..self.dim).map(|d| format!("dim{d}")));
        out.write_record(&header)?;
        let mut row = |role: &str, index: usize, slot: usize, x: &[f64]| {
            let mut rec = vec![role.to_string(), index.to_string(), slot.to_string()];
            rec.extend(x.iter().map(|v| v.to_string()));
            out.write_record(&rec)
        };
        for j in 0..self.len() {
            let t = self.tuple(j);
            row("anchor", j, 0, t.anchor)?;
            for (s, x) in t.positives.iter().enumerate() {
                row("positive", j, s, x)?;
            }
            for (s, x) in t.negatives.iter().enumerate() {
                row("negative", j, s, x)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn manifest(&self) -> BatchManifest {
        let (k, b) = match self.mode {
            TupleMode::Pair { k } => (Some(k), None),
            TupleMode::Block { b } => (None, Some(b)),
        };
        BatchManifest {
            format: "acl-batch/1".into(),
            m: self.dim,
            mode: match self.mode {
                TupleMode::Pair { .. } => "pair".into(),
                TupleMode::Block { .. } => "block".into(),
            },
            k,
            b,
            num_tuples: self.len(),
            seed: self.seed,
            model_hash: self.model_hash.clone(),
            anchor_class: self.anchor_class.clone(),
            negative_class: self.negative_class.clone(),
        }
    }

    /// Rebuild a batch from its CSV and manifest.
    pub fn read_csv<R: Read>(r: R, manifest: &BatchManifest) -> Result<Self, DataError> {
        let bad = |s: String| DataError::Malformed(s);
        let mode = match (manifest.mode.as_str(), manifest.k, manifest.b) {
            ("pair", Some(k), _) if k >= 1 => TupleMode::Pair { k },
            ("block", _, Some(b)) if b >= 1 => TupleMode::Block { b },
            _ => return Err(bad("manifest mode must be pair with k or block with b".into())),
        };
        let (m, n_tuples) = (manifest.m, manifest.num_tuples);
        let mut reader = csv::Reader::from_reader(r);
        let header = reader.headers()?.clone();
        if header.len() != m + 3 || &header[0] != "role" {
            return Err(bad(format!("expected {} columns starting with `role`", m + 3)));
        }
        let (p, n) = (mode.positives(), mode.negatives());
        let mut anchors = vec![f64::NAN; n_tuples * m];
        let mut positives = vec![f64::NAN; n_tuples * p * m];
        let mut negatives = vec![f64::NAN; n_tuples * n * m];
        let mut seen = 0usize;
        for rec in reader.records() {
            let rec = rec?;
            let index: usize = rec[1].parse().map_err(|_| bad(format!("bad index `{}`", &rec[1])))?;
            let slot: usize = rec[2].parse().map_err(|_| bad(format!("bad slot `{}`", &rec[2])))?;
            if index >= n_tuples {
                return Err(bad(format!("tuple index {index} out of range")));
            }
            let (buf, base) = match (&rec[0], slot) {
                ("anchor", 0) => (&mut anchors, index),
                ("positive", s) if s < p => (&mut positives, index * p + s),
                ("negative", s) if s < n => (&mut negatives, index * n + s),
                (role, s) => return Err(bad(format!("unexpected row {role}/{s}"))),
            };
            for d in 0..m {
                buf[base * m + d] = rec[3 + d]
                    .parse()
                    .map_err(|_| bad(format!("bad number `{}`", &rec[3 + d])))?;
            }
            seen += 1;
        }
        if seen != n_tuples * (1 + p + n) || anchors.iter().chain(&positives).chain(&negatives).any(|v| v.is_nan()) {
            return Err(bad("missing rows".into()));
        }
        if manifest.anchor_class.len() != n_tuples
            || manifest.negative_class.len() != n_tuples * mode.negative_classes()
        {
            return Err(bad("provenance length does not match tuple count".into()));
        }
        Ok(Self {
            mode,
            dim: m,
            anchors,
            positives,
            negatives,
            anchor_class: manifest.anchor_class.clone(),
            negative_class: manifest.negative_class.clone(),
            seed: manifest.seed,
            model_hash: manifest.model_hash.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub format: String,
    pub m: usize,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(rename = "M")]
    pub num_tuples: usize,
    pub seed: u64,
    pub model_hash: String,
    pub anchor_class: Vec<usize>,
    pub negative_class: Vec<usize>,
}

fn check_count(name: &str, v: usize) -> Result<(), DataError> {
    if v == 0 {
        Err(DataError::InvalidArgument(format!("{name} must be at least 1")))
    } else {
        Ok(())
    }
}

fn sample_tuples(
    model: &LatentClassModel,
    num_tuples: usize,
    mode: TupleMode,
    seed: u64,
) -> Result<ContrastiveBatch, DataError> {
    model.validate()?;
    let m = model.dim();
    let (p, n) = (mode.positives(), mode.negatives());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = ContrastiveBatch {
        mode,
        dim: m,
        anchors: Vec::with_capacity(num_tuples * m),
        positives: Vec::with_capacity(num_tuples * p * m),
        negatives: Vec::with_capacity(num_tuples * n * m),
        anchor_class: Vec::with_capacity(num_tuples),
        negative_class: Vec::with_capacity(num_tuples * mode.negative_classes()),
        seed,
        model_hash: model.hash(),
    };
    for _ in 0..num_tuples {
        let c = model.sample_class(&mut rng);
        batch.anchor_class.push(c);
        model.sample_point(c, &mut rng, &mut batch.anchors);
        for _ in 0..p {
            model.sample_point(c, &mut rng, &mut batch.positives);
        }
        match mode {
            TupleMode::Pair { k } => {
                for _ in 0..k {
                    let cn = model.sample_class(&mut rng);
                    batch.negative_class.push(cn);
                    model.sample_point(cn, &mut rng, &mut batch.negatives);
                }
            }
            TupleMode::Block { b } => {
                let cn = model.sample_class(&mut rng);
                batch.negative_class.push(cn);
                for _ in 0..b {
                    model.sample_point(cn, &mut rng, &mut batch.negatives);
                }
            }
        }
    }
    Ok(batch)
}

/// `M` tuples `(x, x⁺, x₁⁻..x_k⁻)` with i.i.d. negatives.
pub fn sample_pairs(
    model: &LatentClassModel,
    num_tuples: usize,
    k: usize,
    seed: u64,
) -> Result<ContrastiveBatch, DataError> {
    check_count("M", num_tuples)?;
    check_count("k", k)?;
    sample_tuples(model, num_tuples, TupleMode::Pair { k }, seed)
}

/// `M` block tuples `(x, x₁⁺..x_b⁺, x₁⁻..x_b⁻)`.
pub fn sample_blocks(
    model: &LatentClassModel,
    num_tuples: usize,
    b: usize,
    seed: u64,
) -> Result<ContrastiveBatch, DataError> {
    check_count("M", num_tuples)?;
    check_count("b", b)?;
    sample_tuples(model, num_tuples, TupleMode::Block { b }, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistPolicy {
    Uniform,
    RhoConditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedTaskSet {
    /// Distinct class indices of the task, in order of first appearance.
    pub task: Vec<usize>,
    /// `D_T` over `task`.
    pub dist: Vec<f64>,
    pub dim: usize,
    /// `N × m`, row-major.
    pub points: Vec<f64>,
    /// Class index of each point.
    pub labels: Vec<usize>,
}

impl SupervisedTaskSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Distinct classes of `(c⁺, c₁⁻..c_k⁻) ~ ρ^{k+1}` conditioned on `c_i⁻ ≠ c⁺`.
pub fn draw_task<R: Rng + ?Sized>(
    model: &LatentClassModel,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    if model.num_classes() < 2 {
        return Err(DataError::InvalidArgument("a task needs at least 2 classes".into()));
    }
    check_count("k", k)?;
    for _ in 0..TASK_RETRY_CAP {
        let cp = model.sample_class(rng);
        let mut task = vec![cp];
        let mut ok = true;
        for _ in 0..k {
            let cn = model.sample_class(rng);
            if cn == cp {
                ok = false;
                break;
            }
            if !task.contains(&cn) {
                task.push(cn);
            }
        }
        if ok {
            return Ok(task);
        }
    }
    Err(DataError::RetryCapExceeded(TASK_RETRY_CAP))
}

/// `k+1` distinct classes drawn from `ρ^{k+1}` conditioned on all being distinct.
pub fn draw_distinct_classes<R: Rng + ?Sized>(
    model: &LatentClassModel,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    if model.rho.iter().filter(|&&p| p > 0.0).count() < k + 1 {
        return Err(DataError::InvalidArgument(format!(
            "fewer than {} classes with positive probability",
            k + 1
        )));
    }
    for _ in 0..TASK_RETRY_CAP {
        let mut task = Vec::with_capacity(k + 1);
        for _ in 0..=k {
            let c = model.sample_class(rng);
            if task.contains(&c) {
                break;
            }
            task.push(c);
        }
        if task.len() == k + 1 {
            return Ok(task);
        }
    }
    Err(DataError::RetryCapExceeded(TASK_RETRY_CAP))
}

pub fn task_distribution(model: &LatentClassModel, task: &[usize], policy: DistPolicy) -> Vec<f64> {
    match policy {
        DistPolicy::Uniform => vec![1.0 / task.len() as f64; task.len()],
        DistPolicy::RhoConditional => {
            let z: f64 = task.iter().map(|&c| model.rho[c]).sum();
            task.iter().map(|&c| model.rho[c] / z).collect()
        }
    }
}

/// `n` labeled points from `D_T(c) · D_c(x)` for a fixed task.
pub fn sample_labeled<R: Rng + ?Sized>(
    model: &LatentClassModel,
    task: &[usize],
    dist: &[f64],
    n: usize,
    rng: &mut R,
) -> SupervisedTaskSet {
    let mut points = Vec::with_capacity(n * model.dim());
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = task.len() - 1;
        for (i, &p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        let c = task[pick];
        labels.push(c);
        model.sample_point(c, rng, &mut points);
    }
    SupervisedTaskSet { task: task.to_vec(), dist: dist.to_vec(), dim: model.dim(), points, labels }
}

/// Exactly `per_class` points from each class of `task`, grouped by class.
pub fn sample_stratified<R: Rng + ?Sized>(
    model: &LatentClassModel,
    task: &[usize],
    per_class: usize,
    rng: &mut R,
) -> SupervisedTaskSet {
    let mut points = Vec::with_capacity(task.len() * per_class * model.dim());
    let mut labels = Vec::with_capacity(task.len() * per_class);
    for &c in task {
        for _ in 0..per_class {
            labels.push(c);
            model.sample_point(c, rng, &mut points);
        }
    }
    SupervisedTaskSet {
        task: task.to_vec(),
        dist: vec![1.0 / task.len() as f64; task.len()],
        dim: model.dim(),
        points,
        labels,
    }
}

pub fn sample_task(
    model: &LatentClassModel,
    k: usize,
    policy: DistPolicy,
    n: usize,
    seed: u64,
) -> Result<SupervisedTaskSet, DataError> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = draw_task(model, k, &mut rng)?;
    let dist = task_distribution(model, &task, policy);
    Ok(sample_labeled(model, &task, &dist, n, &mut rng))
}

/// `max_x ‖x‖_p` over a set of points.
pub fn max_norm<'a>(points: impl IntoIterator<Item = &'a [f64]>, p: PNorm) -> f64 {
    points.into_iter().map(|x| vector_norm(x, p)).fold(0.0, f64::max)
}
