use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use acl_core::attacks::AttackSpec;
use acl_core::bounds::{self, BoundError, BudgetClass, RademacherConfig};
use acl_core::evaluation::{unsup_risk, RiskEstimate};
use acl_core::experiment::{
    self as exp, load_data, load_model, rows_to_string, write_json, write_text, ExperimentConfig, ExperimentError,
};
use acl_core::losses::{check_partition, LossKind};
use acl_core::par;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

// stdout may be a closed pipe (`acl ... | head`); results are already on disk
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "acl", version, about = "Adversarial contrastive learning experiments on synthetic latent-class data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, default_value = "configs/default.json")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run independent points concurrently on N threads.
    #[arg(long, value_name = "N")]
    parallel: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the training set and write batch.csv and manifest.json.
    GenData(Common),
    /// Run AERM and write model.json and train_report.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides train.lambda.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Clean mean-classifier accuracy and clean contrastive risk of a model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Attacked accuracy and surrogate risk for every configured attack.
    AttackEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Rademacher and generalization-gap bounds for a model and dataset.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Comma-separated ε values for a bound series.
        #[arg(long, value_delimiter = ',')]
        eps_grid: Option<Vec<f64>>,
    },
    /// Train and evaluate at every λ of the config.
    SweepRegularizer(Common),
    /// Train with block tuples at every b of the config.
    SweepBlock(Common),
    /// Randomized check of the loss partition inequalities.
    CheckLosses {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo lower estimate of the empirical Rademacher complexity.
    Rademacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_sigma: usize,
        #[arg(long, default_value_t = 2)]
        restarts: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
}

enum Failure {
    Config(String),
    Io(String),
    Precondition(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Precondition(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Precondition(m) | Failure::Other(m) => m,
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        use acl_core::synthdata::DataError;
        match e {
            ExperimentError::Config(m) => Failure::Config(m),
            ExperimentError::Io { .. } => Failure::Io(e.to_string()),
            ExperimentError::Data(DataError::Io(_)) | ExperimentError::Csv(_) => Failure::Io(e.to_string()),
            ExperimentError::Data(DataError::Malformed(_) | DataError::Json(_)) => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<BoundError> for Failure {
    fn from(e: BoundError) -> Self {
        match e {
            BoundError::MissingBudgets(_) | BoundError::BadDelta(_) | BoundError::InvalidArgument(_) => {
                Failure::Precondition(e.to_string())
            }
            other => Failure::Other(other.to_string()),
        }
    }
}

fn other<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Other(e.to_string())
}

struct Ctx {
    config: ExperimentConfig,
    out: PathBuf,
    parallel: Option<usize>,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self, Failure> {
        let mut config = ExperimentConfig::load(&c.config)?;
        if let Some(s) = c.seed {
            config = config.with_seed(s);
        }
        let out = c.out.clone().unwrap_or_else(|| config.out.clone());
        std::fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
        Ok(Self { config, out, parallel: c.parallel })
    }

    fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match self.parallel {
            Some(n) => par::with_threads(n, f),
            None => f(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn risk_json(r: &RiskEstimate, hash: &str) -> serde_json::Value {
    json!({ "kind": r.kind, "value": r.value, "stderr": r.stderr, "n": r.n_samples, "config_hash": hash })
}

fn require_budgets(model: &acl_core::models::FeatureExtractor) -> Result<(), Failure> {
    let v = model.budget_violation();
    if v > 1e-6 {
        return Err(Failure::Precondition(format!(
            "model exceeds its declared budgets by {v:e}; the bound would be vacuous"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(c) => {
            let ctx = Ctx::new(&c)?;
            let batch = exp::gen_data(&ctx.config, &ctx.out)?;
            say!("wrote {} tuples to {}", batch.len(), ctx.out.display());
        }
        Command::Train { common, lambda } => {
            let ctx = Ctx::new(&common)?;
            let lambda = lambda.unwrap_or(ctx.config.train.lambda);
            let (model, report) = ctx.run(|| exp::train(&ctx.config, lambda, ctx.config.data.mode))?;
            write_text(&ctx.path("model.json"), &model.to_json())?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf).map_err(other)?;
            write_text(&ctx.path("train_report.csv"), &String::from_utf8(buf).map_err(other)?)?;
            if let Some(last) = report.records.last() {
                say!("iteration {}: risk {} regularizer {}", last.iteration, last.risk, last.regularizer);
            }
        }
        Command::Eval { common, model } => {
            let ctx = Ctx::new(&common)?;
            let f = load_model(&model)?;
            let cfg = &ctx.config;
            let (rows, risk) = ctx.run(|| -> Result<_, Failure> {
                let rows = exp::evaluate(cfg, &f)?;
                let lm = cfg.latent_model()?;
                let risk = unsup_risk(&f, &lm, cfg.data.mode, cfg.train.loss, None, cfg.n_mc, cfg.eval_seed())
                    .map_err(other)?;
                Ok((rows, risk))
            })?;
            let clean: Vec<_> = rows.into_iter().filter(|r| r.metric.starts_with("clean")).take(2).collect();
            for r in &clean {
                say!("{} {}", r.metric, r.value);
            }
            say!("{:?} {} ± {}", risk.kind, risk.value, risk.stderr);
            write_text(&ctx.path("eval.csv"), &rows_to_string(&clean)?)?;
            write_json(&ctx.path("risk.json"), &risk_json(&risk, &cfg.hash()))?;
        }
        Command::AttackEval { common, model } => {
            let ctx = Ctx::new(&common)?;
            let f = load_model(&model)?;
            let cfg = &ctx.config;
            let (rows, risks) = ctx.run(|| -> Result<_, Failure> {
                let rows = exp::evaluate(cfg, &f)?;
                let lm = cfg.latent_model()?;
                let risks = cfg
                    .eval
                    .attacks
                    .iter()
                    .map(|a| {
                        unsup_risk(&f, &lm, cfg.data.mode, cfg.train.loss, Some(a), cfg.n_mc, cfg.eval_seed())
                            .map(|r| (a.label(), a.epsilon, r))
                            .map_err(other)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((rows, risks))
            })?;
            for r in &rows {
                say!("{} eps={} {} {}", r.attack, r.epsilon, r.metric, r.value);
            }
            let hash = cfg.hash();
            let records: Vec<_> = risks
                .iter()
                .map(|(label, eps, r)| {
                    let mut v = risk_json(r, &hash);
                    v["attack"] = json!(label);
                    v["epsilon"] = json!(eps);
                    v
                })
                .collect();
            write_text(&ctx.path("attack_eval.csv"), &rows_to_string(&rows)?)?;
            write_json(&ctx.path("attack_risk.json"), &records)?;
        }
        Command::Bounds { common, model, data, delta, eps_grid } => {
            let ctx = Ctx::new(&common)?;
            let f = load_model(&model)?;
            require_budgets(&f)?;
            let batch = load_data(&data)?;
            let attack = ctx.config.train.attack;
            let kind = ctx.config.train.loss;
            let report = bounds::bound_report(&f, &batch, kind, attack.norm, attack.epsilon, delta)?;
            let mut table = String::new();
            for (k, v) in report.table() {
                writeln!(table, "{k:<20} {v:e}").expect("string write");
            }
            say_raw!("{table}");
            write_json(&ctx.path("bounds.json"), &report)?;
            if let Some(grid) = eps_grid {
                let mut csv = String::from("epsilon,rademacher_bound,ag_m\n");
                for eps in grid {
                    let r = bounds::bound_report(&f, &batch, kind, attack.norm, eps, delta)?;
                    writeln!(csv, "{eps},{},{}", r.rademacher_bound, r.ag_m).expect("string write");
                }
                say_raw!("{csv}");
                write_text(&ctx.path("bounds_eps.csv"), &csv)?;
            }
        }
        Command::SweepRegularizer(c) => {
            let ctx = Ctx::new(&c)?;
            let rows = ctx.run(|| exp::sweep_regularizer(&ctx.config, ctx.parallel.is_some()))?;
            let csv = rows_to_string(&rows)?;
            say_raw!("{csv}");
            write_text(&ctx.path("lambda_sweep.csv"), &csv)?;
        }
        Command::SweepBlock(c) => {
            let ctx = Ctx::new(&c)?;
            let rows = ctx.run(|| exp::sweep_block(&ctx.config, ctx.parallel.is_some()))?;
            let csv = rows_to_string(&rows)?;
            say_raw!("{csv}");
            write_text(&ctx.path("block_sweep.csv"), &csv)?;
        }
        Command::CheckLosses { trials, seed, out } => {
            let mut failed = false;
            let mut results = serde_json::Map::new();
            for kind in [LossKind::Hinge, LossKind::Logistic] {
                let r = check_partition(kind, trials, 8, seed);
                say!(
                    "{:<9} trials={} failures={} worst_margin={:e}",
                    kind.name(),
                    r.trials,
                    r.failures,
                    r.worst_margin
                );
                failed |= !r.passed;
                results.insert(kind.name().into(), serde_json::to_value(&r).map_err(other)?);
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
                write_json(&dir.join("losses.json"), &results)?;
            }
            if failed {
                return Err(Failure::Precondition("a loss violated the partition inequalities".into()));
            }
        }
        Command::Rademacher { common, model, data, n_sigma, restarts, steps } => {
            let ctx = Ctx::new(&common)?;
            let f = load_model(&model)?;
            require_budgets(&f)?;
            let batch = load_data(&data)?;
            let train_attack = ctx.config.train.attack;
            // the exact adversary is available for linear models
            let attack = if f.is_linear() && train_attack.epsilon > 0.0 {
                AttackSpec::exact(train_attack.norm, train_attack.epsilon)
            } else {
                train_attack
            };
            let rc = RademacherConfig {
                n_sigma,
                n_restarts: restarts,
                ascent_steps: steps,
                ascent_rate: 0.05,
                seed: ctx.config.seed,
            };
            let est = ctx.run(|| {
                bounds::empirical_rademacher(&BudgetClass(f.clone()), &batch, ctx.config.train.loss, &attack, &rc)
            })?;
            say!("empirical Rademacher (lower estimate) {} ± {}", est.value, est.stderr);
            write_json(&ctx.path("rademacher.json"), &est)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
