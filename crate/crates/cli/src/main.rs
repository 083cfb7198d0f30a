//! Command-line surface binding the metasel library into reproducible
//! batch workflows. Every command is idempotent and seed-deterministic;
//! outputs are machine-readable JSON by default (`--format table` renders
//! aligned text where a table makes sense).
//!
//! Exit codes: 0 success, 2 usage error, 3 validation/parse error,
//! 4 capacity (brute-force cap) error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use metasel::data::{Allocation, PerformanceMatrix, Policy, Portfolio, Validation};
use metasel::ensemble::{ensemble_predict, ensemble_select, PredictionSet};
use metasel::error::Error as CoreError;
use metasel::metrics::{average_rank, sign_test, wilcoxon_signed_rank, NormalizationStats};
use metasel::portfolio::{
    greedy_portfolio, replay_with_budget, GreedyOptions, PortfolioDocument,
};
use metasel::selector::{
    load_meta_csv, oracle_policy, random_policy, single_best, train_pairwise_selector,
    tune_selector, MetaFeatures, PolicyLossTable, PolicySelector, SelectorHyperparams,
    SelectorSearchSpace,
};
use metasel::strategies::{ge_s, portfolio_loss, Aggregation, MatrixSet, SelectionTarget};

#[derive(Parser)]
#[command(
    name = "metasel",
    about = "Portfolio construction, budget allocation and policy selection over performance matrices",
    version
)]
struct Cli {
    /// Worker threads for parallel stages (0 = all cores). Output is
    /// independent of this setting.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// Output format for human-facing summaries.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetArg {
    Test,
    Validation,
}

impl From<TargetArg> for SelectionTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Test => SelectionTarget::Test,
            TargetArg::Validation => SelectionTarget::Validation,
        }
    }
}

/// Strategy flags shared by the portfolio commands: `holdout`, `cv:K`
/// or `sh` (with the successive-halving knobs).
#[derive(Args, Clone)]
struct StrategyArgs {
    /// Model selection / budget allocation strategy: holdout, cv:K or sh.
    #[arg(long)]
    strategy: String,

    /// Successive-halving downsampling rate.
    #[arg(long, default_value_t = 4.0)]
    sh_eta: f64,

    /// Successive-halving minimal budget.
    #[arg(long, default_value_t = 32)]
    sh_min: u64,

    /// Successive-halving maximal budget.
    #[arg(long, default_value_t = 512)]
    sh_max: u64,
}

impl StrategyArgs {
    fn policy(&self) -> Result<Policy, CoreError> {
        let sh = Allocation::Sh { eta: self.sh_eta, b_min: self.sh_min, b_max: self.sh_max };
        if self.strategy == "holdout" {
            Policy::new(Validation::Holdout, Allocation::FullBudget)
        } else if self.strategy == "sh" {
            Policy::new(Validation::Holdout, sh)
        } else if let Some(k) = self.strategy.strip_prefix("cv:") {
            let folds: u32 = k
                .parse()
                .map_err(|_| CoreError::parse(format!("bad cv fold count \"{k}\"")))?;
            Policy::new(Validation::Cv { folds }, Allocation::FullBudget)
        } else {
            Err(CoreError::parse(format!(
                "unknown strategy \"{}\" (expected holdout, cv:K or sh)",
                self.strategy
            )))
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a greedy portfolio from a performance matrix.
    BuildPortfolio {
        /// Performance matrix (.json, or .csv shorthand).
        #[arg(long)]
        matrix: PathBuf,
        #[command(flatten)]
        strategy: StrategyArgs,
        /// Maximum portfolio size.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Loss the selection function optimizes during construction.
        #[arg(long, value_enum, default_value_t = TargetArg::Test)]
        target: TargetArg,
        /// Stop early once no candidate improves the objective.
        #[arg(long)]
        early_stop: bool,
        /// Output portfolio JSON path.
        #[arg(long)]
        out: PathBuf,
    },

    /// Evaluate a portfolio's per-dataset losses and ADTM under a strategy.
    EvalPortfolio {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        portfolio: PathBuf,
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long, value_enum, default_value_t = TargetArg::Validation)]
        target: TargetArg,
        /// Include the full per-dataset selection traces.
        #[arg(long)]
        trace: bool,
        /// Aggregate normalized losses by mean or sum.
        #[arg(long, default_value = "mean")]
        aggregate: String,
    },

    /// Replay a portfolio under a wall-clock horizon on every dataset.
    Replay {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        portfolio: PathBuf,
        /// Horizon in seconds.
        #[arg(long)]
        horizon: f64,
        /// Per-evaluation cap in seconds, or "auto" for horizon/10.
        #[arg(long, default_value = "auto")]
        cap: String,
    },

    /// Train the pairwise policy selector from a policy-loss table.
    TrainSelector {
        /// Policy-loss CSV: policy,dataset,loss.
        #[arg(long)]
        table: PathBuf,
        /// Meta-features CSV: dataset,n_samples,n_features.
        #[arg(long)]
        meta: PathBuf,
        /// Random-search evaluations for hyperparameter tuning (0 = use
        /// defaults without tuning).
        #[arg(long, default_value_t = 0)]
        tune_budget: u32,
        /// Inner cross-validation folds used during tuning.
        #[arg(long, default_value_t = 5)]
        folds: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Query a trained selector for one dataset's meta-features.
    SelectPolicy {
        #[arg(long)]
        selector: PathBuf,
        #[arg(long)]
        n_samples: u64,
        #[arg(long)]
        n_features: u64,
    },

    /// Greedy ensemble selection over stored prediction vectors.
    Ensemble {
        /// Flat binary prediction set.
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, default_value_t = 50)]
        size: u32,
    },

    /// Ranks and statistical tests across per-method result files.
    Report {
        /// Result JSON files: {"method": ..., "losses": {dataset: [reps]}}.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Comma-separated tests to run: wilcoxon, sign.
        #[arg(long, default_value = "wilcoxon,sign")]
        tests: String,
        /// Draws for the sampled average rank.
        #[arg(long, default_value_t = 200)]
        ranks: u32,
        #[arg(long)]
        seed: u64,
    },

    /// Per-dataset oracle policy assignment for a loss table.
    Oracle {
        #[arg(long)]
        table: PathBuf,
    },

    /// Policy with the best mean loss across datasets.
    SingleBest {
        #[arg(long)]
        table: PathBuf,
    },

    /// Uniformly random per-dataset policy assignment.
    Random {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        // Ignore failure: the global pool may already exist in tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err.downcast_ref::<CoreError>() {
                Some(CoreError::Capacity(_)) => ExitCode::from(4),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn load_matrix(path: &Path) -> anyhow::Result<PerformanceMatrix> {
    let file = File::open(path)
        .map_err(|e| anyhow::anyhow!("cannot open matrix {}: {e}", path.display()))?;
    let reader = BufReader::new(file);
    let matrix = if path.extension().is_some_and(|e| e == "csv") {
        PerformanceMatrix::load_csv(reader)?
    } else {
        PerformanceMatrix::load_json(reader)?
    };
    Ok(matrix)
}

fn load_portfolio(path: &Path) -> anyhow::Result<Portfolio> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot open portfolio {}: {e}", path.display()))?;
    Ok(PortfolioDocument::from_json_str(&text)?.portfolio()?)
}

fn load_table(path: &Path) -> anyhow::Result<PolicyLossTable> {
    let file = File::open(path)
        .map_err(|e| anyhow::anyhow!("cannot open table {}: {e}", path.display()))?;
    Ok(PolicyLossTable::from_csv(BufReader::new(file))?)
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(contents.as_bytes())?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::BuildPortfolio { matrix, strategy, size, target, early_stop, out } => {
            let matrix = load_matrix(matrix)?;
            let policy = strategy.policy()?;
            let stats = NormalizationStats::from_matrix(&matrix);
            let mut options = GreedyOptions::new(*size);
            options.early_stop = *early_stop;
            let portfolio = greedy_portfolio(
                &matrix.candidates().to_vec(),
                &MatrixSet::new(&matrix),
                &matrix.dataset_ids(),
                &policy,
                (*target).into(),
                &stats,
                options,
            )?;
            let doc = PortfolioDocument::new(&portfolio, strategy.strategy.clone());
            write_file(out, &doc.to_json_string())?;
            println!("wrote portfolio with {} members to {}", portfolio.len(), out.display());
            Ok(())
        }

        Command::EvalPortfolio { matrix, portfolio, strategy, target, trace, aggregate } => {
            let matrix = load_matrix(matrix)?;
            let portfolio = load_portfolio(portfolio)?;
            let policy = strategy.policy()?;
            let stats = NormalizationStats::from_matrix(&matrix);
            let aggregation = match aggregate.as_str() {
                "mean" => Aggregation::Mean,
                "sum" => Aggregation::Sum,
                other => {
                    return Err(CoreError::parse(format!("unknown aggregate \"{other}\"")).into())
                }
            };
            let data = MatrixSet::new(&matrix);
            let selection_target: SelectionTarget = (*target).into();

            #[derive(Serialize)]
            struct DatasetLoss {
                dataset: String,
                loss: f64,
                normalized: f64,
                chosen: String,
                #[serde(skip_serializing_if = "Option::is_none")]
                trace: Option<metasel::strategies::SelectionTrace>,
            }
            #[derive(Serialize)]
            struct EvalOutput {
                strategy: String,
                objective: f64,
                per_dataset: Vec<DatasetLoss>,
            }

            let mut per_dataset = Vec::new();
            for d in matrix.dataset_ids() {
                let t = portfolio_loss(portfolio.members(), &data, &d, &policy, selection_target)?;
                per_dataset.push(DatasetLoss {
                    dataset: d.clone(),
                    loss: t.dataset_loss,
                    normalized: metasel::metrics::normalize_loss(t.dataset_loss, &stats, &d)?,
                    chosen: t.chosen.clone(),
                    trace: trace.then_some(t),
                });
            }
            let objective = ge_s(
                portfolio.members(),
                &data,
                &matrix.dataset_ids(),
                &policy,
                selection_target,
                &stats,
                aggregation,
            )?;
            let output =
                EvalOutput { strategy: strategy.strategy.clone(), objective, per_dataset };
            match cli.format {
                Format::Json => print_json(&output)?,
                Format::Table => {
                    println!("{:<20} {:>12} {:>12} {:<16}", "dataset", "loss", "normalized", "chosen");
                    for row in &output.per_dataset {
                        println!(
                            "{:<20} {:>12.6} {:>12.6} {:<16}",
                            row.dataset, row.loss, row.normalized, row.chosen
                        );
                    }
                    println!("objective ({aggregate}): {:.6}", output.objective);
                }
            }
            Ok(())
        }

        Command::Replay { matrix, portfolio, horizon, cap } => {
            let matrix = load_matrix(matrix)?;
            let portfolio = load_portfolio(portfolio)?;
            let cap = match cap.as_str() {
                "auto" => None,
                other => Some(
                    other
                        .parse::<f64>()
                        .map_err(|_| CoreError::parse(format!("bad cap \"{other}\"")))?,
                ),
            };
            #[derive(Serialize)]
            struct ReplayOutput {
                horizon_s: f64,
                per_eval_cap_s: f64,
                trajectories: BTreeMap<String, metasel::portfolio::ReplayTrajectory>,
            }
            let mut trajectories = BTreeMap::new();
            for d in matrix.dataset_ids() {
                let t = replay_with_budget(portfolio.members(), &matrix, &d, *horizon, cap)?;
                trajectories.insert(d, t);
            }
            print_json(&ReplayOutput {
                horizon_s: *horizon,
                per_eval_cap_s: cap.unwrap_or(horizon / 10.0),
                trajectories,
            })
        }

        Command::TrainSelector { table, meta, tune_budget, folds, seed, out } => {
            let table = load_table(table)?;
            let meta_file = File::open(meta)
                .map_err(|e| anyhow::anyhow!("cannot open meta csv {}: {e}", meta.display()))?;
            let meta = load_meta_csv(BufReader::new(meta_file))?;
            let (hp, tuned_score) = if *tune_budget > 0 {
                let space = SelectorSearchSpace::default();
                let (hp, score) =
                    tune_selector(&meta, &table, &space, *tune_budget, *folds, *seed)?;
                (hp, Some(score))
            } else {
                (SelectorHyperparams::default(), None)
            };
            let selector = train_pairwise_selector(&meta, &table, &hp, *seed)?;
            write_file(out, &selector.to_json_string())?;
            #[derive(Serialize)]
            struct TrainOutput {
                policies: Vec<String>,
                fallback_policy: String,
                tuned: bool,
                #[serde(skip_serializing_if = "Option::is_none")]
                inner_cv_loss: Option<f64>,
                out: String,
            }
            print_json(&TrainOutput {
                policies: selector.policies().to_vec(),
                fallback_policy: selector.fallback_policy().to_string(),
                tuned: *tune_budget > 0,
                inner_cv_loss: tuned_score,
                out: out.display().to_string(),
            })
        }

        Command::SelectPolicy { selector, n_samples, n_features } => {
            let text = std::fs::read_to_string(selector)
                .map_err(|e| anyhow::anyhow!("cannot open selector {}: {e}", selector.display()))?;
            let selector = PolicySelector::from_json_str(&text)?;
            let query = MetaFeatures::new(*n_samples, *n_features)?;
            let outcome = selector.select_policy(&query);
            match cli.format {
                Format::Json => print_json(&outcome)?,
                Format::Table => {
                    println!("policy={} fallback={}", outcome.policy_id, outcome.fallback);
                    for (p, v) in &outcome.tallies {
                        println!("{p:<16} {v:.3}");
                    }
                }
            }
            Ok(())
        }

        Command::Ensemble { preds, size } => {
            let file = File::open(preds)
                .map_err(|e| anyhow::anyhow!("cannot open predictions {}: {e}", preds.display()))?;
            let set = PredictionSet::read_binary(BufReader::new(file))?;
            let weights = ensemble_select(&set, *size)?;
            let eval = ensemble_predict(&weights, &set)?;
            #[derive(Serialize)]
            struct EnsembleOutput {
                weights: Vec<u32>,
                val_loss: f64,
                test_loss: f64,
            }
            print_json(&EnsembleOutput {
                weights,
                val_loss: eval.val_loss,
                test_loss: eval.test_loss,
            })
        }

        Command::Report { inputs, tests, ranks, seed } => {
            #[derive(Deserialize)]
            struct MethodFile {
                method: String,
                losses: BTreeMap<String, Vec<f64>>,
            }
            let mut results: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
            for path in inputs {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| anyhow::anyhow!("cannot open input {}: {e}", path.display()))?;
                let parsed: MethodFile = serde_json::from_str(&text)
                    .map_err(|e| CoreError::parse(format!("{}: {e}", path.display())))?;
                if results.insert(parsed.method.clone(), parsed.losses).is_some() {
                    return Err(CoreError::validation(format!(
                        "duplicate method \"{}\"",
                        parsed.method
                    ))
                    .into());
                }
            }
            let requested: Vec<&str> = tests.split(',').map(|t| t.trim()).collect();
            for t in &requested {
                if !["wilcoxon", "sign", ""].contains(t) {
                    return Err(CoreError::parse(format!("unknown test \"{t}\"")).into());
                }
            }
            let rank_values = average_rank(&results, *ranks, *seed)?;

            #[derive(Serialize)]
            struct PairTests {
                method_a: String,
                method_b: String,
                wins: u64,
                losses: u64,
                ties: u64,
                #[serde(skip_serializing_if = "Option::is_none")]
                wilcoxon_p: Option<f64>,
                #[serde(skip_serializing_if = "Option::is_none")]
                sign_p: Option<f64>,
            }
            #[derive(Serialize)]
            struct ReportOutput {
                methods: Vec<String>,
                n_datasets: usize,
                rank_draws: u32,
                ranks: BTreeMap<String, f64>,
                tests: Vec<PairTests>,
            }

            let methods: Vec<String> = results.keys().cloned().collect();
            let datasets: Vec<String> = results[&methods[0]].keys().cloned().collect();
            let mean_losses = |m: &str| -> Vec<f64> {
                datasets
                    .iter()
                    .map(|d| {
                        let reps = &results[m][d];
                        reps.iter().sum::<f64>() / reps.len() as f64
                    })
                    .collect()
            };
            let mut pair_tests = Vec::new();
            for i in 0..methods.len() {
                for j in i + 1..methods.len() {
                    let a = mean_losses(&methods[i]);
                    let b = mean_losses(&methods[j]);
                    let mut wins = 0;
                    let mut defeats = 0;
                    let mut ties = 0;
                    for (x, y) in a.iter().zip(&b) {
                        if x < y {
                            wins += 1;
                        } else if x > y {
                            defeats += 1;
                        } else {
                            ties += 1;
                        }
                    }
                    let wilcoxon_p = requested
                        .contains(&"wilcoxon")
                        .then(|| wilcoxon_signed_rank(&a, &b).ok())
                        .flatten();
                    let sign_p = (requested.contains(&"sign") && wins + defeats > 0)
                        .then(|| sign_test(wins, defeats).ok())
                        .flatten();
                    pair_tests.push(PairTests {
                        method_a: methods[i].clone(),
                        method_b: methods[j].clone(),
                        wins,
                        losses: defeats,
                        ties,
                        wilcoxon_p,
                        sign_p,
                    });
                }
            }
            let output = ReportOutput {
                methods,
                n_datasets: datasets.len(),
                rank_draws: *ranks,
                ranks: rank_values,
                tests: pair_tests,
            };
            match cli.format {
                Format::Json => print_json(&output)?,
                Format::Table => {
                    println!("{:<24} {:>8}", "method", "rank");
                    for (m, r) in &output.ranks {
                        println!("{m:<24} {r:>8.3}");
                    }
                    for t in &output.tests {
                        println!(
                            "{} vs {}: w/l/t {}/{}/{} wilcoxon={} sign={}",
                            t.method_a,
                            t.method_b,
                            t.wins,
                            t.losses,
                            t.ties,
                            t.wilcoxon_p.map_or("-".into(), |p| format!("{p:.4}")),
                            t.sign_p.map_or("-".into(), |p| format!("{p:.4}")),
                        );
                    }
                }
            }
            Ok(())
        }

        Command::Oracle { table } => {
            let table = load_table(table)?;
            let assignment = oracle_policy(&table)?;
            let adtm = assignment_adtm(&table, &assignment)?;
            print_json(&AssignmentOutput { system: "oracle".into(), adtm, assignment })
        }

        Command::SingleBest { table } => {
            let table = load_table(table)?;
            let policy = single_best(&table)?;
            let assignment: BTreeMap<String, String> =
                table.datasets().iter().map(|d| (d.clone(), policy.clone())).collect();
            let adtm = assignment_adtm(&table, &assignment)?;
            print_json(&AssignmentOutput { system: format!("single-best:{policy}"), adtm, assignment })
        }

        Command::Random { table, seed } => {
            let table = load_table(table)?;
            let assignment = random_policy(
                &table.policies().to_vec(),
                &table.datasets().to_vec(),
                *seed,
            );
            let adtm = assignment_adtm(&table, &assignment)?;
            print_json(&AssignmentOutput { system: "random".into(), adtm, assignment })
        }
    }
}

#[derive(Serialize)]
struct AssignmentOutput {
    system: String,
    adtm: f64,
    assignment: BTreeMap<String, String>,
}

fn assignment_adtm(
    table: &PolicyLossTable,
    assignment: &BTreeMap<String, String>,
) -> anyhow::Result<f64> {
    let mut sum = 0.0;
    for d in table.datasets() {
        sum += table.loss(&assignment[d], d)?;
    }
    Ok(sum / table.datasets().len() as f64)
}
