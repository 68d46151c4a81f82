use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sgc_influence::bounds::{lambda_sweep, write_sweep_csv, CProvenance, LipschitzSource, SweepPlan};
use sgc_influence::dataset::{ingest_dataset, Dataset};
use sgc_influence::editor::{
    plan_attack, plan_prune_negative_edges, run_trajectory, Amount, Baseline, TargetKind, TrajectoryReport,
};
use sgc_influence::graph::{propagate, Edge, LabeledSplit};
use sgc_influence::influence::{batch_influences, make_eval_probe, write_influence_csv};
use sgc_influence::model::{train, ModelCheckpoint, SgcModel, TrainConfig, TrainingData};
use sgc_influence::oracle::{sample_targets, validate_influence, Experiment};
use sgc_influence::perturbation::{DeltaContext, Target};
use sgc_influence::synth::{generate_synthetic, SynthConfig};
use sgc_influence::{Error, Result};

/// Largest objective-gradient norm accepted for a loaded checkpoint.
const CHECKPOINT_GRAD_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "sgc-influence", version, about = "Influence of edge and node removals on SGC models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an SGC model and write its checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate influences for a trained checkpoint.
    Influence {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        targets: TargetArgs,
        #[arg(long, value_enum, default_value_t = EvalSet::Val)]
        eval: EvalSet,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare estimates against retraining and report rank correlation.
    Validate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        targets: TargetArgs,
        #[arg(long, value_enum, default_value_t = EvalSet::Val)]
        eval: EvalSet,
        /// Scatter CSV of estimated and actual loss changes.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: PathBuf,
        /// Start each retrain from the fitted parameters instead of zero.
        #[arg(long)]
        warm_start: bool,
    },
    /// Estimated error, observed error and bound for sampled edges across λ.
    BoundSweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Comma-separated, e.g. 1e-1,1e-2,1e-3.
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        lambdas: Vec<f64>,
        /// Number of edges sampled without replacement.
        #[arg(long)]
        edges: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use this Hessian Lipschitz constant instead of estimating one.
        #[arg(long)]
        lipschitz: Option<f64>,
        #[arg(long, default_value_t = 20)]
        c_probes: usize,
        #[arg(long, default_value_t = 1.0)]
        c_radius: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove negative-influence edges one at a time, retraining after each.
    Prune {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        budget: usize,
        /// Re-estimate the remaining edges every n removals; 0 keeps the first ranking.
        #[arg(long, default_value_t = 0)]
        recompute_every: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove positive-influence edges or training nodes, or a baseline choice.
    Attack {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, value_enum)]
        kind: AttackKind,
        /// Fraction of candidates to remove, in (0, 1].
        #[arg(long, conflicts_with = "count", required_unless_present = "count")]
        rate: Option<f64>,
        /// Number of candidates to remove.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum, default_value_t = BaselineArg::None)]
        baseline: BaselineArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded stochastic-block-model bundle with planted noise edges.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 100)]
        nodes_per_block: usize,
        #[arg(long, default_value_t = 0.05)]
        p_in: f64,
        #[arg(long, default_value_t = 0.005)]
        p_out: f64,
        #[arg(long, default_value_t = 0.1)]
        noise_rate: f64,
        #[arg(long, default_value_t = 16)]
        feature_dim: usize,
        #[arg(long, default_value_t = 1.8)]
        separation: f64,
        #[arg(long, default_value_t = 20)]
        train_per_class: usize,
        #[arg(long, default_value_t = 30)]
        val_per_class: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding edges.tsv, features.csv, labels.tsv and splits.json.
    #[arg(long)]
    data: PathBuf,
    /// Scale every feature row to unit L1 norm before propagation.
    #[arg(long)]
    row_normalize: bool,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    lambda: f64,
}

#[derive(Args)]
struct TargetArgs {
    #[arg(long, value_enum)]
    targets: TargetSet,
    /// Sample this many targets instead of using all of them.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetSet {
    Edges,
    Nodes,
    Samples,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSet {
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    Edges,
    Nodes,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    None,
    Random,
    Degree,
}

fn load(args: &DataArgs) -> Result<Dataset> {
    let (mut dataset, report) = ingest_dataset(&args.data)?;
    eprintln!(
        "loaded {} nodes, {} edges, {} classes, {} features; split {}/{}/{}",
        report.num_nodes,
        report.num_edges,
        report.num_classes,
        report.feature_dim,
        report.train,
        report.val,
        report.test
    );
    if args.row_normalize {
        dataset.graph = dataset.graph.with_row_normalized_features();
    }
    Ok(dataset)
}

fn config(lambda: f64) -> Result<TrainConfig> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(TrainConfig::new(lambda))
    } else {
        Err(Error::Validation(format!("lambda must be positive, got {lambda}")))
    }
}

fn eval_nodes(split: &LabeledSplit, eval: EvalSet) -> Vec<usize> {
    match eval {
        EvalSet::Val => split.val.clone(),
        EvalSet::Test => split.test.clone(),
    }
}

/// Candidate targets; node removals skip the evaluation nodes when `exclude` is given.
fn target_pool(dataset: &Dataset, set: TargetSet, exclude: Option<&[usize]>) -> Vec<Target> {
    match set {
        TargetSet::Edges => dataset.graph.edges().map(Target::Edge).collect(),
        TargetSet::Nodes => (0..dataset.graph.num_nodes())
            .filter(|v| exclude.is_none_or(|ex| !ex.contains(v)))
            .map(Target::Node)
            .collect(),
        TargetSet::Samples => dataset.split.train.iter().map(|&v| Target::Sample(v)).collect(),
    }
}

fn choose(pool: Vec<Target>, args: &TargetArgs) -> Vec<Target> {
    match args.sample {
        Some(n) => sample_targets(&pool, n, args.seed),
        None => pool,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Rebuilds a fitted model from a checkpoint and checks it is the optimum for this data.
fn restore(dataset: &Dataset, checkpoint: &ModelCheckpoint) -> Result<SgcModel> {
    let params = checkpoint.params()?;
    let embedding = propagate(&dataset.graph, checkpoint.k);
    let data = TrainingData::from_split(&embedding, &dataset.split)?;
    let model = SgcModel::new(
        checkpoint.k,
        config(checkpoint.lambda)?,
        params,
        data,
        dataset.split.train.clone(),
    )?;
    let g = model.objective_gradient();
    let grad = g.dot(&g).sqrt();
    if grad > CHECKPOINT_GRAD_TOL {
        return Err(Error::Validation(format!(
            "checkpoint is not a minimiser for this data (gradient norm {grad:e}); \
             was it trained on the same bundle and preprocessing?"
        )));
    }
    Ok(model)
}

fn summarize(report: &TrajectoryReport) {
    let base = report.baseline();
    let last = report.last();
    let best = report.best_by_validation();
    println!(
        "{} removals: test accuracy {:.4} -> {:.4}; best by validation at step {} (test {:.4})",
        report.steps.len() - 1,
        base.test_accuracy,
        last.test_accuracy,
        best.step,
        best.test_accuracy
    );
}

fn finish_trajectory(report: TrajectoryReport, out: &Path) -> Result<()> {
    report.write_csv(create(out)?)?;
    summarize(&report);
    match report.aborted {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { data, fit, out } => {
            let dataset = load(&data)?;
            let embedding = propagate(&dataset.graph, fit.k);
            let model = train(&embedding, &dataset.split, &config(fit.lambda)?)?;
            model.checkpoint().save(&out)?;
            let split = &dataset.split;
            println!(
                "trained in {} iterations: train {:.4}, val {:.4}, test {:.4}",
                model.iterations,
                model.accuracy(&embedding, &split.train, split),
                model.accuracy(&embedding, &split.val, split),
                model.accuracy(&embedding, &split.test, split)
            );
        }
        Command::Influence {
            data,
            model,
            targets,
            eval,
            out,
        } => {
            let dataset = load(&data)?;
            let model = restore(&dataset, &ModelCheckpoint::load(&model)?)?;
            let deltas = DeltaContext::new(&dataset.graph, model.k);
            let eval_set = eval_nodes(&dataset.split, eval);
            let probe = make_eval_probe(&model, deltas.embedding(), &dataset.split, &eval_set)?;
            let chosen = choose(target_pool(&dataset, targets.targets, None), &targets);
            let mut estimates = Vec::with_capacity(chosen.len());
            let mut first_error = None;
            for (target, result) in chosen.iter().zip(batch_influences(&model, &deltas, &chosen, Some(&probe))) {
                match result {
                    Ok(est) => estimates.push(est),
                    Err(e) => {
                        eprintln!("{target}: {e}");
                        first_error.get_or_insert(e);
                    }
                }
            }
            write_influence_csv(create(&out)?, &estimates)?;
            println!("wrote {} estimates to {}", estimates.len(), out.display());
            if let Some(e) = first_error {
                return Err(e);
            }
        }
        Command::Validate {
            data,
            fit,
            targets,
            eval,
            out,
            summary,
            warm_start,
        } => {
            let dataset = load(&data)?;
            let eval_set = eval_nodes(&dataset.split, eval);
            let pool = target_pool(&dataset, targets.targets, Some(&eval_set));
            let chosen = choose(pool, &targets);
            let mut exp = Experiment::fit(&dataset.graph, &dataset.split, fit.k, config(fit.lambda)?, eval_set)?;
            exp.warm_start = warm_start;
            let report = validate_influence(&exp, &chosen)?;
            for (target, e) in &report.failures {
                eprintln!("{target}: {e}");
            }
            report.write_scatter_csv(create(&out)?)?;
            let s = report.summary();
            std::fs::write(&summary, serde_json::to_string_pretty(&s)?)?;
            match s.rho {
                Some(rho) => println!("spearman rho {rho:.4} over {} targets ({} failed)", s.n_targets, s.n_failed),
                None => println!("no correlation: {} targets ({} failed)", s.n_targets, s.n_failed),
            }
        }
        Command::BoundSweep {
            data,
            k,
            lambdas,
            edges,
            seed,
            lipschitz,
            c_probes,
            c_radius,
            out,
        } => {
            let dataset = load(&data)?;
            if let Some(&bad) = lambdas.iter().find(|l| !(**l > 0.0)) {
                return Err(Error::Validation(format!("lambda must be positive, got {bad}")));
            }
            let pool: Vec<Target> = dataset.graph.edges().map(Target::Edge).collect();
            let sampled: Vec<Edge> = sample_targets(&pool, edges, seed)
                .into_iter()
                .filter_map(|t| match t {
                    Target::Edge(e) => Some(e),
                    _ => None,
                })
                .collect();
            let source = match lipschitz {
                Some(c) if c >= 0.0 => LipschitzSource::Supplied(c),
                Some(c) => return Err(Error::Validation(format!("lipschitz constant must be non-negative, got {c}"))),
                None => LipschitzSource::Estimate {
                    num_probes: c_probes,
                    radius: c_radius,
                    seed,
                },
            };
            let plan = SweepPlan {
                graph: &dataset.graph,
                split: &dataset.split,
                k,
                base: TrainConfig::default(),
                lambdas,
                edges: sampled,
                eval_set: dataset.split.val.clone(),
                lipschitz: source,
            };
            let records = lambda_sweep(&plan);
            write_sweep_csv(create(&out)?, &records)?;
            let mut first_error = None;
            for r in &records {
                let c = match &r.lipschitz {
                    Some(c) => match &c.provenance {
                        CProvenance::Supplied => format!("C={} (supplied)", c.value),
                        CProvenance::Estimated {
                            num_probes,
                            radius,
                            seed,
                        } => format!(
                            "C={:.4e} (estimated: {num_probes} probes, radius {radius}, seed {seed}; a lower estimate)",
                            c.value
                        ),
                    },
                    None => "C unavailable".into(),
                };
                eprintln!("lambda {:e}: {c}", r.lambda);
                match &r.error {
                    Some(e) => eprintln!("lambda {:e} failed: {e}", r.lambda),
                    None => println!(
                        "lambda {:e}: rho {}, mean observed error {:.3e}, mean bound {:.3e}",
                        r.lambda,
                        r.rho.map_or("n/a".into(), |x| format!("{x:.4}")),
                        r.mean_observed_err(),
                        r.mean_bound()
                    ),
                }
            }
            if let Some(r) = records.into_iter().find(|r| r.error.is_some()) {
                first_error = r.error;
            }
            if let Some(e) = first_error {
                return Err(e);
            }
        }
        Command::Prune {
            data,
            fit,
            budget,
            recompute_every,
            out,
        } => {
            let dataset = load(&data)?;
            let config = config(fit.lambda)?;
            let exp = Experiment::fit(&dataset.graph, &dataset.split, fit.k, config, dataset.split.val.clone())?;
            let mut plan = plan_prune_negative_edges(&exp, budget)?;
            plan.recompute_every = recompute_every;
            let report = run_trajectory(&dataset.graph, &dataset.split, fit.k, &config, &plan)?;
            finish_trajectory(report, &out)?;
        }
        Command::Attack {
            data,
            fit,
            kind,
            rate,
            count,
            baseline,
            seed,
            out,
        } => {
            let dataset = load(&data)?;
            let config = config(fit.lambda)?;
            let exp = Experiment::fit(&dataset.graph, &dataset.split, fit.k, config, dataset.split.val.clone())?;
            let amount = match (rate, count) {
                (Some(r), _) => Amount::Rate(r),
                (None, Some(n)) => Amount::Count(n),
                (None, None) => return Err(Error::Validation("one of --rate or --count is required".into())),
            };
            let kind = match kind {
                AttackKind::Edges => TargetKind::Edges,
                AttackKind::Nodes => TargetKind::Nodes,
            };
            let baseline = match baseline {
                BaselineArg::None => Baseline::None,
                BaselineArg::Random => Baseline::Random,
                BaselineArg::Degree => Baseline::Degree,
            };
            let plan = plan_attack(&exp, kind, amount, baseline, seed)?;
            let report = run_trajectory(&dataset.graph, &dataset.split, fit.k, &config, &plan)?;
            finish_trajectory(report, &out)?;
        }
        Command::Synth {
            seed,
            blocks,
            nodes_per_block,
            p_in,
            p_out,
            noise_rate,
            feature_dim,
            separation,
            train_per_class,
            val_per_class,
            out,
        } => {
            let synth = generate_synthetic(&SynthConfig {
                seed,
                blocks,
                nodes_per_block,
                p_in,
                p_out,
                noise_rate,
                feature_dim,
                separation,
                train_per_class,
                val_per_class,
            })?;
            std::fs::create_dir_all(&out)?;
            synth.emit(&out)?;
            println!(
                "wrote {} nodes, {} edges ({} planted) to {}",
                synth.dataset.graph.num_nodes(),
                synth.dataset.graph.num_edges(),
                synth.planted.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
