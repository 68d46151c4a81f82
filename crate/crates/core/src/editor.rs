//! Influence-guided graph edits: pruning harmful edges, attack planning, and
//! the retraining trajectory that scores a plan.

use std::cmp::Ordering;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{propagate, AttributedGraph, LabeledSplit};
use crate::influence::batch_influences;
use crate::model::{train, TrainConfig};
use crate::oracle::Experiment;
use crate::perturbation::Target;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    PruneNegative,
    AttackPositive,
    Random,
    Degree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    Edges,
    /// Training nodes only.
    Nodes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    None,
    Random,
    Degree,
}

/// How many items an attack removes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Amount {
    /// `⌈rate · |candidates|⌉`, with `0 < rate ≤ 1`.
    Rate(f64),
    Count(usize),
}

impl Amount {
    fn resolve(self, pool: usize) -> Result<usize> {
        match self {
            Amount::Rate(r) if r > 0.0 && r <= 1.0 => Ok(((r * pool as f64).ceil() as usize).min(pool)),
            Amount::Rate(r) => Err(Error::Validation(format!("rate must be in (0, 1], got {r}"))),
            Amount::Count(n) => Ok(n.min(pool)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRemoval {
    pub target: Target,
    /// Estimated change of the evaluation loss when planned by influence.
    pub estimated: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditPlan {
    pub strategy: Strategy,
    pub items: Vec<PlannedRemoval>,
    /// Re-rank the remaining items every this many steps; 0 keeps the static order.
    pub recompute_every: usize,
}

impl EditPlan {
    pub fn targets(&self) -> Vec<Target> {
        self.items.iter().map(|i| i.target).collect()
    }
}

/// Estimated evaluation-loss change for every candidate, failures dropped.
fn ranked(exp: &Experiment<'_>, candidates: &[Target]) -> Result<Vec<PlannedRemoval>> {
    let probe = exp.probe()?;
    let estimates = batch_influences(&exp.model, &exp.deltas(), candidates, Some(&probe));
    let mut out = Vec::with_capacity(candidates.len());
    for est in estimates {
        let est = est?;
        out.push(PlannedRemoval {
            target: est.target,
            estimated: est.eval_change,
        });
    }
    Ok(out)
}

fn by_estimate(a: &PlannedRemoval, b: &PlannedRemoval) -> Ordering {
    let key = |p: &PlannedRemoval| p.estimated.unwrap_or(f64::NAN);
    key(a).total_cmp(&key(b)).then(a.target.cmp(&b.target))
}

/// Up to `budget` edges with negative estimated influence, most negative first.
pub fn plan_prune_negative_edges(exp: &Experiment<'_>, budget: usize) -> Result<EditPlan> {
    let edges: Vec<Target> = exp.graph.edges().map(Target::Edge).collect();
    let mut items = ranked(exp, &edges)?;
    items.sort_by(by_estimate);
    items.retain(|p| p.estimated.is_some_and(|e| e < 0.0));
    items.truncate(budget);
    Ok(EditPlan {
        strategy: Strategy::PruneNegative,
        items,
        recompute_every: 0,
    })
}

fn candidates(exp: &Experiment<'_>, kind: TargetKind) -> Vec<Target> {
    match kind {
        TargetKind::Edges => exp.graph.edges().map(Target::Edge).collect(),
        TargetKind::Nodes => exp.split.train.iter().map(|&v| Target::Node(v)).collect(),
    }
}

fn degree_key(graph: &AttributedGraph, t: Target) -> usize {
    match t {
        Target::Edge(e) => {
            let (a, b) = e.endpoints();
            graph.degree(a) + graph.degree(b)
        }
        Target::Node(v) | Target::Sample(v) => graph.degree(v),
    }
}

/// Attack plan: the highest non-negative influences, or a baseline ordering.
pub fn plan_attack(exp: &Experiment<'_>, kind: TargetKind, amount: Amount, baseline: Baseline, seed: u64) -> Result<EditPlan> {
    let pool = candidates(exp, kind);
    let count = amount.resolve(pool.len())?;
    let (strategy, items) = match baseline {
        Baseline::None => {
            let mut items = ranked(exp, &pool)?;
            items.sort_by(|a, b| by_estimate(b, a));
            items.retain(|p| p.estimated.is_some_and(|e| e >= 0.0));
            items.truncate(count);
            (Strategy::AttackPositive, items)
        }
        Baseline::Random => {
            let mut order = pool;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            order.truncate(count);
            (Strategy::Random, unscored(order))
        }
        Baseline::Degree => {
            let mut order = pool;
            // stable: ties keep ascending id order
            order.sort_by_key(|&t| std::cmp::Reverse(degree_key(exp.graph, t)));
            order.truncate(count);
            (Strategy::Degree, unscored(order))
        }
    };
    Ok(EditPlan {
        strategy,
        items,
        recompute_every: 0,
    })
}

fn unscored(targets: Vec<Target>) -> Vec<PlannedRemoval> {
    targets
        .into_iter()
        .map(|target| PlannedRemoval { target, estimated: None })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryStep {
    pub step: usize,
    pub removed: Option<Target>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Total cross-entropy over the validation nodes.
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct TrajectoryReport {
    pub strategy: Strategy,
    /// Step 0 is the unedited graph.
    pub steps: Vec<TrajectoryStep>,
    /// Set when a retrain failed; `steps` holds everything before it.
    pub aborted: Option<Error>,
}

impl TrajectoryReport {
    pub fn baseline(&self) -> &TrajectoryStep {
        &self.steps[0]
    }

    pub fn last(&self) -> &TrajectoryStep {
        self.steps.last().expect("trajectory has a baseline step")
    }

    /// Step with the best validation accuracy, earliest on ties.
    pub fn best_by_validation(&self) -> &TrajectoryStep {
        let mut best = &self.steps[0];
        for s in &self.steps[1..] {
            if s.val_accuracy > best.val_accuracy {
                best = s;
            }
        }
        best
    }

    /// Writes `step,removed_type,removed_a,removed_b,val_accuracy,test_accuracy,val_loss`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            step: usize,
            removed_type: &'static str,
            removed_a: Option<usize>,
            removed_b: Option<usize>,
            val_accuracy: f64,
            test_accuracy: f64,
            val_loss: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        for s in &self.steps {
            let (kind, a, b) = match s.removed {
                Some(t) => {
                    let (a, b) = t.columns();
                    (t.kind(), Some(a), b)
                }
                None => ("none", None, None),
            };
            w.serialize(Row {
                step: s.step,
                removed_type: kind,
                removed_a: a,
                removed_b: b,
                val_accuracy: s.val_accuracy,
                test_accuracy: s.test_accuracy,
                val_loss: s.val_loss,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

fn evaluate(graph: &AttributedGraph, split: &LabeledSplit, k: usize, config: &TrainConfig) -> Result<(f64, f64, f64)> {
    let z = propagate(graph, k);
    let model = train(&z, split, config)?;
    Ok((
        model.accuracy(&z, &split.val, split),
        model.accuracy(&z, &split.test, split),
        model.total_loss(&z, &split.val, split),
    ))
}

/// Applies a plan cumulatively, retraining from scratch after every removal.
///
/// Removed nodes leave the training set; validation and test sets are never
/// changed. With `recompute_every > 0` the remaining influence-ranked items are
/// re-estimated on the edited graph at that interval.
pub fn run_trajectory(
    graph: &AttributedGraph,
    split: &LabeledSplit,
    k: usize,
    config: &TrainConfig,
    plan: &EditPlan,
) -> Result<TrajectoryReport> {
    let (val_accuracy, test_accuracy, val_loss) = evaluate(graph, split, k, config)?;
    let mut report = TrajectoryReport {
        strategy: plan.strategy,
        steps: vec![TrajectoryStep {
            step: 0,
            removed: None,
            val_accuracy,
            test_accuracy,
            val_loss,
        }],
        aborted: None,
    };
    let mut graph = graph.clone();
    let mut split = split.clone();
    let mut pending: Vec<Target> = plan.targets();
    let mut step = 0;
    while !pending.is_empty() {
        let target = pending.remove(0);
        step += 1;
        let edited = match target {
            Target::Edge(e) => graph.remove_edge(e).map(|g| (g, split.clone())),
            Target::Node(v) => {
                if !split.is_train(v) {
                    Err(Error::Validation(format!("node {v} is not a training node")))
                } else {
                    graph.remove_node(v).map(|g| (g, split.without_train_node(v)))
                }
            }
            Target::Sample(v) => Ok((graph.clone(), split.without_train_node(v))),
        };
        let (g, s) = match edited {
            Ok(x) => x,
            Err(e) => {
                report.aborted = Some(e);
                break;
            }
        };
        graph = g;
        split = s;
        match evaluate(&graph, &split, k, config) {
            Ok((val_accuracy, test_accuracy, val_loss)) => report.steps.push(TrajectoryStep {
                step,
                removed: Some(target),
                val_accuracy,
                test_accuracy,
                val_loss,
            }),
            Err(e) => {
                report.aborted = Some(e);
                break;
            }
        }
        let rerank = matches!(plan.strategy, Strategy::PruneNegative | Strategy::AttackPositive);
        if rerank && plan.recompute_every > 0 && step % plan.recompute_every == 0 && !pending.is_empty() {
            let exp = match Experiment::fit(&graph, &split, k, *config, split.val.clone()) {
                Ok(exp) => exp,
                Err(e) => {
                    report.aborted = Some(e);
                    break;
                }
            };
            let mut items = match ranked(&exp, &pending) {
                Ok(items) => items,
                Err(e) => {
                    report.aborted = Some(e);
                    break;
                }
            };
            match plan.strategy {
                Strategy::PruneNegative => {
                    items.sort_by(by_estimate);
                    items.retain(|p| p.estimated.is_some_and(|e| e < 0.0));
                }
                _ => {
                    items.sort_by(|a, b| by_estimate(b, a));
                    items.retain(|p| p.estimated.is_some_and(|e| e >= 0.0));
                }
            }
            pending = items.into_iter().map(|p| p.target).collect();
        }
    }
    Ok(report)
}
