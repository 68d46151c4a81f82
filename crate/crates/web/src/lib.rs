//! JSON-in, JSON-out entry points for the static demo page.
//!
//! Each exported function has a plain Rust twin (`*_json`) so the logic can
//! be tested natively; the wasm wrappers only turn errors into JS strings.

use serde::{Deserialize, Serialize};
use sgc_influence::bounds::{lambda_sweep, LipschitzSource, SweepPlan};
use sgc_influence::editor::{plan_attack, run_trajectory, Amount, Baseline, TargetKind};
use sgc_influence::influence::batch_influences;
use sgc_influence::model::TrainConfig;
use sgc_influence::oracle::{sample_targets, Experiment};
use sgc_influence::perturbation::Target;
use sgc_influence::synth::{generate_synthetic, SynthConfig, SyntheticDataset};
use wasm_bindgen::prelude::*;

/// Graph and model settings shared by every demo operation.
#[derive(Clone, Debug, Deserialize)]
#[serde(default)]
pub struct Scene {
    pub seed: u64,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub noise_rate: f64,
    pub k: usize,
    pub lambda: f64,
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            seed: 0,
            nodes_per_block: 40,
            p_in: 0.12,
            p_out: 0.01,
            noise_rate: 0.15,
            k: 2,
            lambda: 0.1,
        }
    }
}

impl Scene {
    fn build(&self) -> Result<SyntheticDataset, String> {
        if !(self.lambda > 0.0) {
            return Err(format!("lambda must be positive, got {}", self.lambda));
        }
        let per_class = (self.nodes_per_block / 4).max(1);
        generate_synthetic(&SynthConfig {
            seed: self.seed,
            nodes_per_block: self.nodes_per_block,
            p_in: self.p_in,
            p_out: self.p_out,
            noise_rate: self.noise_rate,
            feature_dim: 8,
            train_per_class: per_class,
            val_per_class: per_class,
            ..SynthConfig::default()
        })
        .map_err(|e| e.to_string())
    }
}

#[derive(Serialize)]
pub struct NodeView {
    pub label: usize,
    /// "train", "val" or "test".
    pub role: &'static str,
}

#[derive(Serialize)]
pub struct EdgeView {
    pub a: usize,
    pub b: usize,
    pub planted: bool,
    /// Estimated change of the validation loss if the edge is removed.
    pub influence: f64,
}

#[derive(Serialize)]
pub struct InfluenceMap {
    pub nodes: Vec<NodeView>,
    pub edges: Vec<EdgeView>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Fits a model on a fresh synthetic graph and scores every edge.
pub fn influence_map(scene: &Scene) -> Result<InfluenceMap, String> {
    let synth = scene.build()?;
    let (graph, split) = (&synth.dataset.graph, &synth.dataset.split);
    let exp = Experiment::fit(graph, split, scene.k, TrainConfig::new(scene.lambda), split.val.clone())
        .map_err(|e| e.to_string())?;
    let probe = exp.probe().map_err(|e| e.to_string())?;
    let targets: Vec<Target> = graph.edges().map(Target::Edge).collect();
    let mut edges = Vec::with_capacity(targets.len());
    for (target, est) in targets.iter().zip(batch_influences(&exp.model, &exp.deltas(), &targets, Some(&probe))) {
        let Target::Edge(e) = *target else { unreachable!() };
        let (a, b) = e.endpoints();
        let est = est.map_err(|err| format!("{e}: {err}"))?;
        edges.push(EdgeView {
            a,
            b,
            planted: synth.is_planted(e),
            influence: est.eval_change.unwrap_or(0.0),
        });
    }
    let nodes = (0..graph.num_nodes())
        .map(|v| NodeView {
            label: split.labels()[v].unwrap_or(0),
            role: if split.is_train(v) {
                "train"
            } else if split.val.contains(&v) {
                "val"
            } else {
                "test"
            },
        })
        .collect();
    Ok(InfluenceMap {
        nodes,
        edges,
        val_accuracy: exp.model.accuracy(&exp.embedding, &split.val, split),
        test_accuracy: exp.model.accuracy(&exp.embedding, &split.test, split),
    })
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default)]
pub struct SweepRequest {
    #[serde(flatten)]
    pub scene: Scene,
    pub lambdas: Vec<f64>,
    pub edges: usize,
}

impl Default for SweepRequest {
    fn default() -> Self {
        Self {
            scene: Scene::default(),
            lambdas: vec![1e-1, 1e-2, 1e-3],
            edges: 30,
        }
    }
}

#[derive(Serialize)]
pub struct SweepPoint {
    pub a: usize,
    pub b: usize,
    pub estimated: f64,
    pub actual: f64,
}

#[derive(Serialize)]
pub struct SweepSeries {
    pub lambda: f64,
    pub rho: Option<f64>,
    pub points: Vec<SweepPoint>,
    pub error: Option<String>,
}

/// Estimated against retrained loss change for sampled edges, per λ.
pub fn lambda_scatter(req: &SweepRequest) -> Result<Vec<SweepSeries>, String> {
    if let Some(l) = req.lambdas.iter().find(|l| !(**l > 0.0)) {
        return Err(format!("lambda must be positive, got {l}"));
    }
    let synth = req.scene.build()?;
    let (graph, split) = (&synth.dataset.graph, &synth.dataset.split);
    let pool: Vec<Target> = graph.edges().map(Target::Edge).collect();
    let edges = sample_targets(&pool, req.edges, req.scene.seed)
        .into_iter()
        .filter_map(|t| match t {
            Target::Edge(e) => Some(e),
            _ => None,
        })
        .collect();
    let plan = SweepPlan {
        graph,
        split,
        k: req.scene.k,
        base: TrainConfig::default(),
        lambdas: req.lambdas.clone(),
        edges,
        eval_set: split.val.clone(),
        // the scatter ignores the bound, so any C will do
        lipschitz: LipschitzSource::Supplied(0.0),
    };
    Ok(lambda_sweep(&plan)
        .into_iter()
        .map(|r| SweepSeries {
            lambda: r.lambda,
            rho: r.rho,
            points: r
                .rows
                .iter()
                .map(|row| {
                    let (a, b) = row.edge.endpoints();
                    SweepPoint {
                        a,
                        b,
                        estimated: row.estimated,
                        actual: row.actual,
                    }
                })
                .collect(),
            error: r.error.map(|e| e.to_string()),
        })
        .collect())
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default)]
pub struct AttackRequest {
    #[serde(flatten)]
    pub scene: Scene,
    /// "edges" or "nodes".
    pub kind: String,
    pub count: usize,
}

impl Default for AttackRequest {
    fn default() -> Self {
        Self {
            scene: Scene::default(),
            kind: "edges".into(),
            count: 10,
        }
    }
}

#[derive(Serialize)]
pub struct AttackCurve {
    pub baseline: &'static str,
    /// Test accuracy after 0, 1, 2, ... removals.
    pub test_accuracy: Vec<f64>,
}

/// Test accuracy as removals accumulate, for influence-ranked and baseline choices.
pub fn attack_curves(req: &AttackRequest) -> Result<Vec<AttackCurve>, String> {
    let kind = match req.kind.as_str() {
        "edges" => TargetKind::Edges,
        "nodes" => TargetKind::Nodes,
        other => return Err(format!("unknown kind {other:?}")),
    };
    let synth = req.scene.build()?;
    let (graph, split) = (&synth.dataset.graph, &synth.dataset.split);
    let config = TrainConfig::new(req.scene.lambda);
    let exp = Experiment::fit(graph, split, req.scene.k, config, split.val.clone()).map_err(|e| e.to_string())?;
    let mut curves = Vec::new();
    for (name, baseline) in [
        ("influence", Baseline::None),
        ("random", Baseline::Random),
        ("degree", Baseline::Degree),
    ] {
        let plan = plan_attack(&exp, kind, Amount::Count(req.count), baseline, req.scene.seed)
            .map_err(|e| e.to_string())?;
        let report = run_trajectory(graph, split, req.scene.k, &config, &plan).map_err(|e| e.to_string())?;
        curves.push(AttackCurve {
            baseline: name,
            test_accuracy: report.steps.iter().map(|s| s.test_accuracy).collect(),
        });
    }
    Ok(curves)
}

fn json_call<Req, Resp>(input: &str, f: impl FnOnce(&Req) -> Result<Resp, String>) -> Result<String, String>
where
    Req: for<'de> Deserialize<'de>,
    Resp: Serialize,
{
    let req: Req = if input.trim().is_empty() {
        serde_json::from_str("{}")
    } else {
        serde_json::from_str(input)
    }
    .map_err(|e| format!("bad request: {e}"))?;
    serde_json::to_string(&f(&req)?).map_err(|e| e.to_string())
}

pub fn influence_map_json(input: &str) -> Result<String, String> {
    json_call(input, influence_map)
}

pub fn lambda_scatter_json(input: &str) -> Result<String, String> {
    json_call(input, lambda_scatter)
}

pub fn attack_curves_json(input: &str) -> Result<String, String> {
    json_call(input, attack_curves)
}

#[wasm_bindgen(js_name = influenceMap)]
pub fn influence_map_js(input: &str) -> Result<String, JsValue> {
    influence_map_json(input).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = lambdaScatter)]
pub fn lambda_scatter_js(input: &str) -> Result<String, JsValue> {
    lambda_scatter_json(input).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = attackCurves)]
pub fn attack_curves_js(input: &str) -> Result<String, JsValue> {
    attack_curves_json(input).map_err(|e| JsValue::from_str(&e))
}
