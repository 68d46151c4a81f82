//! Retraining-free estimates of how removals move the fitted parameters.
//!
//! Every estimator reduces to one vector `g`: the change in the gradient of
//! the summed training loss caused by the removal, evaluated at `θ̂`. For an
//! edge it is `Σ_v [∇ℓ(z_v + δ_v) − ∇ℓ(z_v)]` over affected training nodes;
//! a removed training node additionally contributes `−∇ℓ(z_i)` and drops out
//! of the sum. The parameter estimate is then `−(1/N) H⁻¹ g`.

use std::io::Write;

use ndarray::Array1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{EmbeddingMatrix, LabeledSplit};
use crate::linalg::norm;
use crate::model::{sample_gradient, SgcModel};
use crate::perturbation::{DeltaContext, PerturbationDelta, Target};

#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceEstimate {
    pub target: Target,
    pub param_change: Array1<f64>,
    /// Estimated change of the probe's evaluation loss; positive means the
    /// removal is expected to increase it.
    pub eval_change: Option<f64>,
    /// `‖g‖`, the quantity the error bounds are stated in.
    pub gradient_change_norm: f64,
}

impl InfluenceEstimate {
    pub fn param_change_norm(&self) -> f64 {
        norm(&self.param_change)
    }
}

/// Total cross-entropy over an evaluation set, pre-solved against `H`.
#[derive(Clone, Debug)]
pub struct EvalProbe {
    pub nodes: Vec<usize>,
    /// `∇f(θ̂)`.
    pub gradient: Array1<f64>,
    /// `H⁻¹ ∇f(θ̂)`.
    pub s: Array1<f64>,
    num_train: usize,
}

/// Builds the probe for `f = Σ_{v ∈ eval} ℓ(z_v, y_v)` on the given embedding.
pub fn make_eval_probe(
    model: &SgcModel,
    embedding: &EmbeddingMatrix,
    split: &LabeledSplit,
    eval_set: &[usize],
) -> Result<EvalProbe> {
    if eval_set.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let mut gradient = Array1::zeros(model.params.len());
    for &v in eval_set {
        if v >= split.num_nodes() || split.labels()[v].is_none() {
            return Err(Error::Validation(format!("evaluation node {v} has no label")));
        }
        gradient += &sample_gradient(&model.params, embedding.row(v), split.label(v));
    }
    let s = model.solve_hessian_system(&gradient)?;
    Ok(EvalProbe {
        nodes: eval_set.to_vec(),
        gradient,
        s,
        num_train: model.num_train(),
    })
}

/// `⟨∇f, −(1/N) H⁻¹ g⟩`, computed as `−(1/N) ⟨s, g⟩`.
pub fn eval_influence(probe: &EvalProbe, gradient_change: &Array1<f64>) -> f64 {
    -probe.s.dot(gradient_change) / probe.num_train as f64
}

/// The objective-gradient change `g` for a removal with representation change `delta`.
pub fn gradient_change(model: &SgcModel, delta: &PerturbationDelta) -> Result<Array1<f64>> {
    if delta.k != model.k && !delta.is_zero() {
        return Err(Error::Validation(format!(
            "delta computed at k={} but the model uses k={}",
            delta.k, model.k
        )));
    }
    let mut g = Array1::zeros(model.params.len());
    let removed = match delta.target {
        Target::Edge(_) => None,
        Target::Node(v) => Some(v),
        Target::Sample(v) => {
            if model.train_row(v).is_none() {
                return Err(Error::Validation(format!("node {v} is not a training node")));
            }
            Some(v)
        }
    };
    if let Some(r) = removed.and_then(|v| model.train_row(v)) {
        g -= &sample_gradient(&model.params, model.data.z.row(r), model.data.labels[r]);
    }
    for (&v, d) in &delta.rows {
        if Some(v) == removed {
            continue;
        }
        let Some(r) = model.train_row(v) else { continue };
        let z = model.data.z.row(r);
        let y = model.data.labels[r];
        let shifted = &z + d;
        g += &sample_gradient(&model.params, shifted.view(), y);
        g -= &sample_gradient(&model.params, z, y);
    }
    Ok(g)
}

/// Estimate for one removal; `probe` fills in `eval_change`.
pub fn estimate(model: &SgcModel, delta: &PerturbationDelta, probe: Option<&EvalProbe>) -> Result<InfluenceEstimate> {
    let g = gradient_change(model, delta)?;
    let n = model.num_train() as f64;
    let param_change = model.solve_hessian_system(&g)? / -n;
    Ok(InfluenceEstimate {
        target: delta.target,
        param_change,
        eval_change: probe.map(|p| eval_influence(p, &g)),
        gradient_change_norm: norm(&g),
    })
}

/// Removing training node `v`'s loss term with the graph untouched.
pub fn influence_remove_sample(model: &SgcModel, v: usize) -> Result<InfluenceEstimate> {
    let delta = PerturbationDelta {
        target: Target::Sample(v),
        k: model.k,
        rows: Default::default(),
    };
    estimate(model, &delta, None)
}

pub fn influence_edge_removal(model: &SgcModel, delta: &PerturbationDelta) -> Result<InfluenceEstimate> {
    if !matches!(delta.target, Target::Edge(_)) {
        return Err(Error::Validation(format!("expected an edge removal, got {}", delta.target)));
    }
    estimate(model, delta, None)
}

pub fn influence_node_removal(model: &SgcModel, delta: &PerturbationDelta) -> Result<InfluenceEstimate> {
    if !matches!(delta.target, Target::Node(_)) {
        return Err(Error::Validation(format!("expected a node removal, got {}", delta.target)));
    }
    estimate(model, delta, None)
}

/// Influence of adding the sample `(z, y)` to the training objective.
pub fn influence_add_point(model: &SgcModel, z: &Array1<f64>, y: usize) -> Result<Array1<f64>> {
    let g = sample_gradient(&model.params, z.view(), y);
    Ok(model.solve_hessian_system(&g)? / -(model.num_train() as f64))
}

/// Influence of removing the sample `(z, y)`; the exact negation of adding it.
pub fn influence_remove_point(model: &SgcModel, z: &Array1<f64>, y: usize) -> Result<Array1<f64>> {
    Ok(-influence_add_point(model, z, y)?)
}

/// Edge influence as a sum over affected training nodes of "add the shifted
/// sample, remove the original one", one solve per term.
pub fn decomposed_edge_influence(model: &SgcModel, delta: &PerturbationDelta) -> Result<Array1<f64>> {
    let mut total = Array1::zeros(model.params.len());
    for (&v, d) in &delta.rows {
        let Some(r) = model.train_row(v) else { continue };
        let z = model.data.z.row(r).to_owned();
        let y = model.data.labels[r];
        total += &influence_add_point(model, &(&z + d), y)?;
        total += &influence_remove_point(model, &z, y)?;
    }
    Ok(total)
}

/// One estimate per target in input order; failures stay in their slot.
pub fn batch_influences(
    model: &SgcModel,
    deltas: &DeltaContext<'_>,
    targets: &[Target],
    probe: Option<&EvalProbe>,
) -> Vec<Result<InfluenceEstimate>> {
    targets
        .iter()
        .map(|&t| deltas.for_target(t).and_then(|d| estimate(model, &d, probe)))
        .collect()
}

#[derive(Serialize)]
struct InfluenceRow {
    target_type: &'static str,
    target_a: usize,
    target_b: Option<usize>,
    eval_influence: Option<f64>,
    param_change_norm: f64,
}

/// Writes `target_type,target_a,target_b,eval_influence,param_change_norm`.
pub fn write_influence_csv<W: Write>(out: W, estimates: &[InfluenceEstimate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in estimates {
        let (a, b) = e.target.columns();
        w.serialize(InfluenceRow {
            target_type: e.target.kind(),
            target_a: a,
            target_b: b,
            eval_influence: e.eval_change,
            param_change_norm: e.param_change_norm(),
        })?;
    }
    w.flush()?;
    Ok(())
}
