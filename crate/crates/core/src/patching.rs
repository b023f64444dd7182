//! Clean/corrupted run caches and circuit-restricted forward passes.
//!
//! A patched forward feeds each receiver the per-edge interpolation
//!
//! ```text
//! in_v = sum_u  i_e * r_u(clean path) + (1 - i_e) * r_u(corrupted)
//! ```
//!
//! Substitution happens at the receiver's input-summation point, so one
//! sender can be clean toward one receiver and corrupted toward another.
//!
//! Two modes are provided. In `Live` mode (the default), circuit senders
//! recompute from their own patched inputs, so the patched state feeds
//! downstream computation. `Cached` mode interpolates recorded clean and
//! corrupted contributions with no recomputation; the two agree on purely
//! linear models and on the full/empty boundary cases.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{CircuitMask, Graph, NodeId};
use crate::linalg::{log_softmax, Mat};
use crate::model::{
    forward_with_trace, head_contribution, mlp_contribution, normalize, readout, Model,
};

/// Cached runs for one clean/corrupted pair: every sender's contribution
/// (indexed by sender slot) plus both logit vectors and the raw tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCache {
    pub clean_tokens: Mat,
    pub corrupted_tokens: Mat,
    pub clean_contrib: Vec<Mat>,
    pub corrupted_contrib: Vec<Mat>,
    pub clean_logits: Vec<f64>,
    pub corrupted_logits: Vec<f64>,
}

/// Batched run cache; each example carries its own paired corrupted
/// activations and is never mixed with another example's.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCache {
    pub pairs: Vec<PairCache>,
}

impl RunCache {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Record clean and corrupted runs for one pair of raw token matrices.
pub fn cache_pair(model: &Model, clean: &Mat, corrupted: &Mat) -> Result<PairCache> {
    let clean_trace = forward_with_trace(model, clean)?;
    let corrupted_trace = forward_with_trace(model, corrupted)?;
    Ok(PairCache {
        clean_tokens: clean.clone(),
        corrupted_tokens: corrupted.clone(),
        clean_contrib: clean_trace.sender_contribution,
        corrupted_contrib: corrupted_trace.sender_contribution,
        clean_logits: clean_trace.logits,
        corrupted_logits: corrupted_trace.logits,
    })
}

/// Record runs for a batch of pairs, in parallel.
pub fn cache_runs(model: &Model, pairs: &[(Mat, Mat)]) -> Result<RunCache> {
    let cached: Result<Vec<PairCache>> = pairs
        .par_iter()
        .map(|(clean, corrupted)| cache_pair(model, clean, corrupted))
        .collect();
    Ok(RunCache { pairs: cached? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMode {
    /// Circuit senders recompute from their patched inputs.
    Live,
    /// Pure cache interpolation, no recomputation.
    Cached,
}

/// Run one circuit-restricted forward pass for a single cached pair.
pub fn patched_forward(
    model: &Model,
    graph: &Graph,
    pair: &PairCache,
    mask: &CircuitMask,
    mode: PatchMode,
) -> Result<Vec<f64>> {
    mask.check_graph(graph)?;
    let c = &model.config;
    let p = c.patch_count;
    let d = c.model_dim;

    match mode {
        PatchMode::Cached => {
            // Only the logits receiver matters: interpolate its input sum
            // exactly as written and push it through the readout.
            let logits_topo = graph.receivers().len() - 1;
            let mut input = Mat::zeros(p, d);
            for &edge_idx in graph.incoming(logits_topo) {
                let edge = &graph.edges()[edge_idx];
                let slot = graph.sender_slot(edge.sender);
                if mask.contains(edge_idx) {
                    input.add_assign(&pair.clean_contrib[slot]);
                } else {
                    input.add_assign(&pair.corrupted_contrib[slot]);
                }
            }
            readout(model, &input)
        }
        PatchMode::Live => {
            // Live contributions, indexed by sender slot. The input
            // sender's live contribution is the clean embedded input.
            let mut live: Vec<Option<Mat>> = vec![None; graph.sender_slot_count()];
            live[0] = Some(pair.clean_contrib[0].clone());

            let mut logits = None;
            for (topo, &receiver) in graph.receivers().iter().enumerate() {
                let mut input = Mat::zeros(p, d);
                for &edge_idx in graph.incoming(topo) {
                    let edge = &graph.edges()[edge_idx];
                    let slot = graph.sender_slot(edge.sender);
                    if mask.contains(edge_idx) {
                        input.add_assign(
                            live[slot]
                                .as_ref()
                                .expect("topological order guarantees live senders"),
                        );
                    } else {
                        input.add_assign(&pair.corrupted_contrib[slot]);
                    }
                }
                match receiver {
                    NodeId::AttnInput { layer } => {
                        let lw = &model.weights.layers[layer];
                        let normed = normalize(c, &lw.ln1, &input);
                        for (h, head) in lw.heads.iter().enumerate() {
                            let contrib = head_contribution(c, head, &normed);
                            if !contrib.is_finite() {
                                return Err(Error::Numeric(format!(
                                    "non-finite activation in a{layer}.h{h} during patching"
                                )));
                            }
                            let slot =
                                graph.sender_slot(NodeId::AttnHead { layer, head: h });
                            live[slot] = Some(contrib);
                        }
                    }
                    NodeId::Mlp { layer } => {
                        let lw = &model.weights.layers[layer];
                        let normed = normalize(c, &lw.ln2, &input);
                        let contrib = mlp_contribution(c, &lw.mlp, &normed);
                        if !contrib.is_finite() {
                            return Err(Error::Numeric(format!(
                                "non-finite activation in mlp{layer} during patching"
                            )));
                        }
                        live[graph.sender_slot(NodeId::Mlp { layer })] = Some(contrib);
                    }
                    NodeId::Logits => {
                        logits = Some(readout(model, &input)?);
                    }
                    _ => unreachable!("only receivers appear in the topological order"),
                }
            }
            Ok(logits.expect("logits receiver is always last"))
        }
    }
}

/// Patched logits for every cached pair, in parallel.
pub fn patched_logits_batch(
    model: &Model,
    graph: &Graph,
    cache: &RunCache,
    mask: &CircuitMask,
    mode: PatchMode,
) -> Result<Vec<Vec<f64>>> {
    cache
        .pairs
        .par_iter()
        .map(|pair| patched_forward(model, graph, pair, mask, mode))
        .collect()
}

// ---------------------------------------------------------------------------
// Pruning metrics
// ---------------------------------------------------------------------------

/// Which run's logits anchor a metric comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunRef {
    Clean,
    Corrupted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricKind {
    /// Anchor target logit minus patched target logit.
    TargetLogitDiff { target: usize },
    /// KL(softmax(anchor) || softmax(patched)).
    KlDivergence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub reference: RunRef,
}

impl MetricSpec {
    pub fn logit_diff(target: usize) -> Self {
        Self {
            kind: MetricKind::TargetLogitDiff { target },
            reference: RunRef::Clean,
        }
    }

    pub fn kl() -> Self {
        Self {
            kind: MetricKind::KlDivergence,
            reference: RunRef::Clean,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let MetricKind::TargetLogitDiff { target } = self.kind {
            if target >= num_classes {
                return Err(Error::Argument(format!(
                    "target class {target} out of range (C = {num_classes})"
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            MetricKind::TargetLogitDiff { .. } => "logitdiff".into(),
            MetricKind::KlDivergence => "kl".into(),
        }
    }

    fn anchor<'a>(&self, pair: &'a PairCache) -> &'a [f64] {
        match self.reference {
            RunRef::Clean => &pair.clean_logits,
            RunRef::Corrupted => &pair.corrupted_logits,
        }
    }
}

/// KL(softmax(p_logits) || softmax(q_logits)), computed in log space.
pub fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum()
}

/// Per-example metric value.
pub fn evaluate_metric_single(spec: &MetricSpec, patched_logits: &[f64], pair: &PairCache) -> f64 {
    let anchor = spec.anchor(pair);
    match spec.kind {
        MetricKind::TargetLogitDiff { target } => anchor[target] - patched_logits[target],
        MetricKind::KlDivergence => kl_divergence(anchor, patched_logits),
    }
}

/// Batch metric: the exact mean of per-example metrics.
pub fn evaluate_metric(
    spec: &MetricSpec,
    patched_logits: &[Vec<f64>],
    cache: &RunCache,
) -> Result<f64> {
    if patched_logits.len() != cache.pairs.len() || cache.pairs.is_empty() {
        return Err(Error::Argument(
            "metric needs one patched logit vector per cached pair".into(),
        ));
    }
    let sum: f64 = patched_logits
        .iter()
        .zip(&cache.pairs)
        .map(|(logits, pair)| evaluate_metric_single(spec, logits, pair))
        .sum();
    Ok(sum / cache.pairs.len() as f64)
}

/// Top-1 accuracy of circuit-restricted computation against true labels.
pub fn patched_accuracy(
    model: &Model,
    graph: &Graph,
    cache: &RunCache,
    labels: &[usize],
    mask: &CircuitMask,
    mode: PatchMode,
) -> Result<f64> {
    if cache.pairs.is_empty() || labels.len() != cache.pairs.len() {
        return Err(Error::Argument(
            "accuracy needs a non-empty cache with one label per pair".into(),
        ));
    }
    let logits = patched_logits_batch(model, graph, cache, mask, mode)?;
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| crate::linalg::argmax(l) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Faithfulness gap: accuracy of the full graph minus accuracy of the
/// candidate circuit, both under patched evaluation. The task metric
/// (accuracy) deliberately differs from the pruning criterion.
///
/// Not claimed: monotonicity under supersets — a larger circuit can score
/// worse than a smaller one.
pub fn faithfulness_gap(
    model: &Model,
    graph: &Graph,
    cache: &RunCache,
    labels: &[usize],
    mask: &CircuitMask,
    mode: PatchMode,
) -> Result<f64> {
    let full = CircuitMask::full(graph);
    let acc_full = patched_accuracy(model, graph, cache, labels, &full, mode)?;
    let acc_mask = patched_accuracy(model, graph, cache, labels, mask, mode)?;
    Ok(acc_full - acc_mask)
}
