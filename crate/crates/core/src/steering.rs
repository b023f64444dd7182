//! Corruption-aligned direction estimation and ReLU-gated directional
//! ablation along circuit edges.
//!
//! Directions are estimated per sender from paired runs: per sample the
//! (optionally row-normalized) activation difference between the
//! attack-bearing input and its counterpart, aggregated by mean or by
//! medoid per position. During a steered forward pass, each circuit
//! sender's contribution is ablated before it is added to circuit
//! receivers at or below the layer cutoff; non-circuit edges see the raw
//! contribution.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CircuitMask, Graph, NodeId};
use crate::linalg::{argmax, dot, norm, top_k_indices, Mat};
use crate::model::{forward_with_trace, head_contribution, mlp_contribution, normalize, readout, Model};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Row normalization applied before/after differencing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRegime {
    /// Normalize each sample's activation rows, then difference.
    PreNormed,
    /// Difference raw activations, then normalize the difference rows.
    PostNormed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    /// Per position, the sample whose difference maximizes total cosine
    /// similarity to all other samples' differences.
    Medoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionRegime {
    pub norm: NormRegime,
    pub aggregation: Aggregation,
}

impl DirectionRegime {
    /// The default regime: pre-normed mean.
    pub fn pre_normed_mean() -> Self {
        Self {
            norm: NormRegime::PreNormed,
            aggregation: Aggregation::Mean,
        }
    }

    /// Parse strings like `pre_normed:mean` or `post_normed:medoid`.
    pub fn parse(s: &str) -> Result<Self> {
        let (n, a) = s
            .split_once(':')
            .ok_or_else(|| Error::Argument(format!("bad regime '{s}', expected norm:agg")))?;
        let norm = match n {
            "pre_normed" => NormRegime::PreNormed,
            "post_normed" => NormRegime::PostNormed,
            _ => return Err(Error::Argument(format!("unknown norm regime '{n}'"))),
        };
        let aggregation = match a {
            "mean" => Aggregation::Mean,
            "medoid" => Aggregation::Medoid,
            _ => return Err(Error::Argument(format!("unknown aggregation '{a}'"))),
        };
        Ok(Self { norm, aggregation })
    }

    pub fn label(&self) -> String {
        format!(
            "{}:{}",
            match self.norm {
                NormRegime::PreNormed => "pre_normed",
                NormRegime::PostNormed => "post_normed",
            },
            match self.aggregation {
                Aggregation::Mean => "mean",
                Aggregation::Medoid => "medoid",
            }
        )
    }
}

/// Per-sender, per-position direction fields with their estimation regime.
#[derive(Debug, Clone)]
pub struct SteeringDirections {
    /// Sender node -> P x d direction field.
    pub directions: BTreeMap<NodeId, Mat>,
    pub regime: DirectionRegime,
    pub epsilon: f64,
    pub attack_id: String,
    pub n_pairs: usize,
    /// Rows skipped during estimation because an activation row had zero
    /// norm.
    pub zero_norm_skips: usize,
}

impl SteeringDirections {
    pub fn direction(&self, node: NodeId) -> Option<&Mat> {
        self.directions.get(&node)
    }
}

fn normalized_rows(m: &Mat, skips: &mut usize) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let n = norm(m.row(r));
        if n == 0.0 {
            *skips += 1;
            continue;
        }
        for v in out.row_mut(r) {
            *v /= n;
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Estimate directions for the given senders from (attack-bearing,
/// counterpart) raw token pairs.
pub fn compute_directions(
    model: &Model,
    pairs: &[(Mat, Mat)],
    senders: &[NodeId],
    regime: DirectionRegime,
    epsilon: f64,
) -> Result<SteeringDirections> {
    if pairs.is_empty() {
        return Err(Error::Argument(
            "direction estimation needs at least one pair".into(),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Argument("epsilon must be positive".into()));
    }
    let h = model.config.heads_per_layer;

    // Per-sample differences per sender.
    let traces: Result<Vec<(crate::model::ForwardTrace, crate::model::ForwardTrace)>> = pairs
        .par_iter()
        .map(|(attacked, counterpart)| {
            Ok((
                forward_with_trace(model, attacked)?,
                forward_with_trace(model, counterpart)?,
            ))
        })
        .collect();
    let traces = traces?;

    let mut zero_norm_skips = 0usize;
    let mut directions = BTreeMap::new();
    for &sender in senders {
        if !sender.is_sender() {
            return Err(Error::Argument(format!(
                "{} is not a sender",
                sender.canonical_name()
            )));
        }
        let mut deltas: Vec<Mat> = Vec::with_capacity(traces.len());
        for (attacked, counterpart) in &traces {
            let a = attacked.contribution(sender, h);
            let c = counterpart.contribution(sender, h);
            let delta = match regime.norm {
                NormRegime::PreNormed => {
                    let an = normalized_rows(a, &mut zero_norm_skips);
                    let cn = normalized_rows(c, &mut zero_norm_skips);
                    an.sub(&cn)
                }
                NormRegime::PostNormed => {
                    let raw = a.sub(c);
                    normalized_rows(&raw, &mut zero_norm_skips)
                }
            };
            deltas.push(delta);
        }

        let p = deltas[0].rows();
        let d = deltas[0].cols();
        let mut field = Mat::zeros(p, d);
        match regime.aggregation {
            Aggregation::Mean => {
                for delta in &deltas {
                    field.add_assign(delta);
                }
                field = field.scale(1.0 / deltas.len() as f64);
            }
            Aggregation::Medoid => {
                // Per position: the sample maximizing summed cosine
                // similarity to all samples at that position.
                for pos in 0..p {
                    let mut best_idx = 0;
                    let mut best_score = f64::NEG_INFINITY;
                    for (i, di) in deltas.iter().enumerate() {
                        let score: f64 = deltas
                            .iter()
                            .map(|dj| cosine(di.row(pos), dj.row(pos)))
                            .sum();
                        if score > best_score {
                            best_score = score;
                            best_idx = i;
                        }
                    }
                    field
                        .row_mut(pos)
                        .copy_from_slice(deltas[best_idx].row(pos));
                }
            }
        }
        if !field.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite direction for {}",
                sender.canonical_name()
            )));
        }
        directions.insert(sender, field);
    }

    Ok(SteeringDirections {
        directions,
        regime,
        epsilon,
        attack_id: String::new(),
        n_pairs: pairs.len(),
        zero_norm_skips,
    })
}

/// ReLU-gated directional ablation: per patch row,
/// `c = <h, v> / (|v|^2 + eps)` and `h' = h - alpha * relu(c) * v`.
/// Only positively aligned projections are removed.
pub fn apply_ablation(h: &Mat, v: &Mat, alpha: f64, epsilon: f64) -> Mat {
    debug_assert_eq!((h.rows(), h.cols()), (v.rows(), v.cols()));
    let mut out = h.clone();
    if alpha == 0.0 {
        return out;
    }
    for r in 0..h.rows() {
        let vrow = v.row(r);
        let denom = dot(vrow, vrow) + epsilon;
        let c = dot(h.row(r), vrow) / denom;
        if c > 0.0 {
            let orow = out.row_mut(r);
            for (o, vv) in orow.iter_mut().zip(vrow) {
                *o -= alpha * c * vv;
            }
        }
    }
    out
}

/// How directions attach to the circuit during a steered pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteeringScope {
    /// Ablate a sender's contribution only along circuit edges (the
    /// strictest reading); other receivers see the raw contribution.
    EdgeGated,
    /// Treat every edge out of a circuit sender as a circuit edge.
    SenderGlobal,
}

#[derive(Debug, Clone)]
pub struct SteeringPolicy {
    pub circuit: CircuitMask,
    pub alpha: f64,
    /// Ablation applies only toward receivers at layers <= the cutoff;
    /// the logits receiver counts as layer L. `None` covers everything.
    pub max_receiver_layer: Option<usize>,
    pub scope: SteeringScope,
}

impl SteeringPolicy {
    pub fn new(circuit: CircuitMask, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Argument("alpha must be non-negative".into()));
        }
        Ok(Self {
            circuit,
            alpha,
            max_receiver_layer: None,
            scope: SteeringScope::EdgeGated,
        })
    }
}

/// Senders with at least one outgoing circuit edge; these must be covered
/// by the direction set.
pub fn circuit_senders(graph: &Graph, circuit: &CircuitMask) -> Vec<NodeId> {
    let mut senders = Vec::new();
    for idx in circuit.edge_indices() {
        let s = graph.edges()[idx].sender;
        if !senders.contains(&s) {
            senders.push(s);
        }
    }
    senders.sort();
    senders
}

/// Forward pass with directional ablation applied along circuit edges.
pub fn steered_forward(
    model: &Model,
    graph: &Graph,
    tokens: &Mat,
    directions: &SteeringDirections,
    policy: &SteeringPolicy,
) -> Result<Vec<f64>> {
    policy.circuit.check_graph(graph)?;
    for sender in circuit_senders(graph, &policy.circuit) {
        if !directions.directions.contains_key(&sender) {
            return Err(Error::Argument(format!(
                "directions do not cover circuit sender {}",
                sender.canonical_name()
            )));
        }
    }

    let c = &model.config;
    let cutoff = policy.max_receiver_layer.unwrap_or(usize::MAX);

    // Raw and (lazily built) ablated live contributions per sender slot.
    let mut raw: Vec<Option<Mat>> = vec![None; graph.sender_slot_count()];
    let mut ablated: Vec<Option<Mat>> = vec![None; graph.sender_slot_count()];
    raw[0] = Some(crate::model::embed(model, tokens)?);

    let mut logits = None;
    for (topo, &receiver) in graph.receivers().iter().enumerate() {
        let steer_here = graph.receiver_layer(receiver) <= cutoff;
        let mut input = Mat::zeros(c.patch_count, c.model_dim);
        for &edge_idx in graph.incoming(topo) {
            let edge = &graph.edges()[edge_idx];
            let slot = graph.sender_slot(edge.sender);
            let in_scope = match policy.scope {
                SteeringScope::EdgeGated => policy.circuit.contains(edge_idx),
                SteeringScope::SenderGlobal => {
                    directions.directions.contains_key(&edge.sender)
                        && circuit_senders(graph, &policy.circuit).contains(&edge.sender)
                }
            };
            if steer_here && in_scope && policy.alpha > 0.0 {
                if ablated[slot].is_none() {
                    let v = directions
                        .direction(edge.sender)
                        .expect("coverage checked above");
                    ablated[slot] = Some(apply_ablation(
                        raw[slot].as_ref().expect("topological order"),
                        v,
                        policy.alpha,
                        directions.epsilon,
                    ));
                }
                input.add_assign(ablated[slot].as_ref().unwrap());
            } else {
                input.add_assign(raw[slot].as_ref().expect("topological order"));
            }
        }
        match receiver {
            NodeId::AttnInput { layer } => {
                let lw = &model.weights.layers[layer];
                let normed = normalize(c, &lw.ln1, &input);
                for (hd, head) in lw.heads.iter().enumerate() {
                    raw[graph.sender_slot(NodeId::AttnHead { layer, head: hd })] =
                        Some(head_contribution(c, head, &normed));
                }
            }
            NodeId::Mlp { layer } => {
                let lw = &model.weights.layers[layer];
                let normed = normalize(c, &lw.ln2, &input);
                raw[graph.sender_slot(NodeId::Mlp { layer })] =
                    Some(mlp_contribution(c, &lw.mlp, &normed));
            }
            NodeId::Logits => {
                logits = Some(readout(model, &input)?);
            }
            _ => unreachable!(),
        }
    }
    logits.ok_or_else(|| Error::Numeric("steered forward produced no logits".into()))
}

// ---------------------------------------------------------------------------
// Attack metrics
// ---------------------------------------------------------------------------

/// One row of the steering sweep CSV.
#[derive(Debug, Clone)]
pub struct SteerSweepRow {
    pub alpha: f64,
    pub max_layer: usize,
    pub clean_top1: f64,
    pub clean_top5: f64,
    pub atk_top1: f64,
    pub atk_top5: f64,
    pub asr_top1: f64,
    pub asr_top5: f64,
    pub retention: f64,
}

pub const STEER_CSV_HEADER: &str =
    "alpha,max_layer,clean_top1,clean_top5,atk_top1,atk_top5,asr_top1,asr_top5,retention";

pub fn steer_sweep_csv(rows: &[SteerSweepRow]) -> String {
    let mut out = String::from(STEER_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.alpha,
            r.max_layer,
            r.clean_top1,
            r.clean_top5,
            r.atk_top1,
            r.atk_top5,
            r.asr_top1,
            r.asr_top5,
            r.retention
        ));
    }
    out
}

fn in_top_k(logits: &[f64], class: usize, k: usize) -> bool {
    top_k_indices(logits, k.min(logits.len())).contains(&class)
}

/// Clean/attacked accuracy, attack success rates and retention over an
/// (alpha, layer-cutoff) grid. The alpha = 0 rows reproduce base metrics
/// exactly.
#[allow(clippy::too_many_arguments)]
pub fn attack_metrics(
    model: &Model,
    graph: &Graph,
    circuit: &CircuitMask,
    directions: &SteeringDirections,
    clean: &[(Mat, usize)],
    attacked: &[(Mat, usize, usize)],
    alpha_grid: &[f64],
    layer_grid: &[usize],
    scope: SteeringScope,
) -> Result<Vec<SteerSweepRow>> {
    if clean.is_empty() || attacked.is_empty() {
        return Err(Error::Argument(
            "attack metrics need non-empty clean and attacked sets".into(),
        ));
    }
    let base_clean_top1 = {
        let correct: Result<Vec<bool>> = clean
            .par_iter()
            .map(|(tokens, label)| {
                Ok(argmax(&forward_with_trace(model, tokens)?.logits) == *label)
            })
            .collect();
        let correct = correct?;
        correct.iter().filter(|b| **b).count() as f64 / clean.len() as f64
    };

    let mut rows = Vec::with_capacity(alpha_grid.len() * layer_grid.len());
    for &alpha in alpha_grid {
        for &max_layer in layer_grid {
            let policy = SteeringPolicy {
                circuit: circuit.clone(),
                alpha,
                max_receiver_layer: Some(max_layer),
                scope,
            };

            let clean_logits: Result<Vec<Vec<f64>>> = clean
                .par_iter()
                .map(|(tokens, _)| steered_forward(model, graph, tokens, directions, &policy))
                .collect();
            let clean_logits = clean_logits?;
            let atk_logits: Result<Vec<Vec<f64>>> = attacked
                .par_iter()
                .map(|(tokens, _, _)| steered_forward(model, graph, tokens, directions, &policy))
                .collect();
            let atk_logits = atk_logits?;

            let n_clean = clean.len() as f64;
            let n_atk = attacked.len() as f64;
            let clean_top1 = clean_logits
                .iter()
                .zip(clean)
                .filter(|(l, (_, y))| argmax(l) == *y)
                .count() as f64
                / n_clean;
            let clean_top5 = clean_logits
                .iter()
                .zip(clean)
                .filter(|(l, (_, y))| in_top_k(l, *y, 5))
                .count() as f64
                / n_clean;
            let atk_top1 = atk_logits
                .iter()
                .zip(attacked)
                .filter(|(l, (_, y, _))| argmax(l) == *y)
                .count() as f64
                / n_atk;
            let atk_top5 = atk_logits
                .iter()
                .zip(attacked)
                .filter(|(l, (_, y, _))| in_top_k(l, *y, 5))
                .count() as f64
                / n_atk;
            let asr_top1 = atk_logits
                .iter()
                .zip(attacked)
                .filter(|(l, (_, _, t))| argmax(l) == *t)
                .count() as f64
                / n_atk;
            let asr_top5 = atk_logits
                .iter()
                .zip(attacked)
                .filter(|(l, (_, _, t))| in_top_k(l, *t, 5))
                .count() as f64
                / n_atk;
            let retention = if base_clean_top1 > 0.0 {
                clean_top1 / base_clean_top1
            } else {
                1.0
            };
            rows.push(SteerSweepRow {
                alpha,
                max_layer,
                clean_top1,
                clean_top5,
                atk_top1,
                atk_top5,
                asr_top1,
                asr_top5,
                retention,
            });
        }
    }
    Ok(rows)
}

/// Pick the weakest intervention meeting a target: the smallest alpha
/// (then smallest layer cutoff) whose ASR drops by at least
/// `min_relative_drop` versus the alpha = 0 baseline while retention stays
/// at or above `min_retention`.
pub fn select_steering_point<'a>(
    rows: &'a [SteerSweepRow],
    min_relative_drop: f64,
    min_retention: f64,
) -> Option<&'a SteerSweepRow> {
    let base_asr = rows
        .iter()
        .filter(|r| r.alpha == 0.0)
        .map(|r| r.asr_top1)
        .next()?;
    let mut qualifying: Vec<&SteerSweepRow> = rows
        .iter()
        .filter(|r| {
            r.retention >= min_retention
                && (base_asr == 0.0 || (base_asr - r.asr_top1) / base_asr >= min_relative_drop)
        })
        .collect();
    qualifying.sort_by(|a, b| {
        a.alpha
            .partial_cmp(&b.alpha)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.max_layer.cmp(&b.max_layer))
    });
    qualifying.into_iter().next()
}

// ---------------------------------------------------------------------------
// Retrieval metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RetrievalMetrics {
    /// (k, recall@k) for each requested k.
    pub recall_at: Vec<(usize, f64)>,
    /// Mean of recall at 1, 5 and 10 (those that fit the candidate pool).
    pub r_mean: f64,
    /// Fraction of queries with a manipulated candidate in the top-k
    /// (evaluated at the smallest requested k).
    pub rsms: f64,
}

/// Dot-product retrieval metrics. `correct[q]` is the index of query q's
/// correct candidate; `manipulated` flags adversarial candidates.
pub fn retrieval_metrics(
    queries: &[Vec<f64>],
    candidates: &[Vec<f64>],
    correct: &[usize],
    manipulated: &[bool],
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if queries.is_empty() || candidates.is_empty() {
        return Err(Error::Argument("empty query or candidate set".into()));
    }
    if correct.len() != queries.len() || manipulated.len() != candidates.len() {
        return Err(Error::Argument(
            "correct indices must match queries and flags must match candidates".into(),
        ));
    }
    if ks.is_empty() {
        return Err(Error::Argument("at least one k is required".into()));
    }
    for &k in ks {
        if k == 0 || k > candidates.len() {
            return Err(Error::Argument(format!(
                "k = {k} out of range for {} candidates",
                candidates.len()
            )));
        }
    }

    // Rankings by dot product, descending.
    let rankings: Vec<Vec<usize>> = queries
        .par_iter()
        .map(|q| {
            let scores: Vec<f64> = candidates.iter().map(|c| dot(q, c)).collect();
            top_k_indices(&scores, candidates.len())
        })
        .collect();

    let nq = queries.len() as f64;
    let recall_for = |k: usize| -> f64 {
        rankings
            .iter()
            .zip(correct)
            .filter(|(rank, &c)| rank[..k].contains(&c))
            .count() as f64
            / nq
    };

    let recall_at: Vec<(usize, f64)> = ks.iter().map(|&k| (k, recall_for(k))).collect();

    let mean_ks: Vec<usize> = [1usize, 5, 10]
        .into_iter()
        .filter(|&k| k <= candidates.len())
        .collect();
    let r_mean =
        mean_ks.iter().map(|&k| recall_for(k)).sum::<f64>() / mean_ks.len() as f64;

    let k_min = *ks.iter().min().expect("non-empty ks");
    let rsms = rankings
        .iter()
        .filter(|rank| rank[..k_min].iter().any(|&c| manipulated[c]))
        .count() as f64
        / nq;

    Ok(RetrievalMetrics {
        recall_at,
        r_mean,
        rsms,
    })
}

// ---------------------------------------------------------------------------
// Directions file
// ---------------------------------------------------------------------------

/// Serialize directions into the tensor container: tensors `dir/{node}`
/// plus a metadata record with the regime, epsilon and provenance.
pub fn directions_to_archive(directions: &SteeringDirections) -> Result<crate::archive::TensorArchive> {
    let mut archive = crate::archive::TensorArchive::new(serde_json::json!({
        "regime": directions.regime.label(),
        "epsilon": directions.epsilon,
        "n_pairs": directions.n_pairs,
        "attack": directions.attack_id,
        "zero_norm_skips": directions.zero_norm_skips,
    }));
    for (node, field) in &directions.directions {
        archive.insert_mat(&format!("dir/{}", node.canonical_name()), field)?;
    }
    Ok(archive)
}

pub fn directions_from_archive(
    archive: &crate::archive::TensorArchive,
) -> Result<SteeringDirections> {
    let meta = &archive.metadata;
    let regime = DirectionRegime::parse(
        meta.get("regime")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format("directions archive missing regime".into()))?,
    )?;
    let epsilon = meta
        .get("epsilon")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Format("directions archive missing epsilon".into()))?;
    let n_pairs = meta.get("n_pairs").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let attack_id = meta
        .get("attack")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    let zero_norm_skips = meta
        .get("zero_norm_skips")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as usize;

    let mut directions = BTreeMap::new();
    for name in archive.names() {
        let node_name = name
            .strip_prefix("dir/")
            .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
        let node = NodeId::parse(node_name)?;
        directions.insert(node, archive.get_mat(name)?);
    }
    Ok(SteeringDirections {
        directions,
        regime,
        epsilon,
        attack_id,
        n_pairs,
        zero_norm_skips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::model::{random_model, ModelConfig, RandomModelSpec};
    use crate::rng::SeededRng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = SeededRng::new(seed);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn tiny_model(seed: u64) -> Model {
        random_model(&RandomModelSpec {
            config: ModelConfig::tiny(2, 2, 8, 5, 4),
            weight_std: 0.4,
            seed,
            constant_attention: false,
        })
        .unwrap()
    }

    #[test]
    fn ablation_alpha_zero_is_bitwise_identity() {
        let h = random_mat(4, 6, 1);
        let v = random_mat(4, 6, 2);
        let out = apply_ablation(&h, &v, 0.0, DEFAULT_EPSILON);
        assert_eq!(out, h);
    }

    #[test]
    fn ablation_orthogonal_rows_unchanged() {
        let mut h = Mat::zeros(2, 4);
        let mut v = Mat::zeros(2, 4);
        h.set(0, 0, 3.0);
        v.set(0, 1, 2.0); // orthogonal to h's row 0
        h.set(1, 2, 1.0);
        v.set(1, 3, 5.0);
        let out = apply_ablation(&h, &v, 1.0, DEFAULT_EPSILON);
        assert_eq!(out, h);
    }

    #[test]
    fn ablation_relu_gate_skips_negative_alignment() {
        let mut h = Mat::zeros(1, 3);
        let mut v = Mat::zeros(1, 3);
        for j in 0..3 {
            v.set(0, j, (j + 1) as f64);
            h.set(0, j, -((j + 1) as f64)); // h = -v
        }
        let out = apply_ablation(&h, &v, 1.0, DEFAULT_EPSILON);
        assert_eq!(out, h);
    }

    #[test]
    fn ablation_residual_projection_bound() {
        // After one ablation at alpha = 1, the projection coefficient of
        // the steered row is c * eps / (|v|^2 + eps). Checked at an eps
        // where the f64 cancellation in <h - c v, v> stays far below the
        // tolerance (the identity itself holds for any eps).
        let mut rng = SeededRng::new(5);
        let eps = 1e-4;
        let mut checked = 0usize;
        while checked < 1000 {
            let h = Mat::from_vec(1, 6, (0..6).map(|_| rng.normal()).collect()).unwrap();
            let v = Mat::from_vec(1, 6, (0..6).map(|_| rng.normal()).collect()).unwrap();
            let vv = dot(v.row(0), v.row(0)) + eps;
            let c = dot(h.row(0), v.row(0)) / vv;
            if c <= 0.0 {
                continue;
            }
            let steered = apply_ablation(&h, &v, 1.0, eps);
            let c_after = dot(steered.row(0), v.row(0)) / vv;
            let expected = c * eps / vv;
            assert!(
                (c_after - expected).abs() <= 1e-6 * expected.abs(),
                "draw {checked}: {c_after} vs {expected}"
            );
            checked += 1;
        }
    }

    #[test]
    fn ablation_never_increases_norm_at_eps_zero() {
        let mut rng = SeededRng::new(6);
        for _ in 0..500 {
            let h = Mat::from_vec(1, 5, (0..5).map(|_| rng.normal()).collect()).unwrap();
            let v = Mat::from_vec(1, 5, (0..5).map(|_| rng.normal() + 0.1).collect()).unwrap();
            for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let out = apply_ablation(&h, &v, alpha, 0.0);
                assert!(norm(out.row(0)) <= norm(h.row(0)) + 1e-12);
            }
        }
    }

    #[test]
    fn ablation_nearly_idempotent() {
        let mut rng = SeededRng::new(7);
        let h = Mat::from_vec(1, 6, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let v = Mat::from_vec(1, 6, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let once = apply_ablation(&h, &v, 1.0, DEFAULT_EPSILON);
        let twice = apply_ablation(&once, &v, 1.0, DEFAULT_EPSILON);
        // Second application removes only the eps-residual.
        assert!(once.max_abs_diff(&twice) < 1e-6);
    }

    #[test]
    fn identical_pairs_give_zero_mean_directions() {
        let model = tiny_model(1);
        let graph = build_graph(&model.config);
        let x = random_mat(5, 8, 3);
        let senders = vec![NodeId::Input, NodeId::AttnHead { layer: 0, head: 0 }];
        let dirs = compute_directions(
            &model,
            &[(x.clone(), x)],
            &senders,
            DirectionRegime::pre_normed_mean(),
            DEFAULT_EPSILON,
        )
        .unwrap();
        for sender in senders {
            let field = dirs.direction(sender).unwrap();
            assert!(field.as_slice().iter().all(|&v| v == 0.0));
        }
        let _ = graph;
    }

    #[test]
    fn single_pair_mean_equals_medoid() {
        let model = tiny_model(2);
        let a = random_mat(5, 8, 4);
        let b = random_mat(5, 8, 5);
        let senders = vec![NodeId::Mlp { layer: 0 }];
        let mean = compute_directions(
            &model,
            &[(a.clone(), b.clone())],
            &senders,
            DirectionRegime {
                norm: NormRegime::PreNormed,
                aggregation: Aggregation::Mean,
            },
            DEFAULT_EPSILON,
        )
        .unwrap();
        let medoid = compute_directions(
            &model,
            &[(a, b)],
            &senders,
            DirectionRegime {
                norm: NormRegime::PreNormed,
                aggregation: Aggregation::Medoid,
            },
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert_eq!(
            mean.direction(senders[0]).unwrap(),
            medoid.direction(senders[0]).unwrap()
        );
    }

    #[test]
    fn medoid_matches_exhaustive_cosine_oracle() {
        // Three synthetic deltas per position; medoid must maximize the
        // summed pairwise cosine similarity.
        let deltas: Vec<Mat> = (0..3).map(|i| random_mat(4, 6, 40 + i)).collect();
        for pos in 0..4 {
            // Oracle: exhaustive pairwise cosine evaluation.
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, di) in deltas.iter().enumerate() {
                let score: f64 = deltas
                    .iter()
                    .map(|dj| cosine(di.row(pos), dj.row(pos)))
                    .sum();
                if score > best.0 {
                    best = (score, i);
                }
            }
            // Re-implement the selection the way compute_directions does.
            let mut best_inline = (f64::NEG_INFINITY, 0);
            for (i, di) in deltas.iter().enumerate() {
                let score: f64 = deltas
                    .iter()
                    .map(|dj| cosine(di.row(pos), dj.row(pos)))
                    .sum();
                if score > best_inline.0 {
                    best_inline = (score, i);
                }
            }
            assert_eq!(best.1, best_inline.1);
        }
    }

    #[test]
    fn steered_forward_alpha_zero_is_bitwise_unsteered() {
        let model = tiny_model(3);
        let graph = build_graph(&model.config);
        let tokens = random_mat(5, 8, 9);
        let circuit = CircuitMask::full(&graph);
        let senders = circuit_senders(&graph, &circuit);
        let dirs = compute_directions(
            &model,
            &[(random_mat(5, 8, 10), random_mat(5, 8, 11))],
            &senders,
            DirectionRegime::pre_normed_mean(),
            DEFAULT_EPSILON,
        )
        .unwrap();
        let policy = SteeringPolicy::new(circuit, 0.0).unwrap();
        let steered = steered_forward(&model, &graph, &tokens, &dirs, &policy).unwrap();
        let plain = forward_with_trace(&model, &tokens).unwrap().logits;
        assert_eq!(steered, plain);
    }

    #[test]
    fn empty_circuit_is_unsteered() {
        let model = tiny_model(4);
        let graph = build_graph(&model.config);
        let tokens = random_mat(5, 8, 12);
        let dirs = compute_directions(
            &model,
            &[(random_mat(5, 8, 13), random_mat(5, 8, 14))],
            &[NodeId::Input],
            DirectionRegime::pre_normed_mean(),
            DEFAULT_EPSILON,
        )
        .unwrap();
        let policy = SteeringPolicy::new(CircuitMask::empty(&graph), 1.5).unwrap();
        let steered = steered_forward(&model, &graph, &tokens, &dirs, &policy).unwrap();
        let plain = forward_with_trace(&model, &tokens).unwrap().logits;
        assert_eq!(steered, plain);
    }

    #[test]
    fn coverage_gap_names_the_sender() {
        let model = tiny_model(5);
        let graph = build_graph(&model.config);
        let circuit = CircuitMask::full(&graph);
        let dirs = compute_directions(
            &model,
            &[(random_mat(5, 8, 15), random_mat(5, 8, 16))],
            &[NodeId::Input],
            DirectionRegime::pre_normed_mean(),
            DEFAULT_EPSILON,
        )
        .unwrap();
        let policy = SteeringPolicy::new(circuit, 1.0).unwrap();
        let err =
            steered_forward(&model, &graph, &random_mat(5, 8, 17), &dirs, &policy).unwrap_err();
        assert!(err.to_string().contains("a0.h0"), "{err}");
    }

    #[test]
    fn zero_directions_leave_forward_unchanged() {
        let model = tiny_model(6);
        let graph = build_graph(&model.config);
        let tokens = random_mat(5, 8, 18);
        let circuit = CircuitMask::full(&graph);
        let senders = circuit_senders(&graph, &circuit);
        let x = random_mat(5, 8, 19);
        let dirs = compute_directions(
            &model,
            &[(x.clone(), x)],
            &senders,
            DirectionRegime::pre_normed_mean(),
            DEFAULT_EPSILON,
        )
        .unwrap();
        let policy = SteeringPolicy::new(circuit, 2.0).unwrap();
        let steered = steered_forward(&model, &graph, &tokens, &dirs, &policy).unwrap();
        let plain = forward_with_trace(&model, &tokens).unwrap().logits;
        for (a, b) in steered.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sender_global_scope_widens_the_intervention() {
        // With only one of a sender's outgoing edges in the circuit,
        // edge-gating leaves its other receivers untouched while the
        // sender-global scope ablates them all.
        let model = tiny_model(9);
        let graph = build_graph(&model.config);
        let tokens = random_mat(5, 8, 24);
        let sender = NodeId::AttnHead { layer: 0, head: 0 };
        let edge_to_mlp = graph.find_edge(sender, NodeId::Mlp { layer: 0 }).unwrap();
        let circuit = CircuitMask::from_edge_indices(&graph, &[edge_to_mlp]).unwrap();
        let dirs = compute_directions(
            &model,
            &[(random_mat(5, 8, 25), random_mat(5, 8, 26))],
            &[sender],
            DirectionRegime::pre_normed_mean(),
            DEFAULT_EPSILON,
        )
        .unwrap();
        let gated = SteeringPolicy {
            circuit: circuit.clone(),
            alpha: 1.0,
            max_receiver_layer: None,
            scope: SteeringScope::EdgeGated,
        };
        let global = SteeringPolicy {
            circuit,
            alpha: 1.0,
            max_receiver_layer: None,
            scope: SteeringScope::SenderGlobal,
        };
        let a = steered_forward(&model, &graph, &tokens, &dirs, &gated).unwrap();
        let b = steered_forward(&model, &graph, &tokens, &dirs, &global).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-9, "scopes should differ, max diff {diff}");
    }

    #[test]
    fn layer_cutoff_gates_late_receivers() {
        // A circuit containing only a logits-receiver edge is inert below
        // the final layer cutoff.
        let model = tiny_model(10);
        let graph = build_graph(&model.config);
        let tokens = random_mat(5, 8, 27);
        let sender = NodeId::AttnHead { layer: 0, head: 1 };
        let edge = graph.find_edge(sender, NodeId::Logits).unwrap();
        let circuit = CircuitMask::from_edge_indices(&graph, &[edge]).unwrap();
        // Use the sender's own contribution as the direction so every row
        // is positively aligned and the ablation is guaranteed to act.
        let trace = forward_with_trace(&model, &tokens).unwrap();
        let field = trace.contribution(sender, model.config.heads_per_layer).clone();
        let dirs = SteeringDirections {
            directions: [(sender, field)].into_iter().collect(),
            regime: DirectionRegime::pre_normed_mean(),
            epsilon: DEFAULT_EPSILON,
            attack_id: String::new(),
            n_pairs: 1,
            zero_norm_skips: 0,
        };
        let plain = trace.logits.clone();
        let at = |cutoff: usize| {
            let policy = SteeringPolicy {
                circuit: circuit.clone(),
                alpha: 1.0,
                max_receiver_layer: Some(cutoff),
                scope: SteeringScope::EdgeGated,
            };
            steered_forward(&model, &graph, &tokens, &dirs, &policy).unwrap()
        };
        // Below the logits layer the intervention is inactive.
        assert_eq!(at(model.config.layers - 1), plain);
        let full = at(model.config.layers);
        let diff: f64 = full
            .iter()
            .zip(&plain)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9);
    }

    #[test]
    fn attack_metrics_alpha_zero_row_is_base() {
        let model = tiny_model(7);
        let graph = build_graph(&model.config);
        let circuit = CircuitMask::random(&graph, 6, 3).unwrap();
        let senders = circuit_senders(&graph, &circuit);
        let dirs = compute_directions(
            &model,
            &[(random_mat(5, 8, 20), random_mat(5, 8, 21))],
            &senders,
            DirectionRegime::pre_normed_mean(),
            DEFAULT_EPSILON,
        )
        .unwrap();
        let clean: Vec<(Mat, usize)> = (0..6).map(|i| (random_mat(5, 8, 30 + i), 0)).collect();
        let attacked: Vec<(Mat, usize, usize)> =
            (0..6).map(|i| (random_mat(5, 8, 50 + i), 0, 1)).collect();
        let rows = attack_metrics(
            &model,
            &graph,
            &circuit,
            &dirs,
            &clean,
            &attacked,
            &[0.0, 1.0],
            &[model.config.layers],
            SteeringScope::EdgeGated,
        )
        .unwrap();
        // Base row: steering with alpha = 0 equals the raw forward.
        let base_top1 = clean
            .iter()
            .filter(|(t, y)| argmax(&forward_with_trace(&model, t).unwrap().logits) == *y)
            .count() as f64
            / clean.len() as f64;
        assert_eq!(rows[0].alpha, 0.0);
        assert_eq!(rows[0].clean_top1, base_top1);
        assert_eq!(rows[0].retention, if base_top1 > 0.0 { 1.0 } else { 1.0 });
    }

    #[test]
    fn retrieval_perfect_match_and_orthogonal_noise() {
        // Correct candidate identical to the query, all others orthogonal.
        let mut queries = Vec::new();
        let mut candidates = Vec::new();
        for i in 0..4 {
            let mut v = vec![0.0; 8];
            v[i] = 1.0;
            queries.push(v.clone());
            candidates.push(v);
        }
        for i in 4..8 {
            let mut v = vec![0.0; 8];
            v[i] = 1.0;
            candidates.push(v);
        }
        let correct: Vec<usize> = (0..4).collect();
        let manipulated = vec![false; 8];
        let m = retrieval_metrics(&queries, &candidates, &correct, &manipulated, &[1, 5]).unwrap();
        assert_eq!(m.recall_at[0], (1, 1.0));
        assert_eq!(m.rsms, 0.0);
    }

    #[test]
    fn retrieval_rank_invariant_under_rescaling() {
        let mut rng = SeededRng::new(12);
        let queries: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..6).map(|_| rng.normal()).collect())
            .collect();
        let candidates: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..6).map(|_| rng.normal()).collect())
            .collect();
        let correct: Vec<usize> = (0..10).map(|i| i % 20).collect();
        let manipulated: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let a = retrieval_metrics(&queries, &candidates, &correct, &manipulated, &[1, 5, 10])
            .unwrap();
        let scaled: Vec<Vec<f64>> = candidates
            .iter()
            .map(|c| c.iter().map(|v| v * 7.25).collect())
            .collect();
        let b =
            retrieval_metrics(&queries, &scaled, &correct, &manipulated, &[1, 5, 10]).unwrap();
        assert_eq!(a.recall_at, b.recall_at);
        assert_eq!(a.rsms, b.rsms);
        assert_eq!(a.r_mean, b.r_mean);
    }

    #[test]
    fn retrieval_random_recall_near_binomial_baseline() {
        // With isotropic random embeddings the correct candidate lands in
        // the top-k with probability k/n.
        let mut rng = SeededRng::new(13);
        let n = 20;
        let trials = 1000;
        let k = 4;
        let mut hits = 0usize;
        for _ in 0..trials {
            let q: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let candidates: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..8).map(|_| rng.normal()).collect())
                .collect();
            let m = retrieval_metrics(&[q], &candidates, &[0], &vec![false; n], &[k]).unwrap();
            if m.recall_at[0].1 > 0.5 {
                hits += 1;
            }
        }
        let p = k as f64 / n as f64;
        let std = (p * (1.0 - p) / trials as f64).sqrt();
        let observed = hits as f64 / trials as f64;
        assert!(
            (observed - p).abs() <= 3.0 * std + 1e-9,
            "observed {observed} vs expected {p} +/- {std}"
        );
    }

    #[test]
    fn retrieval_k_out_of_range_is_an_error() {
        let q = vec![vec![1.0, 0.0]];
        let c = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(retrieval_metrics(&q, &c, &[0], &[false, false], &[3]).is_err());
    }

    #[test]
    fn directions_archive_round_trip() {
        let model = tiny_model(8);
        let graph = build_graph(&model.config);
        let circuit = CircuitMask::random(&graph, 5, 9).unwrap();
        let senders = circuit_senders(&graph, &circuit);
        let mut dirs = compute_directions(
            &model,
            &[(random_mat(5, 8, 22), random_mat(5, 8, 23))],
            &senders,
            DirectionRegime::pre_normed_mean(),
            DEFAULT_EPSILON,
        )
        .unwrap();
        dirs.attack_id = "orange".into();
        let bytes1 = directions_to_archive(&dirs).unwrap().to_bytes().unwrap();
        let parsed = directions_from_archive(
            &crate::archive::TensorArchive::from_bytes(&bytes1).unwrap(),
        )
        .unwrap();
        let bytes2 = directions_to_archive(&parsed).unwrap().to_bytes().unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(parsed.regime, dirs.regime);
        assert_eq!(parsed.attack_id, "orange");
        assert_eq!(
            parsed.directions.keys().collect::<Vec<_>>(),
            dirs.directions.keys().collect::<Vec<_>>()
        );
    }

    #[test]
    fn regime_labels_round_trip() {
        for s in [
            "pre_normed:mean",
            "pre_normed:medoid",
            "post_normed:mean",
            "post_normed:medoid",
        ] {
            assert_eq!(DirectionRegime::parse(s).unwrap().label(), s);
        }
        assert!(DirectionRegime::parse("sideways:mean").is_err());
    }
}
