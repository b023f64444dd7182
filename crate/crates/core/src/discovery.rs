//! Circuit extraction: sequential activation-patching pruning plus
//! gradient-attribution and random baselines.
//!
//! The sequential pruner starts from the full mask and visits receivers
//! in reverse topological order. Each incoming edge is tentatively
//! corrupted; if the batch-mean pruning metric moves by less than the
//! threshold (in absolute value) relative to the *current* candidate, the
//! removal sticks and the candidate is updated, otherwise the edge is
//! restored. Within one receiver, edges are visited in descending
//! absolute attribution score so high-impact edges settle first and
//! compounding error stays small.

use rayon::prelude::*;

use crate::backward::receiver_input_gradients;
use crate::error::{Error, Result};
use crate::graph::{CircuitMask, Graph};
use crate::linalg::Mat;
use crate::model::Model;
use crate::patching::{
    evaluate_metric, patched_logits_batch, MetricKind, MetricSpec, PatchMode, RunCache, RunRef,
};

/// Default cap on visited receivers per pruning run.
pub const DEFAULT_MAX_VISITED_NODES: usize = 900;

#[derive(Debug, Clone)]
pub struct DiscoveryConfig {
    /// Pruning threshold tau; an edge is removed when the absolute metric
    /// change of its tentative removal stays below it.
    pub threshold: f64,
    pub metric: MetricSpec,
    pub max_visited_nodes: usize,
    pub seed: u64,
    pub mode: PatchMode,
}

impl DiscoveryConfig {
    pub fn new(threshold: f64, metric: MetricSpec) -> Self {
        Self {
            threshold,
            metric,
            max_visited_nodes: DEFAULT_MAX_VISITED_NODES,
            seed: 0,
            mode: PatchMode::Live,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Argument("threshold must be positive".into()));
        }
        if self.max_visited_nodes < 1 {
            return Err(Error::Argument("max_visited_nodes must be >= 1".into()));
        }
        Ok(())
    }
}

/// One pruning decision, for the per-edge decision log.
#[derive(Debug, Clone)]
pub struct EdgeDecision {
    pub edge_index: usize,
    /// Metric change caused by the tentative removal.
    pub degradation: f64,
    pub removed: bool,
}

#[derive(Debug, Clone)]
pub struct DiscoveryOutcome {
    pub mask: CircuitMask,
    pub decisions: Vec<EdgeDecision>,
    /// Total patched forwards spent; at most (|E| + 1) * |batch|.
    pub patched_forwards: usize,
    pub receivers_visited: usize,
}

/// Sequential pruning over the full graph.
///
/// Callers are expected to have filtered the pairs so every clean input is
/// correctly classified by the full model.
pub fn vicd_discover(
    model: &Model,
    graph: &Graph,
    cache: &RunCache,
    config: &DiscoveryConfig,
) -> Result<DiscoveryOutcome> {
    config.validate()?;
    config.metric.validate(model.config.num_classes)?;
    if cache.pairs.is_empty() {
        return Err(Error::Argument("discovery needs a non-empty cache".into()));
    }

    // Attribution scores fix the within-receiver visitation order.
    let scores = eap_scores(model, graph, cache, &config.metric)?;

    let mut mask = CircuitMask::full(graph);
    let mut decisions = Vec::with_capacity(graph.edge_count());
    let mut patched_forwards = 0usize;

    let logits = patched_logits_batch(model, graph, cache, &mask, config.mode)?;
    patched_forwards += cache.pairs.len();
    let mut current_metric = evaluate_metric(&config.metric, &logits, cache)?;

    let n_receivers = graph.receivers().len();
    let mut receivers_visited = 0usize;
    for topo in (0..n_receivers).rev() {
        if receivers_visited >= config.max_visited_nodes {
            break;
        }
        receivers_visited += 1;

        let mut incoming: Vec<usize> = graph.incoming(topo).to_vec();
        incoming.sort_by(|&a, &b| {
            scores.scores[b]
                .abs()
                .partial_cmp(&scores.scores[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });

        for edge_idx in incoming {
            mask.set(edge_idx, false);
            let logits = patched_logits_batch(model, graph, cache, &mask, config.mode)?;
            patched_forwards += cache.pairs.len();
            let candidate_metric = evaluate_metric(&config.metric, &logits, cache)?;
            if !candidate_metric.is_finite() {
                let edge = &graph.edges()[edge_idx];
                return Err(Error::Numeric(format!(
                    "metric went non-finite while testing edge {} -> {}",
                    edge.sender.canonical_name(),
                    edge.receiver.canonical_name()
                )));
            }
            let degradation = candidate_metric - current_metric;
            let removed = degradation.abs() < config.threshold;
            if removed {
                current_metric = candidate_metric;
            } else {
                mask.set(edge_idx, true);
            }
            decisions.push(EdgeDecision {
                edge_index: edge_idx,
                degradation,
                removed,
            });
        }
    }

    Ok(DiscoveryOutcome {
        mask,
        decisions,
        patched_forwards,
        receivers_visited,
    })
}

// ---------------------------------------------------------------------------
// Attribution scores
// ---------------------------------------------------------------------------

/// Per-edge attribution scores over one graph. Positive score means
/// removing the edge degrades the metric (to first order).
#[derive(Debug, Clone)]
pub struct AttributionScores {
    pub scores: Vec<f64>,
    fingerprint: u64,
}

impl AttributionScores {
    pub fn from_raw(graph: &Graph, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != graph.edge_count() {
            return Err(Error::Argument(
                "one score per graph edge is required".into(),
            ));
        }
        Ok(Self {
            scores,
            fingerprint: graph.fingerprint(),
        })
    }

    pub fn check_graph(&self, graph: &Graph) -> Result<()> {
        if self.fingerprint != graph.fingerprint() || self.scores.len() != graph.edge_count() {
            return Err(Error::Fingerprint(
                "scores were computed for a different graph".into(),
            ));
        }
        Ok(())
    }
}

/// Anchor logits for gradient evaluation: the corrupted run for KL (the
/// gradient of KL against the clean run vanishes at the clean point),
/// irrelevant for the target-logit-difference whose gradient is constant.
fn gradient_anchor<'a>(metric: &MetricSpec, pair: &'a crate::patching::PairCache) -> &'a [f64] {
    match metric.kind {
        MetricKind::KlDivergence => &pair.corrupted_logits,
        MetricKind::TargetLogitDiff { .. } => match metric.reference {
            RunRef::Clean => &pair.clean_logits,
            RunRef::Corrupted => &pair.corrupted_logits,
        },
    }
}

/// First-order edge attribution: the batch mean of
/// `<r_u(corrupted) - r_u(clean), d metric / d in_v>` with the gradient
/// evaluated on the clean run.
pub fn eap_scores(
    model: &Model,
    graph: &Graph,
    cache: &RunCache,
    metric: &MetricSpec,
) -> Result<AttributionScores> {
    scores_with_interpolation(model, graph, cache, metric, 1)
}

/// Integrated-gradient variant: gradients are averaged at `steps`
/// interpolation points between the corrupted and clean inputs
/// (interpolation in raw input space, right endpoint at the clean input),
/// while the activation difference stays that of the actual runs.
pub fn eapig_scores(
    model: &Model,
    graph: &Graph,
    cache: &RunCache,
    metric: &MetricSpec,
    steps: usize,
) -> Result<AttributionScores> {
    if steps < 1 {
        return Err(Error::Argument("steps must be >= 1".into()));
    }
    scores_with_interpolation(model, graph, cache, metric, steps)
}

fn scores_with_interpolation(
    model: &Model,
    graph: &Graph,
    cache: &RunCache,
    metric: &MetricSpec,
    steps: usize,
) -> Result<AttributionScores> {
    metric.validate(model.config.num_classes)?;
    if cache.pairs.is_empty() {
        return Err(Error::Argument("scores need a non-empty cache".into()));
    }

    let per_pair: Result<Vec<Vec<f64>>> = cache
        .pairs
        .par_iter()
        .map(|pair| {
            let anchor = gradient_anchor(metric, pair);

            // Mean gradient over the interpolation points; k = steps lands
            // exactly on the clean input, so steps = 1 is plain first-order
            // attribution.
            let mut mean_grads: Option<Vec<Mat>> = None;
            for k in 1..=steps {
                let alpha = k as f64 / steps as f64;
                let tokens = pair
                    .corrupted_tokens
                    .scale(1.0 - alpha)
                    .add(&pair.clean_tokens.scale(alpha));
                let grads = receiver_input_gradients(model, graph, &tokens, metric, anchor)?;
                match &mut mean_grads {
                    None => mean_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            let mean_grads = mean_grads.expect("steps >= 1");
            let scale = 1.0 / steps as f64;

            let mut scores = vec![0.0; graph.edge_count()];
            for (i, edge) in graph.edges().iter().enumerate() {
                let slot = graph.sender_slot(edge.sender);
                let topo = graph
                    .receiver_topo_index(edge.receiver)
                    .expect("edge receivers are receivers");
                let delta = pair.corrupted_contrib[slot].sub(&pair.clean_contrib[slot]);
                scores[i] = delta.frob_dot(&mean_grads[topo]) * scale;
            }
            Ok(scores)
        })
        .collect();

    let per_pair = per_pair?;
    let n = per_pair.len() as f64;
    let mut scores = vec![0.0; graph.edge_count()];
    for pair_scores in &per_pair {
        for (s, p) in scores.iter_mut().zip(pair_scores) {
            *s += p;
        }
    }
    for s in &mut scores {
        *s /= n;
        if !s.is_finite() {
            return Err(Error::Numeric("non-finite attribution score".into()));
        }
    }
    Ok(AttributionScores {
        scores,
        fingerprint: graph.fingerprint(),
    })
}

/// Mask selection rule for score-based methods.
#[derive(Debug, Clone, Copy)]
pub enum SelectRule {
    /// Keep the top-k edges by score, descending; ties broken by canonical
    /// edge order.
    TopK(usize),
    /// Keep every edge with score >= threshold.
    Threshold(f64),
}

pub fn mask_from_scores(
    graph: &Graph,
    scores: &AttributionScores,
    rule: SelectRule,
) -> Result<CircuitMask> {
    scores.check_graph(graph)?;
    let mut mask = CircuitMask::empty(graph);
    match rule {
        SelectRule::TopK(k) => {
            if k > graph.edge_count() {
                return Err(Error::Argument(format!(
                    "k = {k} exceeds edge count {}",
                    graph.edge_count()
                )));
            }
            let mut order: Vec<usize> = (0..scores.scores.len()).collect();
            order.sort_by(|&a, &b| {
                scores.scores[b]
                    .partial_cmp(&scores.scores[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for &i in order.iter().take(k) {
                mask.set(i, true);
            }
        }
        SelectRule::Threshold(t) => {
            for (i, s) in scores.scores.iter().enumerate() {
                if *s >= t {
                    mask.set(i, true);
                }
            }
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Faithfulness sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Vicd,
    Eap,
    EapIg { steps: usize },
    Random,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Vicd => "vicd".into(),
            Method::Eap => "eap".into(),
            Method::EapIg { steps } => format!("eapig{steps}"),
            Method::Random => "random".into(),
        }
    }
}

/// One row of the sweep CSV: `method,fraction,edges,accuracy,seed`.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub method: String,
    pub fraction: f64,
    pub edges: usize,
    pub accuracy: f64,
    pub seed: u64,
}

pub const SWEEP_CSV_HEADER: &str = "method,fraction,edges,accuracy,seed";

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.method, p.fraction, p.edges, p.accuracy, p.seed
        ));
    }
    out
}

/// Max bisection iterations when matching a sparsity target with the
/// threshold-parameterized pruner.
const BISECTION_LIMIT: usize = 40;

/// Produce a mask of (as near as possible) the requested size for the
/// given method. The sequential pruner is threshold-parameterized, so
/// sizes are hit by bisecting the threshold in log space and keeping the
/// nearest achieved size; score methods take top-k directly.
pub fn mask_at_size(
    method: Method,
    model: &Model,
    graph: &Graph,
    train_cache: &RunCache,
    target_edges: usize,
    base: &DiscoveryConfig,
    seed: u64,
) -> Result<CircuitMask> {
    match method {
        Method::Random => CircuitMask::random(graph, target_edges, seed),
        Method::Eap => {
            let scores = eap_scores(model, graph, train_cache, &base.metric)?;
            mask_from_scores(graph, &scores, SelectRule::TopK(target_edges))
        }
        Method::EapIg { steps } => {
            let scores = eapig_scores(model, graph, train_cache, &base.metric, steps)?;
            mask_from_scores(graph, &scores, SelectRule::TopK(target_edges))
        }
        Method::Vicd => {
            let mut lo = 1e-9f64;
            let mut hi = 1e4f64;
            let mut best: Option<(usize, CircuitMask)> = None;
            for _ in 0..BISECTION_LIMIT {
                let tau = ((lo.ln() + hi.ln()) / 2.0).exp();
                let mut config = base.clone();
                config.threshold = tau;
                config.seed = seed;
                let outcome = vicd_discover(model, graph, train_cache, &config)?;
                let size = outcome.mask.popcount();
                let diff = size.abs_diff(target_edges);
                let better = match &best {
                    None => true,
                    Some((bd, bm)) => diff < *bd || (diff == *bd && size < bm.popcount()),
                };
                if better {
                    best = Some((diff, outcome.mask));
                }
                if size == target_edges {
                    break;
                }
                if size > target_edges {
                    lo = tau; // prune harder
                } else {
                    hi = tau;
                }
                if hi / lo < 1.0 + 1e-12 {
                    break;
                }
            }
            Ok(best.expect("bisection ran at least once").1)
        }
    }
}

/// Faithfulness/sparsity curve for one method over a sparsity grid.
///
/// Grid fractions are of the full edge count; accuracy is evaluated with
/// circuit-restricted forwards on the evaluation cache.
#[allow(clippy::too_many_arguments)]
pub fn sweep_faithfulness(
    method: Method,
    model: &Model,
    graph: &Graph,
    train_cache: &RunCache,
    eval_cache: &RunCache,
    eval_labels: &[usize],
    grid: &[f64],
    base: &DiscoveryConfig,
) -> Result<Vec<SweepPoint>> {
    if grid.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::Argument("grid fractions must lie in (0, 1]".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for (gi, &fraction) in grid.iter().enumerate() {
        let target =
            ((fraction * graph.edge_count() as f64).round() as usize).min(graph.edge_count());
        let point_seed = base.seed.wrapping_add(gi as u64);
        let mask = mask_at_size(method, model, graph, train_cache, target, base, point_seed)?;
        let accuracy = crate::patching::patched_accuracy(
            model,
            graph,
            eval_cache,
            eval_labels,
            &mask,
            base.mode,
        )?;
        points.push(SweepPoint {
            method: method.label(),
            fraction,
            edges: mask.popcount(),
            accuracy,
            seed: base.seed,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, build_graph_lh, NodeId};
    use crate::model::{random_linear_model, random_model, ModelConfig, RandomModelSpec};
    use crate::patching::{cache_runs, patched_forward};
    use crate::rng::SeededRng;

    fn random_tokens(p: usize, d: usize, seed: u64) -> Mat {
        let mut rng = SeededRng::new(seed);
        Mat::from_vec(p, d, (0..p * d).map(|_| rng.normal_f32(1.0)).collect()).unwrap()
    }

    fn tiny_cache(model: &Model, n: usize, seed: u64) -> RunCache {
        let p = model.config.patch_count;
        let d = model.config.input_dim;
        let pairs: Vec<(Mat, Mat)> = (0..n as u64)
            .map(|i| {
                (
                    random_tokens(p, d, seed * 1000 + i),
                    random_tokens(p, d, seed * 1000 + 500 + i),
                )
            })
            .collect();
        cache_runs(model, &pairs).unwrap()
    }

    #[test]
    fn huge_threshold_prunes_everything() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(2, 2, 8, 5, 4),
            weight_std: 0.4,
            seed: 1,
            constant_attention: false,
        })
        .unwrap();
        let graph = build_graph(&model.config);
        let cache = tiny_cache(&model, 3, 2);
        let config = DiscoveryConfig::new(1e12, MetricSpec::logit_diff(0));
        let outcome = vicd_discover(&model, &graph, &cache, &config).unwrap();
        assert_eq!(outcome.mask.popcount(), 0);
        assert_eq!(outcome.decisions.len(), graph.edge_count());
    }

    #[test]
    fn discovery_is_deterministic_and_instrumented() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(2, 2, 8, 5, 4),
            weight_std: 0.4,
            seed: 5,
            constant_attention: false,
        })
        .unwrap();
        let graph = build_graph(&model.config);
        let cache = tiny_cache(&model, 4, 9);
        let config = DiscoveryConfig::new(0.05, MetricSpec::logit_diff(1));
        let a = vicd_discover(&model, &graph, &cache, &config).unwrap();
        let b = vicd_discover(&model, &graph, &cache, &config).unwrap();
        assert_eq!(a.mask, b.mask);
        // One tentative removal per edge plus the initial baseline batch.
        assert!(a.patched_forwards <= (graph.edge_count() + 1) * cache.pairs.len());
        a.mask.check_graph(&graph).unwrap();
    }

    #[test]
    fn max_visited_nodes_limits_the_walk() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(2, 2, 8, 5, 4),
            weight_std: 0.4,
            seed: 6,
            constant_attention: false,
        })
        .unwrap();
        let graph = build_graph(&model.config);
        let cache = tiny_cache(&model, 2, 3);
        let mut config = DiscoveryConfig::new(1e12, MetricSpec::logit_diff(0));
        config.max_visited_nodes = 1;
        let outcome = vicd_discover(&model, &graph, &cache, &config).unwrap();
        assert_eq!(outcome.receivers_visited, 1);
        // Only the logits receiver's incoming edges were considered.
        let logits_in = graph.incoming(graph.receivers().len() - 1).len();
        assert_eq!(outcome.mask.popcount(), graph.edge_count() - logits_in);
    }

    #[test]
    fn paper_style_threshold_presets_are_accepted() {
        for tau in [1.00e-3, 5.11e-2, 4e-4] {
            DiscoveryConfig::new(tau, MetricSpec::logit_diff(0))
                .validate()
                .unwrap();
        }
        assert!(DiscoveryConfig::new(0.0, MetricSpec::logit_diff(0))
            .validate()
            .is_err());
    }

    #[test]
    fn eap_is_linear_exact_per_edge() {
        for seed in 0..5 {
            let model = random_linear_model(2, 2, 8, 5, 4, 60 + seed).unwrap();
            let graph = build_graph(&model.config);
            let cache = tiny_cache(&model, 2, 70 + seed);
            let spec = MetricSpec::logit_diff(1);
            let scores = eap_scores(&model, &graph, &cache, &spec).unwrap();

            for i in 0..graph.edge_count() {
                // Exact effect of corrupting exactly this edge.
                let mut mask = CircuitMask::full(&graph);
                mask.set(i, false);
                let logits =
                    patched_logits_batch(&model, &graph, &cache, &mask, PatchMode::Live).unwrap();
                let exact = evaluate_metric(&spec, &logits, &cache).unwrap();
                let denom = exact.abs().max(scores.scores[i].abs()).max(1e-9);
                assert!(
                    (scores.scores[i] - exact).abs() / denom <= 1e-6,
                    "seed {seed} edge {i}: score {} vs exact {exact}",
                    scores.scores[i]
                );
            }
        }
    }

    #[test]
    fn identical_pair_scores_are_zero() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(2, 2, 8, 5, 4),
            weight_std: 0.4,
            seed: 8,
            constant_attention: false,
        })
        .unwrap();
        let graph = build_graph(&model.config);
        let x = random_tokens(5, 8, 77);
        let cache = cache_runs(&model, &[(x.clone(), x)]).unwrap();
        let scores = eap_scores(&model, &graph, &cache, &MetricSpec::logit_diff(0)).unwrap();
        assert!(scores.scores.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn dead_downstream_gives_zero_scores() {
        let mut model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(1, 2, 6, 4, 3),
            weight_std: 0.4,
            seed: 9,
            constant_attention: false,
        })
        .unwrap();
        model.weights.head = crate::model::HeadParams::Classifier {
            weight: Mat::zeros(3, 6),
        };
        let graph = build_graph(&model.config);
        let cache = tiny_cache(&model, 2, 4);
        let scores = eap_scores(&model, &graph, &cache, &MetricSpec::logit_diff(0)).unwrap();
        assert!(scores.scores.iter().all(|s| s.abs() < 1e-14));
    }

    #[test]
    fn eapig_with_one_step_is_plain_attribution() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(2, 2, 8, 5, 4),
            weight_std: 0.4,
            seed: 10,
            constant_attention: false,
        })
        .unwrap();
        let graph = build_graph(&model.config);
        let cache = tiny_cache(&model, 3, 5);
        let spec = MetricSpec::logit_diff(2);
        let a = eap_scores(&model, &graph, &cache, &spec).unwrap();
        let b = eapig_scores(&model, &graph, &cache, &spec, 1).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn eapig_constant_across_steps_on_linear_models() {
        let model = random_linear_model(2, 2, 8, 5, 4, 11).unwrap();
        let graph = build_graph(&model.config);
        let cache = tiny_cache(&model, 2, 6);
        let spec = MetricSpec::logit_diff(0);
        let s3 = eapig_scores(&model, &graph, &cache, &spec, 3).unwrap();
        let s5 = eapig_scores(&model, &graph, &cache, &spec, 5).unwrap();
        let s10 = eapig_scores(&model, &graph, &cache, &spec, 10).unwrap();
        for i in 0..graph.edge_count() {
            assert!((s3.scores[i] - s5.scores[i]).abs() < 1e-9);
            assert!((s5.scores[i] - s10.scores[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn eapig_converges_with_steps_on_nonlinear_models() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(2, 2, 8, 5, 4),
            weight_std: 0.6,
            seed: 12,
            constant_attention: false,
        })
        .unwrap();
        let graph = build_graph(&model.config);
        let cache = tiny_cache(&model, 3, 7);
        let spec = MetricSpec::logit_diff(1);
        let reference = eapig_scores(&model, &graph, &cache, &spec, 20).unwrap();
        let s3 = eapig_scores(&model, &graph, &cache, &spec, 3).unwrap();
        let s10 = eapig_scores(&model, &graph, &cache, &spec, 10).unwrap();
        let dev = |s: &AttributionScores| {
            s.scores
                .iter()
                .zip(&reference.scores)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        assert!(dev(&s10) < dev(&s3), "{} !< {}", dev(&s10), dev(&s3));
    }

    #[test]
    fn score_antisymmetry_under_pair_swap_on_linear_models() {
        let model = random_linear_model(2, 2, 8, 5, 4, 13).unwrap();
        let graph = build_graph(&model.config);
        let clean = random_tokens(5, 8, 21);
        let corrupted = random_tokens(5, 8, 22);
        let spec = MetricSpec::logit_diff(0);
        let fwd = cache_runs(&model, &[(clean.clone(), corrupted.clone())]).unwrap();
        let rev = cache_runs(&model, &[(corrupted, clean)]).unwrap();
        let a = eap_scores(&model, &graph, &fwd, &spec).unwrap();
        let b = eap_scores(&model, &graph, &rev, &spec).unwrap();
        for i in 0..graph.edge_count() {
            assert!(
                (a.scores[i] + b.scores[i]).abs() < 1e-9,
                "edge {i}: {} vs {}",
                a.scores[i],
                b.scores[i]
            );
        }
    }

    #[test]
    fn top_k_matches_reference_sort() {
        let graph = build_graph_lh(2, 2);
        let mut rng = SeededRng::new(3);
        let scores = AttributionScores::from_raw(
            &graph,
            (0..graph.edge_count()).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        for k in [0, 1, 5, graph.edge_count()] {
            let mask = mask_from_scores(&graph, &scores, SelectRule::TopK(k)).unwrap();
            assert_eq!(mask.popcount(), k);
            // Independent oracle: full sort, take k.
            let mut order: Vec<usize> = (0..scores.scores.len()).collect();
            order.sort_by(|&a, &b| scores.scores[b].partial_cmp(&scores.scores[a]).unwrap());
            let expect: std::collections::BTreeSet<usize> = order.into_iter().take(k).collect();
            let got: std::collections::BTreeSet<usize> = mask.edge_indices().into_iter().collect();
            assert_eq!(expect, got);
        }
    }

    #[test]
    fn full_fraction_recovers_full_model_accuracy() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(1, 2, 8, 5, 4),
            weight_std: 0.4,
            seed: 30,
            constant_attention: false,
        })
        .unwrap();
        let graph = build_graph(&model.config);
        let cache = tiny_cache(&model, 4, 8);
        let labels: Vec<usize> = cache
            .pairs
            .iter()
            .map(|p| crate::linalg::argmax(&p.clean_logits))
            .collect();
        let base = DiscoveryConfig::new(1e-4, MetricSpec::logit_diff(0));
        for method in [Method::Eap, Method::Random, Method::Vicd] {
            let points =
                sweep_faithfulness(method, &model, &graph, &cache, &cache, &labels, &[1.0], &base)
                    .unwrap();
            assert_eq!(points.len(), 1);
            assert_eq!(points[0].accuracy, 1.0, "{}", method.label());
        }
    }

    #[test]
    fn sweep_csv_schema() {
        let points = vec![SweepPoint {
            method: "vicd".into(),
            fraction: 0.25,
            edges: 5,
            accuracy: 0.875,
            seed: 7,
        }];
        let csv = sweep_csv(&points);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "method,fraction,edges,accuracy,seed");
        assert_eq!(lines.next().unwrap(), "vicd,0.25,5,0.875,7");
    }

    #[test]
    fn discovery_runs_under_a_contrastive_head() {
        // The contrastive head (image projection dotted with fixed class
        // embeddings) goes through the same pruning path; per-class
        // thresholds like 1.00e-3 are plain config values.
        let mut config = ModelConfig::tiny(1, 2, 8, 5, 4);
        config.head_mode = crate::model::HeadMode::Contrastive;
        config.embed_dim = 6;
        let model = random_model(&RandomModelSpec {
            config,
            weight_std: 0.4,
            seed: 40,
            constant_attention: false,
        })
        .unwrap();
        let graph = build_graph(&model.config);
        let cache = tiny_cache(&model, 3, 11);
        let config = DiscoveryConfig::new(1.00e-3, MetricSpec::logit_diff(2));
        let outcome = vicd_discover(&model, &graph, &cache, &config).unwrap();
        outcome.mask.check_graph(&graph).unwrap();
        assert_eq!(outcome.decisions.len(), graph.edge_count());
    }

    #[test]
    fn vicd_prunes_exact_zero_effect_edges() {
        // A model whose MLP is dead: every edge out of it has exactly zero
        // effect and must be pruned at any positive threshold.
        let mut model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(1, 1, 6, 4, 3),
            weight_std: 0.4,
            seed: 31,
            constant_attention: false,
        })
        .unwrap();
        model.weights.layers[0].mlp.w2 = Mat::zeros(6, 6);
        model.weights.layers[0].mlp.b2 = vec![0.0; 6];
        let graph = build_graph(&model.config);
        let cache = tiny_cache(&model, 3, 9);
        let config = DiscoveryConfig::new(1e-9, MetricSpec::logit_diff(0));
        let outcome = vicd_discover(&model, &graph, &cache, &config).unwrap();
        let mlp_logits = graph
            .find_edge(NodeId::Mlp { layer: 0 }, NodeId::Logits)
            .unwrap();
        assert!(!outcome.mask.contains(mlp_logits));
        let dead = outcome
            .decisions
            .iter()
            .find(|d| d.edge_index == mlp_logits)
            .unwrap();
        assert_eq!(dead.degradation, 0.0);
        // Surviving mask still reproduces clean behavior.
        let pair = &cache.pairs[0];
        let logits = patched_forward(&model, &graph, pair, &outcome.mask, PatchMode::Live).unwrap();
        for (a, b) in logits.iter().zip(&pair.clean_logits) {
            assert!(crate::linalg::rel_err(*a, *b) <= 1e-5);
        }
    }
}
