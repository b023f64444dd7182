//! Analytic gradients of a pruning metric with respect to every
//! receiver's input, for attribution-patching baselines.
//!
//! Hand-rolled reverse mode over the component structure. Layer-norm
//! statistics are treated as differentiable (full Jacobian), so the
//! results match central finite differences of the forward pass.
//!
//! The driver walks receivers backward keeping a running sum `S` of the
//! gradients of all receivers processed so far. Because every sender
//! feeds exactly the receivers that execute after it, `S` is the correct
//! downstream gradient for each sender encountered on the way down:
//!
//! ```text
//! grad(in_v) = sum over senders s at v of J_s(in_v)^T * S
//! ```

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::linalg::{dot, softmax, Mat};
use crate::model::{
    forward_with_trace, gelu_prime, normalize, Activation, HeadParams, HeadWeights, Model,
    Normalization,
};
use crate::patching::{kl_divergence, MetricKind, MetricSpec};

/// Metric value as a function of current logits and an anchor vector.
pub fn metric_value(spec: &MetricSpec, logits: &[f64], anchor: &[f64]) -> f64 {
    match spec.kind {
        MetricKind::TargetLogitDiff { target } => anchor[target] - logits[target],
        MetricKind::KlDivergence => kl_divergence(anchor, logits),
    }
}

/// d metric / d logits at the current logits.
pub fn metric_logit_gradient(spec: &MetricSpec, logits: &[f64], anchor: &[f64]) -> Vec<f64> {
    match spec.kind {
        MetricKind::TargetLogitDiff { target } => {
            let mut g = vec![0.0; logits.len()];
            g[target] = -1.0;
            g
        }
        MetricKind::KlDivergence => {
            // d/dz KL(p || softmax(z)) = softmax(z) - p.
            let q = softmax(logits);
            let p = softmax(anchor);
            q.iter().zip(&p).map(|(qi, pi)| qi - pi).collect()
        }
    }
}

/// VJP through row-wise layer normalization (full Jacobian).
fn norm_vjp(model: &Model, params: &crate::model::NormParams, x: &Mat, g: &Mat) -> Mat {
    match model.config.normalization {
        Normalization::Identity => g.clone(),
        Normalization::LayerNorm => {
            let d = x.cols();
            let eps = model.config.layer_norm_epsilon;
            let mut out = Mat::zeros(x.rows(), d);
            for r in 0..x.rows() {
                let xrow = x.row(r);
                let grow = g.row(r);
                let mean = xrow.iter().sum::<f64>() / d as f64;
                let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();

                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                let mut dxhat = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                for j in 0..d {
                    xhat[j] = (xrow[j] - mean) * inv_std;
                    dxhat[j] = grow[j] * params.gamma[j];
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xhat[j];
                }
                mean_dxhat /= d as f64;
                mean_dxhat_xhat /= d as f64;

                let orow = out.row_mut(r);
                for j in 0..d {
                    orow[j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
            out
        }
    }
}

/// VJP through one attention head (normalization included): returns the
/// gradient with respect to the block's raw input.
fn head_vjp(model: &Model, ln1: &crate::model::NormParams, head: &HeadWeights, input: &Mat, g_out: &Mat) -> Mat {
    let c = &model.config;
    let normed = normalize(c, ln1, input);

    let mut q = normed.matmul(&head.w_q);
    q.add_row_broadcast(&head.b_q);
    let mut k = normed.matmul(&head.w_k);
    k.add_row_broadcast(&head.b_k);
    let mut v = normed.matmul(&head.w_v);
    v.add_row_broadcast(&head.b_v);

    let scale = 1.0 / (c.head_dim as f64).sqrt();
    let scores = q.matmul_transb(&k).scale(scale);
    let mut attn = Mat::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        attn.row_mut(r).copy_from_slice(&softmax(scores.row(r)));
    }

    // Y = (A V) Wo + bo
    let d_o = g_out.matmul_transb(&head.w_o); // P x dh  (dY Wo^T)
    let d_attn = d_o.matmul_transb(&v); // P x P
    let d_v = attn.matmul_transa(&d_o); // A^T dO

    // Softmax rows: dS = A (dA - <dA, A>)
    let mut d_scores = Mat::zeros(attn.rows(), attn.cols());
    for r in 0..attn.rows() {
        let a = attn.row(r);
        let da = d_attn.row(r);
        let inner = dot(a, da);
        let row = d_scores.row_mut(r);
        for j in 0..a.len() {
            row[j] = a[j] * (da[j] - inner);
        }
    }
    let d_scores = d_scores.scale(scale);

    let d_q = d_scores.matmul(&k);
    let d_k = d_scores.matmul_transa(&q); // dS^T Q

    let mut d_normed = d_q.matmul_transb(&head.w_q);
    d_normed.add_assign(&d_k.matmul_transb(&head.w_k));
    d_normed.add_assign(&d_v.matmul_transb(&head.w_v));

    norm_vjp(model, ln1, input, &d_normed)
}

/// VJP through the MLP branch (normalization included).
fn mlp_vjp(model: &Model, ln2: &crate::model::NormParams, mlp: &crate::model::MlpWeights, input: &Mat, g_out: &Mat) -> Mat {
    let c = &model.config;
    let normed = normalize(c, ln2, input);
    let mut pre = normed.matmul(&mlp.w1);
    pre.add_row_broadcast(&mlp.b1);

    let mut d_hidden = g_out.matmul_transb(&mlp.w2);
    match c.activation {
        Activation::Identity => {}
        Activation::Gelu => {
            for (dh, x) in d_hidden.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *dh *= gelu_prime(*x);
            }
        }
    }
    let d_normed = d_hidden.matmul_transb(&mlp.w1);
    norm_vjp(model, ln2, input, &d_normed)
}

/// VJP from the metric through the head and final normalization back to
/// the logits receiver's input.
fn readout_vjp(model: &Model, final_input: &Mat, d_logits: &[f64]) -> Mat {
    let c = &model.config;
    let d = c.model_dim;
    let d_class_row: Vec<f64> = match &model.weights.head {
        HeadParams::Classifier { weight } => {
            let mut g = vec![0.0; d];
            for (cls, dz) in d_logits.iter().enumerate() {
                if *dz != 0.0 {
                    for j in 0..d {
                        g[j] += dz * weight.get(cls, j);
                    }
                }
            }
            g
        }
        HeadParams::Contrastive { proj, class_embed } => {
            let e = proj.rows();
            let mut d_embed = vec![0.0; e];
            for (cls, dz) in d_logits.iter().enumerate() {
                if *dz != 0.0 {
                    for i in 0..e {
                        d_embed[i] += dz * class_embed.get(cls, i);
                    }
                }
            }
            let mut g = vec![0.0; d];
            for (i, de) in d_embed.iter().enumerate() {
                if *de != 0.0 {
                    for j in 0..d {
                        g[j] += de * proj.get(i, j);
                    }
                }
            }
            g
        }
    };
    // Only the class-token row feeds the head.
    let mut d_normed = Mat::zeros(final_input.rows(), d);
    d_normed.row_mut(0).copy_from_slice(&d_class_row);
    norm_vjp(model, &model.weights.final_norm, final_input, &d_normed)
}

/// Analytic gradient of the metric with respect to every receiver's
/// input, in receiver topological order.
///
/// `anchor_logits` is the reference vector the metric compares against
/// (for edge attribution this is the cached corrupted run's logits).
pub fn receiver_input_gradients(
    model: &Model,
    graph: &Graph,
    tokens: &Mat,
    spec: &MetricSpec,
    anchor_logits: &[f64],
) -> Result<Vec<Mat>> {
    let trace = forward_with_trace(model, tokens)?;
    let h = model.config.heads_per_layer;

    // Receiver inputs reconstructed from the trace.
    let receiver_input = |node: NodeId| -> Mat {
        match node {
            NodeId::AttnInput { layer } => trace.residual_snapshot[layer].clone(),
            NodeId::Mlp { layer } => {
                let mut x = trace.residual_snapshot[layer].clone();
                for head in 0..h {
                    x.add_assign(trace.contribution(NodeId::AttnHead { layer, head }, h));
                }
                x
            }
            NodeId::Logits => trace.final_residual().clone(),
            _ => unreachable!("receivers only"),
        }
    };

    let d_logits = metric_logit_gradient(spec, &trace.logits, anchor_logits);

    let n_receivers = graph.receivers().len();
    let mut grads: Vec<Option<Mat>> = vec![None; n_receivers];

    let logits_input = receiver_input(NodeId::Logits);
    let g_logits = readout_vjp(model, &logits_input, &d_logits);
    let mut downstream = g_logits.clone();
    grads[n_receivers - 1] = Some(g_logits);

    for layer in (0..model.config.layers).rev() {
        let lw = &model.weights.layers[layer];

        let mlp_node = NodeId::Mlp { layer };
        let mlp_in = receiver_input(mlp_node);
        let g_mlp = mlp_vjp(model, &lw.ln2, &lw.mlp, &mlp_in, &downstream);
        let topo = graph
            .receiver_topo_index(mlp_node)
            .expect("mlp receiver exists");
        downstream.add_assign(&g_mlp);
        grads[topo] = Some(g_mlp);

        let attn_node = NodeId::AttnInput { layer };
        let attn_in = receiver_input(attn_node);
        let mut g_attn = Mat::zeros(attn_in.rows(), attn_in.cols());
        for head in &lw.heads {
            g_attn.add_assign(&head_vjp(model, &lw.ln1, head, &attn_in, &downstream));
        }
        let topo = graph
            .receiver_topo_index(attn_node)
            .expect("attn_in receiver exists");
        downstream.add_assign(&g_attn);
        grads[topo] = Some(g_attn);
    }

    let grads: Vec<Mat> = grads.into_iter().map(Option::unwrap).collect();
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at receiver {}",
                graph.receivers()[i].canonical_name()
            )));
        }
    }
    Ok(grads)
}

/// Forward pass with one receiver's input overridden; the finite-difference
/// counterpart of [`receiver_input_gradients`].
pub fn forward_with_receiver_override(
    model: &Model,
    graph: &Graph,
    tokens: &Mat,
    target: NodeId,
    override_input: &Mat,
) -> Result<Vec<f64>> {
    let c = &model.config;
    let mut live: Vec<Option<Mat>> = vec![None; graph.sender_slot_count()];
    live[0] = Some(crate::model::embed(model, tokens)?);

    let mut logits = None;
    for (topo, &receiver) in graph.receivers().iter().enumerate() {
        let input = if receiver == target {
            override_input.clone()
        } else {
            let mut sum = Mat::zeros(c.patch_count, c.model_dim);
            for &edge_idx in graph.incoming(topo) {
                let slot = graph.sender_slot(graph.edges()[edge_idx].sender);
                sum.add_assign(live[slot].as_ref().expect("topological order"));
            }
            sum
        };
        match receiver {
            NodeId::AttnInput { layer } => {
                let lw = &model.weights.layers[layer];
                let normed = normalize(c, &lw.ln1, &input);
                for (hd, head) in lw.heads.iter().enumerate() {
                    let contrib = crate::model::head_contribution(c, head, &normed);
                    live[graph.sender_slot(NodeId::AttnHead { layer, head: hd })] = Some(contrib);
                }
            }
            NodeId::Mlp { layer } => {
                let lw = &model.weights.layers[layer];
                let normed = normalize(c, &lw.ln2, &input);
                live[graph.sender_slot(NodeId::Mlp { layer })] =
                    Some(crate::model::mlp_contribution(c, &lw.mlp, &normed));
            }
            NodeId::Logits => {
                logits = Some(crate::model::readout(model, &input)?);
            }
            _ => unreachable!(),
        }
    }
    logits.ok_or_else(|| Error::Numeric("forward produced no logits".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::model::{random_linear_model, random_model, ModelConfig, RandomModelSpec};
    use crate::rng::SeededRng;

    fn random_tokens(p: usize, d: usize, seed: u64) -> Mat {
        let mut rng = SeededRng::new(seed);
        Mat::from_vec(p, d, (0..p * d).map(|_| rng.normal_f32(1.0)).collect()).unwrap()
    }

    /// Central finite differences of the metric against every entry of a
    /// receiver's input.
    fn fd_gradient(
        model: &Model,
        graph: &Graph,
        tokens: &Mat,
        receiver: NodeId,
        base_input: &Mat,
        spec: &MetricSpec,
        anchor: &[f64],
        step: f64,
    ) -> Mat {
        let mut grad = Mat::zeros(base_input.rows(), base_input.cols());
        for r in 0..base_input.rows() {
            for c in 0..base_input.cols() {
                let mut plus = base_input.clone();
                plus.set(r, c, plus.get(r, c) + step);
                let mut minus = base_input.clone();
                minus.set(r, c, minus.get(r, c) - step);
                let lp =
                    forward_with_receiver_override(model, graph, tokens, receiver, &plus).unwrap();
                let lm =
                    forward_with_receiver_override(model, graph, tokens, receiver, &minus).unwrap();
                let mp = metric_value(spec, &lp, anchor);
                let mm = metric_value(spec, &lm, anchor);
                grad.set(r, c, (mp - mm) / (2.0 * step));
            }
        }
        grad
    }

    fn receiver_inputs(model: &Model, tokens: &Mat) -> Vec<(NodeId, Mat)> {
        let trace = forward_with_trace(model, tokens).unwrap();
        let h = model.config.heads_per_layer;
        let mut out = Vec::new();
        for layer in 0..model.config.layers {
            out.push((
                NodeId::AttnInput { layer },
                trace.residual_snapshot[layer].clone(),
            ));
            let mut mlp_in = trace.residual_snapshot[layer].clone();
            for head in 0..h {
                mlp_in.add_assign(trace.contribution(NodeId::AttnHead { layer, head }, h));
            }
            out.push((NodeId::Mlp { layer }, mlp_in));
        }
        out.push((NodeId::Logits, trace.final_residual().clone()));
        out
    }

    fn check_against_fd(model: &Model, spec: &MetricSpec, seed: u64, tol: f64) {
        let graph = build_graph(&model.config);
        let tokens = random_tokens(model.config.patch_count, model.config.input_dim, seed);
        let trace = forward_with_trace(model, &tokens).unwrap();
        // Anchor plays the corrupted-logits role; any fixed vector works.
        let anchor: Vec<f64> = trace.logits.iter().map(|v| v * 0.5 + 0.1).collect();

        let grads = receiver_input_gradients(model, &graph, &tokens, spec, &anchor).unwrap();
        for (node, input) in receiver_inputs(model, &tokens) {
            let topo = graph.receiver_topo_index(node).unwrap();
            let fd = fd_gradient(model, &graph, &tokens, node, &input, spec, &anchor, 1e-4);
            for (a, n) in grads[topo].as_slice().iter().zip(fd.as_slice()) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / denom <= tol,
                    "{}: analytic {a} vs fd {n}",
                    node.canonical_name()
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_logitdiff() {
        for seed in 0..3 {
            let model = random_model(&RandomModelSpec {
                config: ModelConfig::tiny(2, 2, 8, 5, 4),
                weight_std: 0.4,
                seed: 50 + seed,
                constant_attention: false,
            })
            .unwrap();
            check_against_fd(&model, &MetricSpec::logit_diff(1), seed, 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences_kl() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(2, 2, 8, 5, 4),
            weight_std: 0.4,
            seed: 99,
            constant_attention: false,
        })
        .unwrap();
        check_against_fd(&model, &MetricSpec::kl(), 4, 1e-4);
    }

    #[test]
    fn linear_model_gradient_is_constant_in_input() {
        let model = random_linear_model(2, 2, 8, 5, 4, 17).unwrap();
        let graph = build_graph(&model.config);
        let spec = MetricSpec::logit_diff(0);
        let anchor = vec![0.0; 4];
        let a = receiver_input_gradients(
            &model,
            &graph,
            &random_tokens(5, 8, 1),
            &spec,
            &anchor,
        )
        .unwrap();
        let b = receiver_input_gradients(
            &model,
            &graph,
            &random_tokens(5, 8, 2),
            &spec,
            &anchor,
        )
        .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y) < 1e-9);
        }
    }

    #[test]
    fn linear_chain_rule_at_logits_receiver() {
        // In a linear model with identity final norm, the gradient of
        // -logit_k at the logits receiver is minus the classifier row k,
        // placed on the class-token row.
        let model = random_linear_model(1, 1, 6, 4, 3, 23).unwrap();
        let graph = build_graph(&model.config);
        let spec = MetricSpec::logit_diff(2);
        let grads = receiver_input_gradients(
            &model,
            &graph,
            &random_tokens(4, 6, 3),
            &spec,
            &vec![0.0; 3],
        )
        .unwrap();
        let g_logits = grads.last().unwrap();
        let crate::model::HeadParams::Classifier { weight } = &model.weights.head else {
            panic!()
        };
        for j in 0..6 {
            assert!((g_logits.get(0, j) + weight.get(2, j)).abs() < 1e-12);
        }
        for r in 1..4 {
            assert!(g_logits.row(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dead_downstream_path_gives_zero_gradient() {
        // Zero everything after layer 0's attention: gradients at the
        // attn_in(0) receiver vanish except through surviving paths; with a
        // zero classifier the gradient is zero everywhere.
        let mut model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(1, 1, 6, 4, 3),
            weight_std: 0.4,
            seed: 3,
            constant_attention: false,
        })
        .unwrap();
        model.weights.head = HeadParams::Classifier {
            weight: Mat::zeros(3, 6),
        };
        let graph = build_graph(&model.config);
        let grads = receiver_input_gradients(
            &model,
            &graph,
            &random_tokens(4, 6, 9),
            &MetricSpec::logit_diff(0),
            &vec![0.0; 3],
        )
        .unwrap();
        for g in &grads {
            assert!(g.as_slice().iter().all(|&v| v == 0.0));
        }
    }
}
