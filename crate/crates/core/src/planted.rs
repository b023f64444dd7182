//! Hand-constructed models with known signal routing, paired with the
//! synthetic task generator. Ground-truth circuits are available by
//! construction, which is what makes desk-scale recovery, ordering and
//! steering experiments checkable.
//!
//! The building blocks are "copy heads" (zero query/key projections give
//! exactly uniform attention, so a head's output at every position is the
//! patch-mean of selected input dims routed to selected output dims) and
//! single-unit MLP channels. Everything else is zero, so edges off the
//! planted pathways carry bitwise-zero contributions.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{
    Activation, HeadMode, HeadParams, HeadWeights, LayerWeights, MlpWeights, Model, ModelConfig,
    NormParams, Normalization, WeightSet,
};

/// A head with uniform attention that routes `src` dims to `dst` dims.
#[derive(Debug, Clone)]
pub struct CopyHead {
    pub layer: usize,
    pub head: usize,
    /// (source dim, destination dim, gain) taps; one value lane each.
    pub taps: Vec<(usize, usize, f64)>,
}

/// One hidden unit of an MLP block: `out[dst] += w_out * act(w_in *
/// normed[src] + bias)`.
#[derive(Debug, Clone)]
pub struct MlpChannel {
    pub layer: usize,
    pub src: usize,
    pub dst: usize,
    pub w_in: f64,
    pub bias: f64,
    pub w_out: f64,
}

#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub layers: usize,
    pub heads_per_layer: usize,
    pub dim: usize,
    pub patch_count: usize,
    pub num_classes: usize,
    pub copy_heads: Vec<CopyHead>,
    pub mlp_channels: Vec<MlpChannel>,
    /// (class, dim, weight) readout taps on the class-token row.
    pub classifier: Vec<(usize, usize, f64)>,
}

/// Build the model: identity embedding, zero weights everywhere except
/// the planted pathways, unit norm parameters.
pub fn build_planted(spec: &PlantedSpec) -> Result<Model> {
    let head_dim = spec
        .copy_heads
        .iter()
        .map(|h| h.taps.len())
        .max()
        .unwrap_or(1)
        .max(1);
    let mlp_hidden = spec
        .mlp_channels
        .iter()
        .fold(std::collections::BTreeMap::new(), |mut acc, ch| {
            *acc.entry(ch.layer).or_insert(0usize) += 1;
            acc
        })
        .into_values()
        .max()
        .unwrap_or(1)
        .max(1);

    let config = ModelConfig {
        layers: spec.layers,
        heads_per_layer: spec.heads_per_layer,
        model_dim: spec.dim,
        head_dim,
        mlp_hidden_dim: mlp_hidden,
        patch_count: spec.patch_count,
        num_classes: spec.num_classes,
        input_dim: spec.dim,
        embed_dim: spec.dim,
        head_mode: HeadMode::Classifier,
        layer_norm_epsilon: 1e-5,
        activation: Activation::Gelu,
        normalization: Normalization::LayerNorm,
    };

    let mut layers: Vec<LayerWeights> = (0..spec.layers)
        .map(|_| LayerWeights {
            ln1: NormParams::identity(spec.dim),
            heads: (0..spec.heads_per_layer)
                .map(|_| HeadWeights {
                    w_q: Mat::zeros(spec.dim, head_dim),
                    b_q: vec![0.0; head_dim],
                    w_k: Mat::zeros(spec.dim, head_dim),
                    b_k: vec![0.0; head_dim],
                    w_v: Mat::zeros(spec.dim, head_dim),
                    b_v: vec![0.0; head_dim],
                    w_o: Mat::zeros(head_dim, spec.dim),
                    b_o: vec![0.0; spec.dim],
                })
                .collect(),
            ln2: NormParams::identity(spec.dim),
            mlp: MlpWeights {
                w1: Mat::zeros(spec.dim, mlp_hidden),
                b1: vec![0.0; mlp_hidden],
                w2: Mat::zeros(mlp_hidden, spec.dim),
                b2: vec![0.0; spec.dim],
            },
        })
        .collect();

    for ch in &spec.copy_heads {
        if ch.layer >= spec.layers || ch.head >= spec.heads_per_layer {
            return Err(Error::Argument(format!(
                "copy head a{}.h{} out of range",
                ch.layer, ch.head
            )));
        }
        let head = &mut layers[ch.layer].heads[ch.head];
        for (lane, &(src, dst, gain)) in ch.taps.iter().enumerate() {
            if src >= spec.dim || dst >= spec.dim {
                return Err(Error::Argument("copy head tap dim out of range".into()));
            }
            head.w_v.set(src, lane, 1.0);
            head.w_o.set(lane, dst, gain);
        }
    }

    let mut next_unit = vec![0usize; spec.layers];
    for ch in &spec.mlp_channels {
        if ch.layer >= spec.layers {
            return Err(Error::Argument("mlp channel layer out of range".into()));
        }
        if ch.src >= spec.dim || ch.dst >= spec.dim {
            return Err(Error::Argument("mlp channel dim out of range".into()));
        }
        let unit = next_unit[ch.layer];
        next_unit[ch.layer] += 1;
        let mlp = &mut layers[ch.layer].mlp;
        mlp.w1.set(ch.src, unit, ch.w_in);
        mlp.b1[unit] = ch.bias;
        mlp.w2.set(unit, ch.dst, ch.w_out);
    }

    let mut classifier = Mat::zeros(spec.num_classes, spec.dim);
    for &(class, dim, weight) in &spec.classifier {
        if class >= spec.num_classes || dim >= spec.dim {
            return Err(Error::Argument("classifier tap out of range".into()));
        }
        classifier.set(class, dim, weight);
    }

    let mut embed_w = Mat::zeros(spec.dim, spec.dim);
    for i in 0..spec.dim {
        embed_w.set(i, i, 1.0);
    }

    Model::new(
        config,
        WeightSet {
            embed_w,
            embed_b: vec![0.0; spec.dim],
            layers,
            final_norm: NormParams::identity(spec.dim),
            head: HeadParams::Classifier { weight: classifier },
        },
    )
}

/// Dim layout shared by the planted constructors: class patterns occupy
/// dims `0..C`, the attack channel sits at `C + 2`, staging dims start at
/// `dim/2` and readout dims at `dim/2 + C`.
pub fn staging_base(dim: usize) -> usize {
    dim / 2
}

pub fn readout_base(dim: usize, num_classes: usize) -> usize {
    dim / 2 + num_classes
}

pub fn attack_dim(num_classes: usize) -> usize {
    num_classes + 2
}

/// One signal-carrying head among `heads` at layer 0; everything else is
/// dead weight. The minimal faithful circuit is exactly
/// `{input -> attn_in0, a0.h0 -> logits}`.
pub fn single_signal_head_model(
    num_classes: usize,
    dim: usize,
    patch_count: usize,
    heads: usize,
    gain: f64,
) -> Result<Model> {
    let base = staging_base(dim);
    build_planted(&PlantedSpec {
        layers: 1,
        heads_per_layer: heads,
        dim,
        patch_count,
        num_classes,
        copy_heads: vec![CopyHead {
            layer: 0,
            head: 0,
            taps: (0..num_classes).map(|c| (c, base + c, gain)).collect(),
        }],
        mlp_channels: vec![],
        classifier: (0..num_classes).map(|c| (c, base + c, 1.0)).collect(),
    })
}

/// Signal split across several layer-0 heads with the given gains, all
/// writing the same staging dims. With per-example amplitude jitter in
/// the task, low-gain heads sit near any mid-range pruning threshold, so
/// recovered circuits vary with the sampled batch.
pub fn multi_head_signal_model(
    num_classes: usize,
    dim: usize,
    patch_count: usize,
    heads: usize,
    gains: &[f64],
) -> Result<Model> {
    if gains.len() > heads {
        return Err(Error::Argument("more gains than heads".into()));
    }
    let base = staging_base(dim);
    build_planted(&PlantedSpec {
        layers: 1,
        heads_per_layer: heads,
        dim,
        patch_count,
        num_classes,
        copy_heads: gains
            .iter()
            .enumerate()
            .map(|(h, &g)| CopyHead {
                layer: 0,
                head: h,
                taps: (0..num_classes).map(|c| (c, base + c, g)).collect(),
            })
            .collect(),
        mlp_channels: vec![],
        classifier: (0..num_classes).map(|c| (c, base + c, 1.0)).collect(),
    })
}

/// Knobs for the two-hop construction.
#[derive(Debug, Clone)]
pub struct TwoHopSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub patch_count: usize,
    pub layers: usize,
    pub heads: usize,
    /// Gain of the layer-0 staging head. Large values push the staging
    /// dims to dominate downstream row norms, which collapses the
    /// first-order gradient along them (layer-norm scale invariance)
    /// while the true patching effect stays large.
    pub stage_gain: f64,
    /// MLP channel shape reading normalized staging dims.
    pub mlp_w_in: f64,
    pub mlp_bias: f64,
    pub mlp_w_out: f64,
    /// Gains of weak direct paths (one head each) from pattern dims to
    /// readout dims; honest small effects that outrank the saturated
    /// critical edges in first-order scores.
    pub weak_gains: Vec<(usize, usize, f64)>, // (layer, head, gain)
}

impl TwoHopSpec {
    pub fn standard(num_classes: usize) -> Self {
        Self {
            num_classes,
            dim: 16,
            patch_count: 17,
            layers: 3,
            heads: 4,
            stage_gain: 6.0,
            mlp_w_in: 1.0,
            mlp_bias: -1.2,
            mlp_w_out: 2.0,
            weak_gains: vec![(0, 1, 0.06), (1, 1, 0.05), (2, 1, 0.04), (1, 2, 0.03)],
        }
    }
}

/// Two-hop signal path: pattern dims -> staging dims (head a0.h0) ->
/// readout dims (the layer-1 MLP) -> classifier. The critical edges are
/// `input -> attn_in0`, `a0.h0 -> mlp1` and `mlp1 -> logits`.
pub fn two_hop_model(spec: &TwoHopSpec) -> Result<Model> {
    let c = spec.num_classes;
    let stage = staging_base(spec.dim);
    let out = readout_base(spec.dim, c);
    if spec.layers < 2 {
        return Err(Error::Argument("two-hop model needs at least 2 layers".into()));
    }

    let mut copy_heads = vec![CopyHead {
        layer: 0,
        head: 0,
        taps: (0..c).map(|cc| (cc, stage + cc, spec.stage_gain)).collect(),
    }];
    for &(layer, head, gain) in &spec.weak_gains {
        copy_heads.push(CopyHead {
            layer,
            head,
            taps: (0..c).map(|cc| (cc, out + cc, gain)).collect(),
        });
    }

    build_planted(&PlantedSpec {
        layers: spec.layers,
        heads_per_layer: spec.heads,
        dim: spec.dim,
        patch_count: spec.patch_count,
        num_classes: c,
        copy_heads,
        mlp_channels: (0..c)
            .map(|cc| MlpChannel {
                layer: 1,
                src: stage + cc,
                dst: out + cc,
                w_in: spec.mlp_w_in,
                bias: spec.mlp_bias,
                w_out: spec.mlp_w_out,
            })
            .collect(),
        classifier: (0..c).map(|cc| (cc, out + cc, 1.0)).collect(),
    })
}

/// Knobs for the attack-sensitive construction.
#[derive(Debug, Clone)]
pub struct AttackModelSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub patch_count: usize,
    pub layers: usize,
    pub heads: usize,
    pub signal_gain: f64,
    /// Gain of the head reading the attack channel into the target
    /// class's readout dim.
    pub attack_gain: f64,
    pub attack_target: usize,
}

impl AttackModelSpec {
    pub fn standard(num_classes: usize, attack_target: usize) -> Self {
        Self {
            num_classes,
            dim: 16,
            patch_count: 17,
            layers: 2,
            heads: 2,
            signal_gain: 4.0,
            attack_gain: 10.0,
            attack_target,
        }
    }
}

/// A classifier with a planted attack-sensitive pathway: head a0.h0 reads
/// class patterns, head a0.h1 reads the attack channel and boosts the
/// attack target's logit. The attack circuit is
/// `{input -> attn_in0, a0.h1 -> logits}`.
pub fn attack_sensitive_model(spec: &AttackModelSpec) -> Result<Model> {
    let c = spec.num_classes;
    let base = staging_base(spec.dim);
    if spec.attack_target >= c {
        return Err(Error::Argument("attack target out of range".into()));
    }
    build_planted(&PlantedSpec {
        layers: spec.layers,
        heads_per_layer: spec.heads,
        dim: spec.dim,
        patch_count: spec.patch_count,
        num_classes: c,
        copy_heads: vec![
            CopyHead {
                layer: 0,
                head: 0,
                taps: (0..c).map(|cc| (cc, base + cc, spec.signal_gain)).collect(),
            },
            CopyHead {
                layer: 0,
                head: 1,
                taps: vec![(
                    attack_dim(c),
                    base + spec.attack_target,
                    spec.attack_gain,
                )],
            },
        ],
        mlp_channels: vec![],
        classifier: (0..c).map(|cc| (cc, base + cc, 1.0)).collect(),
    })
}

/// The synthetic task matched to the planted constructors: coordinate
/// class patterns and an attack overlay on the dedicated attack channel.
pub fn matched_task(num_classes: usize, dim: usize, gain: f64, seed: u64) -> Result<crate::data::SyntheticTaskSpec> {
    crate::data::SyntheticTaskSpec::coordinate_patterns(num_classes, dim, gain, seed)
}

/// Attack overlay spec on the dedicated attack channel.
pub fn matched_attack(
    num_classes: usize,
    dim: usize,
    amplitude: f64,
    target: usize,
    placement: crate::data::Placement,
) -> crate::data::AttackSpec {
    let mut pattern = vec![0.0; dim];
    pattern[attack_dim(num_classes)] = 1.0;
    crate::data::AttackSpec {
        pattern,
        amplitude,
        target,
        placement,
        coverage: 0.5,
        id: "overlay".into(),
    }
}
