//! Minimal pre-norm vision transformer with hookable component outputs.
//!
//! The forward pass records every component's additive residual-stream
//! write: the embedded input, each attention head's output projection and
//! each MLP block. Pre-norm means normalization happens inside the branch,
//! so the stream itself is a plain sum of contributions and cached values
//! can be swapped in and out without touching anything else.
//!
//! The class token sits at row 0; only that row feeds the output head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sender_slot, sender_slot_count, NodeId};
use crate::linalg::{dot, Mat};

/// Output head flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Affine classifier matrix applied to the class-token row.
    Classifier,
    /// Project the class-token row to an embedding and dot it with a fixed
    /// class-embedding matrix.
    Contrastive,
}

/// MLP nonlinearity. `Identity` exists so purely linear models can be
/// built for exactness checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

/// Branch normalization. `Identity` turns the model into an affine map
/// when combined with `Activation::Identity` and constant attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    LayerNorm,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads_per_layer: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub mlp_hidden_dim: usize,
    /// Token positions, including the class token at row 0.
    pub patch_count: usize,
    pub num_classes: usize,
    /// Width of raw (pre-embedding) tokens.
    pub input_dim: usize,
    /// Contrastive embedding width; ignored in classifier mode.
    pub embed_dim: usize,
    pub head_mode: HeadMode,
    pub layer_norm_epsilon: f64,
    pub activation: Activation,
    pub normalization: Normalization,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.heads_per_layer < 1 || self.model_dim < 1 {
            return Err(Error::Config(
                "layers, heads and model_dim must all be at least 1".into(),
            ));
        }
        if self.patch_count < 2 {
            return Err(Error::Config(
                "patch_count must be at least 2 (class token plus one patch)".into(),
            ));
        }
        if self.head_dim < 1 || self.mlp_hidden_dim < 1 || self.input_dim < 1 {
            return Err(Error::Config(
                "head_dim, mlp_hidden_dim and input_dim must be at least 1".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.head_mode == HeadMode::Contrastive && self.embed_dim < 1 {
            return Err(Error::Config(
                "contrastive mode requires embed_dim >= 1".into(),
            ));
        }
        if !(self.layer_norm_epsilon > 0.0) {
            return Err(Error::Config("layer_norm_epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Stable digest of the configuration, referenced by circuit files.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::graph::digest_bytes(json.as_bytes())
    }

    pub fn sender_slot_count(&self) -> usize {
        sender_slot_count(self.layers, self.heads_per_layer)
    }
}

/// Per-head attention parameters. Projections are affine; each head owns
/// its slice of the output projection so contributions stay per-head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: Mat, // d x head_dim
    pub b_q: Vec<f64>,
    pub w_k: Mat,
    pub b_k: Vec<f64>,
    pub w_v: Mat,
    pub b_v: Vec<f64>,
    pub w_o: Mat, // head_dim x d
    pub b_o: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w1: Mat, // d x hidden
    pub b1: Vec<f64>,
    pub w2: Mat, // hidden x d
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: NormParams,
    pub heads: Vec<HeadWeights>,
    pub ln2: NormParams,
    pub mlp: MlpWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    /// C x d classifier matrix.
    Classifier { weight: Mat },
    /// e x d image projection plus a fixed C x e class-embedding matrix.
    Contrastive { proj: Mat, class_embed: Mat },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub embed_w: Mat, // input_dim x d
    pub embed_b: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: NormParams,
    pub head: HeadParams,
}

/// Configuration plus parameters; immutable after construction and safe
/// to share across parallel workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: WeightSet,
}

impl Model {
    pub fn new(config: ModelConfig, weights: WeightSet) -> Result<Self> {
        let model = Self { config, weights };
        model.validate()?;
        Ok(model)
    }

    /// Shape- and finiteness-check every tensor against the configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let w = &self.weights;
        check_shape("embed.w", &w.embed_w, c.input_dim, c.model_dim)?;
        check_len("embed.b", &w.embed_b, c.model_dim)?;
        if w.layers.len() != c.layers {
            return Err(Error::Config(format!(
                "expected {} layers, found {}",
                c.layers,
                w.layers.len()
            )));
        }
        for (l, layer) in w.layers.iter().enumerate() {
            check_len(&format!("layer{l}.ln1.gamma"), &layer.ln1.gamma, c.model_dim)?;
            check_len(&format!("layer{l}.ln1.beta"), &layer.ln1.beta, c.model_dim)?;
            check_len(&format!("layer{l}.ln2.gamma"), &layer.ln2.gamma, c.model_dim)?;
            check_len(&format!("layer{l}.ln2.beta"), &layer.ln2.beta, c.model_dim)?;
            if layer.heads.len() != c.heads_per_layer {
                return Err(Error::Config(format!(
                    "layer {l}: expected {} heads, found {}",
                    c.heads_per_layer,
                    layer.heads.len()
                )));
            }
            for (h, head) in layer.heads.iter().enumerate() {
                let tag = format!("layer{l}.attn{h}");
                check_shape(&format!("{tag}.wq"), &head.w_q, c.model_dim, c.head_dim)?;
                check_shape(&format!("{tag}.wk"), &head.w_k, c.model_dim, c.head_dim)?;
                check_shape(&format!("{tag}.wv"), &head.w_v, c.model_dim, c.head_dim)?;
                check_shape(&format!("{tag}.wo"), &head.w_o, c.head_dim, c.model_dim)?;
                check_len(&format!("{tag}.bq"), &head.b_q, c.head_dim)?;
                check_len(&format!("{tag}.bk"), &head.b_k, c.head_dim)?;
                check_len(&format!("{tag}.bv"), &head.b_v, c.head_dim)?;
                check_len(&format!("{tag}.bo"), &head.b_o, c.model_dim)?;
            }
            check_shape(
                &format!("layer{l}.mlp.w1"),
                &layer.mlp.w1,
                c.model_dim,
                c.mlp_hidden_dim,
            )?;
            check_len(&format!("layer{l}.mlp.b1"), &layer.mlp.b1, c.mlp_hidden_dim)?;
            check_shape(
                &format!("layer{l}.mlp.w2"),
                &layer.mlp.w2,
                c.mlp_hidden_dim,
                c.model_dim,
            )?;
            check_len(&format!("layer{l}.mlp.b2"), &layer.mlp.b2, c.model_dim)?;
        }
        check_len("final_norm.gamma", &w.final_norm.gamma, c.model_dim)?;
        check_len("final_norm.beta", &w.final_norm.beta, c.model_dim)?;
        match (&w.head, c.head_mode) {
            (HeadParams::Classifier { weight }, HeadMode::Classifier) => {
                check_shape("head.classifier", weight, c.num_classes, c.model_dim)?;
            }
            (HeadParams::Contrastive { proj, class_embed }, HeadMode::Contrastive) => {
                check_shape("head.proj", proj, c.embed_dim, c.model_dim)?;
                check_shape("head.class_embed", class_embed, c.num_classes, c.embed_dim)?;
            }
            (HeadParams::Classifier { .. }, HeadMode::Contrastive) => {
                return Err(Error::Config(
                    "contrastive mode requires a class-embedding matrix".into(),
                ));
            }
            (HeadParams::Contrastive { .. }, HeadMode::Classifier) => {
                return Err(Error::Config(
                    "classifier mode requires a classifier matrix".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        self.config.digest()
    }
}

fn check_shape(name: &str, m: &Mat, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::Config(format!(
            "{name}: expected {rows}x{cols}, found {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Config(format!("{name}: non-finite entries")));
    }
    Ok(())
}

fn check_len(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Config(format!(
            "{name}: expected length {len}, found {}",
            v.len()
        )));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::Config(format!("{name}: non-finite entries")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Component primitives (shared by forward, patched and steered passes)
// ---------------------------------------------------------------------------

/// Row-wise layer normalization (or pass-through in identity mode).
pub fn normalize(config: &ModelConfig, params: &NormParams, x: &Mat) -> Mat {
    match config.normalization {
        Normalization::Identity => x.clone(),
        Normalization::LayerNorm => {
            let d = x.cols();
            let mut out = Mat::zeros(x.rows(), d);
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + config.layer_norm_epsilon).sqrt();
                let orow = out.row_mut(r);
                for j in 0..d {
                    orow[j] = params.gamma[j] * (row[j] - mean) * inv_std + params.beta[j];
                }
            }
            out
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU; smooth, with an exact analytic derivative.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn activation(config: &ModelConfig, x: f64) -> f64 {
    match config.activation {
        Activation::Gelu => gelu(x),
        Activation::Identity => x,
    }
}

/// One attention head's additive contribution given the (already
/// normalized) block input. Softmax attention over all positions, no mask.
pub fn head_contribution(config: &ModelConfig, head: &HeadWeights, normed: &Mat) -> Mat {
    let mut q = normed.matmul(&head.w_q);
    q.add_row_broadcast(&head.b_q);
    let mut k = normed.matmul(&head.w_k);
    k.add_row_broadcast(&head.b_k);
    let mut v = normed.matmul(&head.w_v);
    v.add_row_broadcast(&head.b_v);

    let scale = 1.0 / (config.head_dim as f64).sqrt();
    let scores = q.matmul_transb(&k).scale(scale);
    let mut attn = Mat::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let probs = crate::linalg::softmax(scores.row(r));
        attn.row_mut(r).copy_from_slice(&probs);
    }
    let mut out = attn.matmul(&v).matmul(&head.w_o);
    out.add_row_broadcast(&head.b_o);
    out
}

/// The MLP block's additive contribution given the normalized input.
pub fn mlp_contribution(config: &ModelConfig, mlp: &MlpWeights, normed: &Mat) -> Mat {
    let mut hidden = normed.matmul(&mlp.w1);
    hidden.add_row_broadcast(&mlp.b1);
    for v in hidden.as_mut_slice() {
        *v = activation(config, *v);
    }
    let mut out = hidden.matmul(&mlp.w2);
    out.add_row_broadcast(&mlp.b2);
    out
}

/// Embed raw tokens: affine map applied outside the graph. The result is
/// the `input` sender's contribution.
pub fn embed(model: &Model, tokens: &Mat) -> Result<Mat> {
    let c = &model.config;
    if tokens.rows() != c.patch_count || tokens.cols() != c.input_dim {
        return Err(Error::Config(format!(
            "input shape {}x{} does not match patch_count {} x input_dim {}",
            tokens.rows(),
            tokens.cols(),
            c.patch_count,
            c.input_dim
        )));
    }
    let mut e = tokens.matmul(&model.weights.embed_w);
    e.add_row_broadcast(&model.weights.embed_b);
    Ok(e)
}

/// Map an already-normalized final residual to logits.
///
/// Classifier: affine map of the class-token row. Contrastive: project the
/// class-token row and dot with each class embedding. No normalization is
/// applied here; callers normalize first.
pub fn logits_from_head(model: &Model, final_residual: &Mat) -> Result<Vec<f64>> {
    let class_row = final_residual.row(0);
    match (&model.weights.head, model.config.head_mode) {
        (HeadParams::Classifier { weight }, HeadMode::Classifier) => Ok((0..weight.rows())
            .map(|c| dot(weight.row(c), class_row))
            .collect()),
        (HeadParams::Contrastive { proj, class_embed }, HeadMode::Contrastive) => {
            let embedding: Vec<f64> = (0..proj.rows())
                .map(|i| dot(proj.row(i), class_row))
                .collect();
            Ok((0..class_embed.rows())
                .map(|c| dot(class_embed.row(c), &embedding))
                .collect())
        }
        _ => Err(Error::Config(
            "head parameters do not match the configured head mode".into(),
        )),
    }
}

/// Final normalization followed by the head.
pub fn readout(model: &Model, final_residual: &Mat) -> Result<Vec<f64>> {
    let normed = normalize(
        &model.config,
        &model.weights.final_norm,
        final_residual,
    );
    logits_from_head(model, &normed)
}

// ---------------------------------------------------------------------------
// Traced forward
// ---------------------------------------------------------------------------

/// Everything a forward pass writes to the residual stream, plus per-layer
/// snapshots and the logits.
///
/// Contributions are indexed by sender slot (see [`crate::graph::sender_slot`]):
/// `input`, then per layer each head followed by the MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub sender_contribution: Vec<Mat>,
    /// Residual state before each layer plus the final state: L + 1 entries.
    pub residual_snapshot: Vec<Mat>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn contribution(&self, node: NodeId, heads_per_layer: usize) -> &Mat {
        &self.sender_contribution[sender_slot(node, heads_per_layer)]
    }

    pub fn final_residual(&self) -> &Mat {
        self.residual_snapshot
            .last()
            .expect("trace has at least one snapshot")
    }
}

/// Full forward pass recording every sender's additive contribution.
///
/// Deterministic for fixed inputs. Errors with the offending component's
/// name if any contribution goes non-finite.
pub fn forward_with_trace(model: &Model, tokens: &Mat) -> Result<ForwardTrace> {
    let c = &model.config;
    let embedded = embed(model, tokens)?;
    if !embedded.is_finite() {
        return Err(Error::Numeric("non-finite activation in input".into()));
    }

    let mut contributions = Vec::with_capacity(c.sender_slot_count());
    contributions.push(embedded.clone());

    let mut residual = embedded;
    let mut snapshots = vec![residual.clone()];

    for (l, layer) in model.weights.layers.iter().enumerate() {
        let normed1 = normalize(c, &layer.ln1, &residual);
        let mut after_attn = residual.clone();
        for (h, head) in layer.heads.iter().enumerate() {
            let contrib = head_contribution(c, head, &normed1);
            if !contrib.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activation in a{l}.h{h}"
                )));
            }
            after_attn.add_assign(&contrib);
            contributions.push(contrib);
        }
        let normed2 = normalize(c, &layer.ln2, &after_attn);
        let mlp_out = mlp_contribution(c, &layer.mlp, &normed2);
        if !mlp_out.is_finite() {
            return Err(Error::Numeric(format!("non-finite activation in mlp{l}")));
        }
        residual = after_attn;
        residual.add_assign(&mlp_out);
        contributions.push(mlp_out);
        snapshots.push(residual.clone());
    }

    let logits = readout(model, &residual)?;
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite activation in logits".into()));
    }

    Ok(ForwardTrace {
        sender_contribution: contributions,
        residual_snapshot: snapshots,
        logits,
    })
}

// ---------------------------------------------------------------------------
// Random model construction
// ---------------------------------------------------------------------------

/// Knobs for random model generation in tests and experiments.
#[derive(Debug, Clone)]
pub struct RandomModelSpec {
    pub config: ModelConfig,
    pub weight_std: f64,
    pub seed: u64,
    /// Zero the query/key projections so attention is constant (uniform),
    /// one of the ingredients of a purely linear model.
    pub constant_attention: bool,
}

impl ModelConfig {
    /// A small default configuration; tests override fields as needed.
    pub fn tiny(layers: usize, heads: usize, dim: usize, patches: usize, classes: usize) -> Self {
        ModelConfig {
            layers,
            heads_per_layer: heads,
            model_dim: dim,
            head_dim: (dim / 2).max(1),
            mlp_hidden_dim: dim,
            patch_count: patches,
            num_classes: classes,
            input_dim: dim,
            embed_dim: dim,
            head_mode: HeadMode::Classifier,
            layer_norm_epsilon: 1e-5,
            activation: Activation::Gelu,
            normalization: Normalization::LayerNorm,
        }
    }
}

fn random_mat(rng: &mut crate::rng::SeededRng, rows: usize, cols: usize, std: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.normal_f32(std)).collect();
    Mat::from_vec(rows, cols, data).expect("length matches")
}

fn random_vec(rng: &mut crate::rng::SeededRng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| rng.normal_f32(std)).collect()
}

/// Build a random model. With `constant_attention` the query/key weights
/// are zeroed; combined with identity activation and identity
/// normalization in the config this yields a purely affine network.
pub fn random_model(spec: &RandomModelSpec) -> Result<Model> {
    let c = &spec.config;
    let mut rng = crate::rng::SeededRng::new(spec.seed);
    let std = spec.weight_std;
    let layers = (0..c.layers)
        .map(|_| {
            let heads = (0..c.heads_per_layer)
                .map(|_| {
                    let (w_q, b_q, w_k, b_k) = if spec.constant_attention {
                        (
                            Mat::zeros(c.model_dim, c.head_dim),
                            vec![0.0; c.head_dim],
                            Mat::zeros(c.model_dim, c.head_dim),
                            vec![0.0; c.head_dim],
                        )
                    } else {
                        (
                            random_mat(&mut rng, c.model_dim, c.head_dim, std),
                            random_vec(&mut rng, c.head_dim, std),
                            random_mat(&mut rng, c.model_dim, c.head_dim, std),
                            random_vec(&mut rng, c.head_dim, std),
                        )
                    };
                    HeadWeights {
                        w_q,
                        b_q,
                        w_k,
                        b_k,
                        w_v: random_mat(&mut rng, c.model_dim, c.head_dim, std),
                        b_v: random_vec(&mut rng, c.head_dim, std),
                        w_o: random_mat(&mut rng, c.head_dim, c.model_dim, std),
                        b_o: random_vec(&mut rng, c.model_dim, std),
                    }
                })
                .collect();
            LayerWeights {
                ln1: NormParams::identity(c.model_dim),
                heads,
                ln2: NormParams::identity(c.model_dim),
                mlp: MlpWeights {
                    w1: random_mat(&mut rng, c.model_dim, c.mlp_hidden_dim, std),
                    b1: random_vec(&mut rng, c.mlp_hidden_dim, std),
                    w2: random_mat(&mut rng, c.mlp_hidden_dim, c.model_dim, std),
                    b2: random_vec(&mut rng, c.model_dim, std),
                },
            }
        })
        .collect();

    let head = match c.head_mode {
        HeadMode::Classifier => HeadParams::Classifier {
            weight: random_mat(&mut rng, c.num_classes, c.model_dim, std),
        },
        HeadMode::Contrastive => HeadParams::Contrastive {
            proj: random_mat(&mut rng, c.embed_dim, c.model_dim, std),
            class_embed: random_mat(&mut rng, c.num_classes, c.embed_dim, std),
        },
    };

    Model::new(
        c.clone(),
        WeightSet {
            embed_w: random_mat(&mut rng, c.input_dim, c.model_dim, std),
            embed_b: random_vec(&mut rng, c.model_dim, std),
            layers,
            final_norm: NormParams::identity(c.model_dim),
            head,
        },
    )
}

/// Random purely linear model: identity normalization and activation plus
/// constant attention, so logits are an affine function of the input.
pub fn random_linear_model(
    layers: usize,
    heads: usize,
    dim: usize,
    patches: usize,
    classes: usize,
    seed: u64,
) -> Result<Model> {
    let mut config = ModelConfig::tiny(layers, heads, dim, patches, classes);
    config.activation = Activation::Identity;
    config.normalization = Normalization::Identity;
    random_model(&RandomModelSpec {
        config,
        weight_std: 0.25,
        seed,
        constant_attention: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_tokens(config: &ModelConfig, seed: u64) -> Mat {
        let mut rng = SeededRng::new(seed);
        random_mat(&mut rng, config.patch_count, config.input_dim, 1.0)
    }

    fn zero_model(config: ModelConfig) -> Model {
        let c = config.clone();
        let layers = (0..c.layers)
            .map(|_| LayerWeights {
                ln1: NormParams {
                    gamma: vec![0.0; c.model_dim],
                    beta: vec![0.0; c.model_dim],
                },
                heads: (0..c.heads_per_layer)
                    .map(|_| HeadWeights {
                        w_q: Mat::zeros(c.model_dim, c.head_dim),
                        b_q: vec![0.0; c.head_dim],
                        w_k: Mat::zeros(c.model_dim, c.head_dim),
                        b_k: vec![0.0; c.head_dim],
                        w_v: Mat::zeros(c.model_dim, c.head_dim),
                        b_v: vec![0.0; c.head_dim],
                        w_o: Mat::zeros(c.head_dim, c.model_dim),
                        b_o: vec![0.0; c.model_dim],
                    })
                    .collect(),
                ln2: NormParams {
                    gamma: vec![0.0; c.model_dim],
                    beta: vec![0.0; c.model_dim],
                },
                mlp: MlpWeights {
                    w1: Mat::zeros(c.model_dim, c.mlp_hidden_dim),
                    b1: vec![0.0; c.mlp_hidden_dim],
                    w2: Mat::zeros(c.mlp_hidden_dim, c.model_dim),
                    b2: vec![0.0; c.model_dim],
                },
            })
            .collect();
        let mut identity = Mat::zeros(c.num_classes, c.model_dim);
        for i in 0..c.num_classes.min(c.model_dim) {
            identity.set(i, i, 1.0);
        }
        Model::new(
            config,
            WeightSet {
                embed_w: Mat::zeros(c.input_dim, c.model_dim),
                embed_b: vec![0.0; c.model_dim],
                layers,
                final_norm: NormParams {
                    gamma: vec![0.0; c.model_dim],
                    beta: vec![0.0; c.model_dim],
                },
                head: HeadParams::Classifier {
                    weight: identity,
                },
            },
        )
        .unwrap()
    }

    #[test]
    fn all_zero_weights_identity_classifier_gives_zero_logits() {
        let config = ModelConfig::tiny(2, 2, 6, 4, 6);
        let model = zero_model(config.clone());
        let tokens = Mat::zeros(config.patch_count, config.input_dim);
        let trace = forward_with_trace(&model, &tokens).unwrap();
        assert!(trace.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_attention_pathway_contributes_nothing() {
        // 1-layer, 1-head model with value/output projections zeroed: the
        // attention sender's contribution is identically zero, so deleting
        // it from the trace sum leaves the final residual unchanged.
        let mut model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(1, 1, 8, 5, 3),
            weight_std: 0.3,
            seed: 11,
            constant_attention: false,
        })
        .unwrap();
        let head = &mut model.weights.layers[0].heads[0];
        head.w_v = Mat::zeros(8, 4);
        head.b_v = vec![0.0; 4];
        head.w_o = Mat::zeros(4, 8);
        head.b_o = vec![0.0; 8];

        let tokens = random_tokens(&model.config, 1);
        let trace = forward_with_trace(&model, &tokens).unwrap();
        let attn = trace.contribution(NodeId::AttnHead { layer: 0, head: 0 }, 1);
        assert!(attn.as_slice().iter().all(|&v| v == 0.0));

        let mut without_attn = trace.contribution(NodeId::Input, 1).clone();
        without_attn.add_assign(trace.contribution(NodeId::Mlp { layer: 0 }, 1));
        assert_eq!(without_attn, *trace.final_residual());
    }

    #[test]
    fn contributions_sum_to_final_residual() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(2, 2, 8, 5, 4),
            weight_std: 0.4,
            seed: 7,
            constant_attention: false,
        })
        .unwrap();
        let tokens = random_tokens(&model.config, 2);
        let trace = forward_with_trace(&model, &tokens).unwrap();

        // Recompute the final residual by explicit summation of cached
        // contributions.
        let mut sum = Mat::zeros(model.config.patch_count, model.config.model_dim);
        for contrib in &trace.sender_contribution {
            sum.add_assign(contrib);
        }
        assert!(crate::linalg::max_rel_err(&sum, trace.final_residual()) <= 1e-6);
    }

    #[test]
    fn layerwise_additivity_holds() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(3, 2, 8, 5, 4),
            weight_std: 0.4,
            seed: 9,
            constant_attention: false,
        })
        .unwrap();
        let tokens = random_tokens(&model.config, 3);
        let trace = forward_with_trace(&model, &tokens).unwrap();
        let h = model.config.heads_per_layer;
        for l in 0..model.config.layers {
            let mut expected = trace.residual_snapshot[l].clone();
            for head in 0..h {
                expected.add_assign(trace.contribution(NodeId::AttnHead { layer: l, head }, h));
            }
            expected.add_assign(trace.contribution(NodeId::Mlp { layer: l }, h));
            assert!(
                crate::linalg::max_rel_err(&expected, &trace.residual_snapshot[l + 1]) <= 1e-6,
                "layer {l} additivity violated"
            );
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(2, 3, 10, 6, 5),
            weight_std: 0.5,
            seed: 21,
            constant_attention: false,
        })
        .unwrap();
        let tokens = random_tokens(&model.config, 4);
        let a = forward_with_trace(&model, &tokens).unwrap();
        let b = forward_with_trace(&model, &tokens).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_classifier_reads_class_row() {
        let config = ModelConfig::tiny(1, 1, 6, 4, 6);
        let model = random_model(&RandomModelSpec {
            config: config.clone(),
            weight_std: 0.3,
            seed: 5,
            constant_attention: false,
        })
        .unwrap();
        let mut model = model;
        let mut identity = Mat::zeros(6, 6);
        for i in 0..6 {
            identity.set(i, i, 1.0);
        }
        model.weights.head = HeadParams::Classifier { weight: identity };

        let mut residual = Mat::zeros(4, 6);
        for j in 0..6 {
            residual.set(0, j, j as f64 - 2.0);
            residual.set(2, j, 9.0); // other rows must not leak into logits
        }
        let logits = logits_from_head(&model, &residual).unwrap();
        assert_eq!(logits, residual.row(0).to_vec());
    }

    #[test]
    fn contrastive_orthonormal_basis_picks_out_class() {
        let mut config = ModelConfig::tiny(1, 1, 4, 3, 4);
        config.head_mode = HeadMode::Contrastive;
        config.embed_dim = 4;
        let mut model = random_model(&RandomModelSpec {
            config,
            weight_std: 0.3,
            seed: 6,
            constant_attention: false,
        })
        .unwrap();
        let mut proj = Mat::zeros(4, 4);
        let mut basis = Mat::zeros(4, 4);
        for i in 0..4 {
            proj.set(i, i, 1.0);
            basis.set(i, i, 1.0);
        }
        model.weights.head = HeadParams::Contrastive {
            proj,
            class_embed: basis,
        };
        let mut residual = Mat::zeros(3, 4);
        residual.set(0, 2, 1.0); // image embedding equals class 2's embedding
        let logits = logits_from_head(&model, &residual).unwrap();
        assert_eq!(logits, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn random_head_matches_naive_multiply() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(1, 1, 8, 4, 5),
            weight_std: 0.5,
            seed: 31,
            constant_attention: false,
        })
        .unwrap();
        let mut rng = SeededRng::new(2);
        let residual = random_mat(&mut rng, 4, 8, 1.0);
        let logits = logits_from_head(&model, &residual).unwrap();
        let HeadParams::Classifier { weight } = &model.weights.head else {
            panic!("classifier expected");
        };
        // Independent naive multiply.
        for c in 0..5 {
            let mut acc = 0.0;
            for j in 0..8 {
                acc += weight.get(c, j) * residual.get(0, j);
            }
            assert!((logits[c] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_and_contrastive_coincide_with_identity_projection() {
        let config = ModelConfig::tiny(1, 2, 6, 4, 3);
        let model = random_model(&RandomModelSpec {
            config: config.clone(),
            weight_std: 0.4,
            seed: 13,
            constant_attention: false,
        })
        .unwrap();
        let HeadParams::Classifier { weight } = model.weights.head.clone() else {
            panic!("classifier expected");
        };

        let mut contrastive = model.clone();
        contrastive.config.head_mode = HeadMode::Contrastive;
        contrastive.config.embed_dim = 6;
        let mut proj = Mat::zeros(6, 6);
        for i in 0..6 {
            proj.set(i, i, 1.0);
        }
        contrastive.weights.head = HeadParams::Contrastive {
            proj,
            class_embed: weight,
        };
        contrastive.validate().unwrap();

        let tokens = random_tokens(&config, 8);
        let a = forward_with_trace(&model, &tokens).unwrap();
        let b = forward_with_trace(&contrastive, &tokens).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(1, 1, 6, 4, 3),
            weight_std: 0.3,
            seed: 1,
            constant_attention: false,
        })
        .unwrap();
        let bad = Mat::zeros(4, 7);
        assert!(matches!(
            forward_with_trace(&model, &bad),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_weights_rejected_naming_component() {
        let mut model = random_model(&RandomModelSpec {
            config: ModelConfig::tiny(1, 1, 6, 4, 3),
            weight_std: 0.3,
            seed: 1,
            constant_attention: false,
        })
        .unwrap();
        model.weights.layers[0].mlp.b2[0] = f64::NAN;
        let err = model.validate().unwrap_err();
        assert!(err.to_string().contains("mlp.b2"));
    }

    #[test]
    fn linear_model_logits_are_affine_in_input() {
        let model = random_linear_model(2, 2, 8, 5, 4, 3).unwrap();
        let a = random_tokens(&model.config, 10);
        let b = random_tokens(&model.config, 11);
        let mid = a.add(&b).scale(0.5);
        let la = forward_with_trace(&model, &a).unwrap().logits;
        let lb = forward_with_trace(&model, &b).unwrap().logits;
        let lm = forward_with_trace(&model, &mid).unwrap().logits;
        for i in 0..la.len() {
            assert!(
                ((la[i] + lb[i]) * 0.5 - lm[i]).abs() < 1e-9,
                "affine midpoint property violated at logit {i}"
            );
        }
    }
}
