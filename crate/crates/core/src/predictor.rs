//! Gated graph predictor: gate the fused connectivity with the mask, run graph
//! attention layers on the gated adjacency, mean-pool, classify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::diffengine::{Bound, ParameterStore, Tape, Tensor, Var};
use crate::encoder;
use crate::error::{Error, Result};
use crate::maskext::{self, MaskNoise};
use crate::signal::DynamicGraphSequence;
use crate::toppe::{self, LaplacianPE};

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";
pub const LEAKY_SLOPE: f64 = 0.2;
/// Added to attention logits outside a node's neighborhood.
const EXCLUDED: f64 = -1e30;

pub fn gat_weight_name(layer: usize) -> String {
    format!("gat{layer}.w")
}

pub fn gat_attention_name(layer: usize) -> String {
    format!("gat{layer}.a")
}

/// `Â = M̃ ⊙ Ā`.
pub fn gate_adjacency(tape: &mut Tape, mask: Var, fused: Var) -> Result<Var> {
    if tape.shape(mask) != tape.shape(fused) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match adjacency {:?}",
            tape.shape(mask),
            tape.shape(fused)
        )));
    }
    tape.mul(mask, fused)
}

pub fn init_gat_layer(store: &mut ParameterStore, layer: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<()> {
    store.init_weight(&gat_weight_name(layer), fan_in, fan_out, rng)?;
    store.init_weight(&gat_attention_name(layer), 2 * fan_out, 1, rng)
}

/// One graph attention layer; returns the updated node states and the attention
/// coefficients.
///
/// Neighborhoods are `{j != i : â_ij > 0} ∪ {i}`, the self-connection carrying gate 1.
pub fn gat_layer(tape: &mut Tape, bound: &Bound, layer: usize, h: Var, gated: Var) -> Result<(Var, Var)> {
    let n = tape.shape(h)[0];
    if tape.shape(gated) != [n, n] {
        return Err(Error::Shape(format!(
            "gated adjacency {:?} does not match {n} nodes",
            tape.shape(gated)
        )));
    }
    let wh = tape.matmul(h, bound.get(&gat_weight_name(layer))?)?;
    let out = tape.shape(wh)[1];
    let a = bound.get(&gat_attention_name(layer))?;
    let a_src = tape.slice(a, 0, 0, out)?;
    let a_dst = tape.slice(a, 0, out, out)?;
    let f_src = tape.matmul(wh, a_src)?;
    let f_dst = tape.matmul(wh, a_dst)?;
    let f_dst = tape.transpose(f_dst)?;
    let e = tape.add(f_src, f_dst)?;
    let e = tape.leaky_relu(e, LEAKY_SLOPE)?;

    let gate_values = tape.value(gated).clone();
    let mut exclusion = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j && !(gate_values.at(&[i, j]) > 0.0) {
                exclusion.set(&[i, j], EXCLUDED);
            }
        }
    }
    let exclusion = tape.constant(exclusion);
    let e = tape.add(e, exclusion)?;
    let alpha = tape.softmax(e, 1)?;

    let eye = tape.constant(Tensor::identity(n));
    let gate = tape.add(gated, eye)?;
    let weights = tape.mul(gate, alpha)?;
    let messages = tape.matmul(weights, wh)?;
    Ok((tape.elu(messages)?, alpha))
}

/// Mean over node rows.
pub fn graph_pool(tape: &mut Tape, h: Var) -> Result<Var> {
    tape.mean(h, 0)
}

/// Linear head on a pooled `[D]` embedding; returns `[C]` logits.
pub fn classify(tape: &mut Tape, bound: &Bound, embedding: Var) -> Result<Var> {
    let d = tape.shape(embedding)[0];
    let row = tape.reshape(embedding, &[1, d])?;
    let logits = tape.matmul(row, bound.get(HEAD_W)?)?;
    let c = tape.shape(logits)[1];
    let logits = tape.reshape(logits, &[c])?;
    tape.add(logits, bound.get(HEAD_B)?)
}

/// `-log p_label + λ · KL`; returns `(total, cross_entropy, kl)`.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    label: usize,
    mask: Var,
    prior: &maskext::SparsityPrior,
) -> Result<(Var, Var, Var)> {
    let c = tape.shape(logits)[0];
    if label >= c {
        return Err(Error::Validation(format!("label {label} outside {c} classes")));
    }
    let log_p = tape.log_softmax(logits, 0)?;
    let picked = tape.take(log_p, &[label])?;
    let ce = tape.sum_all(picked)?;
    let ce = tape.scale(ce, -1.0)?;
    let kl = maskext::kl_sparsity(tape, mask, prior)?;
    let total = if prior.weight == 0.0 {
        ce
    } else {
        let weighted = tape.scale(kl, prior.weight)?;
        tape.add(ce, weighted)?
    };
    Ok((total, ce, kl))
}

#[derive(Clone, Debug)]
pub enum ForwardMode {
    /// Stochastic mask with logistic noise of shape `[N, N]`.
    Train { tau: f64, noise: Tensor },
    /// Deterministic mask at the noise median.
    Eval { tau: f64 },
}

/// Handles into one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub node_embeddings: Var,
    pub fused_adjacency: Var,
    pub mask_logits: Var,
    pub sampled_mask: Var,
    pub mask: Var,
    pub gated: Var,
    pub graph_embedding: Var,
    pub positional: LaplacianPE,
    pub tau: f64,
}

/// Plain values of an evaluation forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub embedding: Vec<f64>,
    pub mask: Tensor,
    pub fused_adjacency: Tensor,
    pub gated: Tensor,
}

impl Prediction {
    pub fn predicted(&self) -> usize {
        argmax(&self.probabilities)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub params: ParameterStore,
}

impl Model {
    pub fn new(config: &ModelConfig, feature_dim: usize, n_classes: usize) -> Result<Model> {
        config.validate()?;
        if feature_dim == 0 || n_classes < 2 {
            return Err(Error::Config(format!(
                "need feature_dim > 0 and at least two classes, got {feature_dim} and {n_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterStore::new();
        encoder::init_params(&mut params, feature_dim, config.attention_dims()?, &mut rng)?;
        maskext::init_params(&mut params, config.node_width(), config.switches.cwise, &mut rng)?;
        let mut width = config.node_width();
        for layer in 0..config.gat_layers {
            init_gat_layer(&mut params, layer, width, config.gat_hidden, &mut rng)?;
            width = config.gat_hidden;
        }
        params.init_weight(HEAD_W, width, n_classes, &mut rng)?;
        params.init_zeros(HEAD_B, &[n_classes])?;
        Ok(Model {
            config: config.clone(),
            feature_dim,
            n_classes,
            params,
        })
    }

    pub fn check_input(&self, seq: &DynamicGraphSequence) -> Result<()> {
        if seq.feature_dim() != self.feature_dim {
            return Err(Error::Shape(format!(
                "model expects node features of width {}, sequence has {}",
                self.feature_dim,
                seq.feature_dim()
            )));
        }
        Ok(())
    }

    /// Runs the whole pipeline on `tape` with already bound parameters.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, seq: &DynamicGraphSequence, mode: &ForwardMode) -> Result<ForwardPass> {
        self.check_input(seq)?;
        let cfg = &self.config;
        let fused = encoder::fuse(tape, bound, &seq.node_features, &seq.adjacency, cfg.attention_dims()?)?;
        let n = seq.n_nodes();

        let d_pe = cfg.effective_d_pe();
        let positional = if d_pe > 0 {
            let l = toppe::normalized_laplacian(tape.value(fused.fused_adjacency))?;
            toppe::laplacian_pe(&l, d_pe, cfg.zero_threshold)?
        } else {
            LaplacianPE {
                coordinates: Tensor::zeros(&[n, 0]),
                eigenvalues: Vec::new(),
            }
        };
        let h0 = toppe::concat_pe(tape, fused.node_embeddings, &positional.coordinates)?;

        let mask_logits = if cfg.switches.cwise {
            maskext::edge_logits(tape, bound, h0)?
        } else {
            maskext::global_logits(tape, bound, n)?
        };
        let (tau, noise) = match mode {
            ForwardMode::Train { tau, noise } => (*tau, MaskNoise::Logistic(noise.clone())),
            ForwardMode::Eval { tau } => (*tau, MaskNoise::Median),
        };
        let sampled_mask = maskext::sample_mask(tape, mask_logits, tau, &noise)?;
        let mask = maskext::symm_zero_diag(tape, sampled_mask)?;
        let gated = gate_adjacency(tape, mask, fused.fused_adjacency)?;

        let mut h = h0;
        for layer in 0..cfg.gat_layers {
            h = gat_layer(tape, bound, layer, h, gated)?.0;
        }
        let graph_embedding = graph_pool(tape, h)?;
        let logits = classify(tape, bound, graph_embedding)?;
        Ok(ForwardPass {
            logits,
            node_embeddings: fused.node_embeddings,
            fused_adjacency: fused.fused_adjacency,
            mask_logits,
            sampled_mask,
            mask,
            gated,
            graph_embedding,
            positional,
            tau,
        })
    }

    /// Deterministic evaluation-mode forward at temperature `tau`.
    pub fn predict_at(&self, seq: &DynamicGraphSequence, tau: f64) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let pass = self.forward(&mut tape, &bound, seq, &ForwardMode::Eval { tau })?;
        let logits = tape.value(pass.logits).data().to_vec();
        Ok(Prediction {
            probabilities: softmax(&logits),
            logits,
            embedding: tape.value(pass.graph_embedding).data().to_vec(),
            mask: tape.value(pass.mask).clone(),
            fused_adjacency: tape.value(pass.fused_adjacency).clone(),
            gated: tape.value(pass.gated).clone(),
        })
    }

    /// Evaluation-mode prediction at the configured evaluation temperature.
    pub fn predict(&self, seq: &DynamicGraphSequence) -> Result<Prediction> {
        self.predict_at(seq, self.config.eval_tau)
    }
}
