//! Dual-trajectory temporal encoder: one multi-head self-attention block, shared by
//! the node stream (spectral trajectories per channel) and the edge stream
//! (correlation trajectories per channel pair).

use rand::Rng;

use crate::diffengine::{Bound, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const NODE_IN_W: &str = "enc.node_in.w";
pub const NODE_IN_B: &str = "enc.node_in.b";
pub const EDGE_IN_W: &str = "enc.edge_in.w";
pub const EDGE_IN_B: &str = "enc.edge_in.b";
pub const EDGE_OUT_W: &str = "enc.edge_out.w";
pub const EDGE_OUT_B: &str = "enc.edge_out.b";

/// Shared attention projections (all heads stacked column-wise).
pub const ATTN_Q: &str = "enc.attn.q";
pub const ATTN_K: &str = "enc.attn.k";
pub const ATTN_V: &str = "enc.attn.v";
pub const ATTN_O: &str = "enc.attn.o";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub model_dim: usize,
    pub heads: usize,
}

impl AttentionDims {
    pub fn new(model_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionDims { model_dim, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

pub fn init_params(
    store: &mut ParameterStore,
    feature_dim: usize,
    dims: AttentionDims,
    rng: &mut impl Rng,
) -> Result<()> {
    let d = dims.model_dim;
    store.init_weight(NODE_IN_W, feature_dim, d, rng)?;
    store.init_zeros(NODE_IN_B, &[d])?;
    store.init_weight(EDGE_IN_W, 1, d, rng)?;
    store.init_zeros(EDGE_IN_B, &[d])?;
    for name in [ATTN_Q, ATTN_K, ATTN_V, ATTN_O] {
        store.init_weight(name, d, d, rng)?;
    }
    store.init_weight(EDGE_OUT_W, d, 1, rng)?;
    store.init_zeros(EDGE_OUT_B, &[1])?;
    if edge_gain(store, d)? < 0.0 {
        let flipped = store.get(EDGE_OUT_W)?.map(|w| -w);
        store.set(EDGE_OUT_W, flipped)?;
    }
    Ok(())
}

/// Derivative of the edge readout score with respect to a constant trajectory
/// level. Initialization makes it positive, so fused weights start out increasing
/// with correlation.
fn edge_gain(store: &ParameterStore, d: usize) -> Result<f64> {
    let w_in = store.get(EDGE_IN_W)?.data();
    let v = store.get(ATTN_V)?.data();
    let o = store.get(ATTN_O)?.data();
    let w_out = store.get(EDGE_OUT_W)?.data();
    let wv: Vec<f64> = (0..d).map(|k| (0..d).map(|m| w_in[m] * v[m * d + k]).sum()).collect();
    let ow: Vec<f64> = (0..d).map(|k| (0..d).map(|m| o[k * d + m] * w_out[m]).sum()).collect();
    Ok(wv.iter().zip(&ow).map(|(a, b)| a * b).sum())
}

/// `[B, T, D]` to `[B*H, T, D/H]`.
fn split_heads(tape: &mut Tape, x: Var, dims: AttentionDims) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t) = (s[0], s[1]);
    let x = tape.reshape(x, &[b, t, dims.heads, dims.head_dim()])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * dims.heads, t, dims.head_dim()])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, dims: AttentionDims) -> Result<Var> {
    let t = tape.shape(x)[1];
    let x = tape.reshape(x, &[batch, dims.heads, t, dims.head_dim()])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch, t, dims.model_dim])
}

/// Scaled dot-product attention over already projected `[B, Tq, D]` queries and
/// `[B, Tk, D]` keys/values, followed by the output projection.
/// Returns the output and the `[B*H, Tq, Tk]` attention weights.
pub fn attend(
    tape: &mut Tape,
    bound: &Bound,
    q: Var,
    k: Var,
    v: Var,
    dims: AttentionDims,
) -> Result<(Var, Var)> {
    let batch = tape.shape(q)[0];
    let qh = split_heads(tape, q, dims)?;
    let kh = split_heads(tape, k, dims)?;
    let vh = split_heads(tape, v, dims)?;
    let kt = tape.transpose(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, 1.0 / (dims.head_dim() as f64).sqrt())?;
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(weights, vh)?;
    let ctx = merge_heads(tape, ctx, batch, dims)?;
    let out = tape.matmul(ctx, bound.get(ATTN_O)?)?;
    Ok((out, weights))
}

/// Multi-head attention of `queries` over `keys` (both `[B, T, D]` token sequences).
pub fn mha(
    tape: &mut Tape,
    bound: &Bound,
    queries: Var,
    keys: Var,
    dims: AttentionDims,
) -> Result<(Var, Var)> {
    for x in [queries, keys] {
        if tape.shape(x).len() != 3 || tape.shape(x)[2] != dims.model_dim {
            return Err(Error::Shape(format!(
                "attention tokens must be [B, T, {}], got {:?}",
                dims.model_dim,
                tape.shape(x)
            )));
        }
    }
    let q = tape.matmul(queries, bound.get(ATTN_Q)?)?;
    let k = tape.matmul(keys, bound.get(ATTN_K)?)?;
    let v = tape.matmul(keys, bound.get(ATTN_V)?)?;
    attend(tape, bound, q, k, v, dims)
}

/// Bidirectional self-attention along the time axis of `[B, T, D]` tokens.
pub fn mha_time(tape: &mut Tape, bound: &Bound, tokens: Var, dims: AttentionDims) -> Result<Var> {
    if tape.shape(tokens).get(1).copied().unwrap_or(0) == 0 {
        return Err(Error::Shape("attention over zero time steps".into()));
    }
    Ok(mha(tape, bound, tokens, tokens, dims)?.0)
}

/// `[T, N, d]` node trajectories to `H̄` `[N, D]`: per channel, project, attend over
/// time, then average the time tokens.
pub fn encode_nodes(tape: &mut Tape, bound: &Bound, x: Var, dims: AttentionDims) -> Result<Var> {
    let per_channel = tape.permute(x, &[1, 0, 2])?;
    let tokens = tape.matmul(per_channel, bound.get(NODE_IN_W)?)?;
    let tokens = tape.add(tokens, bound.get(NODE_IN_B)?)?;
    let attended = mha_time(tape, bound, tokens, dims)?;
    tape.mean(attended, 1)
}

/// Unordered channel pairs `(i, j)`, `i < j`, in row-major order.
pub fn pair_list(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// `[P, T, 1]` correlation trajectories of every unordered pair.
pub fn pair_trajectories(adjacency: &Tensor) -> Result<Tensor> {
    let (t, n) = match adjacency.shape() {
        [t, n, m] if n == m => (*t, *n),
        s => return Err(Error::Shape(format!("adjacency must be [T, N, N], got {s:?}"))),
    };
    let pairs = pair_list(n);
    let mut data = Vec::with_capacity(pairs.len() * t);
    for &(i, j) in &pairs {
        data.extend((0..t).map(|w| adjacency.at(&[w, i, j])));
    }
    Tensor::new(vec![pairs.len(), t, 1], data)
}

/// Constant `[N*N, P]` matrix writing pair `p = (i, j)` to both `(i, j)` and `(j, i)`.
fn pair_scatter(n: usize) -> Tensor {
    let pairs = pair_list(n);
    let mut s = Tensor::zeros(&[n * n, pairs.len()]);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        s.set(&[i * n + j, p], 1.0);
        s.set(&[j * n + i, p], 1.0);
    }
    s
}

/// `[T, N, N]` adjacency trajectories to `Ā` `[N, N]`.
///
/// Each pair's scalar trajectory is lifted to `D` dimensions, attended with the
/// shared block, and the token at the final time index is read out through a
/// logistic head; the result is written symmetrically with a zero diagonal.
///
/// Tokens are affine in a scalar, `x_t = a_t w + b`, so keys are `a_t (wK) + bK`.
/// The `bK` part adds the same score to every key and cancels in the softmax,
/// leaving per head `softmax_t(a_t · s)` with `s = q_h · (wK)_h / √d_k`, and the
/// context `(Σ_t α_t a_t) (wV)_h + (bV)_h`. Only the final query is formed.
pub fn encode_edges(tape: &mut Tape, bound: &Bound, adjacency: &Tensor, dims: AttentionDims) -> Result<Var> {
    let n = adjacency.shape()[1];
    let t = adjacency.shape()[0];
    if n < 2 {
        return Err(Error::Shape("edge stream needs at least two channels".into()));
    }
    let (d, h, dk) = (dims.model_dim, dims.heads, dims.head_dim());
    let traj = pair_trajectories(adjacency)?;
    let p = traj.shape()[0];
    let traj = tape.constant(traj.reshape(&[p, t])?);
    let last = tape.slice(traj, 1, t - 1, 1)?;

    let w_in = bound.get(EDGE_IN_W)?;
    let b_in = bound.get(EDGE_IN_B)?;
    let b_row = tape.reshape(b_in, &[1, d])?;
    let wq = tape.matmul(w_in, bound.get(ATTN_Q)?)?;
    let bq = tape.matmul(b_row, bound.get(ATTN_Q)?)?;
    let wk = tape.matmul(w_in, bound.get(ATTN_K)?)?;
    let wv = tape.matmul(w_in, bound.get(ATTN_V)?)?;
    let bv = tape.matmul(b_row, bound.get(ATTN_V)?)?;

    // final-token query, [P, D]
    let q = tape.matmul(last, wq)?;
    let q = tape.add(q, bq)?;
    let qk = tape.mul(q, wk)?;
    let qk = tape.reshape(qk, &[p, h, dk])?;
    let slope = tape.sum(qk, 2)?;
    let slope = tape.scale(slope, 1.0 / (dk as f64).sqrt())?;

    let slope = tape.reshape(slope, &[p, h, 1])?;
    let keys = tape.reshape(traj, &[p, 1, t])?;
    let scores = tape.mul(slope, keys)?;
    let weights = tape.softmax(scores, 2)?;
    let pooled = tape.mul(weights, keys)?;
    let pooled = tape.sum(pooled, 2)?;

    let pooled = tape.reshape(pooled, &[p, h, 1])?;
    let wv = tape.reshape(wv, &[1, h, dk])?;
    let bv = tape.reshape(bv, &[1, h, dk])?;
    let ctx = tape.mul(pooled, wv)?;
    let ctx = tape.add(ctx, bv)?;
    let ctx = tape.reshape(ctx, &[p, d])?;
    let final_token = tape.matmul(ctx, bound.get(ATTN_O)?)?;

    let score = tape.matmul(final_token, bound.get(EDGE_OUT_W)?)?;
    let score = tape.add(score, bound.get(EDGE_OUT_B)?)?;
    let weight = tape.sigmoid(score)?;
    let scatter = tape.constant(pair_scatter(n));
    let flat = tape.matmul(scatter, weight)?;
    tape.reshape(flat, &[n, n])
}

/// Node embeddings and fused connectivity for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct FusedRepresentation {
    pub node_embeddings: Var,
    pub fused_adjacency: Var,
}

pub fn fuse(
    tape: &mut Tape,
    bound: &Bound,
    node_features: &Tensor,
    adjacency: &Tensor,
    dims: AttentionDims,
) -> Result<FusedRepresentation> {
    if node_features.rank() != 3 || node_features.shape()[..2] != adjacency.shape()[..2] {
        return Err(Error::Shape(format!(
            "node features {:?} do not match adjacency {:?}",
            node_features.shape(),
            adjacency.shape()
        )));
    }
    let x = tape.constant(node_features.clone());
    let node_embeddings = encode_nodes(tape, bound, x, dims)?;
    let fused_adjacency = encode_edges(tape, bound, adjacency, dims)?;
    Ok(FusedRepresentation {
        node_embeddings,
        fused_adjacency,
    })
}
