//! Node-guided stochastic edge mask: pair logits from endpoint embeddings,
//! binary-concrete relaxation, symmetrization, and a KL pull toward a Bernoulli
//! retention prior.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::diffengine::{Bound, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::streams;

pub const W1: &str = "mask.w1";
pub const B1: &str = "mask.b1";
pub const W2: &str = "mask.w2";
pub const B2: &str = "mask.b2";
/// Replaces the pair MLP when the connectivity-wise extractor is ablated.
pub const GLOBAL_BIAS: &str = "mask.global_bias";

/// Keeps mask entries away from exact 0 and 1 before taking logarithms.
const LOG_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityPrior {
    /// Target retention rate r.
    pub retention: f64,
    pub epsilon: f64,
    /// Weight of the KL term in the total loss.
    pub weight: f64,
}

impl SparsityPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.retention > 0.0 && self.retention < 1.0) {
            return Err(Error::Config(format!("retention {} must lie in (0, 1)", self.retention)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-6) {
            return Err(Error::Config(format!("epsilon {} must lie in (0, 1e-6]", self.epsilon)));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::Config("KL weight must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub min: f64,
    /// Multiplicative decay per epoch, in (0, 1].
    pub decay: f64,
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.start >= self.min) {
            return Err(Error::Config(format!(
                "temperatures need start {} >= min {} > 0",
                self.start, self.min
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} must lie in (0, 1]", self.decay)));
        }
        Ok(())
    }

    /// `max(min, start * decay^epoch)`.
    pub fn at(&self, epoch: usize) -> f64 {
        (self.start * self.decay.powi(epoch.min(i32::MAX as usize) as i32)).max(self.min)
    }
}

pub fn anneal(schedule: &TemperatureSchedule, epoch: usize) -> f64 {
    schedule.at(epoch)
}

/// Pair MLP `linear(2D' -> D') -> ELU -> linear(D' -> 1)`, shared across pairs.
pub fn init_params(store: &mut ParameterStore, node_width: usize, cwise: bool, rng: &mut impl Rng) -> Result<()> {
    if !cwise {
        return store.init_zeros(GLOBAL_BIAS, &[1]);
    }
    store.init_weight(W1, 2 * node_width, node_width, rng)?;
    store.init_zeros(B1, &[node_width])?;
    store.init_weight(W2, node_width, 1, rng)?;
    store.init_zeros(B2, &[1])
}

/// `S[i, j] = MLP([h_i ⊕ h_j])` for every ordered pair.
///
/// The first layer on a concatenation splits into `h_i W1_top + h_j W1_bottom`, so
/// the `N²` hidden activations come from two `N x D'` products and a broadcast sum.
pub fn edge_logits(tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
    let (n, width) = match tape.shape(h) {
        [n, w] => (*n, *w),
        s => return Err(Error::Shape(format!("node embeddings must be [N, D'], got {s:?}"))),
    };
    let w1 = bound.get(W1)?;
    if tape.shape(w1)[0] != 2 * width {
        return Err(Error::Shape(format!(
            "mask MLP expects width {}, embeddings have {width}",
            tape.shape(w1)[0] / 2
        )));
    }
    let hidden = tape.shape(w1)[1];
    let top = tape.slice(w1, 0, 0, width)?;
    let bottom = tape.slice(w1, 0, width, width)?;
    let from_i = tape.matmul(h, top)?;
    let from_j = tape.matmul(h, bottom)?;
    let from_i = tape.reshape(from_i, &[n, 1, hidden])?;
    let from_j = tape.reshape(from_j, &[1, n, hidden])?;
    let pre = tape.add(from_i, from_j)?;
    let pre = tape.add(pre, bound.get(B1)?)?;
    let act = tape.elu(pre)?;
    let s = tape.matmul(act, bound.get(W2)?)?;
    let s = tape.add(s, bound.get(B2)?)?;
    tape.reshape(s, &[n, n])
}

/// Ablated extractor: every pair shares one learned logit.
pub fn global_logits(tape: &mut Tape, bound: &Bound, n: usize) -> Result<Var> {
    let b = bound.get(GLOBAL_BIAS)?;
    tape.broadcast(b, &[n, n])
}

/// Noise for [`sample_mask`].
#[derive(Clone, Debug)]
pub enum MaskNoise {
    /// Logistic(0, 1) draws, one per entry.
    Logistic(Tensor),
    /// Deterministic evaluation: the noise median, 0.
    Median,
}

/// Uniform on the open interval (0, 1).
fn open_uniform(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// `log(u) - log(1 - u)` for `u ~ U(0, 1)`.
pub fn logistic_noise(shape: &[usize], rng: &mut impl RngCore) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u = open_uniform(rng);
            u.ln() - (-u).ln_1p()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Training noise for one forward pass, keyed by `(seed, epoch, sample)`; entry
/// `k = i*n + j` is the `k`-th draw of that stream.
pub fn keyed_noise(seed: u64, epoch: usize, sample: usize, n: usize) -> Tensor {
    let mut rng = streams::stream(seed, &[streams::tag::MASK, epoch as u64, sample as u64]);
    logistic_noise(&[n, n], &mut rng)
}

/// `M = sigmoid((S + G) / tau)`.
pub fn sample_mask(tape: &mut Tape, logits: Var, tau: f64, noise: &MaskNoise) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let shifted = match noise {
        MaskNoise::Median => logits,
        MaskNoise::Logistic(g) => {
            if g.shape() != tape.shape(logits) {
                return Err(Error::Shape("noise does not match logits".into()));
            }
            let g = tape.constant(g.clone());
            tape.add(logits, g)?
        }
    };
    let scaled = tape.scale(shifted, 1.0 / tau)?;
    tape.sigmoid(scaled)
}

fn off_diagonal(n: usize) -> Tensor {
    let mut t = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        t.set(&[i, i], 0.0);
    }
    t
}

/// Flat indices of the off-diagonal entries of an `n x n` matrix.
pub fn off_diagonal_indices(n: usize) -> Vec<usize> {
    (0..n * n).filter(|k| k / n != k % n).collect()
}

/// `(M + Mᵀ) / 2` with the diagonal set to exactly 0.
pub fn symm_zero_diag(tape: &mut Tape, m: Var) -> Result<Var> {
    let n = match tape.shape(m) {
        [a, b] if a == b => *a,
        s => return Err(Error::Shape(format!("mask must be square, got {s:?}"))),
    };
    let mt = tape.transpose(m)?;
    let sum = tape.add(m, mt)?;
    let half = tape.scale(sum, 0.5)?;
    let keep = tape.constant(off_diagonal(n));
    tape.mul(half, keep)
}

/// Mean over off-diagonal entries of `m log(m/(r+ε)) + (1-m) log((1-m)/(1-r+ε))`.
pub fn kl_sparsity(tape: &mut Tape, m_tilde: Var, prior: &SparsityPrior) -> Result<Var> {
    let n = tape.shape(m_tilde)[0];
    let m = tape.take(m_tilde, &off_diagonal_indices(n))?;
    let m = clamp_open_unit(tape, m)?;
    let one_minus = tape.scale(m, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let log_m = tape.log(m)?;
    let log_1m = tape.log(one_minus)?;
    let a = tape.add_scalar(log_m, -(prior.retention + prior.epsilon).ln())?;
    let b = tape.add_scalar(log_1m, -(1.0 - prior.retention + prior.epsilon).ln())?;
    let ta = tape.mul(m, a)?;
    let tb = tape.mul(one_minus, b)?;
    let terms = tape.add(ta, tb)?;
    tape.mean_all(terms)
}

/// Moves entries within `LOG_GUARD` of 0 or 1 inward by a constant offset; the
/// gradient passes through unchanged.
fn clamp_open_unit(tape: &mut Tape, m: Var) -> Result<Var> {
    let shift: Vec<f64> = tape
        .value(m)
        .data()
        .iter()
        .map(|&v| v.clamp(LOG_GUARD, 1.0 - LOG_GUARD) - v)
        .collect();
    if shift.iter().all(|&s| s == 0.0) {
        return Ok(m);
    }
    let shift = tape.constant(Tensor::vector(shift));
    tape.add(m, shift)
}

/// Mean of the off-diagonal entries of a matrix value.
pub fn mean_off_diagonal(m: &Tensor) -> f64 {
    let n = m.shape()[0];
    let idx = off_diagonal_indices(n);
    idx.iter().map(|&k| m.data()[k]).sum::<f64>() / idx.len().max(1) as f64
}

/// One ranked edge of an explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSalience {
    pub i: usize,
    pub j: usize,
    pub channel_i: String,
    pub channel_j: String,
    pub mask: f64,
    pub fused_weight: f64,
    /// Gated weight `m̃_ij · ā_ij`.
    pub salience: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectExplanation {
    pub subject_id: String,
    pub predicted: usize,
    pub label: usize,
    pub edges: Vec<EdgeSalience>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationExport {
    pub subjects: Vec<SubjectExplanation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_at_k: Option<f64>,
}

/// Unordered pairs ranked by salience, descending, ties by `(i, j)` ascending.
/// Edges with salience below `threshold` are dropped.
pub fn rank_edges(mask: &Tensor, fused: &Tensor, channels: &[String], threshold: f64) -> Result<Vec<EdgeSalience>> {
    let n = mask.shape()[0];
    if mask.shape() != [n, n] || fused.shape() != [n, n] || channels.len() != n {
        return Err(Error::Shape(format!(
            "mask {:?}, adjacency {:?} and {} channel names disagree",
            mask.shape(),
            fused.shape(),
            channels.len()
        )));
    }
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (m, a) = (mask.at(&[i, j]), fused.at(&[i, j]));
            let salience = m * a;
            if salience >= threshold {
                edges.push(EdgeSalience {
                    i,
                    j,
                    channel_i: channels[i].clone(),
                    channel_j: channels[j].clone(),
                    mask: m,
                    fused_weight: a,
                    salience,
                });
            }
        }
    }
    edges.sort_by(|x, y| y.salience.total_cmp(&x.salience).then((x.i, x.j).cmp(&(y.i, y.j))));
    Ok(edges)
}

/// `|top-k ∩ planted| / k` for edges already in ranked order.
pub fn precision_at_k(ranked: &[EdgeSalience], planted: &[(usize, usize)], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|e| planted.iter().any(|&(a, b)| (a.min(b), a.max(b)) == (e.i, e.j)))
        .count();
    Ok(hits as f64 / k as f64)
}

/// Undirected DOT graph of all channels with the `top_k` edges drawn, pen width
/// proportional to salience.
pub fn to_dot(subject: &SubjectExplanation, channels: &[String], top_k: usize) -> String {
    let mut out = format!("graph \"{}\" {{\n", subject.subject_id);
    for (k, name) in channels.iter().enumerate() {
        out.push_str(&format!("  n{k} [label=\"{name}\"];\n"));
    }
    let shown = &subject.edges[..top_k.min(subject.edges.len())];
    let max = shown.iter().map(|e| e.salience).fold(0.0, f64::max);
    for e in shown {
        let width = if max > 0.0 { 5.0 * e.salience / max } else { 0.0 };
        out.push_str(&format!(
            "  n{} -- n{} [penwidth={:.4}, weight={:.6}];\n",
            e.i, e.j, width, e.salience
        ));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn prior(r: f64) -> SparsityPrior {
        SparsityPrior {
            retention: r,
            epsilon: 1e-8,
            weight: 1.0,
        }
    }

    #[test]
    fn symmetrization_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[0.2, 0.4], &[0.8, 0.6]]));
        let y = symm_zero_diag(&mut tape, x).unwrap();
        let y = tape.value(y).clone();
        assert_eq!(y.at(&[0, 0]), 0.0);
        assert_eq!(y.at(&[1, 1]), 0.0);
        assert!((y.at(&[0, 1]) - 0.6).abs() < 1e-15 && (y.at(&[1, 0]) - 0.6).abs() < 1e-15);

        let fixed = m(&[&[0.0, 0.3], &[0.3, 0.0]]);
        let x = tape.constant(fixed.clone());
        let y = symm_zero_diag(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &fixed);

        let x = tape.constant(Tensor::identity(3));
        let y = symm_zero_diag(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(&[3, 3]));

        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(symm_zero_diag(&mut tape, x), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::new();
        let at_prior = tape.constant(Tensor::full(&[3, 3], 0.15));
        let v = kl_sparsity(&mut tape, at_prior, &prior(0.15)).unwrap();
        assert!(tape.value(v).item().unwrap().abs() < 1e-7);

        let half = tape.constant(Tensor::full(&[3, 3], 0.5));
        let v = kl_sparsity(&mut tape, half, &prior(0.5)).unwrap();
        assert!(tape.value(v).item().unwrap().abs() < 1e-7);

        let x = tape.constant(m(&[&[0.0, 0.9], &[0.9, 0.0]]));
        let v = kl_sparsity(&mut tape, x, &prior(0.3)).unwrap();
        // 0.9 ln(0.9/0.3) + 0.1 ln(0.1/0.7)
        let expected = 0.9 * 3f64.ln() + 0.1 * (1.0f64 / 7.0).ln();
        assert!((tape.value(v).item().unwrap() - expected).abs() < 1e-6);
        assert!((tape.value(v).item().unwrap() - 0.79418).abs() < 1e-4);
    }

    #[test]
    fn kl_survives_saturated_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(&[&[0.0, 1.0], &[0.0, 0.0]]), true);
        let v = kl_sparsity(&mut tape, x, &prior(0.15)).unwrap();
        assert!(tape.value(v).item().unwrap().is_finite());
        assert!(tape.backward(v).is_ok());
    }

    #[test]
    fn mask_samples() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[2, 2]));
        let g = MaskNoise::Logistic(Tensor::zeros(&[2, 2]));
        for tau in [0.1, 1.0, 7.0] {
            let mask = sample_mask(&mut tape, s, tau, &g).unwrap();
            assert!(tape.value(mask).data().iter().all(|&v| v == 0.5));
        }
        let s = tape.constant(Tensor::full(&[1, 1], 20.0));
        for g in [-10.0, 0.0, 10.0] {
            let noise = MaskNoise::Logistic(Tensor::full(&[1, 1], g));
            let mask = sample_mask(&mut tape, s, 1.0, &noise).unwrap();
            assert!(tape.value(mask).data()[0] > 0.9999);
        }
        assert!(matches!(sample_mask(&mut tape, s, 0.0, &MaskNoise::Median), Err(Error::Config(_))));
    }

    #[test]
    fn logistic_noise_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = logistic_noise(&[100_000], &mut rng);
        let mean = g.data().iter().sum::<f64>() / 1e5;
        // Logistic(0,1) has variance pi^2/3, so the standard error is about 0.0057
        assert!(mean.abs() < 0.03, "{mean}");
        assert!(g.is_finite());
    }

    #[test]
    fn schedule_examples() {
        let s = TemperatureSchedule {
            start: 5.0,
            min: 0.5,
            decay: 0.9,
        };
        assert_eq!(anneal(&s, 0), 5.0);
        assert_eq!(anneal(&s, 30), 0.5);
        assert!((anneal(&s, 2) - 4.05).abs() < 1e-12);
        let flat = TemperatureSchedule { decay: 1.0, ..s };
        assert_eq!(anneal(&flat, 1000), 5.0);
    }

    #[test]
    fn prior_validation() {
        assert!(prior(0.0).validate().is_err());
        assert!(prior(1.0).validate().is_err());
        assert!(SparsityPrior { epsilon: 1e-3, ..prior(0.2) }.validate().is_err());
        assert!(prior(0.2).validate().is_ok());
    }

    #[test]
    fn ranking_orders_by_salience_then_index() {
        let mask = m(&[&[0.0, 0.5, 0.5], &[0.5, 0.0, 1.0], &[0.5, 1.0, 0.0]]);
        let fused = m(&[&[0.0, 0.4, 0.4], &[0.4, 0.0, 0.1], &[0.4, 0.1, 0.0]]);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let ranked = rank_edges(&mask, &fused, &names, 0.0).unwrap();
        let order: Vec<(usize, usize)> = ranked.iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(order, vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(precision_at_k(&ranked, &[(2, 0)], 2).unwrap(), 0.5);
        assert!(precision_at_k(&ranked, &[], 0).is_err());
        let subject = SubjectExplanation {
            subject_id: "x".into(),
            predicted: 0,
            label: 0,
            edges: ranked,
        };
        let dot = to_dot(&subject, &names, 2);
        assert!(dot.starts_with("graph ") && dot.matches(" -- ").count() == 2);
    }

    #[test]
    fn bias_only_network_gives_constant_logits() {
        let mut store = ParameterStore::new();
        store.init_zeros(W1, &[6, 3]).unwrap();
        store.init_zeros(B1, &[3]).unwrap();
        store.init_zeros(W2, &[3, 1]).unwrap();
        store.insert(B2, Tensor::vector(vec![-0.7])).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h = tape.constant(Tensor::full(&[4, 3], 0.3));
        let s = edge_logits(&mut tape, &bound, h).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == -0.7));
    }
}
