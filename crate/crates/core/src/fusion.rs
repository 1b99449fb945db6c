//! Query encoding, static/dynamic fusion scoring, the cross-entropy
//! objective and top-p trip decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerEncoder, LEAKY_SLOPE};
use crate::params::{ParamId, ParamStore};

/// Position-aware query representation: endpoints and mask slots, each
/// concatenated with a learned positional embedding, then `Trans_Q`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryEncoder {
    pub positional: ParamId,
    pub mask_token: ParamId,
    pub transformer: TransformerEncoder,
    pub max_len: usize,
}

impl QueryEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dim: usize,
        max_len: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            positional: store.add_uniform("query.positional", max_len, dim, bound, rng),
            mask_token: store.add_uniform("query.mask", 1, dim, bound, rng),
            transformer: TransformerEncoder::new(store, "query.encoder", 2 * dim, layers, heads, 4 * dim, None, rng),
            max_len,
        }
    }

    /// `origin` and `destination` are `1×d` knowledge-aware embeddings; an
    /// absent endpoint takes the mask vector like the intermediate slots.
    /// Returns `stops × 2d`.
    pub fn encode(&self, g: &mut Graph, origin: Option<Var>, destination: Option<Var>, stops: usize) -> Result<Var> {
        if stops < 2 {
            return Err(Error::InvalidInput(format!(
                "a trip needs at least 2 stops, got {stops}"
            )));
        }
        if stops > self.max_len {
            return Err(Error::InvalidInput(format!(
                "trip length {stops} exceeds the query encoder's maximum {}",
                self.max_len
            )));
        }
        let mask = g.param(self.mask_token);
        let mut rows = vec![origin.unwrap_or(mask)];
        if stops > 2 {
            rows.push(g.repeat_rows(mask, stops - 2));
        }
        rows.push(destination.unwrap_or(mask));
        let slots = g.concat_rows(&rows);
        let idx: Vec<usize> = (0..stops).collect();
        let pos = g.embed(self.positional, &idx);
        let seq = g.concat_cols(&[slots, pos]);
        Ok(self.transformer.forward(g, seq))
    }
}

/// `h = LeakyReLU(W_R·[q ‖ P̄ ‖ p̃] + b_R)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionHead {
    pub linear: Linear,
}

impl FusionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, "fusion", 4 * dim, dim, true, rng),
        }
    }

    /// `query: N×2d`, `static_pref: 1×d`, `dynamic: N×d`; returns `N×d`.
    pub fn hidden(&self, g: &mut Graph, query: Var, static_pref: Var, dynamic: Var) -> Var {
        let n = g.shape(query).0;
        let stat = g.repeat_rows(static_pref, n);
        let x = g.concat_cols(&[query, stat, dynamic]);
        let z = self.linear.forward(g, x);
        g.leaky_relu(z, LEAKY_SLOPE)
    }

    /// Logits `N × K` against the region's knowledge-aware POI rows `K × d`.
    pub fn score(&self, g: &mut Graph, hidden: Var, region_pois: Var) -> Result<Var> {
        if g.shape(region_pois).0 == 0 {
            return Err(Error::InvalidInput("region has no POIs to score".into()));
        }
        Ok(g.matmul_nt(hidden, region_pois))
    }
}

/// `Σₙ −ln softmax(zₙ)[targetₙ]`, unnormalized. Callers divide by `Σ N_u`.
pub fn cross_entropy_sum(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let (n, k) = g.shape(logits);
    if targets.len() != n {
        return Err(Error::InvalidInput("one target per logit row required".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidInput(format!("target {bad} outside {k} candidates")));
    }
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick_per_row(logp, targets);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

/// `β₁·L_S + β₂·L_D + β₃·L_R`.
pub fn total_loss(l_s: f64, l_d: f64, l_r: f64, betas: [f64; 3]) -> f64 {
    betas[0] * l_s + betas[1] * l_d + betas[2] * l_r
}

/// `(n − 1)/(N − 1)` for `n = 1..N`.
pub fn surrogate_time_grid(stops: usize) -> Result<Vec<f64>> {
    if stops < 2 {
        return Err(Error::InvalidInput(format!("surrogate grid needs N ≥ 2, got {stops}")));
    }
    Ok((0..stops).map(|i| i as f64 / (stops - 1) as f64).collect())
}

/// The nucleus kept by top-p: `(index, probability before renormalization)`
/// in descending probability order. `masked[i]` excludes candidate `i`.
pub fn top_p_candidates(logits: &[f64], p: f64, masked: &[bool]) -> Result<Vec<(usize, f64)>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("top-p must lie in (0, 1], got {p}")));
    }
    if masked.len() != logits.len() {
        return Err(Error::InvalidInput("mask length must match logits".into()));
    }
    let open: Vec<usize> = (0..logits.len()).filter(|&i| !masked[i]).collect();
    if open.is_empty() {
        return Err(Error::InvalidInput("every candidate is masked".into()));
    }
    let max = open.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = open.iter().map(|&i| (logits[i] - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut probs: Vec<(usize, f64)> = open.iter().zip(&weights).map(|(&i, w)| (i, w / z)).collect();
    // Stable sort keeps lower indices first among ties.
    probs.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (j, &(_, pr)) in probs.iter().enumerate() {
        cum += pr;
        if cum >= p {
            keep = j + 1;
            break;
        }
    }
    probs.truncate(keep);
    Ok(probs)
}

/// Samples one index from the renormalized nucleus.
pub fn top_p_sample<R: Rng>(logits: &[f64], p: f64, masked: &[bool], rng: &mut R) -> Result<usize> {
    let kept = top_p_candidates(logits, p, masked)?;
    let mass: f64 = kept.iter().map(|(_, pr)| pr).sum();
    let mut u = rng.random::<f64>() * mass;
    for &(i, pr) in &kept {
        if u < pr {
            return Ok(i);
        }
        u -= pr;
    }
    Ok(kept.last().expect("non-empty nucleus").0)
}
