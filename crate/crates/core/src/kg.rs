//! Knowledge-enhanced static preferences: relation-aware attentive
//! aggregation over the POI knowledge graph, TransE scoring, average pooling
//! and the hometown → out-of-town alignment head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::KgTriple;
use crate::error::{Error, Result};
use crate::nn::{Linear, LEAKY_SLOPE};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// POI / entity / relation tables plus the attention weight `W ∈ R^{d×2d}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KgEmbeddings {
    pub poi_table: ParamId,
    pub entity_table: ParamId,
    pub relation_table: ParamId,
    pub attention_weight: ParamId,
    pub dim: usize,
}

impl KgEmbeddings {
    /// Tables uniform in `±1/√d`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        num_pois: usize,
        num_entities: usize,
        num_relations: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            poi_table: store.add_uniform("kg.poi", num_pois, dim, bound, rng),
            entity_table: store.add_uniform("kg.entity", num_entities.max(1), dim, bound, rng),
            relation_table: store.add_uniform("kg.relation", num_relations.max(1), dim, bound, rng),
            attention_weight: store.add_uniform("kg.attention", dim, 2 * dim, 1.0 / ((2 * dim) as f64).sqrt(), rng),
            dim,
        }
    }

    /// Parameters touched by the TransE phase.
    pub fn tables(&self) -> [ParamId; 3] {
        [self.poi_table, self.entity_table, self.relation_table]
    }

    /// Knowledge-aware embeddings `v̄ = v + Σ α(e, r, v)·e` for `pois`, one row
    /// per requested POI. `neighbors[p]` lists `(entity, relation)` pairs.
    /// POIs with no neighbors come back as their raw embedding.
    pub fn aggregate(&self, g: &mut Graph, neighbors: &[Vec<(usize, usize)>], pois: &[usize]) -> Var {
        self.aggregate_with_attention(g, neighbors, pois).0
    }

    /// Like [`KgEmbeddings::aggregate`], also returning the attention column
    /// (one row per `(poi, neighbor)` pair in request order) when any exist.
    pub fn aggregate_with_attention(
        &self,
        g: &mut Graph,
        neighbors: &[Vec<(usize, usize)>],
        pois: &[usize],
    ) -> (Var, Option<Var>) {
        let v = g.embed(self.poi_table, pois);
        let mut entities = Vec::new();
        let mut relations = Vec::new();
        let mut owners = Vec::new();
        let mut offsets = vec![0];
        for (row, &p) in pois.iter().enumerate() {
            for &(e, r) in &neighbors[p] {
                entities.push(e);
                relations.push(r);
                owners.push(row);
            }
            offsets.push(entities.len());
        }
        if entities.is_empty() {
            return (v, None);
        }
        let e = g.embed(self.entity_table, &entities);
        let r = g.embed(self.relation_table, &relations);
        let v_owner = g.gather_rows(v, &owners);
        let ev = g.concat_cols(&[e, v_owner]);
        let w = g.param(self.attention_weight);
        let projected = g.matmul_nt(ev, w);
        let rel_score = g.mul(projected, r);
        let score = g.sum_cols(rel_score);
        let score = g.leaky_relu(score, LEAKY_SLOPE);
        let alpha = g.segment_softmax(score, &offsets);
        let messages = g.mul_col(e, alpha);
        let pooled = g.scatter_add_rows(messages, &owners, pois.len());
        (g.add(v, pooled), Some(alpha))
    }

    /// Raw POI embedding rows, used when knowledge aggregation is ablated.
    pub fn raw(&self, g: &mut Graph, pois: &[usize]) -> Var {
        g.embed(self.poi_table, pois)
    }

    /// Σ −ln σ(f(v, r, e′) − f(v, r, e)) with one uniformly drawn corrupted
    /// tail per triple.
    pub fn transe_loss(&self, g: &mut Graph, batch: &[KgTriple], num_entities: usize, neg_seed: u64) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty TransE batch".into()));
        }
        let negatives = corrupt_tails(batch, num_entities, neg_seed)?;
        let heads: Vec<usize> = batch.iter().map(|t| t.head_poi).collect();
        let rels: Vec<usize> = batch.iter().map(|t| t.relation).collect();
        let tails: Vec<usize> = batch.iter().map(|t| t.tail_entity).collect();
        let h = g.embed(self.poi_table, &heads);
        let r = g.embed(self.relation_table, &rels);
        let t = g.embed(self.entity_table, &tails);
        let t_neg = g.embed(self.entity_table, &negatives);
        Ok(transe_margin_loss(g, h, r, t, t_neg))
    }
}

/// Loss on pre-gathered `h, r, t, t′` rows.
pub fn transe_margin_loss(g: &mut Graph, h: Var, r: Var, t: Var, t_neg: Var) -> Var {
    let hr = g.add(h, r);
    let pos = g.sub(hr, t);
    let pos = g.abs(pos);
    let pos = g.sum_cols(pos);
    let neg = g.sub(hr, t_neg);
    let neg = g.abs(neg);
    let neg = g.sum_cols(neg);
    let margin = g.sub(neg, pos);
    let ls = g.log_sigmoid(margin);
    let total = g.sum(ls);
    g.scale(total, -1.0)
}

/// One replacement tail per triple, uniform over entities other than the
/// true tail.
pub fn corrupt_tails(batch: &[KgTriple], num_entities: usize, seed: u64) -> Result<Vec<usize>> {
    if num_entities < 2 {
        return Err(Error::InvalidInput(
            "TransE needs at least two entities to corrupt a tail".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(batch
        .iter()
        .map(|t| {
            let k = rng.random_range(0..num_entities - 1);
            if k >= t.tail_entity {
                k + 1
            } else {
                k
            }
        })
        .collect())
}

/// `‖v + r − e‖₁`.
pub fn transe_score(head: &[f64], relation: &[f64], tail: &[f64]) -> f64 {
    assert!(head.len() == relation.len() && relation.len() == tail.len());
    head.iter()
        .zip(relation)
        .zip(tail)
        .map(|((v, r), e)| (v + r - e).abs())
        .sum()
}

/// Average pooling of row vectors.
pub fn static_aggregate(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot average an empty set of vectors".into()))?;
    let mut out = vec![0.0; first.len()];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Hometown → out-of-town preference head: `SiLU(W_S·ū + b_S)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StaticHead {
    pub linear: Linear,
}

impl StaticHead {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, "static_head", dim, dim, true, rng),
        }
    }

    /// `hometown_pref` is `1×d`. The stored weight is `W_Sᵀ`.
    pub fn infer(&self, g: &mut Graph, hometown_pref: Var) -> Var {
        let z = self.linear.forward(g, hometown_pref);
        g.silu(z)
    }
}

/// `‖inferred − actual‖²₂`.
pub fn static_alignment_loss(g: &mut Graph, inferred: Var, actual: Var) -> Var {
    let diff = g.sub(inferred, actual);
    let sq = g.square(diff);
    g.sum(sq)
}

/// Value-level helper: `SiLU(W·u + b)` with `W` given row-major `d×d`.
pub fn infer_static_preference(hometown_pref: &[f64], weight: &Tensor, bias: &[f64]) -> Vec<f64> {
    let d = hometown_pref.len();
    (0..d)
        .map(|i| {
            let z: f64 = (0..d).map(|j| weight.get(i, j) * hometown_pref[j]).sum::<f64>() + bias[i];
            z * crate::autodiff::sigmoid(z)
        })
        .collect()
}
