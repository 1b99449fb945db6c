//! The full recommender: knowledge-aware static preferences, latent ODE
//! dynamic preferences and the fusion head, plus per-record losses, batch
//! gradients and trip generation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{CheckIn, Dataset, Query, TravelRecord};
use crate::error::{Error, Result};
use crate::fusion::{cross_entropy_sum, surrogate_time_grid, top_p_sample, FusionHead, QueryEncoder};
use crate::kg::{static_alignment_loss, KgEmbeddings, StaticHead};
use crate::ode::{build_grid, dynamic_loss, BehaviorEmbedder, DynNetworks, DynamicConfig, StepRecord};
use crate::par::Execution;
use crate::params::{Gradients, ParamStore};
use crate::rng::{standard_normal, stream_rng, Stream};
use crate::tensor::Tensor;

/// Which components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    /// No knowledge aggregation, static preference or TransE.
    #[serde(rename = "wo_KS", alias = "wo_ks")]
    WoKs,
    /// No dynamic loss; fusion sees zero dynamic states.
    #[serde(rename = "wo_OD", alias = "wo_od")]
    WoOd,
    /// Behavior embeddings omit the location term.
    #[serde(rename = "wo_SI", alias = "wo_si")]
    WoSi,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::WoKs, Variant::WoOd, Variant::WoSi];

    pub fn uses_knowledge(self) -> bool {
        self != Variant::WoKs
    }

    pub fn uses_dynamic(self) -> bool {
        self != Variant::WoOd
    }

    pub fn uses_location(self) -> bool {
        self != Variant::WoSi
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::WoKs => "wo_KS",
            Variant::WoOd => "wo_OD",
            Variant::WoSi => "wo_SI",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "wo_ks" => Ok(Variant::WoKs),
            "wo_od" => Ok(Variant::WoOd),
            "wo_si" => Ok(Variant::WoSi),
            _ => Err(Error::InvalidInput(format!(
                "unknown variant {s:?}; expected full, wo_KS, wo_OD or wo_SI"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub variant: Variant,
    pub query_layers: usize,
    pub query_heads: usize,
    pub dynamic: DynamicConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            variant: Variant::Full,
            query_layers: 1,
            query_heads: 4,
            dynamic: DynamicConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.query_layers == 0 || self.query_heads == 0 || !(2 * self.dim).is_multiple_of(self.query_heads) {
            return Err(Error::Config("query heads must divide 2·dim".into()));
        }
        if !self.dim.is_multiple_of(self.dynamic.encoder_heads.max(1)) {
            return Err(Error::Config("encoder heads must divide dim".into()));
        }
        self.dynamic.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub kg: KgEmbeddings,
    pub static_head: StaticHead,
    pub behavior: BehaviorEmbedder,
    pub dynamic: DynNetworks,
    pub query: QueryEncoder,
    pub fusion: FusionHead,
    pub num_entities: usize,
    neighbors: Vec<Vec<(usize, usize)>>,
    region_pois: Vec<Vec<usize>>,
    /// `(region, position within region)` per POI.
    poi_slot: Vec<(usize, usize)>,
}

/// Graph handles for one record's losses.
pub struct RecordGraph {
    /// `β₁·L_S + β₂·L_D + β₃·CE / denominator`.
    pub total: Var,
    pub l_s: Option<Var>,
    pub l_d: Option<Var>,
    /// Unnormalized cross-entropy summed over the record's positions.
    pub ce_sum: Var,
    pub logits: Var,
    /// Solver schedules used by the dynamic term, one per noise sample.
    pub schedules: Vec<Vec<StepRecord>>,
}

/// Scalar loss components summed over a batch. `l_r` is already divided by
/// the batch's total trip length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_s: f64,
    pub l_d: f64,
    pub l_r: f64,
    pub total: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.l_s.is_finite() && self.l_d.is_finite() && self.l_r.is_finite() && self.total.is_finite()
    }

    pub fn add(&mut self, other: &LossParts) {
        self.l_s += other.l_s;
        self.l_d += other.l_d;
        self.l_r += other.l_r;
        self.total += other.total;
    }
}

pub struct BatchResult {
    pub grads: Gradients,
    pub loss: LossParts,
}

/// Knowledge-aware rows for a set of POIs plus a lookup from POI to row.
struct PoiRows {
    rows: Var,
    index: BTreeMap<usize, usize>,
    region_len: usize,
}

impl PoiRows {
    fn of(&self, pois: impl IntoIterator<Item = usize>) -> Vec<usize> {
        pois.into_iter().map(|p| self.index[&p]).collect()
    }
}

impl Model {
    pub fn new(config: &ModelConfig, ds: &Dataset, seed: u64) -> Result<Self> {
        config.validate()?;
        let num_pois = ds.num_pois();
        if num_pois == 0 {
            return Err(Error::EmptyDataset);
        }
        let d = config.dim;
        let mut rng = stream_rng(seed, Stream::Init, 0, 0);
        let mut params = ParamStore::new();
        let kg = KgEmbeddings::new(
            &mut params,
            num_pois,
            ds.kg.num_entities,
            ds.kg.num_relations,
            d,
            &mut rng,
        );
        let static_head = StaticHead::new(&mut params, d, &mut rng);
        let behavior = BehaviorEmbedder::new(&mut params, num_pois, d, &mut rng);
        let max_home = ds.all_records().map(|r| r.hometown.len()).max().unwrap_or(1);
        let dynamic = DynNetworks::new(&mut params, d, &config.dynamic, max_home, &mut rng);
        let max_len = ds.max_trip_len().max(2);
        let query = QueryEncoder::new(
            &mut params,
            d,
            max_len,
            config.query_layers,
            config.query_heads,
            &mut rng,
        );
        let fusion = FusionHead::new(&mut params, d, &mut rng);

        let mut poi_slot = vec![(0, 0); num_pois];
        for (r, region) in ds.regions.iter().enumerate() {
            for (k, &p) in region.pois.iter().enumerate() {
                poi_slot[p] = (r, k);
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
            kg,
            static_head,
            behavior,
            dynamic,
            query,
            fusion,
            num_entities: ds.kg.num_entities,
            neighbors: ds.kg.neighbors(num_pois),
            region_pois: ds.regions.iter().map(|r| r.pois.clone()).collect(),
            poi_slot,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn region_pois(&self, region: usize) -> Result<&[usize]> {
        self.region_pois
            .get(region)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidInput(format!("unknown region {region}")))
    }

    fn slot_in(&self, poi: usize, region: usize) -> Result<usize> {
        match self.poi_slot.get(poi) {
            Some(&(r, k)) if r == region => Ok(k),
            Some(_) => Err(Error::InvalidInput(format!("POI {poi} is not in region {region}"))),
            None => Err(Error::InvalidInput(format!("unknown POI {poi}"))),
        }
    }

    /// Region POIs first (in region order), then any extra POIs.
    fn poi_rows(&self, g: &mut Graph, region: usize, extra: impl IntoIterator<Item = usize>) -> Result<PoiRows> {
        let mut pois = self.region_pois(region)?.to_vec();
        if pois.is_empty() {
            return Err(Error::InvalidInput(format!("region {region} has no POIs")));
        }
        let region_len = pois.len();
        let mut index: BTreeMap<usize, usize> = pois.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        for p in extra {
            if p >= self.poi_slot.len() {
                return Err(Error::InvalidInput(format!("unknown POI {p}")));
            }
            if let std::collections::btree_map::Entry::Vacant(e) = index.entry(p) {
                e.insert(pois.len());
                pois.push(p);
            }
        }
        let rows = if self.variant().uses_knowledge() {
            self.kg.aggregate(g, &self.neighbors, &pois)
        } else {
            self.kg.raw(g, &pois)
        };
        Ok(PoiRows {
            rows,
            index,
            region_len,
        })
    }

    fn static_preference(&self, g: &mut Graph, rows: &PoiRows, hometown: &[CheckIn]) -> Var {
        if !self.variant().uses_knowledge() {
            return g.constant(Tensor::zeros(1, self.dim()));
        }
        let idx = rows.of(hometown.iter().map(|c| c.poi));
        let home = g.gather_rows(rows.rows, &idx);
        let pooled = g.mean_rows(home);
        self.static_head.infer(g, pooled)
    }

    fn endpoint_row(&self, g: &mut Graph, rows: &PoiRows, poi: Option<usize>) -> Option<Var> {
        poi.map(|p| g.slice_rows(rows.rows, rows.index[&p], 1))
    }

    /// Builds every loss term for one record. `ce_denominator` is the batch's
    /// `Σ N_u`.
    pub fn record_graph(
        &self,
        g: &mut Graph,
        record: &TravelRecord,
        noise: &[Vec<f64>],
        ce_denominator: f64,
        betas: [f64; 3],
    ) -> Result<RecordGraph> {
        self.record_graph_replay(g, record, noise, ce_denominator, betas, None)
    }

    /// [`Model::record_graph`] with the solver schedules fixed to `replay`
    /// (as returned in [`RecordGraph::schedules`]), which makes the losses
    /// smooth functions of the parameters.
    pub fn record_graph_replay(
        &self,
        g: &mut Graph,
        record: &TravelRecord,
        noise: &[Vec<f64>],
        ce_denominator: f64,
        betas: [f64; 3],
        replay: Option<&[Vec<StepRecord>]>,
    ) -> Result<RecordGraph> {
        let trip = record.trip();
        let n = trip.len();
        if n < 2 || record.hometown.is_empty() {
            return Err(Error::InvalidInput(format!(
                "record for user {} needs a hometown history and at least 2 stops",
                record.user_id
            )));
        }
        let region = record.outoftown_region;
        let targets = trip
            .iter()
            .map(|&p| self.slot_in(p, region))
            .collect::<Result<Vec<_>>>()?;
        let rows = self.poi_rows(g, region, record.hometown.iter().map(|c| c.poi))?;

        let static_pref = self.static_preference(g, &rows, &record.hometown);
        let l_s = if self.variant().uses_knowledge() {
            let out = g.gather_rows(rows.rows, &targets);
            let actual = g.mean_rows(out);
            Some(static_alignment_loss(g, static_pref, actual))
        } else {
            None
        };

        let (states, l_d, schedules) = if self.variant().uses_dynamic() {
            let loc = self.variant().uses_location();
            let home = self.behavior.embed(g, &record.hometown, loc);
            let tgt = self.behavior.embed(g, &record.outoftown, loc);
            let out = dynamic_loss(
                g,
                &self.dynamic,
                home,
                tgt,
                &record.outoftown,
                noise,
                &self.config.dynamic,
                replay,
            )?;
            (out.event_states, Some(out.loss), out.schedules)
        } else {
            (g.constant(Tensor::zeros(n, self.dim())), None, Vec::new())
        };

        let origin = self.endpoint_row(g, &rows, Some(trip[0]));
        let dest = self.endpoint_row(g, &rows, Some(trip[n - 1]));
        let q = self.query.encode(g, origin, dest, n)?;
        let hidden = self.fusion.hidden(g, q, static_pref, states);
        let region_rows = g.slice_rows(rows.rows, 0, rows.region_len);
        let logits = self.fusion.score(g, hidden, region_rows)?;
        let ce_sum = cross_entropy_sum(g, logits, &targets)?;

        let mut terms = vec![(ce_sum, betas[2] / ce_denominator)];
        if let Some(l) = l_s {
            terms.push((l, betas[0]));
        }
        if let Some(l) = l_d {
            terms.push((l, betas[1]));
        }
        let total = if terms.iter().all(|t| t.1 == 0.0) {
            g.scale(ce_sum, 0.0)
        } else {
            g.lin_comb(&terms)
        };
        Ok(RecordGraph {
            total,
            l_s,
            l_d,
            ce_sum,
            logits,
            schedules,
        })
    }

    /// Standard normal noise for the reparameterized initial state: one
    /// `d`-vector per Monte-Carlo sample, from a stream keyed by
    /// `(epoch, record)`.
    pub fn draw_noise(&self, seed: u64, epoch: u64, record: u64) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(seed, Stream::Noise, epoch, record);
        (0..self.config.dynamic.mc_samples)
            .map(|_| standard_normal(&mut rng, self.dim()))
            .collect()
    }

    /// Gradients of the batch objective, computed per record (possibly in
    /// parallel) and summed in record order.
    pub fn batch_gradients(
        &self,
        records: &[&TravelRecord],
        noise: &[Vec<Vec<f64>>],
        betas: [f64; 3],
        exec: Execution,
    ) -> Result<BatchResult> {
        if records.len() != noise.len() {
            return Err(Error::InvalidInput("one noise set per record required".into()));
        }
        let denominator: usize = records.iter().map(|r| r.outoftown.len()).sum();
        let denominator = denominator.max(1) as f64;
        let per_record = exec.map(records, |i, record| -> Result<(Gradients, LossParts)> {
            let mut g = Graph::new(&self.params);
            let rg = self.record_graph(&mut g, record, &noise[i], denominator, betas)?;
            let parts = LossParts {
                l_s: rg.l_s.map_or(0.0, |v| g.item(v)),
                l_d: rg.l_d.map_or(0.0, |v| g.item(v)),
                l_r: g.item(rg.ce_sum) / denominator,
                total: g.item(rg.total),
            };
            Ok((g.backward(rg.total), parts))
        });
        let mut grads = Gradients::new(self.params.len());
        let mut loss = LossParts::default();
        for r in per_record {
            let (g, parts) = r?;
            grads.merge(&g);
            loss.add(&parts);
        }
        Ok(BatchResult { grads, loss })
    }

    /// Position logits (`stops × |region POIs|`) in evaluation mode: posterior
    /// mean initial state, surrogate time grid. Absent endpoints are masked
    /// in the query.
    pub fn trip_logits(
        &self,
        hometown: &[CheckIn],
        origin: Option<usize>,
        destination: Option<usize>,
        stops: usize,
        region: usize,
    ) -> Result<Tensor> {
        if hometown.is_empty() {
            return Err(Error::InvalidInput("recommendation needs a hometown history".into()));
        }
        for p in origin.iter().chain(destination.iter()) {
            self.slot_in(*p, region)?;
        }
        let grid = surrogate_time_grid(stops)?;
        let mut g = Graph::new(&self.params);
        let rows = self.poi_rows(&mut g, region, hometown.iter().map(|c| c.poi))?;
        let static_pref = self.static_preference(&mut g, &rows, hometown);
        let states = if self.variant().uses_dynamic() {
            let home = self.behavior.embed(&mut g, hometown, self.variant().uses_location());
            let (mean, _) = self.dynamic.encode_posterior(&mut g, home);
            let (full_grid, idx) = build_grid(&grid, self.config.dynamic.max_grid_gap)?;
            let (traj, _) = self
                .dynamic
                .integrate(&mut g, mean, &full_grid, &self.config.dynamic.solver, None)?;
            g.gather_rows(traj, &idx)
        } else {
            g.constant(Tensor::zeros(stops, self.dim()))
        };
        let o = self.endpoint_row(&mut g, &rows, origin);
        let d = self.endpoint_row(&mut g, &rows, destination);
        let q = self.query.encode(&mut g, o, d, stops)?;
        let hidden = self.fusion.hidden(&mut g, q, static_pref, states);
        let region_rows = g.slice_rows(rows.rows, 0, rows.region_len);
        let logits = self.fusion.score(&mut g, hidden, region_rows)?;
        Ok(g.value(logits).clone())
    }

    /// Generates a trip for `query`: origin, top-p sampled intermediates,
    /// destination.
    pub fn recommend<R: Rng>(
        &self,
        hometown: &[CheckIn],
        query: &Query,
        top_p: f64,
        dedup: bool,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        self.recommend_partial(
            hometown,
            Some(query.origin),
            Some(query.destination),
            query.stops,
            query.region,
            top_p,
            dedup,
            rng,
        )
    }

    /// Like [`Model::recommend`] but either endpoint may be unknown, in which
    /// case it is sampled as well.
    #[allow(clippy::too_many_arguments)]
    pub fn recommend_partial<R: Rng>(
        &self,
        hometown: &[CheckIn],
        origin: Option<usize>,
        destination: Option<usize>,
        stops: usize,
        region: usize,
        top_p: f64,
        dedup: bool,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if stops < 2 {
            return Err(Error::InvalidInput(format!(
                "a trip needs at least 2 stops, got {stops}"
            )));
        }
        if stops == 2 {
            if let (Some(o), Some(d)) = (origin, destination) {
                self.slot_in(o, region)?;
                self.slot_in(d, region)?;
                return Ok(vec![o, d]);
            }
        }
        let logits = self.trip_logits(hometown, origin, destination, stops, region)?;
        let pois = self.region_pois(region)?;
        let mut masked = vec![false; pois.len()];
        for p in origin.iter().chain(destination.iter()) {
            masked[self.slot_in(*p, region)?] = true;
        }
        let mut trip = Vec::with_capacity(stops);
        for n in 0..stops {
            let fixed = match n {
                0 => origin,
                _ if n == stops - 1 => destination,
                _ => None,
            };
            let poi = match fixed {
                Some(p) => p,
                None => {
                    let k = top_p_sample(logits.row_slice(n), top_p, &masked, rng)?;
                    if dedup {
                        masked[k] = true;
                    }
                    pois[k]
                }
            };
            trip.push(poi);
        }
        Ok(trip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SynthSpec};
    use crate::data::{build_dataset, FilterConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Dataset {
        let spec = SynthSpec {
            users: 20,
            ..Default::default()
        };
        let synth = generate_synthetic(&spec).unwrap();
        build_dataset(&synth.checkins, &synth.triples, &FilterConfig::default(), 1).unwrap()
    }

    fn small_config(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig {
            dim: 8,
            variant,
            ..Default::default()
        };
        cfg.dynamic.encoder_layers = 1;
        cfg
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("wo_KS".parse::<Variant>().unwrap(), Variant::WoKs);
        assert_eq!("WO_od".parse::<Variant>().unwrap(), Variant::WoOd);
        assert!("wo_XY".parse::<Variant>().is_err());
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn recommendation_shape_and_determinism() {
        let ds = tiny();
        for variant in Variant::ALL {
            let model = Model::new(&small_config(variant), &ds, 3).unwrap();
            for r in &ds.train {
                let q = r.query();
                let a = model
                    .recommend(&r.hometown, &q, 0.9, false, &mut ChaCha8Rng::seed_from_u64(5))
                    .unwrap();
                let b = model
                    .recommend(&r.hometown, &q, 0.9, false, &mut ChaCha8Rng::seed_from_u64(5))
                    .unwrap();
                assert_eq!(a, b);
                assert_eq!(a.len(), q.stops);
                assert_eq!(a[0], q.origin);
                assert_eq!(*a.last().unwrap(), q.destination);
                let region = model.region_pois(q.region).unwrap();
                assert!(a.iter().all(|p| region.contains(p)));
                assert!(a[1..a.len() - 1].iter().all(|&p| p != q.origin && p != q.destination));
            }
        }
    }

    #[test]
    fn two_stop_query_needs_no_sampling() {
        let ds = tiny();
        let model = Model::new(&small_config(Variant::Full), &ds, 3).unwrap();
        let r = &ds.train[0];
        let mut q = r.query();
        q.stops = 2;
        let trip = model
            .recommend(&r.hometown, &q, 0.9, false, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(trip, vec![q.origin, q.destination]);
    }

    #[test]
    fn out_of_region_endpoint_is_rejected() {
        let ds = tiny();
        let model = Model::new(&small_config(Variant::Full), &ds, 3).unwrap();
        let r = &ds.train[0];
        let mut q = r.query();
        q.origin = r.hometown[0].poi;
        assert!(model
            .recommend(&r.hometown, &q, 0.9, false, &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn ablations_drop_their_terms() {
        let ds = tiny();
        let r = &ds.train[0];
        for (variant, has_s, has_d) in [
            (Variant::Full, true, true),
            (Variant::WoKs, false, true),
            (Variant::WoOd, true, false),
            (Variant::WoSi, true, true),
        ] {
            let model = Model::new(&small_config(variant), &ds, 3).unwrap();
            let noise = model.draw_noise(1, 0, 0);
            let mut g = Graph::new(&model.params);
            let rg = model.record_graph(&mut g, r, &noise, 5.0, [1.0, 1.0, 1.0]).unwrap();
            assert_eq!(rg.l_s.is_some(), has_s, "{variant}");
            assert_eq!(rg.l_d.is_some(), has_d, "{variant}");
            let grads = g.backward(rg.total);
            let loc = grads.get(model.behavior.loc_weight).map_or(0.0, |t| t.norm());
            let att = grads.get(model.kg.attention_weight).map_or(0.0, |t| t.norm());
            assert_eq!(
                loc > 0.0,
                has_d && variant != Variant::WoSi,
                "{variant}: location weight"
            );
            assert_eq!(att > 0.0, variant != Variant::WoKs, "{variant}: attention weight");
            assert!(
                grads.get(model.behavior.time_weight).is_some() == has_d,
                "{variant}: time weight"
            );
        }
    }

    #[test]
    fn parallel_and_sequential_gradients_are_identical() {
        let ds = tiny();
        let model = Model::new(&small_config(Variant::Full), &ds, 3).unwrap();
        let records: Vec<&TravelRecord> = ds.train.iter().take(6).collect();
        let noise: Vec<_> = (0..records.len()).map(|i| model.draw_noise(9, 0, i as u64)).collect();
        let a = model
            .batch_gradients(&records, &noise, [1.0; 3], Execution::Sequential)
            .unwrap();
        let b = model
            .batch_gradients(&records, &noise, [1.0; 3], Execution::Parallel)
            .unwrap();
        assert_eq!(a.loss, b.loss);
        for ((ia, ga), (ib, gb)) in a.grads.iter().zip(b.grads.iter()) {
            assert_eq!(ia, ib);
            assert_eq!(ga, gb);
        }
    }
}
