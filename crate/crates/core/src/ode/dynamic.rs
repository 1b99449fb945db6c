//! Dynamic preferences: behavior embeddings, the amortized posterior over the
//! latent initial state, latent ODE trajectories, NHPP intensity and the
//! negative ELBO.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::solver::{odeint, odeint_replay, trapezoid_weights, Solution, SolverConfig, StepRecord};
use crate::autodiff::{Graph, Var};
use crate::data::CheckIn;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp, TransformerEncoder};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Added to the exponentiated intensity so `λ > 0` numerically.
pub const INTENSITY_EPS: f64 = 1e-6;
pub const ODE_HIDDEN: usize = 128;

/// How out-of-town timestamps are mapped onto the ODE time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeAxis {
    /// `(t − t₁)/(t_N − t₁)`, the same `[0, 1]` span as the inference grid.
    TripRelative,
    /// The dataset-wide min-max normalized timestamps.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicConfig {
    /// Observation noise `σ_ṽ` of the reconstruction likelihood.
    pub sigma: f64,
    pub mc_samples: usize,
    /// Treat reconstruction targets as constants.
    pub detach_targets: bool,
    /// Largest allowed gap between integration grid points.
    pub max_grid_gap: f64,
    pub time_axis: TimeAxis,
    /// Learned positions in the hometown encoder.
    pub positional_encoding: bool,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub solver: SolverConfig,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        Self {
            sigma: 0.6,
            mc_samples: 1,
            detach_targets: false,
            max_grid_gap: 0.05,
            time_axis: TimeAxis::TripRelative,
            positional_encoding: false,
            encoder_layers: 4,
            encoder_heads: 4,
            solver: SolverConfig::default(),
        }
    }
}

impl DynamicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if !(self.max_grid_gap.is_finite() && self.max_grid_gap > 0.0) {
            return Err(Error::Config("max_grid_gap must be positive".into()));
        }
        if self.encoder_layers == 0 || self.encoder_heads == 0 {
            return Err(Error::Config("encoder needs at least one layer and head".into()));
        }
        self.solver.validate()
    }
}

/// `ṽ = W_t·t + W_l·l + E(v)` with its own POI table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BehaviorEmbedder {
    pub time_weight: ParamId,
    pub loc_weight: ParamId,
    pub poi_latent: ParamId,
}

impl BehaviorEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, num_pois: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            time_weight: store.add_uniform("dyn.time_weight", 1, dim, 1.0, rng),
            loc_weight: store.add_uniform("dyn.loc_weight", 2, dim, 1.0 / 2f64.sqrt(), rng),
            poi_latent: store.add_uniform("dyn.poi_latent", num_pois, dim, bound, rng),
        }
    }

    /// One row per check-in. `use_location = false` drops the `W_l·l` term.
    pub fn embed(&self, g: &mut Graph, checkins: &[CheckIn], use_location: bool) -> Var {
        let n = checkins.len();
        let pois: Vec<usize> = checkins.iter().map(|c| c.poi).collect();
        let mut out = g.embed(self.poi_latent, &pois);
        let times = g.constant(Tensor::from_vec(n, 1, checkins.iter().map(|c| c.time).collect()));
        let wt = g.param(self.time_weight);
        let time_term = g.matmul(times, wt);
        out = g.add(out, time_term);
        if use_location {
            let coords = checkins.iter().flat_map(|c| [c.lat, c.lon]).collect();
            let coords = g.constant(Tensor::from_vec(n, 2, coords));
            let wl = g.param(self.loc_weight);
            let loc_term = g.matmul(coords, wl);
            out = g.add(out, loc_term);
        }
        out
    }
}

/// Value-level `W_t·t + W_l·l + e` for a single check-in.
pub fn embed_behavior(time: f64, loc: [f64; 2], time_weight: &[f64], loc_weight: &Tensor, poi_vec: &[f64]) -> Vec<f64> {
    (0..poi_vec.len())
        .map(|j| poi_vec[j] + time_weight[j] * time + loc[0] * loc_weight.get(0, j) + loc[1] * loc_weight.get(1, j))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynNetworks {
    pub encoder: TransformerEncoder,
    pub agg_token: ParamId,
    pub mean_head: Linear,
    pub logvar_head: Linear,
    pub ode_rhs: Mlp,
    pub intensity: Mlp,
}

impl DynNetworks {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dim: usize,
        cfg: &DynamicConfig,
        max_hometown: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            encoder: TransformerEncoder::new(
                store,
                "dyn.encoder",
                dim,
                cfg.encoder_layers,
                cfg.encoder_heads,
                4 * dim,
                cfg.positional_encoding.then_some(max_hometown + 1),
                rng,
            ),
            agg_token: store.add_uniform("dyn.agg_token", 1, dim, bound, rng),
            mean_head: Linear::new(store, "dyn.mean_head", dim, dim, true, rng),
            logvar_head: Linear::new(store, "dyn.logvar_head", dim, dim, true, rng),
            ode_rhs: Mlp::new(
                store,
                "dyn.ode_rhs",
                &[dim, ODE_HIDDEN, ODE_HIDDEN, dim],
                Activation::Tanh,
                rng,
            ),
            intensity: Mlp::new(
                store,
                "dyn.intensity",
                &[dim, ODE_HIDDEN, ODE_HIDDEN, 1],
                Activation::Tanh,
                rng,
            ),
        }
    }

    /// `(ψ_μ, ln ψ_σ²)` from the AGG readout of the hometown sequence.
    pub fn encode_posterior(&self, g: &mut Graph, hometown: Var) -> (Var, Var) {
        let agg = g.param(self.agg_token);
        let seq = g.concat_rows(&[hometown, agg]);
        let h = self.encoder.forward(g, seq);
        let last = g.shape(h).0 - 1;
        let readout = g.slice_rows(h, last, 1);
        let mean = self.mean_head.forward(g, readout);
        let logvar = self.logvar_head.forward(g, readout);
        (mean, logvar)
    }

    pub fn rhs(&self, g: &mut Graph, y: Var) -> Var {
        self.ode_rhs.forward(g, y)
    }

    /// `exp(λ_raw(p)) + ε`, one row per state row.
    pub fn intensity(&self, g: &mut Graph, states: Var) -> Var {
        let raw = self.intensity.forward(g, states);
        let lam = g.exp(raw);
        g.add_scalar(lam, INTENSITY_EPS)
    }

    /// States at every grid time, stacked `len × d`. With `replay`, the
    /// given step schedule is reused instead of choosing steps adaptively.
    pub fn integrate(
        &self,
        g: &mut Graph,
        initial: Var,
        grid: &[f64],
        solver: &SolverConfig,
        replay: Option<&[StepRecord]>,
    ) -> Result<(Var, Solution)> {
        let rhs = |g: &mut Graph, y: Var| self.rhs(g, y);
        let sol = match replay {
            Some(steps) => odeint_replay(g, initial, grid, steps, rhs)?,
            None => odeint(g, initial, grid, rhs, solver)?,
        };
        let stacked = g.concat_rows(&sol.states);
        Ok((stacked, sol))
    }
}

/// `μ + exp(½·ln σ²) ⊙ ε`.
pub fn reparameterize(g: &mut Graph, mean: Var, logvar: Var, noise: &[f64]) -> Var {
    if noise.iter().all(|&x| x == 0.0) {
        return mean;
    }
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let eps = g.constant(Tensor::row(noise));
    let scaled = g.mul(std, eps);
    g.add(mean, scaled)
}

/// `½ Σ (σ² + μ² − 1 − ln σ²)`.
pub fn kl_to_standard_normal(g: &mut Graph, mean: Var, logvar: Var) -> Var {
    let var = g.exp(logvar);
    let mu2 = g.square(mean);
    let s = g.lin_comb(&[(var, 1.0), (mu2, 1.0), (logvar, -1.0)]);
    let s = g.add_scalar(s, -1.0);
    let total = g.sum(s);
    g.scale(total, 0.5)
}

/// `Σₙ [−d/2·ln(2πσ²) − ‖targetₙ − stateₙ‖²/(2σ²)]`.
pub fn reconstruction_loglik(g: &mut Graph, states: Var, targets: Var, sigma: f64) -> Var {
    let (n, d) = g.shape(states);
    let diff = g.sub(targets, states);
    let sq = g.square(diff);
    let total = g.sum(sq);
    let scaled = g.scale(total, -1.0 / (2.0 * sigma * sigma));
    let constant = -(n as f64) * (d as f64) / 2.0 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    g.add_scalar(scaled, constant)
}

/// `Σ ln λ(events) − ∫ λ` with the integral by trapezoid over `grid`.
/// `intensities` is `grid.len() × 1`; `events` index into the grid.
pub fn nhpp_loglik(g: &mut Graph, intensities: Var, grid: &[f64], events: &[usize]) -> Result<Var> {
    if g.shape(intensities).0 != grid.len() {
        return Err(Error::InvalidInput("intensity rows must match the grid".into()));
    }
    if let Some(&bad) = events.iter().find(|&&e| e >= grid.len()) {
        return Err(Error::InvalidInput(format!("event index {bad} is not on the grid")));
    }
    let at_events = g.gather_rows(intensities, events);
    let logs = g.ln(at_events);
    let log_sum = g.sum(logs);
    let integral = g.dot_const(intensities, &trapezoid_weights(grid));
    Ok(g.sub(log_sum, integral))
}

/// Maps a trip's normalized timestamps onto the ODE time axis.
pub fn event_times(checkins: &[CheckIn], axis: TimeAxis) -> Vec<f64> {
    match axis {
        TimeAxis::Global => checkins.iter().map(|c| c.time).collect(),
        TimeAxis::TripRelative => {
            let n = checkins.len();
            let (first, last) = (checkins[0].time, checkins[n - 1].time);
            if last > first {
                checkins
                    .iter()
                    .map(|c| ((c.time - first) / (last - first)).clamp(0.0, 1.0))
                    .collect()
            } else if n > 1 {
                (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
            } else {
                vec![0.0]
            }
        }
    }
}

/// `{0} ∪ events ∪ fill` with every gap at most `max_gap`; returns the grid and
/// each event's grid index.
pub fn build_grid(events: &[f64], max_gap: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if events.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidInput(
            "event times must be finite and non-negative".into(),
        ));
    }
    let mut anchors: Vec<f64> = std::iter::once(0.0).chain(events.iter().copied()).collect();
    anchors.sort_by(|a, b| a.total_cmp(b));
    anchors.dedup();
    let mut grid = vec![anchors[0]];
    for w in anchors.windows(2) {
        let pieces = ((w[1] - w[0]) / max_gap).ceil().max(1.0) as usize;
        for i in 1..pieces {
            grid.push(w[0] + (w[1] - w[0]) * i as f64 / pieces as f64);
        }
        grid.push(w[1]);
    }
    let index = events
        .iter()
        .map(|t| grid.iter().position(|x| x == t).expect("events are grid anchors"))
        .collect();
    Ok((grid, index))
}

/// Everything the dynamic path produces for one record.
pub struct DynamicOutput {
    /// `−(reconstruction + nhpp − kl)`.
    pub loss: Var,
    pub reconstruction: Var,
    pub nhpp: Var,
    pub kl: Var,
    /// `N × d` latent states at the out-of-town events (first sample).
    pub event_states: Var,
    pub mean: Var,
    pub logvar: Var,
    pub grid: Vec<f64>,
    pub event_index: Vec<usize>,
    /// Solver schedule of each Monte-Carlo sample.
    pub schedules: Vec<Vec<StepRecord>>,
}

/// Negative ELBO for one record. `noise` holds one `d`-vector per Monte-Carlo
/// sample; `hometown_emb` and `targets` are behavior embeddings.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_loss(
    g: &mut Graph,
    nets: &DynNetworks,
    hometown_emb: Var,
    targets: Var,
    outoftown: &[CheckIn],
    noise: &[Vec<f64>],
    cfg: &DynamicConfig,
    replay: Option<&[Vec<StepRecord>]>,
) -> Result<DynamicOutput> {
    if noise.is_empty() {
        return Err(Error::InvalidInput(
            "dynamic loss needs at least one noise sample".into(),
        ));
    }
    if replay.is_some_and(|r| r.len() != noise.len()) {
        return Err(Error::InvalidInput(
            "one replay schedule per noise sample required".into(),
        ));
    }
    let (grid, event_index) = build_grid(&event_times(outoftown, cfg.time_axis), cfg.max_grid_gap)?;
    let (mean, logvar) = nets.encode_posterior(g, hometown_emb);
    let targets = if cfg.detach_targets {
        g.stop_gradient(targets)
    } else {
        targets
    };

    let mut rec_terms = Vec::new();
    let mut nhpp_terms = Vec::new();
    let mut first_states = None;
    let mut schedules = Vec::with_capacity(noise.len());
    for (k, eps) in noise.iter().enumerate() {
        let z0 = reparameterize(g, mean, logvar, eps);
        let (traj, sol) = nets.integrate(g, z0, &grid, &cfg.solver, replay.map(|r| r[k].as_slice()))?;
        schedules.push(sol.steps);
        let states = g.gather_rows(traj, &event_index);
        let lam = nets.intensity(g, traj);
        rec_terms.push(reconstruction_loglik(g, states, targets, cfg.sigma));
        nhpp_terms.push(nhpp_loglik(g, lam, &grid, &event_index)?);
        first_states.get_or_insert(states);
    }
    let inv = 1.0 / noise.len() as f64;
    let reconstruction = g.lin_comb(&rec_terms.iter().map(|&v| (v, inv)).collect::<Vec<_>>());
    let nhpp = g.lin_comb(&nhpp_terms.iter().map(|&v| (v, inv)).collect::<Vec<_>>());
    let kl = kl_to_standard_normal(g, mean, logvar);
    let loss = g.lin_comb(&[(reconstruction, -1.0), (nhpp, -1.0), (kl, 1.0)]);
    Ok(DynamicOutput {
        loss,
        reconstruction,
        nhpp,
        kl,
        event_states: first_states.expect("at least one sample"),
        mean,
        logvar,
        grid,
        event_index,
        schedules,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = f(&mut g);
        g.item(v)
    }

    #[test]
    fn behavior_embedding_examples() {
        let wl = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert_eq!(
            embed_behavior(0.5, [0.25, 0.25], &[1.0, 0.0], &wl, &[0.0, 0.0]),
            vec![0.5, 0.5]
        );
        let e = [0.3, -0.7];
        assert_eq!(embed_behavior(0.0, [0.0, 0.0], &[1.0, 2.0], &wl, &e), e.to_vec());
        assert_eq!(
            embed_behavior(0.9, [0.4, 0.1], &[0.0, 0.0], &Tensor::zeros(2, 2), &e),
            e.to_vec()
        );
    }

    #[test]
    fn graph_embedding_matches_value_helper() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let emb = BehaviorEmbedder::new(&mut store, 5, 3, &mut rng);
        let c = CheckIn {
            user_id: "u".into(),
            time: 0.4,
            lat: 0.2,
            lon: 0.9,
            poi: 3,
            region: 0,
        };
        let mut g = Graph::new(&store);
        let v = emb.embed(&mut g, std::slice::from_ref(&c), true);
        let expect = embed_behavior(
            0.4,
            [0.2, 0.9],
            store.get(emb.time_weight).data(),
            store.get(emb.loc_weight),
            store.get(emb.poi_latent).row_slice(3),
        );
        for (a, b) in g.value(v).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn reparameterization_examples() {
        let v = eval(|g| {
            let m = g.constant(Tensor::scalar(0.0));
            let lv = g.constant(Tensor::scalar(4f64.ln()));
            reparameterize(g, m, lv, &[1.0])
        });
        assert!((v - 2.0).abs() < 1e-12);
        let v = eval(|g| {
            let m = g.constant(Tensor::scalar(0.7));
            let lv = g.constant(Tensor::scalar(-800.0));
            reparameterize(g, m, lv, &[3.0])
        });
        assert_eq!(v, 0.7);
    }

    #[test]
    fn reparameterization_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let store = ParamStore::new();
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let mut g = Graph::new(&store);
                let m = g.constant(Tensor::scalar(0.0));
                let lv = g.constant(Tensor::scalar(0.0));
                let eps = crate::rng::standard_normal(&mut rng, 1);
                let z = reparameterize(&mut g, m, lv, &eps);
                g.item(z)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.97..1.03).contains(&var), "variance {var}");
    }

    #[test]
    fn kl_examples() {
        let kl = |mu: f64, var: f64| {
            eval(|g| {
                let m = g.constant(Tensor::scalar(mu));
                let lv = g.constant(Tensor::scalar(var.ln()));
                kl_to_standard_normal(g, m, lv)
            })
        };
        assert_eq!(kl(0.0, 1.0), 0.0);
        assert!((kl(1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(kl(-0.3, 0.2) > 0.0);
    }

    #[test]
    fn reconstruction_examples() {
        let rec = |state: f64, target: f64, sigma: f64| {
            eval(|g| {
                let s = g.constant(Tensor::scalar(state));
                let t = g.constant(Tensor::scalar(target));
                reconstruction_loglik(g, s, t, sigma)
            })
        };
        assert!((rec(0.2, 0.2, 1.0) + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((rec(0.0, 1.0, 1.0) + 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!((rec(0.5, 0.5, 2.0) + 0.5 * (2.0 * std::f64::consts::PI * 4.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn nhpp_examples() {
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let nhpp = |events: &[usize]| {
            eval(|g| {
                let lam = g.constant(Tensor::filled(5, 1, 1.0));
                nhpp_loglik(g, lam, &grid, events).unwrap()
            })
        };
        assert!((nhpp(&[4]) + 1.0).abs() < 1e-12);
        assert!((nhpp(&[0, 2, 4]) + 1.0).abs() < 1e-12);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let lam = g.constant(Tensor::filled(5, 1, 1.0));
        assert!(nhpp_loglik(&mut g, lam, &grid, &[5]).is_err());
    }

    #[test]
    fn intensity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let nets = DynNetworks::new(&mut store, 4, &DynamicConfig::default(), 10, &mut rng);
        let last = nets.intensity.layers.last().unwrap();
        store.get_mut(last.weight).data_mut().fill(0.0);
        let bias = last.bias.unwrap();
        let mut g = Graph::new(&store);
        let s = g.constant(Tensor::filled(2, 4, 0.3));
        let lam = nets.intensity(&mut g, s);
        assert!(g.value(lam).data().iter().all(|&x| x == 1.0 + INTENSITY_EPS));
        store.get_mut(bias).data_mut()[0] = 2f64.ln();
        let mut g = Graph::new(&store);
        let s = g.constant(Tensor::filled(1, 4, -5.0));
        let lam = nets.intensity(&mut g, s);
        assert!((g.item(lam) - 2.0 - INTENSITY_EPS).abs() < 1e-14);
    }

    #[test]
    fn posterior_heads_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let nets = DynNetworks::new(&mut store, 8, &DynamicConfig::default(), 10, &mut rng);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..8).map(|j| ((i * 8 + j) as f64).sin()).collect())
            .collect();
        let mut shuffled = rows.clone();
        shuffled.rotate_left(2);
        shuffled.swap(0, 3);
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::from_rows(&rows));
        let b = g.constant(Tensor::from_rows(&shuffled));
        let (ma, la) = nets.encode_posterior(&mut g, a);
        let (mb, lb) = nets.encode_posterior(&mut g, b);
        for (x, y) in g.value(ma).data().iter().zip(g.value(mb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in g.value(la).data().iter().zip(g.value(lb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let single = g.constant(Tensor::from_rows(&rows[..1]));
        let (m1, _) = nets.encode_posterior(&mut g, single);
        assert_eq!(g.shape(m1), (1, 8));

        let head = nets.logvar_head.clone();
        store.get_mut(head.weight).data_mut().fill(0.0);
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::from_rows(&rows));
        let (_, lv) = nets.encode_posterior(&mut g, a);
        assert!(g.value(lv).data().iter().all(|&x| x.exp() == 1.0));
    }

    #[test]
    fn grid_contains_zero_events_and_small_gaps() {
        let (grid, idx) = build_grid(&[0.3, 0.3, 0.5, 1.0], 0.05).unwrap();
        assert_eq!(grid[0], 0.0);
        assert!(grid.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 0.05 + 1e-12));
        assert_eq!(idx.len(), 4);
        assert_eq!(idx[0], idx[1]);
        assert_eq!(grid[idx[2]], 0.5);
        assert_eq!(*grid.last().unwrap(), 1.0);
        assert!(build_grid(&[-0.1], 0.05).is_err());
    }

    #[test]
    fn trip_relative_axis() {
        let mk = |t: f64| CheckIn {
            user_id: "u".into(),
            time: t,
            lat: 0.0,
            lon: 0.0,
            poi: 0,
            region: 0,
        };
        let trip = [mk(0.2), mk(0.3), mk(0.6)];
        let ts = event_times(&trip, TimeAxis::TripRelative);
        assert_eq!(ts[0], 0.0);
        assert!((ts[1] - 0.25).abs() < 1e-12);
        assert_eq!(ts[2], 1.0);
        assert_eq!(
            event_times(&[mk(0.5), mk(0.5), mk(0.5)], TimeAxis::TripRelative),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(event_times(&trip, TimeAxis::Global), vec![0.2, 0.3, 0.6]);
    }

    #[test]
    fn loss_decomposes_and_zero_kl_at_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = DynamicConfig {
            encoder_layers: 1,
            ..Default::default()
        };
        let nets = DynNetworks::new(&mut store, 4, &cfg, 10, &mut rng);
        for head in [&nets.mean_head, &nets.logvar_head] {
            store.get_mut(head.weight).data_mut().fill(0.0);
        }
        let mk = |t: f64, poi| CheckIn {
            user_id: "u".into(),
            time: t,
            lat: 0.1,
            lon: 0.2,
            poi,
            region: 0,
        };
        let trip = [mk(0.1, 0), mk(0.2, 1), mk(0.35, 2)];
        let mut g = Graph::new(&store);
        let home = g.constant(Tensor::filled(3, 4, 0.1));
        let targets = g.constant(Tensor::filled(3, 4, 0.2));
        let out = dynamic_loss(&mut g, &nets, home, targets, &trip, &[vec![0.0; 4]], &cfg, None).unwrap();
        assert_eq!(g.item(out.kl), 0.0);
        let expect = -(g.item(out.reconstruction) + g.item(out.nhpp) - g.item(out.kl));
        assert!((g.item(out.loss) - expect).abs() < 1e-12);
        assert_eq!(g.shape(out.event_states), (3, 4));
    }
}
