//! Shared fixtures and checks for the integration tests and the acceptance
//! harness.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triprec::autodiff::Graph;
use triprec::data::synth::{generate_synthetic, SynthSpec, SyntheticData};
use triprec::data::{build_dataset, Dataset, FilterConfig, TravelRecord};
use triprec::model::RecordGraph;
use triprec::ode::StepRecord;
use triprec::params::Gradients;
use triprec::{Model, ModelConfig, RunConfig};

pub fn synth(users: usize) -> SyntheticData {
    generate_synthetic(&SynthSpec {
        users,
        ..Default::default()
    })
    .unwrap()
}

pub fn dataset(users: usize) -> Dataset {
    let s = synth(users);
    build_dataset(&s.checkins, &s.triples, &FilterConfig::default(), 1).unwrap()
}

/// Full architecture at a width small enough for exhaustive checks.
pub fn small_model() -> ModelConfig {
    let mut c = ModelConfig {
        dim: 8,
        ..Default::default()
    };
    c.dynamic.encoder_layers = 2;
    c
}

/// A config that trains in seconds.
pub fn quick_config() -> RunConfig {
    let mut c = RunConfig {
        model: small_model(),
        ..Default::default()
    };
    c.model.dynamic.encoder_layers = 1;
    c.train.epochs = 3;
    c.eval.seeds = vec![0];
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Static,
    Dynamic,
    Rec,
    Total,
}

pub struct AuditReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Differences below this are finite-difference noise on near-zero entries.
pub const ABS_FLOOR: f64 = 1e-8;

struct Batch<'a> {
    records: Vec<&'a TravelRecord>,
    noise: Vec<Vec<Vec<f64>>>,
    denominator: f64,
    schedules: Vec<Vec<Vec<StepRecord>>>,
}

impl<'a> Batch<'a> {
    fn new(model: &Model, records: Vec<&'a TravelRecord>) -> Self {
        let noise: Vec<_> = (0..records.len()).map(|i| model.draw_noise(9, 1, i as u64)).collect();
        let denominator = records.iter().map(|r| r.outoftown.len()).sum::<usize>() as f64;
        let schedules = records
            .iter()
            .zip(&noise)
            .map(|(r, n)| {
                let mut g = Graph::new(&model.params);
                model
                    .record_graph(&mut g, r, n, denominator, [1.0; 3])
                    .unwrap()
                    .schedules
            })
            .collect();
        Self {
            records,
            noise,
            denominator,
            schedules,
        }
    }

    fn each<T>(&self, model: &Model, mut f: impl FnMut(&Graph, &RecordGraph) -> T) -> Vec<T> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut g = Graph::new(&model.params);
                let replay = (!self.schedules[i].is_empty()).then_some(self.schedules[i].as_slice());
                let rg = model
                    .record_graph_replay(&mut g, r, &self.noise[i], self.denominator, [1.0; 3], replay)
                    .unwrap();
                f(&g, &rg)
            })
            .collect()
    }

    fn value(&self, model: &Model, term: Term) -> f64 {
        let d = self.denominator;
        self.each(model, |g, rg| match term {
            Term::Static => rg.l_s.map_or(0.0, |v| g.item(v)),
            Term::Dynamic => rg.l_d.map_or(0.0, |v| g.item(v)),
            Term::Rec => g.item(rg.ce_sum) / d,
            Term::Total => g.item(rg.total),
        })
        .iter()
        .sum()
    }

    fn gradient(&self, model: &Model, term: Term) -> Gradients {
        let d = self.denominator;
        let mut total = Gradients::new(model.params.len());
        for g in self.each(model, |g, rg| {
            let mut out = Gradients::new(model.params.len());
            match term {
                Term::Static => {
                    if let Some(v) = rg.l_s {
                        g.backward_into(v, 1.0, &mut out)
                    }
                }
                Term::Dynamic => {
                    if let Some(v) = rg.l_d {
                        g.backward_into(v, 1.0, &mut out)
                    }
                }
                Term::Rec => g.backward_into(rg.ce_sum, 1.0 / d, &mut out),
                Term::Total => g.backward_into(rg.total, 1.0, &mut out),
            }
            out
        }) {
            total.merge(&g);
        }
        total
    }
}

/// Central differences against reverse-mode gradients for one loss term on
/// `records`, with solver schedules frozen. Every parameter tensor is
/// probed at its largest-gradient entry plus `extra` random entries.
pub fn gradient_audit(model: &Model, records: Vec<&TravelRecord>, term: Term, extra: usize) -> AuditReport {
    let batch = Batch::new(model, records);
    let grads = batch.gradient(model, term);
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut report = AuditReport {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    for id in model.params.ids() {
        let len = model.params.get(id).len();
        let analytic = |k: usize| grads.get(id).map_or(0.0, |t| t.data()[k]);
        let mut entries: Vec<usize> = (0..extra).map(|_| rng.random_range(0..len)).collect();
        let argmax = (0..len)
            .max_by(|&a, &b| analytic(a).abs().total_cmp(&analytic(b).abs()))
            .unwrap_or(0);
        entries.push(argmax);
        entries.sort_unstable();
        entries.dedup();
        for k in entries {
            let orig = model.params.get(id).data()[k];
            probe.params.get_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = batch.value(&probe, term);
            probe.params.get_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = batch.value(&probe, term);
            probe.params.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic(k);
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            if scale > 1e-6 {
                report.worst_rel = report.worst_rel.max(diff / scale);
            }
            if diff > ABS_FLOOR && diff > REL_TOL * scale {
                report.failures.push(format!(
                    "{}[{k}]: analytic {a:e}, numeric {numeric:e}",
                    model.params.name(id)
                ));
            }
        }
    }
    report
}

/// Independent pair enumerator: ordered pairs over positions `i < j` of
/// `pred`, concordant when some occurrence of the first precedes some
/// occurrence of the second in `truth`. Precision and recall divide the
/// concordant count by `C(|pred|, 2)` and `C(|truth|, 2)`.
pub fn brute_pairs_f1(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.len() < 2 || truth.len() < 2 {
        return 0.0;
    }
    let ordered_in =
        |x: usize, y: usize| (0..truth.len()).any(|i| truth[i] == x && (i + 1..truth.len()).any(|j| truth[j] == y));
    let mut concordant = 0.0;
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            if ordered_in(pred[i], pred[j]) {
                concordant += 1.0;
            }
        }
    }
    let choose2 = |n: usize| (n * (n - 1)) as f64 / 2.0;
    let precision = (concordant / choose2(pred.len())).min(1.0);
    let recall = (concordant / choose2(truth.len())).min(1.0);
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Independent set F1 by explicit membership counting. Two empty sets
/// agree perfectly.
pub fn brute_set_f1(pred: &[usize], truth: &[usize]) -> f64 {
    let mut p: Vec<usize> = pred.to_vec();
    p.sort_unstable();
    p.dedup();
    let mut t: Vec<usize> = truth.to_vec();
    t.sort_unstable();
    t.dedup();
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    let common = p.iter().filter(|x| t.contains(x)).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let (precision, recall) = (common / p.len() as f64, common / t.len() as f64);
    2.0 * precision * recall / (precision + recall)
}

/// `(F1, PairsF1, Full-F1, Full-PairsF1)` by brute force.
pub fn brute_scores(pred: &[usize], truth: &[usize]) -> [f64; 4] {
    let inner = |t: &[usize]| {
        if t.len() <= 2 {
            Vec::new()
        } else {
            t[1..t.len() - 1].to_vec()
        }
    };
    let (pi, ti) = (inner(pred), inner(truth));
    let pairs = if pi.is_empty() && ti.is_empty() {
        1.0
    } else {
        brute_pairs_f1(&pi, &ti)
    };
    [
        brute_set_f1(&pi, &ti),
        pairs,
        brute_set_f1(pred, truth),
        brute_pairs_f1(pred, truth),
    ]
}
