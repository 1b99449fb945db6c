//! Trip metrics, the popularity baseline and metric reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Query, TravelRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::Execution;
use crate::rng::{stream_rng, Stream};

/// The four trip scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TripScores {
    pub f1: f64,
    pub pairs_f1: f64,
    pub full_f1: f64,
    pub full_pairs_f1: f64,
}

impl TripScores {
    fn add(&mut self, o: &TripScores) {
        self.f1 += o.f1;
        self.pairs_f1 += o.pairs_f1;
        self.full_f1 += o.full_f1;
        self.full_pairs_f1 += o.full_pairs_f1;
    }

    fn scale(&mut self, s: f64) {
        self.f1 *= s;
        self.pairs_f1 *= s;
        self.full_f1 *= s;
        self.full_pairs_f1 *= s;
    }
}

fn harmonic(precision: f64, recall: f64) -> f64 {
    let (p, r) = (precision.min(1.0), recall.min(1.0));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn intermediates(trip: &[usize]) -> &[usize] {
    if trip.len() <= 2 {
        &[]
    } else {
        &trip[1..trip.len() - 1]
    }
}

/// Set-overlap F1 (duplicates collapse).
pub fn set_f1(predicted: &[usize], truth: &[usize]) -> f64 {
    let p: BTreeSet<usize> = predicted.iter().copied().collect();
    let t: BTreeSet<usize> = truth.iter().copied().collect();
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    if p.is_empty() || t.is_empty() {
        return 0.0;
    }
    let hit = p.intersection(&t).count() as f64;
    harmonic(hit / p.len() as f64, hit / t.len() as f64)
}

/// Ordered-pair F1. A pair of predicted positions `i < j` is concordant when
/// some occurrence of `predicted[i]` precedes some occurrence of
/// `predicted[j]` in the truth.
pub fn ordered_pairs_f1(predicted: &[usize], truth: &[usize]) -> f64 {
    let choose2 = |n: usize| (n * n.saturating_sub(1) / 2) as f64;
    if predicted.len() < 2 || truth.len() < 2 {
        return 0.0;
    }
    let mut first: BTreeMap<usize, usize> = BTreeMap::new();
    let mut last: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &p) in truth.iter().enumerate() {
        first.entry(p).or_insert(i);
        last.insert(p, i);
    }
    let mut concordant = 0usize;
    for i in 0..predicted.len() {
        let Some(&a) = first.get(&predicted[i]) else { continue };
        for &q in &predicted[i + 1..] {
            if last.get(&q).is_some_and(|&b| a < b) {
                concordant += 1;
            }
        }
    }
    if concordant == 0 {
        return 0.0;
    }
    let nc = concordant as f64;
    harmonic(nc / choose2(predicted.len()), nc / choose2(truth.len()))
}

/// F1 over intermediate positions. Two trips without intermediates score 1.
pub fn f1_intermediate(predicted: &[usize], truth: &[usize]) -> f64 {
    set_f1(intermediates(predicted), intermediates(truth))
}

/// Pairs-F1 over intermediate positions. Two trips without intermediates
/// score 1; fewer than two intermediates on either side otherwise scores 0.
pub fn pairs_f1_intermediate(predicted: &[usize], truth: &[usize]) -> f64 {
    let (p, t) = (intermediates(predicted), intermediates(truth));
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    ordered_pairs_f1(p, t)
}

pub fn full_f1(predicted: &[usize], truth: &[usize]) -> f64 {
    set_f1(predicted, truth)
}

pub fn full_pairs_f1(predicted: &[usize], truth: &[usize]) -> f64 {
    ordered_pairs_f1(predicted, truth)
}

pub fn score_trip(predicted: &[usize], truth: &[usize]) -> TripScores {
    TripScores {
        f1: f1_intermediate(predicted, truth),
        pairs_f1: pairs_f1_intermediate(predicted, truth),
        full_f1: full_f1(predicted, truth),
        full_pairs_f1: full_pairs_f1(predicted, truth),
    }
}

/// Per-trip average over non-vacuous pairs (truth with at least one
/// intermediate).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub scores: TripScores,
    /// Trips averaged.
    pub trips: usize,
    /// Two-stop trips left out of the average.
    pub vacuous: usize,
}

pub fn summarize(pairs: &[(Vec<usize>, Vec<usize>)]) -> MetricSummary {
    let mut out = MetricSummary::default();
    for (pred, truth) in pairs {
        if truth.len() <= 2 {
            out.vacuous += 1;
            continue;
        }
        out.scores.add(&score_trip(pred, truth));
        out.trips += 1;
    }
    if out.trips > 0 {
        out.scores.scale(1.0 / out.trips as f64);
    }
    out
}

/// Recommends the region's most visited POIs, in descending frequency with
/// ties to the smaller id, cycling when the trip outgrows the list.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Popularity {
    counts: BTreeMap<usize, usize>,
}

impl Popularity {
    /// Counts out-of-town check-ins of the given (training) records.
    pub fn fit(records: &[TravelRecord]) -> Self {
        let mut counts = BTreeMap::new();
        for r in records {
            for c in &r.outoftown {
                *counts.entry(c.poi).or_insert(0) += 1;
            }
        }
        Self { counts }
    }

    pub fn count(&self, poi: usize) -> usize {
        self.counts.get(&poi).copied().unwrap_or(0)
    }

    pub fn recommend(&self, query: &Query, region_pois: &[usize]) -> Result<Vec<usize>> {
        if query.stops < 2 {
            return Err(Error::InvalidInput("a trip needs at least 2 stops".into()));
        }
        let mut ranked: Vec<usize> = region_pois
            .iter()
            .copied()
            .filter(|&p| p != query.origin && p != query.destination)
            .collect();
        ranked.sort_by(|a, b| self.count(*b).cmp(&self.count(*a)).then(a.cmp(b)));
        let mut trip = vec![query.origin];
        for n in 0..query.stops - 2 {
            let poi = *ranked
                .get(n % ranked.len().max(1))
                .ok_or_else(|| Error::InvalidInput("region has no POI besides the endpoints".into()))?;
            trip.push(poi);
        }
        trip.push(query.destination);
        Ok(trip)
    }
}

/// Predicted trips for `records` under one sampling seed. Record `i` draws
/// from its own stream so results do not depend on execution order.
pub fn predict_trips(
    model: &Model,
    records: &[TravelRecord],
    top_p: f64,
    dedup: bool,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Vec<usize>>> {
    exec.map(records, |i, r| {
        let mut rng = stream_rng(seed, Stream::Sampling, i as u64, 0);
        model.recommend(&r.hometown, &r.query(), top_p, dedup, &mut rng)
    })
    .into_iter()
    .collect()
}

pub fn evaluate_trips(
    model: &Model,
    records: &[TravelRecord],
    top_p: f64,
    dedup: bool,
    seed: u64,
    exec: Execution,
) -> Result<MetricSummary> {
    let preds = predict_trips(model, records, top_p, dedup, seed, exec)?;
    let pairs: Vec<_> = preds.into_iter().zip(records.iter().map(TravelRecord::trip)).collect();
    Ok(summarize(&pairs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub summary: MetricSummary,
}

/// One method/variant evaluated at several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub split: String,
    pub top_p: f64,
    pub config_hash: String,
    pub per_seed: Vec<SeedRow>,
    /// Mean over seeds; absent when no trip was scored.
    pub mean: Option<TripScores>,
    pub trips: usize,
    pub vacuous: usize,
}

impl MetricReport {
    pub fn from_rows(label: &str, split: &str, top_p: f64, config_hash: &str, per_seed: Vec<SeedRow>) -> Self {
        let trips = per_seed.first().map_or(0, |r| r.summary.trips);
        let vacuous = per_seed.first().map_or(0, |r| r.summary.vacuous);
        let mean = (trips > 0 && !per_seed.is_empty()).then(|| {
            let mut m = TripScores::default();
            for r in &per_seed {
                m.add(&r.summary.scores);
            }
            m.scale(1.0 / per_seed.len() as f64);
            m
        });
        Self {
            label: label.to_string(),
            split: split.to_string(),
            top_p,
            config_hash: config_hash.to_string(),
            per_seed,
            mean,
            trips,
            vacuous,
        }
    }
}

/// Evaluates the model at every seed in `seeds`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    model: &Model,
    records: &[TravelRecord],
    label: &str,
    split: &str,
    top_p: f64,
    dedup: bool,
    seeds: &[u64],
    config_hash: &str,
    exec: Execution,
) -> Result<MetricReport> {
    let rows = seeds
        .iter()
        .map(|&seed| {
            Ok(SeedRow {
                seed,
                summary: evaluate_trips(model, records, top_p, dedup, seed, exec)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(label, split, top_p, config_hash, rows))
}

/// The popularity baseline fitted on `train`, scored on `records`.
pub fn evaluate_popularity(
    train: &[TravelRecord],
    records: &[TravelRecord],
    region_pois: impl Fn(usize) -> Result<Vec<usize>>,
    split: &str,
) -> Result<MetricReport> {
    let pop = Popularity::fit(train);
    let pairs = records
        .iter()
        .map(|r| {
            let q = r.query();
            Ok((pop.recommend(&q, &region_pois(q.region)?)?, r.trip()))
        })
        .collect::<Result<Vec<_>>>()?;
    let row = SeedRow {
        seed: 0,
        summary: summarize(&pairs),
    };
    Ok(MetricReport::from_rows("popularity", split, 0.0, "", vec![row]))
}

/// Plain-text table of reports, one block per report.
pub fn format_reports(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<14} {:>6} {:>8} {:>8} {:>8} {:>8} {:>12}",
        "method", "seed", "F1", "PairsF1", "Full-F1", "Full-PF1", "trips"
    )
    .unwrap();
    for r in reports {
        for row in &r.per_seed {
            let s = &row.summary;
            writeln!(
                out,
                "{:<14} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>12}",
                r.label, row.seed, s.scores.f1, s.scores.pairs_f1, s.scores.full_f1, s.scores.full_pairs_f1, s.trips
            )
            .unwrap();
        }
        match &r.mean {
            Some(m) => writeln!(
                out,
                "{:<14} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>12}",
                r.label, "mean", m.f1, m.pairs_f1, m.full_f1, m.full_pairs_f1, r.trips
            )
            .unwrap(),
            None => writeln!(out, "{:<14} {:>6} no trips scored", r.label, "mean").unwrap(),
        }
    }
    let vacuous: usize = reports.iter().map(|r| r.vacuous).max().unwrap_or(0);
    if vacuous > 0 {
        writeln!(
            out,
            "note: {vacuous} two-stop trip(s) have no intermediates and are excluded from averages"
        )
        .unwrap();
    }
    out
}
