//! Check-in ingestion, travel-record assembly, normalization, splitting and
//! dataset persistence.

mod build;
mod ingest;
mod store;
pub mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use build::{build_dataset, surviving_checkins, FilterConfig};
pub use ingest::{ingest_checkins, ingest_kg, parse_checkins, parse_kg, CheckinFormat};

/// One visit. After ingestion `time`, `lat` and `lon` are raw (epoch seconds,
/// degrees) and `poi`/`region` hold the file's tokens; inside a [`Dataset`]
/// they are normalized to `[0, 1]` and re-indexed into the vocabularies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckIn {
    pub user_id: String,
    pub time: f64,
    pub lat: f64,
    pub lon: f64,
    pub poi: usize,
    pub region: usize,
}

/// A user's hometown history paired with one out-of-town visit sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TravelRecord {
    pub user_id: String,
    pub hometown: Vec<CheckIn>,
    pub outoftown: Vec<CheckIn>,
    pub hometown_region: usize,
    pub outoftown_region: usize,
}

impl TravelRecord {
    pub fn trip(&self) -> Vec<usize> {
        self.outoftown.iter().map(|c| c.poi).collect()
    }

    pub fn query(&self) -> Query {
        let trip = self.trip();
        Query {
            origin: trip[0],
            destination: *trip.last().expect("non-empty trip"),
            stops: trip.len(),
            region: self.outoftown_region,
        }
    }
}

/// `(origin, destination, N)` in a target region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub origin: usize,
    pub destination: usize,
    pub stops: usize,
    pub region: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KgTriple {
    pub head_poi: usize,
    pub relation: usize,
    pub tail_entity: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub triples: Vec<KgTriple>,
    pub num_entities: usize,
    pub num_relations: usize,
}

impl KnowledgeGraph {
    /// `(entity, relation)` neighbors per POI, in triple order.
    pub fn neighbors(&self, num_pois: usize) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); num_pois];
        for t in &self.triples {
            out[t.head_poi].push((t.tail_entity, t.relation));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiInfo {
    pub raw_id: usize,
    pub region: usize,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub raw_id: usize,
    pub pois: Vec<usize>,
}

/// Min-max constants for one field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            min = min.min(v);
            max = max.max(v);
        }
        Self { min, max }
    }

    /// Degenerate ranges map everything to 0.
    pub fn apply(&self, x: f64) -> f64 {
        if self.max > self.min {
            (x - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub time: MinMax,
    pub lat: MinMax,
    pub lon: MinMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub normalization: Normalization,
    pub seed: u64,
    pub filter: FilterConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub pois: Vec<PoiInfo>,
    pub regions: Vec<Region>,
    pub kg: KnowledgeGraph,
    pub train: Vec<TravelRecord>,
    pub valid: Vec<TravelRecord>,
    pub test: Vec<TravelRecord>,
    pub meta: DatasetMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(crate::Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[TravelRecord] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn num_pois(&self) -> usize {
        self.pois.len()
    }

    pub fn all_records(&self) -> impl Iterator<Item = &TravelRecord> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn max_trip_len(&self) -> usize {
        self.all_records().map(|r| r.outoftown.len()).max().unwrap_or(0)
    }

    pub fn poi_index_by_raw(&self) -> BTreeMap<usize, usize> {
        self.pois.iter().enumerate().map(|(i, p)| (p.raw_id, i)).collect()
    }

    pub fn find_user(&self, user_id: &str) -> Option<&TravelRecord> {
        self.all_records().find(|r| r.user_id == user_id)
    }
}

pub use store::{load_dataset, save_dataset};
