//! Planted synthetic travel data.
//!
//! Every region holds `pois_per_region` POIs laid out as `categories` columns
//! by `pois_per_region / categories` slots. Each traveller has a preferred
//! category that dominates their hometown history. Out-of-town intermediate
//! stops follow the preferred category in the first half of the trip and
//! drift `drift` categories forward in the second half, visiting slot
//! `n - 2` at intermediate position `n`. Origins and destinations are drawn
//! from the slots no intermediate stop can use. The out-of-town trip is thus
//! a deterministic function of the hometown preference, the trip length and
//! the position along the trip.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CheckIn, KgTriple};
use crate::error::{Error, Result};

/// Relation indices used by the generated knowledge graph.
pub const REL_CATEGORY: usize = 0;
pub const REL_REGION: usize = 1;
pub const REL_TIER: usize = 2;
const TIERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub users: usize,
    pub regions: usize,
    pub pois_per_region: usize,
    pub categories: usize,
    /// Inclusive range of out-of-town trip lengths.
    pub trip_len: (usize, usize),
    /// Inclusive range of hometown history lengths.
    pub hometown_len: (usize, usize),
    /// Probability that a hometown visit ignores the preferred category.
    pub hometown_noise: f64,
    /// Category shift applied to the second half of every trip.
    pub drift: usize,
    /// Visits per POI from locals who never travel.
    pub background_visits: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 50,
            regions: 2,
            pois_per_region: 30,
            categories: 5,
            trip_len: (4, 6),
            hometown_len: (7, 10),
            hometown_noise: 0.2,
            drift: 1,
            background_visits: 2,
            seed: 7,
        }
    }
}

impl SynthSpec {
    fn slots(&self) -> usize {
        self.pois_per_region / self.categories.max(1)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.pois_per_region == 0 {
            return bad("pois_per_region must be positive");
        }
        if self.regions < 2 {
            return bad("need at least two regions to travel between");
        }
        if self.categories == 0 || !self.pois_per_region.is_multiple_of(self.categories) {
            return bad("pois_per_region must be a positive multiple of categories");
        }
        if self.users == 0 {
            return bad("users must be positive");
        }
        let (tmin, tmax) = self.trip_len;
        let (hmin, hmax) = self.hometown_len;
        if tmin < 3 || tmin > tmax {
            return bad("trip_len must satisfy 3 <= min <= max");
        }
        if hmin < 4 || hmin > hmax {
            return bad("hometown_len must satisfy 4 <= min <= max");
        }
        if hmax <= tmin {
            return bad("hometown histories must be longer than trips (M > N)");
        }
        // Intermediate stops use slots 0..tmax-2; endpoints need two more.
        if self.slots() < tmax - 2 + 1 || (self.slots() - (tmax - 2)) * self.categories < 2 {
            return bad("too few POIs per category for the requested trip lengths");
        }
        if !(0.0..=1.0).contains(&self.hometown_noise) {
            return bad("hometown_noise must lie in [0, 1]");
        }
        if self.users / self.regions < 10 {
            return bad("fewer than 10 travellers per region pair would be filtered out");
        }
        Ok(())
    }

    pub fn raw_poi(&self, region: usize, category: usize, slot: usize) -> usize {
        region * self.pois_per_region + slot * self.categories + category
    }

    pub fn category_of(&self, raw_poi: usize) -> usize {
        (raw_poi % self.pois_per_region) % self.categories
    }

    /// Planted category for trip position `n` (1-based) of an `stops`-long trip.
    pub fn planted_category(&self, preferred: usize, n: usize, stops: usize) -> usize {
        let phase = (n - 1) as f64 / (stops - 1) as f64;
        let shift = if phase >= 0.5 { self.drift } else { 0 };
        (preferred + shift) % self.categories
    }

    /// The planted trip for a traveller preferring `preferred`, as raw POI ids.
    pub fn planted_trip(
        &self,
        region: usize,
        preferred: usize,
        origin: usize,
        destination: usize,
        stops: usize,
    ) -> Vec<usize> {
        let mut trip = vec![origin];
        for n in 2..stops {
            let cat = self.planted_category(preferred, n, stops);
            trip.push(self.raw_poi(region, cat, n - 2));
        }
        trip.push(destination);
        trip
    }
}

/// Planted structure needed to score an oracle recommender.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    /// Preferred category per traveller.
    pub preference: BTreeMap<String, usize>,
    pub num_entities: usize,
    pub num_relations: usize,
}

impl GroundTruth {
    /// Oracle: the planted trip for `user` under a query, in raw POI ids.
    pub fn oracle_trip(
        &self,
        user: &str,
        region: usize,
        origin: usize,
        destination: usize,
        stops: usize,
    ) -> Option<Vec<usize>> {
        let pref = *self.preference.get(user)?;
        Some(self.spec.planted_trip(region, pref, origin, destination, stops))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub checkins: Vec<CheckIn>,
    pub triples: Vec<KgTriple>,
    pub truth: GroundTruth,
}

impl SyntheticData {
    pub fn checkins_tsv(&self) -> String {
        let mut out = String::new();
        for c in &self.checkins {
            out.push_str(&format!(
                "{}\t{}\t{:?}\t{:?}\t{}\t{}\n",
                c.user_id, c.time, c.lat, c.lon, c.poi, c.region
            ));
        }
        out
    }

    pub fn kg_tsv(&self) -> String {
        self.triples
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.head_poi, t.relation, t.tail_entity))
            .collect()
    }
}

const DAY: f64 = 86400.0;
const HOUR: f64 = 3600.0;
const EPOCH: f64 = 1_600_000_000.0;

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let slots = spec.slots();
    let max_inter = spec.trip_len.1 - 2;
    let endpoint_slots: Vec<usize> = (max_inter..slots).collect();

    let coords = |region: usize, raw: usize| {
        let local = raw % spec.pois_per_region;
        let (slot, cat) = (local / spec.categories, local % spec.categories);
        let lat = 30.0 + 3.0 * region as f64 + 0.01 * cat as f64 + 0.002 * slot as f64;
        let lon = 100.0 + 4.0 * region as f64 + 0.01 * slot as f64 + 0.003 * cat as f64;
        (lat, lon)
    };

    // Entities: categories, then regions, then tiers.
    let num_entities = spec.categories + spec.regions + TIERS;
    let mut triples = Vec::new();
    for region in 0..spec.regions {
        for local in 0..spec.pois_per_region {
            let raw = region * spec.pois_per_region + local;
            let cat = local % spec.categories;
            triples.push(KgTriple {
                head_poi: raw,
                relation: REL_CATEGORY,
                tail_entity: cat,
            });
            triples.push(KgTriple {
                head_poi: raw,
                relation: REL_REGION,
                tail_entity: spec.categories + region,
            });
            triples.push(KgTriple {
                head_poi: raw,
                relation: REL_TIER,
                tail_entity: spec.categories + spec.regions + (local / spec.categories) % TIERS,
            });
        }
    }

    let mut checkins = Vec::new();
    let mut preference = BTreeMap::new();
    let checkin = |user: &str, time: f64, region: usize, raw: usize| {
        let (lat, lon) = coords(region, raw);
        CheckIn {
            user_id: user.to_string(),
            time,
            lat,
            lon,
            poi: raw,
            region,
        }
    };

    for u in 0..spec.users {
        let user = format!("u{u:04}");
        let home = u % spec.regions;
        let away = (home + 1) % spec.regions;
        let pref = rng.random_range(0..spec.categories);
        preference.insert(user.clone(), pref);

        let stops = rng.random_range(spec.trip_len.0..=spec.trip_len.1);
        let m_lo = spec.hometown_len.0.max(stops + 1);
        let m = rng.random_range(m_lo..=spec.hometown_len.1.max(m_lo));
        let trip_start = EPOCH + rng.random_range(60.0..300.0) * DAY;

        for k in 0..m {
            let cat = if rng.random_bool(spec.hometown_noise) {
                rng.random_range(0..spec.categories)
            } else {
                pref
            };
            let slot = rng.random_range(0..slots);
            let t = trip_start - 50.0 * DAY + k as f64 * (40.0 * DAY / m as f64) + rng.random_range(0.0..HOUR);
            checkins.push(checkin(&user, t, home, spec.raw_poi(home, cat, slot)));
        }

        let pick_endpoint = |rng: &mut ChaCha8Rng| {
            let slot = endpoint_slots[rng.random_range(0..endpoint_slots.len())];
            spec.raw_poi(away, rng.random_range(0..spec.categories), slot)
        };
        let origin = pick_endpoint(&mut rng);
        let destination = loop {
            let d = pick_endpoint(&mut rng);
            if d != origin {
                break d;
            }
        };
        let trip = spec.planted_trip(away, pref, origin, destination, stops);
        for (k, &raw) in trip.iter().enumerate() {
            let jitter = if k == 0 {
                0.0
            } else {
                rng.random_range(-0.5..0.5) * HOUR
            };
            let t = trip_start + k as f64 * 3.0 * HOUR + jitter;
            checkins.push(checkin(&user, t, away, raw));
        }
    }

    for region in 0..spec.regions {
        for local in 0..spec.pois_per_region {
            let raw = region * spec.pois_per_region + local;
            for b in 0..spec.background_visits {
                let user = format!("local{region}_{b:02}");
                let t = EPOCH + rng.random_range(0.0..365.0) * DAY;
                checkins.push(checkin(&user, t, region, raw));
            }
        }
    }

    checkins.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.time.total_cmp(&b.time)));
    Ok(SyntheticData {
        checkins,
        triples,
        truth: GroundTruth {
            spec: spec.clone(),
            preference,
            num_entities,
            num_relations: 3,
        },
    })
}
