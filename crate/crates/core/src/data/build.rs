use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    CheckIn, Dataset, DatasetMeta, KgTriple, KnowledgeGraph, MinMax, Normalization, PoiInfo, Region, TravelRecord,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_poi_visits: usize,
    pub min_hometown: usize,
    pub min_outoftown: usize,
    pub min_pair_frequency: usize,
    pub min_duration_secs: f64,
    pub max_duration_secs: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_poi_visits: 2,
            min_hometown: 4,
            min_outoftown: 3,
            min_pair_frequency: 10,
            min_duration_secs: 3600.0,
            max_duration_secs: 30.0 * 86400.0,
        }
    }
}

struct RawRecord<'a> {
    user: &'a str,
    hometown: Vec<&'a CheckIn>,
    outoftown: Vec<&'a CheckIn>,
    home_region: usize,
    out_region: usize,
}

/// One filtering pass: POI frequency, then record thresholds, then
/// `(hometown, out-of-town)` pair frequency.
fn filter_pass<'a>(checkins: &[&'a CheckIn], cfg: &FilterConfig) -> Vec<RawRecord<'a>> {
    let mut poi_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in checkins {
        *poi_counts.entry(c.poi).or_default() += 1;
    }

    let mut by_user: BTreeMap<&str, Vec<&CheckIn>> = BTreeMap::new();
    for c in checkins.iter().copied() {
        if poi_counts[&c.poi] >= cfg.min_poi_visits {
            by_user.entry(c.user_id.as_str()).or_default().push(c);
        }
    }

    let mut records = Vec::new();
    for (user, mut visits) in by_user {
        visits.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut per_region: BTreeMap<usize, Vec<&CheckIn>> = BTreeMap::new();
        for c in visits {
            per_region.entry(c.region).or_default().push(c);
        }
        // Most check-ins wins; BTreeMap order makes the smaller region win ties.
        let Some(home) = per_region
            .iter()
            .fold(None::<(usize, usize)>, |best, (&r, v)| match best {
                Some((_, n)) if n >= v.len() => best,
                _ => Some((r, v.len())),
            })
            .map(|(r, _)| r)
        else {
            continue;
        };
        let hometown = &per_region[&home];
        for (&region, out) in &per_region {
            if region == home {
                continue;
            }
            let duration = out.last().unwrap().time - out[0].time;
            let keep = hometown.len() >= cfg.min_hometown
                && out.len() >= cfg.min_outoftown
                && hometown.len() > out.len()
                && duration >= cfg.min_duration_secs
                && duration <= cfg.max_duration_secs;
            if keep {
                records.push(RawRecord {
                    user,
                    hometown: hometown.clone(),
                    outoftown: out.clone(),
                    home_region: home,
                    out_region: region,
                });
            }
        }
    }

    let mut pair_counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for r in &records {
        *pair_counts.entry((r.home_region, r.out_region)).or_default() += 1;
    }
    records.retain(|r| pair_counts[&(r.home_region, r.out_region)] >= cfg.min_pair_frequency);
    records
}

fn retain_fixed_point<'a>(checkins: &'a [CheckIn], cfg: &FilterConfig) -> (Vec<&'a CheckIn>, Vec<RawRecord<'a>>) {
    let mut current: Vec<&CheckIn> = checkins.iter().collect();
    loop {
        let records = filter_pass(&current, cfg);
        let kept: BTreeSet<*const CheckIn> = records
            .iter()
            .flat_map(|r| r.hometown.iter().chain(&r.outoftown))
            .map(|c| *c as *const CheckIn)
            .collect();
        let next: Vec<&CheckIn> = current
            .iter()
            .copied()
            .filter(|c| kept.contains(&(*c as *const CheckIn)))
            .collect();
        if next.len() == current.len() {
            return (current, records);
        }
        current = next;
    }
}

/// Filters, normalizes and splits raw check-ins into a [`Dataset`].
///
/// The filter pass is repeated on its own surviving check-ins until nothing
/// changes, so the result is a fixed point: rebuilding from the retained
/// check-ins yields the same records.
pub fn build_dataset(checkins: &[CheckIn], kg_triples: &[KgTriple], cfg: &FilterConfig, seed: u64) -> Result<Dataset> {
    let mut region_of: BTreeMap<usize, usize> = BTreeMap::new();
    for c in checkins {
        if let Some(&r) = region_of.get(&c.poi) {
            if r != c.region {
                return Err(Error::InvalidInput(format!(
                    "POI {} appears in regions {r} and {}",
                    c.poi, c.region
                )));
            }
        } else {
            region_of.insert(c.poi, c.region);
        }
    }

    let (current, records) = retain_fixed_point(checkins, cfg);
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let normalization = Normalization {
        time: MinMax::fit(current.iter().map(|c| c.time)),
        lat: MinMax::fit(current.iter().map(|c| c.lat)),
        lon: MinMax::fit(current.iter().map(|c| c.lon)),
    };

    let mut poi_first: BTreeMap<usize, &CheckIn> = BTreeMap::new();
    for c in &current {
        poi_first.entry(c.poi).or_insert(c);
    }
    let region_raw: BTreeSet<usize> = poi_first.values().map(|c| c.region).collect();
    let region_index: BTreeMap<usize, usize> = region_raw.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let poi_index: BTreeMap<usize, usize> = poi_first.keys().enumerate().map(|(i, &p)| (p, i)).collect();

    let pois: Vec<PoiInfo> = poi_first
        .values()
        .map(|c| PoiInfo {
            raw_id: c.poi,
            region: region_index[&c.region],
            lat: c.lat,
            lon: c.lon,
        })
        .collect();
    let mut regions: Vec<Region> = region_raw
        .iter()
        .map(|&raw_id| Region {
            raw_id,
            pois: Vec::new(),
        })
        .collect();
    for (i, p) in pois.iter().enumerate() {
        regions[p.region].pois.push(i);
    }

    let num_entities = kg_triples.iter().map(|t| t.tail_entity + 1).max().unwrap_or(0);
    let num_relations = kg_triples.iter().map(|t| t.relation + 1).max().unwrap_or(0);
    let triples: BTreeSet<KgTriple> = kg_triples
        .iter()
        .filter_map(|t| {
            poi_index.get(&t.head_poi).map(|&h| KgTriple {
                head_poi: h,
                relation: t.relation,
                tail_entity: t.tail_entity,
            })
        })
        .collect();
    let kg = KnowledgeGraph {
        triples: triples.into_iter().collect(),
        num_entities,
        num_relations,
    };

    let normalize = |c: &CheckIn| CheckIn {
        user_id: c.user_id.clone(),
        time: normalization.time.apply(c.time),
        lat: normalization.lat.apply(c.lat),
        lon: normalization.lon.apply(c.lon),
        poi: poi_index[&c.poi],
        region: region_index[&c.region],
    };
    let records: Vec<TravelRecord> = records
        .iter()
        .map(|r| TravelRecord {
            user_id: r.user.to_string(),
            hometown: r.hometown.iter().map(|c| normalize(c)).collect(),
            outoftown: r.outoftown.iter().map(|c| normalize(c)).collect(),
            hometown_region: region_index[&r.home_region],
            outoftown_region: region_index[&r.out_region],
        })
        .collect();

    let mut users: Vec<String> = records
        .iter()
        .map(|r| r.user_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    users.shuffle(&mut rng);
    let n = users.len();
    let n_valid = (n as f64 * 0.1).round() as usize;
    let n_test = (n as f64 * 0.1).round() as usize;
    let n_train = n - n_valid - n_test;
    let train_users: BTreeSet<&str> = users[..n_train].iter().map(String::as_str).collect();
    let valid_users: BTreeSet<&str> = users[n_train..n_train + n_valid].iter().map(String::as_str).collect();

    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for r in records {
        if train_users.contains(r.user_id.as_str()) {
            train.push(r);
        } else if valid_users.contains(r.user_id.as_str()) {
            valid.push(r);
        } else {
            test.push(r);
        }
    }

    Ok(Dataset {
        pois,
        regions,
        kg,
        train,
        valid,
        test,
        meta: DatasetMeta {
            normalization,
            seed,
            filter: cfg.clone(),
        },
    })
}

/// The input check-ins that survive filtering, in input order.
pub fn surviving_checkins(checkins: &[CheckIn], cfg: &FilterConfig) -> Vec<CheckIn> {
    let (current, _) = retain_fixed_point(checkins, cfg);
    current.into_iter().cloned().collect()
}
