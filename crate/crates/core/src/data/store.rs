//! On-disk dataset layout: `vocab.tsv`, `kg.tsv`, `{train,valid,test}.jsonl`
//! and `meta.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, KgTriple, KnowledgeGraph, PoiInfo, Region, TravelRecord};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct MetaFile {
    #[serde(flatten)]
    meta: DatasetMeta,
    num_entities: usize,
    num_relations: usize,
    region_raw_ids: Vec<usize>,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut vocab = String::from("poi\traw_poi\tregion\traw_region\tlat\tlon\n");
    for (i, p) in ds.pois.iter().enumerate() {
        writeln!(
            vocab,
            "{i}\t{}\t{}\t{}\t{:?}\t{:?}",
            p.raw_id, p.region, ds.regions[p.region].raw_id, p.lat, p.lon
        )
        .expect("write to string");
    }
    write(&dir.join("vocab.tsv"), &vocab)?;

    let mut kg = String::new();
    for t in &ds.kg.triples {
        writeln!(kg, "{}\t{}\t{}", t.head_poi, t.relation, t.tail_entity).expect("write to string");
    }
    write(&dir.join("kg.tsv"), &kg)?;

    for (name, records) in [("train", &ds.train), ("valid", &ds.valid), ("test", &ds.test)] {
        let mut out = String::new();
        for r in records.iter() {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        write(&dir.join(format!("{name}.jsonl")), &out)?;
    }

    let meta = MetaFile {
        meta: ds.meta.clone(),
        num_entities: ds.kg.num_entities,
        num_relations: ds.kg.num_relations,
        region_raw_ids: ds.regions.iter().map(|r| r.raw_id).collect(),
    };
    write(&dir.join("meta.json"), &serde_json::to_string_pretty(&meta)?)
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, line: usize, name: &str) -> Result<T> {
    field.and_then(|f| f.trim().parse().ok()).ok_or_else(|| Error::Parse {
        line,
        message: format!("bad or missing {name}"),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: MetaFile = serde_json::from_str(&read(&dir.join("meta.json"))?)?;

    let mut pois = Vec::new();
    for (i, line) in read(&dir.join("vocab.tsv"))?.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split('\t');
        let idx: usize = parse_field(f.next(), i + 1, "poi index")?;
        if idx != pois.len() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("vocab index {idx} out of order"),
            });
        }
        let raw_id = parse_field(f.next(), i + 1, "raw_poi")?;
        let region = parse_field(f.next(), i + 1, "region")?;
        let _raw_region: usize = parse_field(f.next(), i + 1, "raw_region")?;
        let lat = parse_field(f.next(), i + 1, "lat")?;
        let lon = parse_field(f.next(), i + 1, "lon")?;
        pois.push(PoiInfo {
            raw_id,
            region,
            lat,
            lon,
        });
    }

    let mut regions: Vec<Region> = meta
        .region_raw_ids
        .iter()
        .map(|&raw_id| Region {
            raw_id,
            pois: Vec::new(),
        })
        .collect();
    for (i, p) in pois.iter().enumerate() {
        let region = regions
            .get_mut(p.region)
            .ok_or_else(|| Error::InvalidInput(format!("POI {i} references unknown region {}", p.region)))?;
        region.pois.push(i);
    }

    let mut triples = Vec::new();
    for (i, line) in read(&dir.join("kg.tsv"))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split('\t');
        triples.push(KgTriple {
            head_poi: parse_field(f.next(), i + 1, "head_poi")?,
            relation: parse_field(f.next(), i + 1, "relation")?,
            tail_entity: parse_field(f.next(), i + 1, "tail_entity")?,
        });
    }

    let load_split = |name: &str| -> Result<Vec<TravelRecord>> {
        read(&dir.join(format!("{name}.jsonl")))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    };

    Ok(Dataset {
        pois,
        regions,
        kg: KnowledgeGraph {
            triples,
            num_entities: meta.num_entities,
            num_relations: meta.num_relations,
        },
        train: load_split("train")?,
        valid: load_split("valid")?,
        test: load_split("test")?,
        meta: meta.meta,
    })
}
