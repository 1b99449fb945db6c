use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CheckIn, KgTriple};
use crate::error::{Error, Result};

/// Line-delimited input layouts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckinFormat {
    /// `user_id \t timestamp \t lat \t lon \t poi_id \t region_id`
    #[default]
    Tsv,
}

pub fn ingest_checkins(path: &Path, format: CheckinFormat) -> Result<Vec<CheckIn>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkins(&text, format)
}

pub fn ingest_kg(path: &Path) -> Result<Vec<KgTriple>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kg(&text)
}

fn parse_real(field: &str, name: &str, line: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("{name} {field:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("{name} {field:?} is not finite"),
        });
    }
    Ok(v)
}

/// Sorted by `(user, time)`; blank lines are skipped.
pub fn parse_checkins(text: &str, format: CheckinFormat) -> Result<Vec<CheckIn>> {
    let CheckinFormat::Tsv = format;
    let mut out = Vec::new();
    let mut unknown_poi = Vec::new();
    let mut unknown_region = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line,
                message: format!("expected 6 tab-separated fields, found {}", fields.len()),
            });
        }
        let time = parse_real(fields[1], "timestamp", line)?;
        let lat = parse_real(fields[2], "latitude", line)?;
        let lon = parse_real(fields[3], "longitude", line)?;
        let poi = fields[4].trim().parse::<usize>();
        let region = fields[5].trim().parse::<usize>();
        if poi.is_err() {
            unknown_poi.push(fields[4].trim().to_string());
        }
        if region.is_err() {
            unknown_region.push(fields[5].trim().to_string());
        }
        if let (Ok(poi), Ok(region)) = (poi, region) {
            out.push(CheckIn {
                user_id: fields[0].trim().to_string(),
                time,
                lat,
                lon,
                poi,
                region,
            });
        }
    }
    if !unknown_poi.is_empty() {
        return Err(Error::UnknownToken {
            kind: "POI",
            tokens: unknown_poi.join(", "),
        });
    }
    if !unknown_region.is_empty() {
        return Err(Error::UnknownToken {
            kind: "region",
            tokens: unknown_region.join(", "),
        });
    }
    out.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.time.total_cmp(&b.time)));
    Ok(out)
}

/// `head_poi \t relation \t tail_entity`.
pub fn parse_kg(text: &str) -> Result<Vec<KgTriple>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let parse = |f: &str, name: &str| {
            f.trim().parse::<usize>().map_err(|_| Error::Parse {
                line,
                message: format!("{name} {f:?} is not a non-negative integer"),
            })
        };
        out.push(KgTriple {
            head_poi: parse(fields[0], "head_poi")?,
            relation: parse(fields[1], "relation")?,
            tail_entity: parse(fields[2], "tail_entity")?,
        });
    }
    Ok(out)
}
