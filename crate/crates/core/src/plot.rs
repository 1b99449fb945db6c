//! Static SVG case plots: ground truth and recommended trips as lat/lon
//! polylines, with panels for full, origin-only and destination-only queries.

use std::fmt::Write as _;

use rand::Rng;

use crate::data::{Dataset, TravelRecord};
use crate::error::{Error, Result};
use crate::model::Model;

const PANEL: f64 = 320.0;
const MARGIN: f64 = 28.0;
const HEADER: f64 = 36.0;

/// One panel: a title and the two trips to draw.
pub struct CasePanel {
    pub title: String,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

/// Runs the three queries for `record` and collects panels.
pub fn case_panels<R: Rng>(
    model: &Model,
    record: &TravelRecord,
    top_p: f64,
    dedup: bool,
    rng: &mut R,
) -> Result<Vec<CasePanel>> {
    let q = record.query();
    let truth = record.trip();
    let mut panels = Vec::new();
    for (title, origin, dest) in [
        ("origin + destination", Some(q.origin), Some(q.destination)),
        ("origin only", Some(q.origin), None),
        ("destination only", None, Some(q.destination)),
    ] {
        let predicted =
            model.recommend_partial(&record.hometown, origin, dest, q.stops, q.region, top_p, dedup, rng)?;
        panels.push(CasePanel {
            title: title.to_string(),
            truth: truth.clone(),
            predicted,
        });
    }
    Ok(panels)
}

fn coords(ds: &Dataset, poi: usize) -> Result<(f64, f64)> {
    let p = ds
        .pois
        .get(poi)
        .ok_or_else(|| Error::InvalidInput(format!("unknown POI {poi}")))?;
    if !(p.lat.is_finite() && p.lon.is_finite()) {
        return Err(Error::InvalidInput(format!("POI {} has no coordinates", p.raw_id)));
    }
    Ok((p.lat, p.lon))
}

/// Renders panels side by side. Output depends only on the inputs.
pub fn render_svg(ds: &Dataset, panels: &[CasePanel], caption: &str) -> Result<String> {
    let mut pts = Vec::new();
    for p in panels {
        for &poi in p.truth.iter().chain(&p.predicted) {
            pts.push(coords(ds, poi)?);
        }
    }
    if pts.is_empty() {
        return Err(Error::InvalidInput("nothing to plot".into()));
    }
    let (mut lat0, mut lat1, mut lon0, mut lon1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(la, lo) in &pts {
        lat0 = lat0.min(la);
        lat1 = lat1.max(la);
        lon0 = lon0.min(lo);
        lon1 = lon1.max(lo);
    }
    let span = (lat1 - lat0).max(lon1 - lon0).max(1e-9);
    let inner = PANEL - 2.0 * MARGIN;
    let project = |(la, lo): (f64, f64), panel: usize| -> (f64, f64) {
        let x = panel as f64 * PANEL + MARGIN + (lo - lon0) / span * inner;
        let y = HEADER + MARGIN + (lat1 - la) / span * inner;
        (x, y)
    };

    let width = PANEL * panels.len().max(1) as f64;
    let height = PANEL + HEADER;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="8" y="16">{}</text>"#, escape(caption)).unwrap();
    for (i, p) in panels.iter().enumerate() {
        let x0 = i as f64 * PANEL;
        writeln!(s, r#"<g id="panel{i}">"#).unwrap();
        writeln!(
            s,
            r##"<rect x="{:.1}" y="{HEADER:.1}" width="{PANEL:.1}" height="{PANEL:.1}" fill="none" stroke="#ccc"/>"##,
            x0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            x0 + 8.0,
            HEADER - 6.0,
            escape(&p.title)
        )
        .unwrap();
        for (trip, color, dash) in [
            (&p.truth, "#1f77b4", ""),
            (&p.predicted, "#d62728", r#" stroke-dasharray="6 3""#),
        ] {
            let line: Vec<String> = trip
                .iter()
                .map(|&poi| {
                    let (x, y) = project(coords(ds, poi).expect("checked above"), i);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
                line.join(" ")
            )
            .unwrap();
            for (k, &poi) in trip.iter().enumerate() {
                let (x, y) = project(coords(ds, poi).expect("checked above"), i);
                let r = if k == 0 || k + 1 == trip.len() { 5.0 } else { 3.0 };
                writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.1}" fill="{color}"/>"#).unwrap();
            }
        }
        writeln!(s, "</g>").unwrap();
    }
    writeln!(
        s,
        r##"<text x="8" y="{:.1}" fill="#1f77b4">truth</text><text x="56" y="{:.1}" fill="#d62728">recommended</text>"##,
        height - 8.0,
        height - 8.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
