use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatabaseEntry, RetrievalResult, SearchDatabase};
use crate::{Error, Result};

/// Per-position attention on the case's patch grid, min-max normalised to
/// `[0, 1]`. Unsampled cells and constant-attention cases are 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows × cols`.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn empty() -> Self {
        Self {
            rows: 0,
            cols: 0,
            values: Vec::new(),
        }
    }

    pub fn from_weights(positions: &[u32], weights: &[f64], grid_cols: u32) -> Self {
        let cols = grid_cols.max(1) as usize;
        let Some(&max_pos) = positions.iter().max() else {
            return Self::empty();
        };
        let rows = max_pos as usize / cols + 1;
        let mut values = vec![0.0; rows * cols];
        let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for (&p, &w) in positions.iter().zip(weights) {
                values[p as usize] = (w - lo) / (hi - lo);
            }
        }
        Self { rows, cols, values }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// One line per row, values space-separated with 6 decimals.
pub fn render_heatmap(h: &Heatmap) -> String {
    let mut out = String::new();
    for row in h.values.chunks(h.cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_heatmap(text: &str) -> Result<Heatmap> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (n, line) in text.lines().enumerate() {
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Malformed(format!("heatmap line {}: {e}", n + 1)))?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(Error::Malformed(format!("heatmap line {} has {} values", n + 1, row.len())));
        }
        values.extend(row);
        rows += 1;
    }
    Ok(Heatmap {
        rows,
        cols: cols.unwrap_or(0),
        values,
    })
}

#[derive(Serialize)]
struct Report<'a> {
    query_id: &'a str,
    ranking: Vec<RankRow<'a>>,
    top: &'a [super::RankedCase],
    heatmaps: Vec<HeatmapRef>,
}

#[derive(Serialize)]
struct RankRow<'a> {
    rank: usize,
    case_id: &'a str,
    distance: f64,
}

#[derive(Serialize)]
struct HeatmapRef {
    case_id: String,
    file: String,
}

fn heatmap_file(case_id: &str) -> String {
    format!("heatmaps/{case_id}.txt")
}

fn write(path: &Path, body: &[u8]) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `matches.tsv` and one heatmap grid per involved case
/// under `dir/heatmaps/`.
pub fn export_explanation(
    result: &RetrievalResult,
    query: &DatabaseEntry,
    db: &SearchDatabase,
    dir: &Path,
) -> Result<()> {
    let maps = dir.join("heatmaps");
    fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    let mut refs = Vec::new();
    let mut involved = vec![query];
    for r in &result.top {
        let entry = db
            .entries
            .iter()
            .find(|e| e.case_id == r.case_id)
            .ok_or_else(|| Error::Incompatible(format!("case {} missing from database", r.case_id)))?;
        involved.push(entry);
    }
    for e in involved {
        let file = heatmap_file(&e.case_id);
        write(&dir.join(&file), render_heatmap(&e.heatmap).as_bytes())?;
        refs.push(HeatmapRef {
            case_id: e.case_id.clone(),
            file,
        });
    }

    let mut table = String::from("rank\tcase_id\tcase_distance\tquery_patch_id\tdb_patch_id\tpatch_distance\n");
    for (rank, r) in result.top.iter().enumerate() {
        for m in &r.matches {
            let _ = writeln!(
                table,
                "{}\t{}\t{:.6}\t{}\t{}\t{:.6}",
                rank + 1,
                r.case_id,
                r.distance,
                m.query_patch_id,
                m.db_patch_id,
                m.distance
            );
        }
    }
    write(&dir.join("matches.tsv"), table.as_bytes())?;

    let report = Report {
        query_id: &result.query_id,
        ranking: result
            .ranking
            .iter()
            .enumerate()
            .map(|(i, (id, d))| RankRow {
                rank: i + 1,
                case_id: id,
                distance: *d,
            })
            .collect(),
        top: &result.top,
        heatmaps: refs,
    };
    let body = serde_json::to_string_pretty(&report).map_err(|e| Error::Malformed(e.to_string()))?;
    write(&dir.join("report.json"), body.as_bytes())
}
