//! Trajectory CSV files and dataset manifests.
//!
//! CSV layout: a header `episode,t,o_1,...,o_D,a_1,...,a_E` followed by one
//! row per step. Rows may appear in any order; each episode must cover the
//! steps `0..T` without gaps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Episode};
use crate::error::{CoreError, Result};
use crate::synth::SyntheticSystem;

fn csv_error(path: &Path, line: u64, detail: impl Into<String>) -> CoreError {
    CoreError::Csv {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

/// Returns `(d_o, d_a)` for a valid header.
fn parse_header(path: &Path, header: &csv::StringRecord) -> Result<(usize, usize)> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.first() != Some(&"episode") {
        return Err(csv_error(path, 1, "missing column `episode`"));
    }
    if cols.get(1) != Some(&"t") {
        return Err(csv_error(path, 1, "missing column `t`"));
    }
    let rest = &cols[2..];
    let obs_dim = rest.iter().take_while(|c| c.starts_with("o_")).count();
    let action_dim = rest.len() - obs_dim;
    for (i, c) in rest[..obs_dim].iter().enumerate() {
        if *c != format!("o_{}", i + 1) {
            return Err(csv_error(path, 1, format!("expected column `o_{}`, found `{c}`", i + 1)));
        }
    }
    for (j, c) in rest[obs_dim..].iter().enumerate() {
        if *c != format!("a_{}", j + 1) {
            return Err(csv_error(path, 1, format!("expected column `a_{}`, found `{c}`", j + 1)));
        }
    }
    if obs_dim == 0 {
        return Err(csv_error(path, 1, "missing observation columns `o_1...`"));
    }
    if action_dim == 0 {
        return Err(csv_error(path, 1, "missing action columns `a_1...`"));
    }
    Ok((obs_dim, action_dim))
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| csv_error(path, 1, e.to_string()))?
        .clone();
    let (obs_dim, action_dim) = parse_header(path, &header)?;
    let width = 2 + obs_dim + action_dim;

    let mut steps: BTreeMap<u64, BTreeMap<u64, (u64, Vec<f64>)>> = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let line = row as u64 + 2;
        let record = record.map_err(|e| csv_error(path, line, e.to_string()))?;
        if record.len() != width {
            return Err(csv_error(path, line, format!("expected {width} fields, found {}", record.len())));
        }
        let int = |i: usize, name: &str| -> Result<u64> {
            record[i]
                .trim()
                .parse::<u64>()
                .map_err(|_| csv_error(path, line, format!("`{name}` is not a non-negative integer: `{}`", &record[i])))
        };
        let episode = int(0, "episode")?;
        let t = int(1, "t")?;
        let values = (2..width)
            .map(|i| {
                let v: f64 = record[i]
                    .trim()
                    .parse()
                    .map_err(|_| csv_error(path, line, format!("column {} is not numeric: `{}`", header[i].trim(), &record[i])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(csv_error(path, line, format!("column {} is not finite", header[i].trim())))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if steps.entry(episode).or_default().insert(t, (line, values)).is_some() {
            return Err(csv_error(path, line, format!("episode {episode} repeats step {t}")));
        }
    }

    let mut episodes = Vec::with_capacity(steps.len());
    for (id, rows) in steps {
        let mut observations = Vec::with_capacity(rows.len());
        let mut actions = Vec::with_capacity(rows.len());
        for (expected, (t, (line, values))) in rows.into_iter().enumerate() {
            if t != expected as u64 {
                return Err(csv_error(
                    path,
                    line,
                    format!("episode {id} is missing step {expected} (next step is {t})"),
                ));
            }
            observations.push(values[..obs_dim].to_vec());
            actions.push(values[obs_dim..].to_vec());
        }
        episodes.push(Episode {
            id,
            observations,
            actions,
        });
    }
    if episodes.is_empty() {
        return Err(csv_error(path, 1, "no data rows"));
    }
    Dataset::new(obs_dim, action_dim, episodes)
}

pub fn write_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, 0, e.to_string()))?;
    let mut header = vec!["episode".to_string(), "t".to_string()];
    header.extend((1..=data.obs_dim).map(|i| format!("o_{i}")));
    header.extend((1..=data.action_dim).map(|j| format!("a_{j}")));
    w.write_record(&header).map_err(|e| csv_error(path, 1, e.to_string()))?;
    let mut line = 1;
    for ep in &data.episodes {
        for (t, (o, a)) in ep.observations.iter().zip(&ep.actions).enumerate() {
            line += 1;
            let mut row = vec![ep.id.to_string(), t.to_string()];
            row.extend(o.iter().chain(a).map(f64::to_string));
            w.write_record(&row).map_err(|e| csv_error(path, line, e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const MANIFEST_FORMAT: &str = "acrkn-dataset";
pub const MANIFEST_VERSION: u32 = 1;

/// Episode ids of each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

/// Reproducibility record written next to a generated CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// CSV file name, relative to the manifest.
    pub data: String,
    pub system: Option<SyntheticSystem>,
    pub episodes: usize,
    pub len: usize,
    pub seed: u64,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub split: Split,
}

impl Manifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(CoreError::Data(format!(
                "unsupported manifest {} v{}",
                m.format, m.version
            )));
        }
        Ok(m)
    }
}
