//! Dataset directories: one `<city>.jsonl` per city plus `manifest.json`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use msr_core::datagen::{make_benchmark, BenchmarkConfig, CityData, Split};
use msr_core::features::Sample;
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};
use crate::schema::Row;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityEntry {
    pub city: String,
    pub role: Role,
    pub file: String,
    pub rows: usize,
    pub negative_rate_target: f64,
    pub negative_fraction: f64,
    pub oracle_auc: Option<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub delta: f64,
    pub ctx_len: usize,
    pub source_rows: usize,
    pub target_rows: usize,
    pub cities: Vec<CityEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, line: 1, source })
    }

    pub fn city(&self, name: &str) -> Option<&CityEntry> {
        self.cities.iter().find(|c| c.city == name)
    }
}

pub fn city_path(dir: &Path, city: &str) -> PathBuf {
    dir.join(format!("{city}.jsonl"))
}

pub fn write_rows(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = fs::File::create(path).map_err(io(path))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(&Row::from(s)).expect("rows serialize");
        writeln!(out, "{line}").map_err(io(path))?;
    }
    out.flush().map_err(io(path))
}

pub fn read_rows(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.into(),
            line: i + 1,
            source,
        })?;
        out.push(row.into_sample().map_err(|e| {
            Error::Schema(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

fn entry(c: &CityData, role: Role) -> CityEntry {
    CityEntry {
        city: c.profile.city.clone(),
        role,
        file: format!("{}.jsonl", c.profile.city),
        rows: c.samples.len(),
        negative_rate_target: c.profile.negative_rate,
        negative_fraction: c.negative_fraction(),
        oracle_auc: c.oracle_auc(),
        bias: c.bias,
    }
}

/// Generates the benchmark and writes every city plus the manifest.
pub fn generate(out: &Path, cfg: &BenchmarkConfig) -> Result<Manifest> {
    fs::create_dir_all(out).map_err(io(out))?;
    let bench = make_benchmark(cfg)?;
    let mut cities = Vec::new();
    for (data, role) in bench
        .sources
        .iter()
        .map(|c| (c, Role::Source))
        .chain(bench.targets.iter().map(|c| (c, Role::Target)))
    {
        write_rows(&city_path(out, &data.profile.city), &data.samples)?;
        cities.push(entry(data, role));
        log::info!("wrote {} rows for {}", data.samples.len(), data.profile.city);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        delta: cfg.delta,
        ctx_len: cfg.ctx_len,
        source_rows: cfg.source_rows,
        target_rows: cfg.target_rows,
        cities,
    };
    let path = out.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io(&path))?;
    Ok(manifest)
}

/// Reads a city file and cuts the chronological train/val/test split.
pub fn load_split(dir: &Path, city: &str) -> Result<Split> {
    let rows = read_rows(&city_path(dir, city))?;
    if rows.is_empty() {
        return Err(Error::Usage(format!("no rows for city {city}")));
    }
    Ok(Split::chronological(&rows))
}
