//! Run and sweep entrypoints: execute experiments and write their artifacts.
//!
//! A run directory holds `config.txt`, `metrics.csv`, `metrics.jsonl`,
//! `mask_chain.csv`, `masks/round_NNNNN.fmsk`, `model.fmap` and
//! `manifest.json`. Every file goes through a write-then-rename.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::ExperimentConfig;
use crate::error::{FedMapError, Result};
use crate::federation::{run_experiment, RunOutput, METRICS_HEADER};
use crate::io_util::write_atomic;
use crate::tensor_nn::encode_checkpoint;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub version: String,
    pub final_accuracy: f64,
    pub cumulative_bytes: u64,
}

impl RunManifest {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.config_hash,
            "seed": self.seed,
            "started_unix_ms": self.started_unix_ms as u64,
            "finished_unix_ms": self.finished_unix_ms as u64,
            "out_dir": self.out_dir.display().to_string(),
            "files": self.files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>(),
            "version": self.version,
            "final_accuracy": self.final_accuracy,
            "cumulative_bytes": self.cumulative_bytes,
        })
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| FedMapError::io(path, e))
}

pub fn metrics_csv<T>(out: &RunOutput<T>) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in &out.metrics {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

pub fn metrics_jsonl<T>(out: &RunOutput<T>) -> String {
    out.metrics
        .iter()
        .map(|m| format!("{}\n", m.to_json()))
        .collect()
}

pub fn mask_chain_csv<T>(out: &RunOutput<T>) -> String {
    let mut s = String::from("round,remaining_params,subset_of_previous,reactivated,file\n");
    for e in &out.mask_chain {
        let _ = writeln!(
            s,
            "{},{},{},{},masks/round_{:05}.fmsk",
            e.round,
            e.mask.count(),
            u8::from(e.subset_of_previous),
            e.reactivated,
            e.round
        );
    }
    s
}

/// Executes `cfg` in double precision and writes every artifact into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    let started = now_ms();
    cfg.validate()?;
    create_dir(out_dir)?;
    let output = run_experiment::<f64>(cfg)?;

    let mut files = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = out_dir.join(name);
        write_atomic(&path, bytes)?;
        files.push(PathBuf::from(name));
        Ok(())
    };
    put("config.txt", cfg.dump().as_bytes())?;
    put("metrics.csv", metrics_csv(&output).as_bytes())?;
    put("metrics.jsonl", metrics_jsonl(&output).as_bytes())?;
    put("mask_chain.csv", mask_chain_csv(&output).as_bytes())?;
    create_dir(&out_dir.join("masks"))?;
    for e in &output.mask_chain {
        put(
            &format!("masks/round_{:05}.fmsk", e.round),
            &e.mask.to_bytes(),
        )?;
    }
    put("model.fmap", &encode_checkpoint(&output.final_model))?;

    files.push(PathBuf::from("manifest.json"));
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        out_dir: out_dir.to_path_buf(),
        files,
        version: VERSION.to_string(),
        final_accuracy: output.final_accuracy(),
        cumulative_bytes: output.bytes.last().map_or(0, |b| b.cumulative),
    };
    let json = serde_json::to_string_pretty(&manifest.to_json()).expect("manifest serializes");
    write_atomic(&out_dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

/// Parameter grid: one `key = v1, v2, ...` line per swept key. Lists that
/// contain `|` are split on `|` instead, for values that contain commas
/// (`model.hidden = 64,32 | 32`).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for (line, key, value) in crate::config::parse_assignments(text)? {
            let sep = if value.contains('|') { '|' } else { ',' };
            let values: Vec<String> = value.split(sep).map(|v| v.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(FedMapError::Parse {
                    line,
                    msg: format!("empty value in the list for `{key}`"),
                });
            }
            axes.push((key, values));
        }
        if axes.is_empty() {
            return Err(FedMapError::config("grid", "is empty"));
        }
        Ok(Self { axes })
    }

    /// Cartesian product; the first axis varies slowest.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut c = prefix.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

/// Result of one sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: usize,
    pub params: Vec<(String, String)>,
    pub manifest: Option<RunManifest>,
    /// Cumulative bytes when the schedule first reached its floor.
    pub bytes_to_target_sparsity: Option<u64>,
    pub error: Option<String>,
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn sweep_summary_csv(outcomes: &[CellOutcome]) -> String {
    let mut s = String::from("cell,params,final_accuracy,bytes_to_target_sparsity,status\n");
    for o in outcomes {
        let params: Vec<String> = o.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let acc = o
            .manifest
            .as_ref()
            .map_or(String::new(), |m| m.final_accuracy.to_string());
        let bytes = o
            .bytes_to_target_sparsity
            .map_or(String::new(), |b| b.to_string());
        let status = match &o.error {
            None => "ok".to_string(),
            Some(e) => csv_quote(&format!("error: {e}")),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            o.cell,
            csv_quote(&params.join(";")),
            acc,
            bytes,
            status
        );
    }
    s
}

fn run_cell(
    base: &ExperimentConfig,
    params: &[(String, String)],
    dir: &Path,
) -> Result<(RunManifest, Option<u64>)> {
    let mut cfg = base.clone();
    for (k, v) in params {
        cfg.set(k, v)
            .map_err(|msg| FedMapError::config(k.clone(), msg))?;
    }
    cfg.validate()?;
    let manifest = run(&cfg, dir)?;
    let floor = cfg.schedule_spec().floor_params();
    let csv = std::fs::read_to_string(dir.join("metrics.csv"))
        .map_err(|e| FedMapError::io(dir.join("metrics.csv"), e))?;
    let bytes = csv.lines().skip(1).find_map(|row| {
        let cols: Vec<&str> = row.split(',').collect();
        let remaining: usize = cols.get(3)?.parse().ok()?;
        let cumulative: u64 = cols.get(7)?.parse().ok()?;
        (remaining <= floor).then_some(cumulative)
    });
    Ok((manifest, bytes))
}

/// Runs every grid cell under `out_dir/cell_NNNN` and writes `summary.csv`.
/// Failed cells are recorded and the sweep moves on.
pub fn sweep(base: &ExperimentConfig, grid: &Grid, out_dir: &Path) -> Result<Vec<CellOutcome>> {
    create_dir(out_dir)?;
    let mut outcomes = Vec::new();
    for (i, params) in grid.cells().into_iter().enumerate() {
        let dir = out_dir.join(format!("cell_{i:04}"));
        let outcome = match run_cell(base, &params, &dir) {
            Ok((manifest, bytes)) => CellOutcome {
                cell: i,
                params,
                manifest: Some(manifest),
                bytes_to_target_sparsity: bytes,
                error: None,
            },
            Err(e) => CellOutcome {
                cell: i,
                params,
                manifest: None,
                bytes_to_target_sparsity: None,
                error: Some(e.to_string()),
            },
        };
        outcomes.push(outcome);
    }
    write_atomic(
        &out_dir.join("summary.csv"),
        sweep_summary_csv(&outcomes).as_bytes(),
    )?;
    Ok(outcomes)
}
