use std::path::Path;
use std::process::Command;

use fedmap::config::{parse_config, ExperimentConfig};
use fedmap::runner::{run, sweep, Grid};
use fedmap::tensor_nn::load_checkpoint;
use fedmap::PruneMask;

const CONFIG: &str = "method = fedmap
clients = 2
rounds = 9
local_epochs = 1
schedule.s = 3
model.hidden = 6
data.samples = 200
data.dim = 5
data.classes = 3
";

fn cfg() -> ExperimentConfig {
    parse_config(CONFIG).unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let manifest = run(&cfg(), &out).unwrap();
    assert_eq!(manifest.config_hash, cfg().hash());
    for f in &manifest.files {
        assert!(out.join(f).is_file(), "{}", f.display());
    }
    let leftovers: Vec<_> = walk(&out)
        .into_iter()
        .filter(|p| p.ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty());

    let csv = read(&out.join("metrics.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,global_test_accuracy,mean_client_accuracy,remaining_params,remaining_fraction,uplink_bytes_per_client,downlink_bytes,cumulative_bytes,prune_event"
    );
    let events: Vec<usize> = lines
        .filter(|l| l.ends_with(",1"))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(events, cfg().schedule_spec().prune_events());
    assert_eq!(read(&out.join("metrics.jsonl")).lines().count(), 9);

    let model = load_checkpoint::<f64>(&out.join("model.fmap")).unwrap();
    assert_eq!(model.num_weights(), cfg().total_params());
    let mut prev: Option<PruneMask> = None;
    for &t in &events {
        let m = PruneMask::load(&out.join(format!("masks/round_{t:05}.fmsk"))).unwrap();
        assert_eq!(m.count(), cfg().schedule_spec().remaining_params(t));
        if let Some(p) = &prev {
            assert!(m.is_subset(p).unwrap());
        }
        prev = Some(m);
    }
    let config_back = parse_config(&read(&out.join("config.txt"))).unwrap();
    assert_eq!(config_back, cfg());
    let json: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(json["config_hash"], manifest.config_hash.as_str());
}

fn walk(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p.display().to_string());
        }
    }
    out
}

#[test]
fn repeated_runs_produce_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    run(&cfg(), &dir.path().join("a")).unwrap();
    run(&cfg(), &dir.path().join("b")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a/metrics.csv")).unwrap(),
        std::fs::read(dir.path().join("b/metrics.csv")).unwrap()
    );
}

#[test]
fn sweep_product_summary_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::parse("schedule.s = 3, 0\nseed = 1,2\n").unwrap();
    let outcomes = sweep(&cfg(), &grid, dir.path()).unwrap();
    assert_eq!(outcomes.len(), 4);
    assert_eq!(outcomes.iter().filter(|o| o.error.is_some()).count(), 2);
    let summary = read(&dir.path().join("summary.csv"));
    assert_eq!(summary.lines().count(), 5);
    assert!(summary.lines().nth(3).unwrap().contains("error"));

    // cell 1 is s=3, seed=2; rerunning it standalone gives the same bytes
    let mut standalone = cfg();
    standalone.schedule.interval = 3;
    standalone.seed = 2;
    run(&standalone, &dir.path().join("solo")).unwrap();
    let cell_csv = read(&dir.path().join("cell_0001/metrics.csv"));
    assert_eq!(cell_csv, read(&dir.path().join("solo/metrics.csv")));

    // summary accuracy equals the cell's last-round accuracy
    let last = cell_csv
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .to_string();
    let row = summary.lines().nth(2).unwrap();
    assert!(row.contains(&format!(",{last},")), "{row}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedmap"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.txt");
    std::fs::write(&good, CONFIG).unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, format!("{CONFIG}schedule.s = 0\n")).unwrap();

    let ok = bin()
        .args(["run", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(["--seed", "5"])
        .env("FEDMAP_THREADS", "1")
        .status()
        .unwrap();
    assert_eq!(ok.code(), Some(0));
    assert!(read(&dir.path().join("out/config.txt")).contains("seed = 5"));

    let cfg_err = bin()
        .args(["run", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(cfg_err.code(), Some(2));

    // output path is an existing file: runtime I/O error
    let runtime = bin()
        .args(["run", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(&good)
        .status()
        .unwrap();
    assert_eq!(runtime.code(), Some(3));

    let preview = bin()
        .args(["schedule", "preview", "--config"])
        .arg(&good)
        .output()
        .unwrap();
    assert_eq!(preview.status.code(), Some(0));
    let text = String::from_utf8(preview.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("t,k_t"));
    assert_eq!(text.lines().count(), 10);

    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "local_epochs = 1,2\n").unwrap();
    let sw = bin()
        .args(["sweep", "--config"])
        .arg(&good)
        .arg("--grid")
        .arg(&grid)
        .arg("--out")
        .arg(dir.path().join("sweep"))
        .status()
        .unwrap();
    assert_eq!(sw.code(), Some(0));
    assert!(dir.path().join("sweep/cell_0001/manifest.json").is_file());
}
