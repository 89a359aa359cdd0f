use std::fs;
use std::path::Path;

use percept_reach::io;
use percept_reach_cli::config::{self, preset_rover, preset_taxiing};
use percept_reach_cli::rundir::sha256_hex;
use percept_reach_cli::run;
use tempfile::TempDir;

const SMALL_TAXI: &str = "[grid]\nshape = [21, 21, 21]\n";

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["percept-reach"];
    argv.extend_from_slice(args);
    run(argv)
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn out(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn manifest(run_dir: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(Path::new(run_dir).join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn taxiing_preset_values() {
    let cfg = preset_taxiing(0, false).unwrap();
    let grid = cfg.grid.unwrap();
    assert_eq!(grid.lo, vec![-11.0, 100.0, -0.49]);
    assert_eq!(grid.hi, vec![11.0, 250.0, 0.49]);
    assert_eq!(grid.shape, vec![61; 3]);
    let solve = cfg.solve.unwrap();
    assert_eq!(solve.t_final - solve.t0, 20.0);
    let model = cfg.model.unwrap();
    assert_eq!(model.speed, Some(5.0));
    assert_eq!(model.half_widths, Some(vec![0.0; 3]));
    assert_eq!(preset_taxiing(0, true).unwrap().grid.unwrap().shape, vec![101; 3]);
    assert!(preset_taxiing(99, false).is_err());
}

#[test]
fn rover_preset_values() {
    let cfg = preset_rover("mpc", false).unwrap();
    assert_eq!(cfg.model.as_ref().unwrap().speed, Some(1.0));
    assert_eq!(cfg.model.as_ref().unwrap().controller, "rover-mpc");
    let grid = cfg.grid.unwrap();
    assert_eq!(grid.lo, vec![0.0, -5.0, -std::f64::consts::PI]);
    assert_eq!(grid.hi, vec![20.0, 5.0, std::f64::consts::PI]);
    assert_eq!(cfg.dark.unwrap().max, 5.0);
    assert_eq!(preset_rover("mlp", false).unwrap().model.unwrap().controller, "rover-mlp");
    assert!(preset_rover("pid", false).is_err());
}

#[test]
fn presets_survive_the_schema() {
    for cfg in [preset_taxiing(3, false).unwrap(), preset_rover("mpc", false).unwrap()] {
        assert_eq!(config::from_table(config::to_table(&cfg)).unwrap(), cfg);
    }
}

#[test]
fn zero_horizon_solve_returns_the_failure_function() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL_TAXI);
    let run_dir = out(tmp.path(), "run");
    assert_eq!(cli(&["solve", "--preset", "taxiing", "--config", &cfg, "--T", "0", "--out", &run_dir]), 0);
    let vf = io::read_value_field(&Path::new(&run_dir).join("value.rvvf")).unwrap();
    assert_eq!(vf.times(), &[0.0]);
    assert_eq!(vf.grid().shape(), &[21, 21, 21]);
    assert_eq!(vf.initial().values(), vf.failure().values());
    for (k, v) in vf.failure().values().iter().enumerate() {
        assert_eq!(*v, 10.0 - vf.grid().point(k)[0].abs());
    }
}

#[test]
fn export_slice_matches_node_reads() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL_TAXI);
    let solved = out(tmp.path(), "solved");
    assert_eq!(cli(&["solve", "--preset", "taxiing", "--config", &cfg, "--T", "1", "--out", &solved]), 0);
    let field = Path::new(&solved).join("value.rvvf");
    let sliced = out(tmp.path(), "sliced");
    assert_eq!(cli(&["export-slice", "--field", field.to_str().unwrap(), "--dim", "θ", "--at", "0", "--out", &sliced]), 0);

    let vf = io::read_value_field(&field).unwrap();
    let g = vf.grid();
    let k = g.nearest_index(2, 0.0);
    assert!(g.coordinate(2, k).abs() < 1e-12);
    let csv = fs::read_to_string(Path::new(&sliced).join("slice.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x0,x1,value"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|s| s.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 21 * 21);
    for (r, row) in rows.iter().enumerate() {
        let (i, j) = (r / 21, r % 21);
        assert_eq!(row[0], g.coordinate(0, i));
        assert_eq!(row[1], g.coordinate(1, j));
        assert_eq!(row[2], vf.initial().at(&[i, j, k]));
    }

    // axis by index, held value named by index too
    let again = out(tmp.path(), "again");
    let f = field.to_str().unwrap();
    assert_eq!(cli(&["export-slice", "--field", f, "--dim", "2", "--at", "0", "--out", &again]), 0);
    assert_eq!(fs::read(Path::new(&again).join("slice.csv")).unwrap(), csv.as_bytes());
}

#[test]
fn unknown_config_key_is_rejected_with_its_path() {
    let table = config::parse_toml("[model]\ndynamics = \"dubins\"\nspd = 5.0\n", Path::new("x.toml")).unwrap();
    let err = config::from_table(table).unwrap_err().to_string();
    assert!(err.contains("model"), "{err}");
    assert!(err.contains("spd"), "{err}");

    let tmp = TempDir::new().unwrap();
    let bad = write(tmp.path(), "bad.toml", "[solve]\nt0 = 0.0\nt_final = 1.0\nhorizon = 3.0\n");
    assert_eq!(cli(&["solve", "--preset", "taxiing", "--config", &bad, "--out", &out(tmp.path(), "r")]), 2);
    let typo = write(tmp.path(), "typo.toml", "[gird]\nshape = [3]\n");
    assert_eq!(cli(&["solve", "--preset", "taxiing", "--config", &typo, "--out", &out(tmp.path(), "r")]), 2);
}

#[test]
fn malformed_and_incomplete_configs_exit_2() {
    let tmp = TempDir::new().unwrap();
    let r = out(tmp.path(), "r");
    let broken = write(tmp.path(), "broken.toml", "[grid\nshape = [3]\n");
    assert_eq!(cli(&["solve", "--config", &broken, "--out", &r]), 2);
    let partial = write(tmp.path(), "partial.toml", "[grid]\nlo = [0.0]\nhi = [1.0]\nshape = [5]\n");
    assert_eq!(cli(&["solve", "--config", &partial, "--out", &r]), 2);
    assert_eq!(cli(&["solve", "--preset", "taxiing", "--coverage-index", "9", "--out", &r]), 2);
    assert_eq!(cli(&["solve", "--preset", "glider", "--out", &r]), 2);
    assert_eq!(cli(&["solve", "--preset", "taxiing", "--workers", "0", "--out", &r]), 2);
    assert_eq!(cli(&["frobnicate"]), 2);
    let model = write(tmp.path(), "model.toml", "dynamics = \"dubins\"\ncontroller = \"tan\"\nerror = \"zero\"\n");
    assert_eq!(cli(&["solve", "--preset", "taxiing", "--model", &model, "--out", &r]), 2);
}

#[test]
fn section_files_and_flags_override_the_config() {
    let tmp = TempDir::new().unwrap();
    let grid = write(tmp.path(), "grid.toml", "lo = [-4.0, -4.0, -1.0]\nhi = [4.0, 4.0, 1.0]\nshape = [17, 9, 11]\n");
    let model = write(
        tmp.path(),
        "model.toml",
        "[model]\ndynamics = \"dubins\"\nspeed = 1.0\ncontroller = \"tan\"\na = -0.1\nb = -0.5\nerror = \"zero\"\n",
    );
    let failure = write(tmp.path(), "failure.toml", "kind = \"slab\"\ndim = 0\nmagnitude = 1.0\n");
    let cfg = write(tmp.path(), "run.toml", "[solve]\nt0 = 0.0\nt_final = 5.0\n");
    let r = out(tmp.path(), "r");
    let args = ["solve", "--config", &cfg, "--grid", &grid, "--model", &model, "--failure", &failure];
    let mut argv = args.to_vec();
    argv.extend(["--T", "0.5", "--x0", "0.25,0,0", "--out", &r]);
    assert_eq!(cli(&argv), 0);
    let m = manifest(&r);
    assert_eq!(m["config"]["solve"]["t_final"], 0.5);
    assert_eq!(m["config"]["grid"]["shape"][0], 17);
    assert_eq!(m["config"]["model"]["speed"], 1.0);
    let vf = io::read_value_field(&Path::new(&r).join("value.rvvf")).unwrap();
    assert_eq!(vf.t_final(), 0.5);
}

#[test]
fn assert_safe_sets_exit_code_1_on_unsafe_queries() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL_TAXI);
    let r = out(tmp.path(), "r");
    let base = ["solve", "--preset", "taxiing", "--config", &cfg, "--T", "0.5", "--out", &r];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        cli(&a)
    };
    assert_eq!(with(&["--x0", "10.5,150,0"]), 0);
    assert_eq!(with(&["--x0", "10.5,150,0", "--assert-safe"]), 1);
    assert_eq!(manifest(&r)["exit_code"], 1);
    assert_eq!(with(&["--x0", "0,150,0", "--assert-safe"]), 0);
}

#[test]
fn manifest_lists_every_output_with_its_hash() {
    let tmp = TempDir::new().unwrap();
    let small = "[grid]\nshape = [25, 13, 16]\n[dark]\nmax = 1.0\nsamples = 3\n[solve]\nt0 = 0.0\nt_final = 1.0\n";
    let cfg = write(tmp.path(), "small.toml", small);
    let r = out(tmp.path(), "budget");
    assert_eq!(cli(&["budget", "--preset", "rover", "--config", &cfg, "--out", &r]), 0);
    let m = manifest(&r);
    let listed: Vec<&serde_json::Value> = m["outputs"].as_array().unwrap().iter().collect();
    let mut on_disk: Vec<String> = fs::read_dir(&r)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let mut names: Vec<String> = listed.iter().map(|o| o["path"].as_str().unwrap().to_string()).collect();
    names.sort();
    assert_eq!(names, on_disk);
    for o in listed {
        let data = fs::read(Path::new(&r).join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"], sha256_hex(&data));
        assert_eq!(o["bytes"], data.len());
    }
    let echo = serde_json::to_vec(&m["config"]).unwrap();
    assert_eq!(m["config_sha256"], sha256_hex(&echo));
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(m["warnings"].is_array());
    assert!(names.contains(&"budget.rvdb".to_string()) && names.contains(&"budget_slice.csv".to_string()));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL_TAXI);
    let hashes = |name: &str| -> Vec<String> {
        let mut all = Vec::new();
        for (cmd, extra) in [
            ("solve", vec!["--T", "1"]),
            ("sweep", vec!["--T", "1", "--a-count", "2", "--b-count", "2"]),
            ("rollout", vec!["--T", "1", "--coverage-index", "2"]),
            ("mc", vec!["--T", "1", "--samples", "50", "--coverage-index", "2", "--seed", "4"]),
        ] {
            let r = out(tmp.path(), &format!("{name}-{cmd}"));
            let mut a = vec![cmd, "--preset", "taxiing", "--config", &cfg, "--out", &r];
            a.extend(extra);
            assert_eq!(cli(&a), 0, "{cmd}");
            for o in manifest(&r)["outputs"].as_array().unwrap() {
                if o["path"] != "summary.json" {
                    all.push(format!("{cmd}/{}:{}", o["path"], o["sha256"]));
                }
            }
        }
        all
    };
    let first = hashes("a");
    assert_eq!(first.len(), 5);
    assert_eq!(first, hashes("b"));
}

#[test]
fn sweep_csv_has_the_configured_cells() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL_TAXI);
    let r = out(tmp.path(), "sweep");
    let args = ["sweep", "--preset", "taxiing", "--config", &cfg, "--T", "1", "--a-range", "-0.02,0", "--b-range", "-0.6,-0.2"];
    let mut a = args.to_vec();
    a.extend(["--a-count", "2", "--b-count", "3", "--out", &r]);
    assert_eq!(cli(&a), 0);
    let csv = fs::read_to_string(Path::new(&r).join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "a,b,value");
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1].starts_with("-0.02,-0.6,"));
    assert!(lines[6].starts_with("0,-0.2,"));
}

#[test]
fn rollout_and_mc_write_trajectories_and_summaries() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "small.toml", SMALL_TAXI);
    for cmd in ["rollout", "mc"] {
        let r = out(tmp.path(), cmd);
        assert_eq!(cli(&[cmd, "--preset", "taxiing", "--config", &cfg, "--T", "1", "--coverage-index", "1", "--out", &r]), 0);
        let csv = fs::read_to_string(Path::new(&r).join("trajectory.csv")).unwrap();
        assert!(csv.starts_with("t,x0,x1,x2,xhat0,xhat1,xhat2,u0,l"), "{cmd}");
        let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&r).join("summary.json")).unwrap()).unwrap();
        assert!(s["min_l"].as_f64().unwrap() > 0.0, "{cmd}");
        assert_eq!(s["violated"], false, "{cmd}");
        assert!(s["runtime_s"].as_f64().is_some(), "{cmd}");
    }
}
