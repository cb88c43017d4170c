//! End-to-end checks of the command-line contract on a tiny pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use dispenseforge::geometry::{DispensePath, Polyline, TargetArea};
use dispenseforge::models::{load_process, save_model, Manifest, ModelKind};
use dispenseforge::raster::Mask;
use dispenseforge::{flow, quality, Config};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_dispenseforge");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset, one-epoch surrogates and process net shared by the tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        let (data, flow, void, proc_) = (
            f.path("data.bin"),
            f.path("flow.dfw"),
            f.path("void.dfw"),
            f.path("process.dfw"),
        );
        ok(&["datagen", "--n", "40", "--seed", "3", "--out", s(&data)]);
        ok(&[
            "pretrain-flow",
            "--data",
            s(&data),
            "--epochs",
            "1",
            "--seed",
            "1",
            "--out-weights",
            s(&flow),
        ]);
        ok(&[
            "pretrain-void",
            "--data",
            s(&data),
            "--epochs",
            "1",
            "--seed",
            "1",
            "--out-weights",
            s(&void),
        ]);
        ok(&[
            "train-process",
            "--data",
            s(&data),
            "--flow-weights",
            s(&flow),
            "--void-weights",
            s(&void),
            "--epochs",
            "1",
            "--seed",
            "1",
            "--out-weights",
            s(&proc_),
        ]);
        fs::write(f.path("rect.pgm"), rect().to_pgm()).unwrap();
        f
    })
}

fn rect() -> Mask {
    let mut m = Mask::new(64, 64);
    m.fill_rect(12, 16, 36, 28, true);
    m
}

#[test]
fn datagen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    ok(&["datagen", "--n", "1", "--seed", "7", "--out", s(&a)]);
    ok(&["datagen", "--n", "1", "--seed", "7", "--out", s(&b), "--threads", "2"]);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    let text = String::from_utf8_lossy(&bytes[..80]);
    assert!(text.starts_with("dispenseforge-dataset v1\n") && text.contains("count=1\n"));
    assert!(dir.path().join("a.bin.stats.txt").exists());
}

#[test]
fn usage_and_config_errors_exit_2() {
    let out = run(&["datagen", "--n", "1", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "grid_width=64\nsigma_cells=abc\n").unwrap();
    let out = run(&[
        "--config",
        s(&cfg),
        "datagen",
        "--n",
        "1",
        "--seed",
        "7",
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn train_process_without_surrogates_exits_3() {
    let f = fixture();
    let missing = f.path("nope/flow.dfw");
    let out = run(&[
        "train-process",
        "--data",
        s(&f.path("data.bin")),
        "--flow-weights",
        s(&missing),
        "--void-weights",
        s(&f.path("void.dfw")),
        "--seed",
        "1",
        "--out-weights",
        s(&f.path("unused.dfw")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope/flow.dfw") && err.contains("pretrain-flow"), "{err}");

    let out = run(&[
        "infer",
        "--weights",
        s(&missing),
        "--area",
        s(&f.path("rect.pgm")),
        "--out-path",
        s(&f.path("x.path")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn training_artifacts_and_reruns_are_bit_identical() {
    let f = fixture();
    let log = fs::read_to_string(f.path("process.dfw.log.csv")).unwrap();
    assert_eq!(
        log.lines().next(),
        Some("epoch,split,loss,oracle_J,coverage_mean,void_rate,ms_per_item")
    );
    for name in ["flow.dfw", "void.dfw", "process.dfw"] {
        let m = Manifest::parse(&fs::read_to_string(f.path(&format!("{name}.manifest"))).unwrap()).unwrap();
        assert_eq!(m.grid, Config::default().grid().unwrap());
    }
    let again = f.path("flow2.dfw");
    ok(&[
        "pretrain-flow",
        "--data",
        s(&f.path("data.bin")),
        "--epochs",
        "1",
        "--seed",
        "1",
        "--out-weights",
        s(&again),
    ]);
    for suffix in ["", ".manifest", ".log.csv"] {
        assert_eq!(
            fs::read(f.path(&format!("flow.dfw{suffix}"))).unwrap(),
            fs::read(f.path(&format!("flow2.dfw{suffix}"))).unwrap(),
            "flow.dfw{suffix}"
        );
    }
}

#[test]
fn infer_writes_path_and_overlay() {
    let f = fixture();
    let (p1, p2, svg) = (f.path("i1.path"), f.path("i2.path"), f.path("i1.svg"));
    let w = f.path("process.dfw");
    let line = ok(&[
        "infer",
        "--weights",
        s(&w),
        "--area",
        s(&f.path("rect.pgm")),
        "--out-path",
        s(&p1),
        "--render",
        s(&svg),
    ]);
    ok(&[
        "infer",
        "--weights",
        s(&w),
        "--area",
        s(&f.path("rect.pgm")),
        "--out-path",
        s(&p2),
    ]);
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

    let fields: Vec<f64> = line.trim().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(fields.len(), 3);
    assert!((0.0..=1.0).contains(&fields[0]));
    assert!(fields[2] < 1000.0, "inference took {} ms", fields[2]);

    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    let points = text
        .split("<polyline points=\"")
        .nth(1)
        .unwrap()
        .split('"')
        .next()
        .unwrap();
    assert_eq!(points.split(' ').count(), 6);

    let grid = Config::default().grid().unwrap();
    DispensePath::parse_file(&fs::read_to_string(&p1).unwrap(), &grid).unwrap();
}

#[test]
fn degenerate_inference_exits_4_with_raw_dump() {
    let f = fixture();
    let cfg = Config::default();
    let (mut net, _) = load_process(&f.path("process.dfw"), &cfg).unwrap();
    // all-zero weights collapse every point onto the centre
    for p in net.net.params_mut() {
        p.tensor.data_mut().fill(0.0);
    }
    let w = f.path("zero.dfw");
    save_model(
        &w,
        &net.net,
        &Manifest::new(ModelKind::Process, &net.net, &cfg).unwrap(),
    )
    .unwrap();
    let out_path = f.path("zero.path");
    let out = run(&[
        "infer",
        "--weights",
        s(&w),
        "--area",
        s(&f.path("rect.pgm")),
        "--out-path",
        s(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let dump = fs::read_to_string(f.path("zero.path.raw.txt")).unwrap();
    assert_eq!(dump.lines().count(), 12);
    assert!(!out_path.exists());
}

fn square_path(f: &Fixture) -> PathBuf {
    let grid = Config::default().grid().unwrap();
    let area = TargetArea::new(rect(), grid).unwrap();
    let poly = Polyline::from_coords(&[0.25, 0.3, 0.7, 0.3, 0.7, 0.45, 0.25, 0.45, 0.25, 0.6, 0.7, 0.6]).unwrap();
    let path = DispensePath::for_area(poly, &area, 0.5).unwrap();
    let p = f.path("square.path");
    fs::write(&p, path.to_file_string(&grid)).unwrap();
    p
}

#[test]
fn simulate_matches_library_oracle() {
    let f = fixture();
    let p = square_path(f);
    let heights = f.path("heights.csv");
    let out = ok(&[
        "simulate",
        "--path",
        s(&p),
        "--area",
        s(&f.path("rect.pgm")),
        "--heights",
        s(&heights),
    ]);
    let cfg = Config::default();
    let grid = cfg.grid().unwrap();
    let area = TargetArea::new(rect(), grid).unwrap();
    let path = DispensePath::parse_file(&fs::read_to_string(&p).unwrap(), &grid).unwrap();
    let state = flow::simulate(&path, &area, &(&cfg).into()).unwrap();
    let report = quality::assess(state.footprint(), &area, &cfg.objective_weights());
    assert_eq!(
        out,
        format!("{}\n{}\n", quality::QualityReport::CSV_HEADER, report.to_csv_row())
    );
    assert_eq!(fs::read_to_string(&heights).unwrap(), state.heights_csv());
}

#[test]
fn simulation_failure_exits_5() {
    let f = fixture();
    let p = square_path(f);
    let cfg = f.path("short.cfg");
    fs::write(&cfg, "compress_max_iters=2\n").unwrap();
    let out = run(&[
        "--config",
        s(&cfg),
        "simulate",
        "--path",
        s(&p),
        "--area",
        s(&f.path("rect.pgm")),
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn refine_with_zero_steps_copies_the_start() {
    let f = fixture();
    let p = square_path(f);
    let out = f.path("refined0.path");
    ok(&[
        "refine",
        "--flow-weights",
        s(&f.path("flow.dfw")),
        "--void-weights",
        s(&f.path("void.dfw")),
        "--area",
        s(&f.path("rect.pgm")),
        "--start",
        s(&p),
        "--steps",
        "0",
        "--out-path",
        s(&out),
    ]);
    assert_eq!(fs::read(&p).unwrap(), fs::read(&out).unwrap());

    let out = f.path("refined5.path");
    let line = ok(&[
        "refine",
        "--flow-weights",
        s(&f.path("flow.dfw")),
        "--void-weights",
        s(&f.path("void.dfw")),
        "--area",
        s(&f.path("rect.pgm")),
        "--weights",
        s(&f.path("process.dfw")),
        "--steps",
        "5",
        "--out-path",
        s(&out),
    ]);
    let v: Vec<f64> = line.trim().split(',').map(|x| x.parse().unwrap()).collect();
    assert!(v[1] <= v[0], "refinement regressed: {line}");
}

#[test]
fn evaluate_aggregate_is_the_row_mean() {
    let f = fixture();
    let dir = f.path("eval");
    ok(&[
        "evaluate",
        "--weights",
        s(&f.path("process.dfw")),
        "--testset",
        s(&f.path("data.bin")),
        "--out-dir",
        s(&dir),
    ]);
    let csv = fs::read_to_string(dir.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "area_id,coverage,overflow,void_count,objective,infer_ms");
    let rows = &lines[1..lines.len() - 1];
    assert_eq!(rows.len(), 4, "40 records hold 4 test areas");
    let last = lines.last().unwrap();
    assert!(last.starts_with("mean,"));
    let col = |l: &str, k: usize| l.split(',').nth(k).unwrap().parse::<f64>().unwrap();
    for k in 1..5 {
        let mean = rows.iter().map(|l| col(l, k)).sum::<f64>() / rows.len() as f64;
        assert_eq!(mean, col(last, k));
    }
    // coverage is recomputable from the exported footprint and mask
    for l in rows {
        let id = l.split(',').next().unwrap();
        let fp = dir.join(format!("{id}_footprint.pgm"));
        if !fp.exists() {
            continue;
        }
        let fp = Mask::from_pgm(&fs::read(fp).unwrap()).unwrap();
        let mask = Mask::from_pgm(&fs::read(dir.join(format!("{id}_mask.pgm"))).unwrap()).unwrap();
        let area = TargetArea::new(mask, Config::default().grid().unwrap()).unwrap();
        assert_eq!(quality::coverage(&fp, &area), col(l, 1));
    }
    let timings = fs::read_to_string(dir.join("timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), 5);
}
