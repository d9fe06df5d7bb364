use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mdf3d(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdf3d"))
        .arg("--runs-dir")
        .arg(runs)
        .args(args)
        .env_remove("MDF3D_DATA_ROOT")
        .output()
        .expect("spawn mdf3d")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// KITTI velodyne layout: little-endian f32 x, y, z, intensity.
fn velodyne(points: &[[f32; 4]]) -> Vec<u8> {
    points.iter().flatten().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_velodyne(path: &Path) -> Vec<[f32; 4]> {
    let bytes = fs::read(path).unwrap();
    bytes
        .chunks_exact(16)
        .map(|c| std::array::from_fn(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap())))
        .collect()
}

fn fixture(dir: &Path, points: &[[f32; 4]], boxes: &str) {
    fs::create_dir_all(dir.join("velodyne")).unwrap();
    fs::create_dir_all(dir.join("boxes")).unwrap();
    fs::write(dir.join("velodyne/000000.bin"), velodyne(points)).unwrap();
    fs::write(dir.join("boxes/000000.txt"), boxes).unwrap();
}

fn count_line(stdout: &str, prefix: &str) -> usize {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(prefix))
        .unwrap_or_else(|| panic!("no `{prefix}` line in\n{stdout}"))
        .trim()
        .parse()
        .unwrap()
}

const POINTS: [[f32; 4]; 4] = [
    [1.0, 2.0, -1.5, 0.25],
    [-3.0, 0.5, 0.0, 0.5],
    [12.0, 0.0, 0.0, 0.75], // outside x
    [0.0, 0.0, 5.0, 1.0],   // outside z
];

#[test]
fn harmonize_shifts_and_counts_drops() {
    let t = tempfile::tempdir().unwrap();
    let (input, out) = (t.path().join("in"), t.path().join("out"));
    fixture(&input, &POINTS, "Car 2 1 -1 4 1.8 1.5 0.3\nCar 20 0 -1 4 1.8 1.5 0\n");
    let spec = t.path().join("x.spec");
    fs::write(&spec, "name = x\nrange = -10,10,-10,10,-3,3\ndz_shift = 1.6\n").unwrap();
    let stdout = ok(&mdf3d(
        t.path(),
        &["harmonize", "--in", input.to_str().unwrap(), "--dataset-spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()],
    ));
    assert_eq!(count_line(&stdout, "points dropped"), 2);
    assert_eq!(count_line(&stdout, "boxes dropped"), 1);
    let got = read_velodyne(&out.join("velodyne/000000.bin"));
    let want = [[1.0, 2.0, 0.1, 0.25], [-3.0, 0.5, 1.6, 0.5]];
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        for k in 0..4 {
            assert!((g[k] - w[k]).abs() < 1e-6, "{g:?} vs {w:?}");
        }
    }
    let boxes = fs::read_to_string(out.join("boxes/000000.txt")).unwrap();
    let f: Vec<f64> = boxes.split_whitespace().skip(1).map(|s| s.parse().unwrap()).collect();
    assert_eq!(boxes.lines().count(), 1);
    assert!((f[2] - 0.6).abs() < 1e-9, "box z {}", f[2]);
}

#[test]
fn spec_without_dz_is_identity_shift() {
    let t = tempfile::tempdir().unwrap();
    let (input, out) = (t.path().join("in"), t.path().join("out"));
    fixture(&input, &POINTS[..2], "Car 2 1 -1 4 1.8 1.5 0.3\n");
    let spec = t.path().join("y.spec");
    fs::write(&spec, "name = y\nrange = -10,10,-10,10,-3,3\n").unwrap();
    let stdout = ok(&mdf3d(
        t.path(),
        &["harmonize", "--in", input.to_str().unwrap(), "--dataset-spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()],
    ));
    assert_eq!(count_line(&stdout, "points dropped"), 0);
    assert_eq!(
        fs::read(out.join("velodyne/000000.bin")).unwrap(),
        fs::read(input.join("velodyne/000000.bin")).unwrap()
    );
}

#[test]
fn unmapped_kitti_labels_are_counted() {
    let t = tempfile::tempdir().unwrap();
    let (input, out) = (t.path().join("in"), t.path().join("out"));
    fs::create_dir_all(input.join("velodyne")).unwrap();
    fs::create_dir_all(input.join("label_2")).unwrap();
    fs::create_dir_all(input.join("calib")).unwrap();
    fs::write(input.join("velodyne/000000.bin"), velodyne(&POINTS[..1])).unwrap();
    let id = "1 0 0 0 0 1 0 0 0 0 1 0";
    let calib = format!("P2: {id}\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n");
    fs::write(input.join("calib/000000.txt"), calib).unwrap();
    let label = "Car 0 0 0 0 0 10 10 1.5 1.8 4 1 1.6 8 0\n\
                 Tram 0 0 0 0 0 10 10 3 2.5 12 2 1.6 9 0\n\
                 DontCare -1 -1 -10 0 0 10 10 -1 -1 -1 -1000 -1000 -1000 -10\n";
    fs::write(input.join("label_2/000000.txt"), label).unwrap();
    let spec = t.path().join("k.spec");
    fs::write(&spec, "name = k\nrange = -20,20,-20,20,-3,3\n").unwrap();
    let stdout = ok(&mdf3d(
        t.path(),
        &["harmonize", "--in", input.to_str().unwrap(), "--dataset-spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()],
    ));
    assert_eq!(count_line(&stdout, "labels dropped"), 1);
    assert!(stdout.contains("  Tram 1"), "{stdout}");
    assert_eq!(fs::read_to_string(out.join("boxes/000000.txt")).unwrap().lines().count(), 1);
}

#[test]
fn stats_csv_has_histograms_and_channel_moments() {
    let t = tempfile::tempdir().unwrap();
    let input = t.path().join("in");
    fixture(&input, &POINTS[..2], "Car 2 1 -1 4.2 1.8 1.5 0.3\n");
    let csv = t.path().join("s.csv");
    ok(&mdf3d(t.path(), &["stats", "--frames", input.to_str().unwrap(), "--out-csv", csv.to_str().unwrap(), "--bin-width", "1"]));
    let text = fs::read_to_string(csv).unwrap();
    assert!(text.lines().any(|l| l == "hist,Car,l,4,5,1"), "{text}");
    assert!(text.lines().any(|l| l == "channel_mean,,x,,,-1"), "{text}");
    // intensities 0.25 and 0.5: variance 0.015625
    assert!(text.lines().any(|l| l == "channel_var,,intensity,,,0.015625"), "{text}");
}

fn tiny_config(dir: &Path, steps: usize) -> PathBuf {
    let p = dir.join("tiny.cfg");
    let text = format!(
        "include {}\n\
         dataset.a.train_frames = 1\ndataset.a.test_frames = 1\n\
         dataset.b.train_frames = 1\ndataset.b.test_frames = 1\n\
         model.pillar_channels = 4\nmodel.channels = 4\n\
         train.steps = {steps}\ntrain.batch_size = 2\n",
        configs().join("joint.cfg").display()
    );
    fs::write(&p, text).unwrap();
    p
}

fn only_run(runs: &Path, suffix: &str) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_str().unwrap().ends_with(suffix))
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn training_on_one_frame_reduces_loss() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path(), 30);
    let runs = t.path().join("runs");
    ok(&mdf3d(&runs, &["train", "--config", cfg.to_str().unwrap()]));
    let run = only_run(&runs, "-train");
    for f in ["config.txt", "resolved.txt", "report.csv", "checkpoint.bin"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("config.txt")).unwrap(), fs::read_to_string(&cfg).unwrap());
    let losses: Vec<f64> = fs::read_to_string(run.join("loss.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["loss"].as_f64().unwrap()
        })
        .collect();
    assert_eq!(losses.len(), 30);
    assert!(losses[29] < 0.5 * losses[0], "{} -> {}", losses[0], losses[29]);
}

#[test]
fn untrained_eval_reports_valid_ap() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path(), 1);
    let runs = t.path().join("runs");
    ok(&mdf3d(&runs, &["train", "--config", cfg.to_str().unwrap()]));
    let ck = only_run(&runs, "-train").join("checkpoint.bin");
    ok(&mdf3d(&runs, &["eval", "--checkpoint", ck.to_str().unwrap(), "--dataset", "a", "--test-frames", "2"]));
    let csv = fs::read_to_string(only_run(&runs, "-eval").join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).filter(|l| !l.is_empty()).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        for v in &f[3..] {
            let ap: f64 = v.parse().unwrap();
            assert!((0.0..=100.0).contains(&ap), "{row}");
        }
    }
}

#[test]
fn empty_ablation_matrix_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path(), 1);
    let m = t.path().join("m.cfg");
    fs::write(&m, format!("include {}\nablation.configs =\n", cfg.display())).unwrap();
    let out = mdf3d(&t.path().join("runs"), &["ablate", "--matrix", m.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no configurations"));
}

#[test]
fn bad_subsample_fraction_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path(), 1);
    let out = mdf3d(t.path(), &["train", "--config", cfg.to_str().unwrap(), "--subsample", "a=1.5"]);
    assert_eq!(out.status.code(), Some(2));
}
