use std::path::Path;
use std::process::{Command, Output};

use dslic_core::{read_image, write_image, Image};

fn dslic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dslic"))
        .args(args)
        .env_remove("DSLIC_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gradient_image(h: usize, w: usize) -> Image {
    let data = (0..h * w)
        .flat_map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            [x / w as f64, y / h as f64, 0.5]
        })
        .collect();
    Image::new(h, w, data).unwrap()
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {line:?}"))
        .parse()
        .unwrap()
}

#[test]
fn cluster_k1_is_mean_color() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("a.ppm");
    let img = gradient_image(6, 5);
    write_image(&img, &input).unwrap();
    let out = dir.path().join("c.ppm");
    let o = dslic(&["cluster", "--input", p(&input), "--k", "1", "--omega", "0.1", "--out", p(&out), "--out-dir", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c = read_image(&out).unwrap();
    let first = c.pixel(0, 0);
    assert!((0..6).all(|y| (0..5).all(|x| c.pixel(x, y) == first)));
    // mean of the 8-bit quantized input, requantized
    let q = read_image(&input).unwrap();
    let mean_r = q.data().iter().step_by(3).sum::<f64>() / 30.0;
    assert!((first[0] - mean_r).abs() <= 0.5 / 255.0 + 1e-12);
    assert!(stdout(&o).starts_with("objective="));
    let assignment = std::fs::read_to_string(dir.path().join("assignment.csv")).unwrap();
    assert!(assignment.starts_with("pixel_index,cluster_index\n"));
    assert_eq!(assignment.lines().count(), 31);
}

#[test]
fn cluster_without_input_is_usage_error() {
    let o = dslic(&["cluster", "--k", "3"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unreadable_input_is_io_error() {
    let o = dslic(&["cluster", "--input", "/nonexistent/x.ppm", "--k", "2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn cluster_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("a.png");
    write_image(&gradient_image(12, 10), &input).unwrap();
    let run = |sub: &str| {
        let d = dir.path().join(sub);
        let o = dslic(&["--seed", "3", "--out-dir", p(&d), "cluster", "--input", p(&input), "--k", "6"]);
        assert_eq!(code(&o), 0);
        ["clustered.png", "assignment.csv", "centroids.csv"].map(|f| std::fs::read(d.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn gradcheck_identity_clustering_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let o = dslic(&["gradcheck", "--random", "8x8", "--k", "64", "--out-dir", p(dir.path())]);
    assert_eq!(code(&o), 0);
    let line = stdout(&o);
    assert!(line.starts_with("probes="));
    assert!(field(&line, "max_rel_err") <= 1e-10);
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.starts_with("probe_pixel,channel,analytic,numeric,abs_err,rel_err,excluded\n"));
}

#[test]
fn gradcheck_default_tolerance_and_zero_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dslic(&["gradcheck", "--random", "16x16", "--k", "9", "--probes", "64", "--out-dir", p(dir.path())]);
    assert_eq!(code(&ok), 0);
    let strict = dslic(&["gradcheck", "--random", "16x16", "--k", "9", "--tol", "0", "--out-dir", p(dir.path())]);
    assert_eq!(code(&strict), 3);
}

#[test]
fn gradcheck_all_excluded_has_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = dslic(&["gradcheck", "--random", "8x8", "--k", "4", "--eps", "10", "--probes", "16", "--out-dir", p(dir.path())]);
    assert_eq!(code(&o), 4);
}

#[test]
fn seed_env_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let with_env = |seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_dslic"))
            .args(["gradcheck", "--random", "8x8", "--k", "16", "--probes", "4", "--out-dir", p(dir.path())])
            .env("DSLIC_SEED", seed)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap()
    };
    let flag = dslic(&["--seed", "5", "gradcheck", "--random", "8x8", "--k", "16", "--probes", "4", "--out-dir", p(dir.path())]);
    assert_eq!(code(&flag), 0);
    let from_flag = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert_eq!(with_env("5"), from_flag);
    assert_ne!(with_env("6"), from_flag);
}

#[test]
fn toy_from_clustered_target_stays_flat() {
    let dir = tempfile::tempdir().unwrap();
    // a clustered target is its own fixed point
    let target = dir.path().join("t.ppm");
    let o = dslic(&["--out-dir", p(dir.path()), "cluster", "--input", p(&target_src(dir.path())), "--k", "4", "--omega", "1", "--out", p(&target)]);
    assert_eq!(code(&o), 0);
    let o = dslic(&[
        "--out-dir", p(dir.path()), "toy", "--start", p(&target), "--target", p(&target), "--k", "4", "--steps", "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(dir.path().join("toy_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    let losses: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 6);
    assert!(losses.iter().all(|&l| l == 0.0), "{losses:?}");
}

fn target_src(dir: &Path) -> std::path::PathBuf {
    // four flat dyadic quadrants: cluster means are exact in 8-bit
    let data = (0..64)
        .flat_map(|i| match ((i % 8) < 4, (i / 8) < 4) {
            (true, true) => [1.0, 0.0, 0.0],
            (false, true) => [0.0, 1.0, 0.0],
            (true, false) => [0.0, 0.0, 1.0],
            (false, false) => [1.0, 1.0, 1.0],
        })
        .collect();
    let path = dir.join("quadrants.ppm");
    write_image(&Image::new(8, 8, data).unwrap(), &path).unwrap();
    path
}

#[test]
fn toy_writes_requested_frames_and_panels() {
    let dir = tempfile::tempdir().unwrap();
    let o = dslic(&["--out-dir", p(dir.path()), "toy", "--size", "16x16", "--k", "16", "--steps", "12", "--frames", "3", "--panels"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_dir(dir.path().join("frames")).unwrap().count(), 3);
    for f in ["original.png", "target.png", "trained.png", "clustered.png"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let bad = dslic(&["--out-dir", p(dir.path()), "toy", "--size", "16x16", "--k", "16", "--steps", "2", "--frames", "3"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "k=32\npatch_size=16x16\nepochs=3\n").unwrap();
    let o = dslic(&["--out-dir", p(dir.path()), "--config", p(&cfg), "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,loss,l_obj,l_tv,lr\n"));
    assert_eq!(trace.lines().count(), 4);
    assert_eq!(&std::fs::read(dir.path().join("optimizer.bin")).unwrap()[..6], b"DSLIC1");
    assert_eq!(read_image(dir.path().join("patch.png")).unwrap().dims(), (16, 16));

    std::fs::write(&cfg, "k=32\nbogus=1\n").unwrap();
    let o = dslic(&["--out-dir", p(dir.path()), "--config", p(&cfg), "train"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_rows_order_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let d = dir.path().join(sub);
        let o = dslic(&[
            "--out-dir", p(&d), "--jobs", "2", "sweep", "--k-values", "16,32", "--omegas", "1", "--alphas", "0",
            "--epochs", "2", "--patch-size", "16x16", "--no-wall-clock",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read_to_string(d.join("results.csv")).unwrap(), std::fs::read_to_string(d.join("objectness_vs_k.csv")).unwrap())
    };
    let (a, table) = run("a");
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "k,omega,alpha,seed,final_obj,final_tv,final_total,epochs,wall_s");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("16,") && lines[2].starts_with("32,"));
    for row in &lines[1..] {
        let f: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        // alpha = 0: TV is reported but not added in
        assert!(f[5] > 0.0);
        assert_eq!(f[6], f[4]);
    }
    assert!(table.starts_with("k,omega,alpha,runs,mean_final_obj\n"));
    assert_eq!(run("b").0, a);
}

#[test]
fn sweep_rejects_k_above_pixel_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = dslic(&["--out-dir", p(dir.path()), "sweep", "--k-values", "300", "--patch-size", "16x16", "--epochs", "1"]);
    assert_eq!(code(&o), 1);
}
