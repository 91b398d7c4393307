use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCENE: &str = r#"
duration = 1.0
fps = 30.0

[intrinsics]
fx = 262.0
fy = 262.0
cx = 159.5
cy = 119.5
width = 320
height = 240
depth_scale = 5000.0

[room]
min = [-3.0, -3.0, 0.0]
max = [3.0, 3.0, 3.0]

[[camera]]
t = 0.0
position = [-2.0, -0.3, 1.3]
look_at = [2.0, 0.0, 1.0]

[[camera]]
t = 1.0
position = [-2.0, 0.3, 1.3]
look_at = [2.0, 0.2, 1.0]

[[objects]]
class = "person"
size = [0.4, 0.5, 1.7]
start = [0.5, -1.0, 0.9]

[[objects.schedule]]
duration = 1.0
velocity = [0.0, 1.0, 0.0]
"#;

fn dynslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynslam")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("scene.toml");
    fs::write(&spec, SCENE).unwrap();
    let seq = dir.join("seq");
    let out = dynslam(&["synth", "--spec", p(&spec), "--output", p(&seq)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    seq
}

#[test]
fn synth_run_eval_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let seq = synth(d.path());
    let run_dir = d.path().join("run");
    let out = dynslam(&["run", "--sequence", p(&seq), "--output", p(&run_dir), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("frames 30"), "{stdout}");
    assert!(stdout.contains("ate_rmse "));
    let out = dynslam(&[
        "eval",
        "--estimate",
        p(&run_dir.join("trajectory.txt")),
        "--groundtruth",
        p(&seq.join("groundtruth.txt")),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("pairs 30"));
}

#[test]
fn eval_of_groundtruth_against_itself_is_zero() {
    let d = tempfile::tempdir().unwrap();
    let seq = synth(d.path());
    let gt = seq.join("groundtruth.txt");
    let out = dynslam(&["eval", "--estimate", p(&gt), "--groundtruth", p(&gt)]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    let rmse: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("ate_rmse "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(rmse < 1e-9, "{text}");
}

#[test]
fn bench_and_baseline_with_overrides() {
    let d = tempfile::tempdir().unwrap();
    let seq = synth(d.path());
    let out = dynslam(&[
        "bench",
        "--sequence",
        p(&seq),
        "--output",
        p(&d.path().join("bench")),
        "--mode",
        "baseline",
        "--set",
        "inpaint.enabled=false",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("frames 30\n"), "{text}");
    for stage in ["load", "track", "odometry", "inpaint", "map", "log"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{stage} "))), "{stage}");
    }
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let seq = synth(d.path());
    let out_dir = d.path().join("o");
    // Usage and configuration errors.
    assert_eq!(dynslam(&["run"]).status.code(), Some(2));
    assert_eq!(
        dynslam(&["run", "--sequence", p(&seq), "--output", p(&out_dir), "--mode", "fast"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        dynslam(&[
            "run",
            "--sequence",
            p(&seq),
            "--output",
            p(&out_dir),
            "--set",
            "tracking.bogus=1"
        ])
        .status
        .code(),
        Some(2)
    );
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[tracking]\nscore_threshold = 2.0\n").unwrap();
    assert_eq!(
        dynslam(&[
            "run",
            "--sequence",
            p(&seq),
            "--output",
            p(&out_dir),
            "--config",
            p(&cfg)
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        dynslam(&[
            "run",
            "--sequence",
            p(&seq),
            "--output",
            p(&out_dir),
            "--detections",
            p(&d.path().join("none"))
        ])
        .status
        .code(),
        Some(2)
    );
    // Data errors.
    let bad_traj = d.path().join("bad.txt");
    fs::write(&bad_traj, "0.0 1 2 3\n").unwrap();
    assert_eq!(
        dynslam(&[
            "eval",
            "--estimate",
            p(&bad_traj),
            "--groundtruth",
            p(&seq.join("groundtruth.txt"))
        ])
        .status
        .code(),
        Some(3)
    );
    fs::write(seq.join("depth/0.500000.png"), b"garbage").unwrap();
    let out = dynslam(&["run", "--sequence", p(&seq), "--output", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`load`") && err.contains("t=0.500000"), "{err}");
    // Runtime errors: too few overlapping poses.
    let short = d.path().join("short.txt");
    fs::write(&short, "0.0 0 0 0 0 0 0 1\n0.033333 0 0 0 0 0 0 1\n").unwrap();
    assert_eq!(
        dynslam(&[
            "eval",
            "--estimate",
            p(&short),
            "--groundtruth",
            p(&seq.join("groundtruth.txt"))
        ])
        .status
        .code(),
        Some(4)
    );
}
