use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn uvlod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uvlod"))
        .args(args)
        .output()
        .expect("run uvlod")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(output: &str, extra_model: &str) -> String {
    format!(
        r#"
output = "{output}"
loss_csv = "loss.csv"

[model]
s_max = 16
s_min = 4
d_f = 6
n_freq = 2
code_dim = 4
expr_dim = 8
mapper_hidden = 8
head_hidden = 16
head_layers = 2
sh_degree = 1
{extra_model}

[train]
stage1_steps = 10
stage2_steps = 10
lods_per_step = 2
seed = 3

[data]
dir = "data"

[data.generate]
frames = 2
width = 24
height = 24
resolution = 16
expr_dim = 8
sh_degree = 1
"#
    )
}

struct Trained {
    dir: TempDir,
}

impl Trained {
    fn ckpt(&self) -> PathBuf {
        self.dir.path().join("model.alod")
    }
    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "run.toml", &config("model.alod", ""));
        let o = uvlod(&["train", cfg.to_str().unwrap(), "--quiet"]);
        assert!(o.status.success(), "{}", stderr(&o));
        Trained { dir }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_dataset_and_loss_curve() {
    let t = trained();
    assert!(t.ckpt().is_file());
    assert!(t.data().join("manifest.json").is_file());
    let csv = std::fs::read_to_string(t.path("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20);
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", &config("again.alod", ""));
    let o = uvlod(&["train", s(&cfg), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read(dir.path().join("again.alod")).unwrap();
    let b = std::fs::read(trained().ckpt()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn inverted_resolutions_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = config("x.alod", "").replace("s_min = 4", "s_min = 32");
    let cfg = write_config(dir.path(), "bad.toml", &text);
    let o = uvlod(&["train", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("s_min") && err.contains("s_max"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "typo.toml", &config("x.alod", "head_hiden = 3"));
    let o = uvlod(&["train", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("head_hiden"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = config("x.alod", "").replace("[data.generate]", "[unused]");
    let text = text.split("[unused]").next().unwrap().to_string();
    let cfg = write_config(dir.path(), "nodata.toml", &text);
    let o = uvlod(&["train", s(&cfg)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn count_from(out: &str) -> usize {
    let tail = out.split("gaussians").nth(1).expect("count in output");
    tail.trim().split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn coarse_lod_renders_fewer_gaussians() {
    let t = trained();
    let mut counts = Vec::new();
    for lod in ["0", "1"] {
        let out = t.path(&format!("lod{lod}.png"));
        let o = uvlod(&["render", "--checkpoint", s(&t.ckpt()), "--data", s(&t.data()), "--frame", "0", "--lod", lod, "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(out.is_file());
        counts.push(count_from(&stdout(&o)));
    }
    let ratio = counts[1] as f64 / counts[0] as f64;
    // (4 / 16)^2 up to coverage rounding
    assert!((0.03..0.12).contains(&ratio), "{counts:?}");
}

#[test]
fn zero_orbit_matches_default_camera() {
    let t = trained();
    let a = t.path("plain.png");
    let b = t.path("orbit0.png");
    let (ckpt, data) = (t.ckpt(), t.data());
    let base = ["render", "--checkpoint", s(&ckpt), "--data", s(&data), "--frame", "1"];
    assert!(uvlod(&[&base[..], &["--out", s(&a)]].concat()).status.success());
    assert!(uvlod(&[&base[..], &["--yaw", "0", "--pitch", "0", "--out", s(&b)]].concat()).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = t.path("orbit.png");
    assert!(uvlod(&[&base[..], &["--yaw", "-0.3", "--out", s(&c)]].concat()).status.success());
    assert_ne!(std::fs::read(&b).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn render_all_frames_into_a_directory() {
    let t = trained();
    let out = t.path("frames");
    let o = uvlod(&["render", "--checkpoint", s(&t.ckpt()), "--data", s(&t.data()), "--lod", "0.5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("render_0000.png").is_file() && out.join("render_0001.png").is_file());
}

#[test]
fn cross_driving_needs_matching_expression_dimension() {
    let t = trained();
    let other = t.path("other");
    let o = uvlod(&["generate-data", "--out", s(&other), "--seed", "9", "--frames", "1", "--width", "16", "--height", "16", "--resolution", "8", "--expr-dim", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = t.path("cross.png");
    let o = uvlod(&["render", "--checkpoint", s(&t.ckpt()), "--data", s(&other), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let wide = t.path("wide");
    let o = uvlod(&["generate-data", "--out", s(&wide), "--frames", "1", "--width", "16", "--height", "16", "--resolution", "8", "--expr-dim", "5"]);
    assert!(o.status.success());
    let o = uvlod(&["render", "--checkpoint", s(&t.ckpt()), "--data", s(&wide), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("expression has 5 coefficients, model expects 8"), "{}", stderr(&o));
}

#[test]
fn lod_out_of_range_is_rejected() {
    let t = trained();
    let o = uvlod(&["render", "--checkpoint", s(&t.ckpt()), "--lod", "1.5", "--out", s(&t.path("no.png"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_defaults_to_21_lods() {
    let t = trained();
    let out = t.path("sweep");
    let o = uvlod(&["sweep", "--checkpoint", s(&t.ckpt()), "--data", s(&t.data()), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 22);
    assert!(out.join("strip.png").is_file());
    assert!(out.join("lod_0.05.png").is_file());
}

#[test]
fn self_comparison_hits_the_psnr_cap() {
    let t = trained();
    let out = t.path("sweep0");
    let o = uvlod(&["sweep", "--checkpoint", s(&t.ckpt()), "--lods", "0", "--out-dir", s(&out), "--no-images", "--size", "32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[3].parse::<f64>().unwrap(), 100.0);
}

#[test]
fn bench_reports_one_row_per_lod() {
    let t = trained();
    let out = t.path("bench.csv");
    let o = uvlod(&["bench", "--checkpoint", s(&t.ckpt()), "--data", s(&t.data()), "--iters", "2", "--warmup", "0", "--serial", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out).unwrap();
    assert!(csv.starts_with("# "));
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 5);
    for w in rows.windows(2) {
        assert!(w[0][0] < w[1][0]);
        assert!(w[0][2] > w[1][2], "counts must strictly decrease");
    }
    for r in &rows {
        assert!((r[5] - 1000.0 / r[3]).abs() < 1e-3 * r[5].max(1.0));
    }
}

#[test]
fn bench_rejects_zero_iterations() {
    let t = trained();
    let o = uvlod(&["bench", "--checkpoint", s(&t.ckpt()), "--iters", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_writes_a_ply() {
    let t = trained();
    let out = t.path("g.ply");
    let o = uvlod(&["export-gaussians", "--checkpoint", s(&t.ckpt()), "--data", s(&t.data()), "--lod", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(out).unwrap();
    assert!(bytes.starts_with(b"ply\nformat binary_little_endian 1.0\n"));
}

#[test]
fn damaged_checkpoints_are_data_errors() {
    let t = trained();
    let good = std::fs::read(t.ckpt()).unwrap();
    let cases: [(&str, Vec<u8>, &str); 3] = [
        ("trunc.alod", good[..good.len() / 2].to_vec(), "truncation"),
        ("magic.alod", [b"XLOD".as_slice(), &good[4..]].concat(), "magic"),
        ("flip.alod", {
            let mut b = good.clone();
            let k = b.len() / 2;
            b[k] ^= 0x40;
            b
        }, "corrupt"),
    ];
    for (name, bytes, word) in cases {
        let p = t.path(name);
        std::fs::write(&p, bytes).unwrap();
        let o = uvlod(&["render", "--checkpoint", s(&p), "--out", s(&t.path("x.png"))]);
        assert_eq!(o.status.code(), Some(3), "{name}");
        assert!(stderr(&o).contains(word), "{name}: {}", stderr(&o));
    }
}
