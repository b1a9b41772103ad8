use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use flow_harmonize::io::{read_image, write_image};
use flow_harmonize::ImageGrid;

const TOY_CONFIG: &str = "\
# 16x16 toy run
levels = 2
steps_per_level = 2
coupling_hidden_width = 8
coupling_hidden_layers = 1
input_height = 16
input_width = 16
total_steps = 500
batch_size = 16
checkpoint_every = 250
seed = 3
";

fn flowharm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowharm"))
        .args(args)
        .env("BH_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

/// A toy corpus and a checkpoint trained on it, shared by every test.
struct Fixture {
    _root: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        let out = flowharm(&["phantom", "--n", "64", "--size", "16", "--seed", "1", "--out", s(&data)]);
        assert!(out.status.success());
        let config = root.path().join("toy.cfg");
        fs::write(&config, TOY_CONFIG).unwrap();
        let ckpt = root.path().join("toy.ckpt");
        let out = flowharm(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&ckpt)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Fixture {
            _root: root,
            data,
            config,
            ckpt,
        }
    })
}

fn mean_of(ckpt: &Path) -> PathBuf {
    PathBuf::from(format!("{}.mean.bhimg", ckpt.display()))
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = flowharm(&["train", "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn toy_training_lowers_the_loss_and_is_reproducible() {
    let f = fixture();
    let log = fs::read_to_string(format!("{}.log", f.ckpt.display())).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 500);
    let bpd = |l: &str| -> f64 {
        l.split_whitespace()
            .find_map(|t| t.strip_prefix("nll_bpd="))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(lines[0].starts_with("step=1 nll_bpd="));
    assert!(bpd(lines[499]) < bpd(lines[0]));

    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again.ckpt");
    let out = flowharm(&["train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(&again)]);
    assert!(out.status.success());
    assert_eq!(fs::read(&f.ckpt).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn bad_config_and_bad_data_exit_codes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "nonsense = 1\n").unwrap();
    let out = flowharm(&["train", "--data", s(&f.data), "--config", s(&bad), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = flowharm(&["train", "--data", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_writes_transformed_copies_and_manifest() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("g1");
    let out = flowharm(&["simulate", "--data", s(&f.data), "--transform", "gamma", "--gamma-power", "1", "--out", s(&out_dir)]);
    assert!(out.status.success());
    for src in files(&f.data) {
        let a = read_image(&src).unwrap();
        let b = read_image(out_dir.join(src.file_name().unwrap())).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }
    let g07 = dir.path().join("g07");
    assert!(flowharm(&["simulate", "--data", s(&f.data), "--transform", "gamma", "--gamma-power", "0.7", "--out", s(&g07)]).status.success());
    assert_eq!(fs::read_to_string(g07.join("manifest.txt")).unwrap().trim(), "transform=gamma power=0.7");

    let out = flowharm(&["simulate", "--data", s(&f.data), "--transform", "sqrt", "--out", s(&g07)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_exp_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("in");
    fs::create_dir(&data).unwrap();
    write_image(data.join("p.bhimg"), &ImageGrid::from_rows(&[&[0.0, 0.5, 1.0]]).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    assert!(flowharm(&["simulate", "--data", s(&data), "--transform", "exp", "--out", s(&out_dir)]).status.success());
    let y = read_image(out_dir.join("p.bhimg")).unwrap();
    let mid = (0.5f64.exp() - 1.0) / (1f64.exp() - 1.0);
    assert!((y.get(0, 1) - mid).abs() < 1e-12);
}

#[test]
fn inert_harmonization_returns_the_initial_image() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("inert.cfg");
    fs::write(&cfg, format!("{TOY_CONFIG}alpha = 0\nbeta1 = 0\nbeta2 = 0\niterations = 3\n")).unwrap();
    let out_dir = dir.path().join("h");
    let trace = dir.path().join("t");
    let out = flowharm(&[
        "harmonize", "--ckpt", s(&f.ckpt), "--source", s(&f.data), "--mean-image", s(&mean_of(&f.ckpt)),
        "--config", s(&cfg), "--out", s(&out_dir), "--trace", s(&trace),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mean = read_image(mean_of(&f.ckpt)).unwrap();
    for p in files(&out_dir) {
        assert!(read_image(&p).unwrap().max_abs_diff(&mean) <= 1e-6);
    }
    for t in files(&trace) {
        let text = fs::read_to_string(t).unwrap();
        assert_eq!(text.lines().count(), 1 + 3);
    }
}

#[test]
fn harmonization_is_deterministic_and_traced() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let trace = dir.path().join(format!("{name}-trace"));
        let out = flowharm(&[
            "harmonize", "--ckpt", s(&f.ckpt), "--source", s(&f.data), "--mean-image", s(&mean_of(&f.ckpt)),
            "--config", s(&f.config), "--out", s(&out_dir), "--trace", s(&trace),
        ]);
        assert!(out.status.success());
        (out_dir, trace)
    };
    let (a, ta) = run("a");
    let (b, _) = run("b");
    let fa = files(&a);
    assert_eq!(fa.len(), 64);
    for p in &fa {
        assert_eq!(fs::read(p).unwrap(), fs::read(b.join(p.file_name().unwrap())).unwrap());
    }
    for t in files(&ta) {
        assert_eq!(fs::read_to_string(t).unwrap().lines().count(), 1 + 10);
    }
}

#[test]
fn harmonize_exit_codes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = flowharm(&[
        "harmonize", "--ckpt", s(&dir.path().join("missing.ckpt")), "--source", s(&f.data),
        "--mean-image", s(&mean_of(&f.ckpt)), "--out", s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let flat = dir.path().join("flat");
    fs::create_dir(&flat).unwrap();
    write_image(flat.join("c.bhimg"), &ImageGrid::filled(16, 16, 0.5)).unwrap();
    let out = flowharm(&[
        "harmonize", "--ckpt", s(&f.ckpt), "--source", s(&flat), "--mean-image", s(&mean_of(&f.ckpt)),
        "--config", s(&f.config), "--out", s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn evaluate_reports_source_and_methods() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("t");
    assert!(flowharm(&["phantom", "--n", "3", "--size", "16", "--seed", "4", "--out", s(&data)]).status.success());
    let mut manifest = String::from("domain\tsource\ttarget\tCopy\n");
    for p in files(&data) {
        let n = p.file_name().unwrap().to_str().unwrap();
        manifest.push_str(&format!("self\tt/{n}\tt/{n}\tt/{n}\n"));
    }
    let mpath = dir.path().join("pairs.tsv");
    fs::write(&mpath, manifest).unwrap();
    let report = dir.path().join("report.tsv");
    let out = flowharm(&[
        "evaluate", "--pairs", s(&mpath), "--methods", "Copy,HM,SSIMH", "--reference", s(&data), "--out", s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method\tdomain\tpsnr_mean\tpsnr_std\tssim_mean\tssim_std\tn");
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("Source\tself\tinf\t0.0000\t1.0000\t0.0000\t3"));
    assert!(lines[2].starts_with("Copy\tself\tinf"));

    let out = flowharm(&["evaluate", "--pairs", s(&mpath), "--methods", "Nope", "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sweep_emits_one_block_per_value() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    assert!(flowharm(&["simulate", "--data", s(&f.data), "--transform", "gamma", "--gamma-power", "1.5", "--out", s(&src)]).status.success());
    let report = dir.path().join("sweep.tsv");
    let args = |param: &str, values: &str| {
        flowharm(&[
            "sweep", "--param", param, "--values", values, "--ckpt", s(&f.ckpt), "--source", s(&src),
            "--targets", s(&f.data), "--mean-image", s(&mean_of(&f.ckpt)), "--config", s(&f.config),
            "--domain", "gamma1.5", "--out", s(&report),
        ])
    };
    let out = args("beta1", "1000,500");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("param_value\tmethod\tdomain"));
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("1000\tSource\tgamma1.5"));
    assert!(lines[2].starts_with("1000\tBlindHarmony\tgamma1.5"));
    assert!(lines[4].starts_with("500\tBlindHarmony\tgamma1.5"));

    let out = args("gamma", "1");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha, beta1, beta2, iterations, mask_quantile"));
    assert_eq!(args("beta1", "big").status.code(), Some(2));
}

#[test]
fn sampling_contract() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("none");
    assert!(flowharm(&["sample", "--ckpt", s(&f.ckpt), "--n", "0", "--out", s(&empty)]).status.success());
    assert!(files(&empty).is_empty());

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        assert!(flowharm(&["sample", "--ckpt", s(&f.ckpt), "--n", "4", "--seed", "9", "--out", s(d)]).status.success());
    }
    let fa = files(&a);
    assert_eq!(fa.len(), 5);
    assert!(fa.iter().any(|p| p.ends_with("contact_sheet.pgm")));
    for p in &fa {
        assert_eq!(fs::read(p).unwrap(), fs::read(b.join(p.file_name().unwrap())).unwrap());
    }

    let cold = dir.path().join("cold");
    assert!(flowharm(&["sample", "--ckpt", s(&f.ckpt), "--n", "3", "--temperature", "0", "--out", s(&cold)]).status.success());
    let imgs: Vec<Vec<u8>> = files(&cold)
        .into_iter()
        .filter(|p| p.extension().unwrap() == "bhimg")
        .map(|p| fs::read(p).unwrap())
        .collect();
    assert_eq!(imgs.len(), 3);
    assert!(imgs.windows(2).all(|w| w[0] == w[1]));

    let out = flowharm(&["sample", "--ckpt", s(&dir.path().join("gone")), "--out", s(&cold)]);
    assert_eq!(out.status.code(), Some(3));
}
