use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use misf::data::{corrupt, fixture_image, load_image, save_image};
use misf::metrics::psnr;
use misf::Tensor;

fn misf() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_misf"));
    c.env_remove("MISF_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small, fast training run on four fixtures.
fn train(out: &Path, iters: usize, extra: &[&str]) -> Output {
    run(misf()
        .args([
            "train",
            "--quiet",
            "--batch-size",
            "2",
            "--set",
            "fixture_count=4",
            "--iters",
        ])
        .arg(iters.to_string())
        .arg("--out")
        .arg(out)
        .args(extra))
}

fn write_pair(dir: &Path, index: usize, mask: &Tensor<f64>) -> (PathBuf, PathBuf) {
    let img = dir.join(format!("img{index}.png"));
    let m = dir.join(format!("mask{index}.png"));
    save_image(&fixture_image::<f64>(index, 64, 0), 0, &img).unwrap();
    save_image(mask, 0, &m).unwrap();
    (img, m)
}

fn square_mask() -> Tensor<f64> {
    Tensor::from_fn([1, 1, 64, 64], |[_, _, y, x]| {
        if (20..36).contains(&y) && (24..44).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
}

#[test]
fn train_writes_one_metrics_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), 12, &["--variant", "en-decoder"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "iter,l1,gan,perc,style,total,psnr_train");
    assert_eq!(lines.len(), 13);
    assert!(lines[12].starts_with("12,"));
    let manifest = std::fs::read_to_string(dir.path().join("checkpoint/manifest.txt")).unwrap();
    assert!(manifest.contains("variant = en-decoder"));
    assert!(stderr(&o).contains("config_hash = "));
}

#[test]
fn same_seed_same_bytes_and_env_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&a, 4, &[]).status.success());
    assert!(train(&b, 4, &[]).status.success());
    let read = |p: &Path| std::fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));

    let c = dir.path().join("c");
    let o = run(misf()
        .env("MISF_SEED", "17")
        .args([
            "train",
            "--quiet",
            "--batch-size",
            "2",
            "--set",
            "fixture_count=4",
            "--iters",
            "4",
            "--out",
        ])
        .arg(&c));
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = std::fs::read_to_string(c.join("config.txt")).unwrap();
    assert!(cfg.contains("seed = 17"));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn resume_continues_the_metrics_log() {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    assert!(train(&full, 6, &["--checkpoint-every", "3"]).status.success());
    assert!(full.join("checkpoint-000003/manifest.txt").exists());
    assert!(train(&part, 3, &[]).status.success());
    let o = train(&part, 6, &["--resume", part.join("checkpoint").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |p: &Path| std::fs::read_to_string(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&full), read(&part));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = run(misf()
        .args(["train", "--out"])
        .arg(dir.path().join("x"))
        .arg("--config")
        .arg(&cfg));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));

    let o = run(misf().args(["train", "--unknown-flag"]));
    assert_eq!(o.status.code(), Some(1));

    let o = train(&dir.path().join("nan"), 20, &["--set", "lr=1e30"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(dir.path().join("nan/dump").exists());

    let o = run(misf()
        .args(["inpaint", "--checkpoint"])
        .arg(dir.path().join("missing"))
        .args(["--image", "a.png", "--mask", "b.png", "--out", "c.png"]));
    assert_eq!(o.status.code(), Some(3));

    let o = run(misf()
        .args(["mask-gen", "--bucket", "10-30", "--seed", "1", "--out"])
        .arg(dir.path()));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_lists_flags() {
    let o = run(misf().args(["train", "--help"]));
    assert!(o.status.success());
    let text = stdout(&o);
    for flag in [
        "--config",
        "--out",
        "--variant",
        "--seed",
        "--iters",
        "--masked-l1",
        "--fx-weights",
        "--resume",
        "--set",
    ] {
        assert!(text.contains(flag), "{flag}");
    }
    let o = run(misf().args(["inpaint", "--help"]));
    assert!(stdout(&o).contains("--dump-kernels") && stdout(&o).contains("--dump-features"));
    let o = run(misf().args(["gradcheck", "--help"]));
    assert!(stdout(&o).contains("--tol") && stdout(&o).contains("--json"));
}

#[test]
fn inpaint_empty_mask_returns_input_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("run");
    assert!(train(&ck, 1, &[]).status.success());
    let (img, mask) = write_pair(dir.path(), 1, &Tensor::zeros([1, 1, 64, 64]));
    let out = dir.path().join("out.png");
    let kernels = dir.path().join("k");
    let feats = dir.path().join("f");
    let o = run(misf()
        .arg("inpaint")
        .arg("--checkpoint")
        .arg(ck.join("checkpoint"))
        .arg("--image")
        .arg(&img)
        .arg("--mask")
        .arg(&mask)
        .arg("--out")
        .arg(&out)
        .arg("--dump-kernels")
        .arg(&kernels)
        .arg("--dump-features")
        .arg(&feats));
    assert!(o.status.success(), "{}", stderr(&o));
    let a = load_image::<f64>(&img).unwrap();
    let b = load_image::<f64>(&out).unwrap();
    assert_eq!(a.shape(), b.shape());
    let worst = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1.0 / 255.0);
    let k = misf::mtf::read::<f32>(kernels.join("K.mtf")).unwrap();
    assert_eq!(k.shape(), [1, 27, 64, 64]);
    assert!(kernels.join("K3.mtf").exists());
    for f in ["F1", "F2p", "F3", "F3hat", "F7", "Ihat"] {
        assert!(feats.join(format!("{f}.mtf")).exists(), "{f}");
    }
}

#[test]
fn trained_checkpoint_beats_untrained() {
    let dir = tempfile::tempdir().unwrap();
    let (untrained, trained) = (dir.path().join("u"), dir.path().join("t"));
    let extra = [
        "--variant",
        "en-decoder",
        "--set",
        "lambda_gan=0",
        "--set",
        "lambda_perc=0",
        "--set",
        "lambda_style=0",
        "--lr",
        "1e-3",
    ];
    assert!(train(&untrained, 0, &extra).status.success());
    assert!(train(&trained, 60, &extra).status.success());
    let (img, mask) = write_pair(dir.path(), 0, &square_mask());
    let truth = load_image::<f64>(&img).unwrap();
    let score = |ck: &Path, name: &str| {
        let out = dir.path().join(name);
        let o = run(misf()
            .arg("inpaint")
            .arg("--checkpoint")
            .arg(ck.join("checkpoint"))
            .arg("--image")
            .arg(&img)
            .arg("--mask")
            .arg(&mask)
            .arg("--out")
            .arg(&out));
        assert!(o.status.success(), "{}", stderr(&o));
        psnr(&load_image::<f64>(&out).unwrap(), &truth).unwrap()
    };
    let (before, after) = (score(&untrained, "u.png"), score(&trained, "t.png"));
    assert!(after > before, "trained {after} vs untrained {before}");
}

#[test]
fn eval_reports_rows_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let (res, gt, masks) = (dir.path().join("res"), dir.path().join("gt"), dir.path().join("masks"));
    for d in [&res, &gt, &masks] {
        std::fs::create_dir_all(d).unwrap();
    }
    let mask = square_mask();
    for i in 0..2 {
        let clean = fixture_image::<f64>(i, 64, 0);
        save_image(&clean, 0, gt.join(format!("s{i}.png"))).unwrap();
        save_image(&mask, 0, masks.join(format!("s{i}.png"))).unwrap();
        let result = if i == 0 {
            clean.clone()
        } else {
            corrupt(&clean, &mask).unwrap()
        };
        save_image(&result, 0, res.join(format!("s{i}.png"))).unwrap();
    }
    let report = dir.path().join("report.csv");
    let args = |out: &Path| {
        let mut c = misf();
        c.arg("eval")
            .arg("--results")
            .arg(&res)
            .arg("--gt")
            .arg(&gt)
            .arg("--masks")
            .arg(&masks)
            .arg("--out")
            .arg(out);
        c
    };
    let o = run(&mut args(&report));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "id,bucket,variant,psnr,ssim,l1_pct");
    assert!(lines[1].starts_with("s0,0-20,unknown,99.0,1.0,0.0"), "{}", lines[1]);
    assert!(lines.iter().any(|l| l.starts_with("mean,")));

    let json = dir.path().join("report.json");
    let o = run(args(&json).arg("--json"));
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn mask_gen_is_seeded_and_in_bucket() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |out: &Path| {
        run(misf()
            .args([
                "mask-gen", "--bucket", "20-40", "--seed", "5", "--count", "3", "--size", "64", "--out",
            ])
            .arg(out))
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(gen(&a).status.success());
    assert!(gen(&b).status.success());
    for i in 0..3 {
        let name = format!("mask_{i:04}.png");
        let bytes = std::fs::read(a.join(&name)).unwrap();
        assert_eq!(bytes, std::fs::read(b.join(&name)).unwrap());
        let m = misf::data::load_mask::<f64>(a.join(&name)).unwrap();
        let r = misf::data::hole_ratio(&m);
        assert!((0.18..=0.42).contains(&r), "{r}");
    }
}

#[test]
fn gradcheck_output_matches_registry() {
    let list = run(misf().args(["gradcheck", "--list"]));
    let names: Vec<String> = stdout(&list).lines().map(String::from).collect();
    let o = run(misf().args(["gradcheck", "--coords", "16"]));
    assert!(o.status.success(), "{}", stdout(&o));
    let reported: Vec<String> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    assert_eq!(names, reported);
    assert!(stdout(&o).lines().skip(1).all(|l| l.ends_with("PASS")));

    let strict = run(misf().args(["gradcheck", "--only", "loss.", "--tol", "1e-12", "--json"]));
    assert_eq!(strict.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(stdout(&strict).trim()).unwrap();
    assert!(v.as_array().unwrap().iter().any(|r| r["pass"] == false));
}

#[test]
fn feature_sim_and_recurrent_demo() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("run");
    assert!(train(&ck, 1, &[]).status.success());
    let (img, mask) = write_pair(dir.path(), 2, &square_mask());
    let o = run(misf()
        .arg("feature-sim")
        .arg("--checkpoint")
        .arg(ck.join("checkpoint"))
        .arg("--image")
        .arg(&img)
        .arg("--mask")
        .arg(&mask)
        .arg("--json"));
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    for site in ["pre", "post"] {
        let s = v[site].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    let frames = dir.path().join("frames");
    let o = run(misf()
        .arg("demo-recurrent")
        .arg("--checkpoint")
        .arg(ck.join("checkpoint"))
        .arg("--image")
        .arg(&img)
        .arg("--mask")
        .arg(&mask)
        .args(["--iters", "3", "--out"])
        .arg(&frames));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(frames.join("frame_003.png").exists());
    let fill = std::fs::read_to_string(frames.join("fill.csv")).unwrap();
    assert_eq!(fill.lines().count(), 5);
    assert!(fill.lines().nth(1).unwrap().starts_with("0,0,"));

    let ed = dir.path().join("ed");
    assert!(train(&ed, 1, &["--variant", "en-decoder"]).status.success());
    let o = run(misf()
        .arg("demo-recurrent")
        .arg("--checkpoint")
        .arg(ed.join("checkpoint"))
        .arg("--image")
        .arg(&img)
        .arg("--mask")
        .arg(&mask)
        .arg("--out")
        .arg(&frames));
    assert_eq!(o.status.code(), Some(1));
}
