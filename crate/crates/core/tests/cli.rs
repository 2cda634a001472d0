use std::fs;
use std::process::{Command, Output};

fn convmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convmae")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn count_prints_a_report() {
    let o = convmae(&["count", "--arch", "convmae-b", "--keep", "0.25", "--kernel", "5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("convmae-b") && text.contains("total"), "{}", text);

    let kv = convmae(&["count", "--arch", "tiny-test", "--keep", "0.5", "--kernel", "7", "--kv"]);
    let text = stdout(&kv);
    assert!(text.lines().any(|l| l == "kernel_size=7"), "{}", text);
    assert!(text.lines().any(|l| l == "keep_ratio=0.5"), "{}", text);
}

#[test]
fn count_masking_modes_differ() {
    let macs = |mode: &str| -> u64 {
        let o = convmae(&["count", "--arch", "convmae-b", "--keep", "0.25", "--mode", mode, "--kv"]);
        let text = stdout(&o);
        text.lines().find_map(|l| l.strip_prefix("macs=")).unwrap().parse().unwrap()
    };
    assert!(macs("random-full") > macs("block"));
}

#[test]
fn count_rejects_unknown_arch() {
    let o = convmae(&["count", "--arch", "resnet50", "--keep", "0.25", "--kernel", "5"]);
    assert!(!o.status.success());
}

#[test]
fn verify_all_passes() {
    let o = convmae(&["verify", "--suite", "all"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{}", text);
    assert!(!text.contains("FAIL"));
}

#[test]
fn verify_rejects_unknown_suite() {
    let o = convmae(&["verify", "--suite", "everything"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown suite"));
}

#[test]
fn pretrain_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "arch=tiny-test\nepochs=2\nwarmup_epochs=1\nsteps_per_epoch=2\nbatch_size=2\nsynthetic_images=4\nout_dir={}\n",
            run.display()
        ),
    )
    .unwrap();
    let o = convmae(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("steps=4"));
    assert_eq!(fs::read_to_string(run.join("metrics.txt")).unwrap().lines().count(), 4);

    let images = dir.path().join("images");
    fs::create_dir_all(&images).unwrap();
    image::RgbImage::from_pixel(32, 32, image::Rgb([10, 200, 90])).save(images.join("flat.png")).unwrap();
    let out = dir.path().join("features");
    let o = convmae(&[
        "export-features",
        "--ckpt",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--in",
        images.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("manifest.txt")).unwrap().lines().count(), 4);
}

#[test]
fn pretrain_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "arch=tiny-test\nmomentum=0.9\n").unwrap();
    let o = convmae(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("momentum"));
}

#[test]
fn export_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = convmae(&[
        "export-features",
        "--ckpt",
        p.join("none.ckpt").to_str().unwrap(),
        "--in",
        p.to_str().unwrap(),
        "--out",
        p.join("o").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}
