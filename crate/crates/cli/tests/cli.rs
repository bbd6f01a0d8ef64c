use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SYNTH: &str = "origin=0,-6.4,-2\nvoxel_size=0.8\ndims=16,16,8\nwidth=64\nheight=24\nfocal=32\n";
const MODEL: &str = "origin=0,-6.4,-2\nvoxel_size=0.8\ndims=16,16,8\nchannels=4\nocc_channels=2\n\
encoder_widths=4,4,4,4\nunet_widths=4,4,4\nsteps=3\nlr=0.001\n";

fn ssc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ssc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthesizes three scenes and trains for three steps.
fn trained(dir: &Path) -> Output {
    fs::write(dir.join("synth.txt"), SYNTH).unwrap();
    fs::write(dir.join("model.txt"), MODEL).unwrap();
    let data = dir.join("data");
    let o = ssc(&["synth", "--seed", "5", "--count", "3", "--spec", p(&dir.join("synth.txt")), "--out", p(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = ssc(&[
        "train",
        "--config",
        p(&dir.join("model.txt")),
        "--data",
        p(&data),
        "--out",
        p(&dir.join("model.ckpt")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in `{line}`"))
}

#[test]
fn train_eval_infer_round() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = stdout(&trained(dir));
    let steps: Vec<&str> = out.lines().filter(|l| l.starts_with("step=")).collect();
    assert_eq!(steps.len(), 3);
    for l in &steps {
        assert_eq!(field(l, "seeds"), field(l, "o_above"), "{l}");
    }

    let ckpt = dir.join("model.ckpt");
    let data = dir.join("data");
    let a = ssc(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--ranges", "6.4,12.8"]);
    let b = ssc(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--ranges", "6.4,12.8"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let report = stdout(&a);
    for name in ["road", "building", "car", "vegetation", "pole", "IoU", "mIoU"] {
        assert!(report.lines().any(|l| l.starts_with(&format!("{name} "))), "{report}");
    }
    assert!(report.contains("range=12.8 metric=mIoU"));

    let vg = dir.join("pred.vgrd");
    let scene = data.join("scenes").join("scene_0001");
    let o = ssc(&["infer", "--ckpt", p(&ckpt), "--sample", p(&scene), "--out-vgrid", p(&vg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = ssc_core::vgrid::VGrid::load(&vg).unwrap();
    assert_eq!(grid.dims, [32, 32, 16]);

    let o = ssc(&["bench", "--ckpt", p(&ckpt), "--runs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("forward ms:"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let data = dir.join("data");
    let ckpt = dir.join("model.ckpt");

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() / 2);
    let cut = dir.join("cut.ckpt");
    fs::write(&cut, &bytes).unwrap();
    let o = ssc(&["eval", "--ckpt", p(&cut), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(2));

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[4] = 99;
    let versioned = dir.join("v.ckpt");
    fs::write(&versioned, &bytes).unwrap();
    let o = ssc(&["eval", "--ckpt", p(&versioned), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(2));

    let label = data.join("scenes").join("scene_0000").join("labels.vgrd");
    fs::write(&label, b"VGRDjunk").unwrap();
    let o = ssc(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(dir.join("bad.txt"), "channels=4\nwings=2\n").unwrap();
    let o = ssc(&["train", "--config", p(&dir.join("bad.txt")), "--data", p(&data), "--out", p(&dir.join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let o = ssc(&["train", "--config", p(&dir.join("model.txt")), "--set", "theta=2", "--data", p(&data), "--out", p(&dir.join("x"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cli_flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let o = ssc(&[
        "train",
        "--config",
        p(&dir.join("model.txt")),
        "--data",
        p(&dir.join("data")),
        "--out",
        p(&dir.join("one.ckpt")),
        "--steps",
        "1",
        "--set",
        "seed=9",
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("step=")).count(), 1);
    let ck = ssc_core::checkpoint::Checkpoint::<f32>::load(dir.join("one.ckpt")).unwrap();
    assert_eq!(ck.step, 1);
    assert_eq!(ck.config.seed, 9);
}

#[test]
fn gradcheck_lists_every_op() {
    let o = ssc(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    let cases = ssc_core::gradcheck::suite(0).unwrap();
    for c in &cases {
        assert!(out.lines().any(|l| l.split_whitespace().next() == Some(c.name.as_str())), "{} missing", c.name);
    }
    assert!(out.contains("detected"));
}
