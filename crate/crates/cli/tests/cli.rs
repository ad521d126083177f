use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn depthsal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthsal")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, clips: &str) -> String {
    let data = dir.join("data");
    let o = depthsal(&["synth", "--clips", clips, "--frames", "16", "--seed", "3", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    data.join("manifest.tsv").to_string_lossy().into_owned()
}

fn write_config(dir: &Path, variant: &str, manifest: &str) -> String {
    let path = dir.join(format!("{variant}.cfg"));
    let text = format!(
        "[model]\nvariant = \"{variant}\"\nbackbone_width = 4\n\n[data]\nmanifests = [\"{manifest}\"]\nframe_stride = 8\neval_frame_stride = 8\n\n\
         [train]\ntotal_epochs = 1\nlr_milestones = []\neffective_batch = 2\nmicro_batch = 2\n\n[eval]\nsauc_splits = 3\n"
    );
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let o = depthsal(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = depthsal(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "RGB16SC", "m.tsv");
    let out = dir.path().join("out");
    let o = depthsal(&["train", "--config", &cfg, "--output-dir", out.to_str().unwrap(), "--set", "train.micro_batch=0"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error: ConfigError:") && last.contains("train.micro_batch"), "{err}");

    let o = depthsal(&["evaluate", "--config", &cfg, "--set", "model.variant=RGBD16SC", "--set", "model.fusion=CLL"]);
    assert!(stderr(&o).lines().last().unwrap().contains("model.fusion"), "{}", stderr(&o));
}

#[test]
fn train_evaluate_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "2");
    let cfg = write_config(dir.path(), "RGB16SC", &manifest);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let o = depthsal(&["train", "--config", &cfg, "--output-dir", out_s, "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["ckpt_epoch_000", "ckpt_best", "train_log.jsonl", "resolved.cfg"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert!(fs::read_to_string(out.join("resolved.cfg")).unwrap().contains("seed = 1"));

    let o = depthsal(&["evaluate", "--config", &cfg, "--output-dir", out_s, "--checkpoint", "ckpt_best", "--split", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let cc = line.find("CC").unwrap();
    let order: Vec<usize> = ["NSS", "AUC-J", "sAUC", "SIM"].iter().map(|k| line.find(k).unwrap()).collect();
    assert!(cc < order[0] && order.windows(2).all(|w| w[0] < w[1]), "{line}");
    assert!(out.join("metrics_train.json").exists());

    let maps = dir.path().join("maps");
    let o = depthsal(&[
        "predict", "--config", &cfg, "--checkpoint", out.join("ckpt_best").to_str().unwrap(), "--video-id", "clip_0001",
        "--output-dir", maps.to_str().unwrap(), "--overlay", "--raw",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in 0..16 {
        for name in [format!("sal_{f:06}.png"), format!("sal_{f:06}.vdsm"), format!("overlay_{f:06}.png")] {
            assert!(maps.join(&name).exists(), "missing {name}");
        }
    }
    assert!(!maps.join("sal_000016.png").exists());

    let o = depthsal(&["predict", "--config", &cfg, "--output-dir", out_s, "--video-id", "nope"]);
    assert!(stderr(&o).contains("InputError"), "{}", stderr(&o));
}

#[test]
fn depth_requirement_follows_the_variant() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "1");
    let text = fs::read_to_string(&manifest).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split('\t').collect();
            f[2] = "-";
            f.join("\t") + "\n"
        })
        .collect();
    fs::write(&manifest, stripped).unwrap();

    let rgb = write_config(dir.path(), "RGB16SC", &manifest);
    let out = dir.path().join("rgb");
    let o = depthsal(&["train", "--config", &rgb, "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = depthsal(&["predict", "--config", &rgb, "--output-dir", out.to_str().unwrap(), "--video-id", "clip_0000"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let rgbd = write_config(dir.path(), "RGBD16SC", &manifest);
    let o = depthsal(&["predict", "--config", &rgbd, "--output-dir", out.to_str().unwrap(), "--video-id", "clip_0000"]);
    let err = stderr(&o);
    assert!(err.contains("InputError") && err.contains("RGBD16SC"), "{err}");
}
