use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn s2s(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2s"))
        .args(args)
        .env_remove("S2S_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = s2s(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(x: &Path) -> &str {
    x.to_str().unwrap()
}

const SPEC: &str = "train = 8\ndev = 2\ntest = 3\nutt_len = 2-3\nvocab_size = 4\nfeat_dim = 8\nseed = 3\n";
const RUN: &str = "task = asr\nepochs = 2\nbatch_size = 4\nd_att = 16\nd_ff = 32\nenc_layers = 1\ndec_layers = 1\nwarmup = 10\nseed = 5\n";

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.conf"), SPEC).unwrap();
    fs::write(d.join("run.conf"), RUN).unwrap();
    ok(&["gen-data", "--spec", p(&d.join("spec.conf")), "--out", p(&d.join("data"))]);
    ok(&[
        "train",
        "--config",
        p(&d.join("run.conf")),
        "--data",
        p(&d.join("data")),
        "--out",
        p(&d.join("exp")),
    ]);
    dir
}

#[test]
fn end_to_end_asr_pipeline() {
    let dir = prepared();
    let d = dir.path();
    let exp = d.join("exp");
    for f in [
        "epoch001.ckpt",
        "epoch002.ckpt",
        "model.avg.ckpt",
        "train.csv",
        "model.conf",
        "vocab.txt",
    ] {
        assert!(exp.join(f).exists(), "missing {f}");
    }
    let hyp = d.join("hyp.txt");
    ok(&[
        "decode",
        "--ckpt",
        p(&exp.join("model.avg.ckpt")),
        "--data",
        p(&d.join("data")),
        "--beam",
        "3",
        "--out",
        p(&hyp),
    ]);
    let lines = fs::read_to_string(&hyp).unwrap();
    assert_eq!(lines.lines().count(), 3);
    assert!(lines.lines().all(|l| l.starts_with("test")));
    let greedy = ok(&[
        "decode",
        "--ckpt",
        p(&exp.join("epoch002.ckpt")),
        "--data",
        p(&d.join("data")),
        "--beam",
        "0",
    ]);
    assert_eq!(greedy.lines().count(), 3);

    let reference = d.join("data/test/text");
    for m in ["wer", "cer", "bleu"] {
        let v: f64 = ok(&["eval", "--ref", p(&reference), "--hyp", p(&hyp), "--metric", m])
            .trim()
            .parse()
            .unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
    let self_wer = ok(&["eval", "--ref", p(&reference), "--hyp", p(&reference), "--metric", "wer"]);
    assert_eq!(self_wer.trim().parse::<f64>().unwrap(), 0.0);
    let self_bleu = ok(&["eval", "--ref", p(&reference), "--hyp", p(&reference), "--metric", "bleu"]);
    assert_eq!(self_bleu.trim().parse::<f64>().unwrap(), 1.0);

    let avg = d.join("two.ckpt");
    ok(&[
        "avg-ckpt",
        "--in",
        p(&exp.join("epoch001.ckpt")),
        p(&exp.join("epoch002.ckpt")),
        "--out",
        p(&avg),
    ]);
    assert_eq!(fs::read(&avg).unwrap(), fs::read(exp.join("model.avg.ckpt")).unwrap());

    let rep = ok(&["report", "--log", p(&exp.join("train.csv")), "--per-epoch"]);
    assert!(rep.starts_with("steps: 4  epochs: 2"), "{rep}");
    assert!(rep.contains("epoch,steps,mean_total"));

    let lm = d.join("lm.ckpt");
    ok(&[
        "train-lm",
        "--data",
        p(&d.join("data")),
        "--out",
        p(&lm),
        "--epochs",
        "2",
        "--units",
        "8",
    ]);
    ok(&[
        "decode",
        "--ckpt",
        p(&exp.join("model.avg.ckpt")),
        "--data",
        p(&d.join("data")),
        "--beam",
        "2",
        "--lm",
        p(&lm),
        "--gamma",
        "0.2",
    ]);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let a = prepared();
    let b = prepared();
    for f in ["train.csv", "epoch002.ckpt", "model.avg.ckpt"] {
        assert_eq!(
            fs::read(a.path().join("exp").join(f)).unwrap(),
            fs::read(b.path().join("exp").join(f)).unwrap()
        );
    }
    let d = a.path();
    let resumed = d.join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    fs::copy(d.join("exp/epoch001.ckpt"), resumed.join("epoch001.ckpt")).unwrap();
    ok(&[
        "train",
        "--config",
        p(&d.join("run.conf")),
        "--data",
        p(&d.join("data")),
        "--out",
        p(&resumed),
        "--resume",
        p(&resumed.join("epoch001.ckpt")),
    ]);
    assert_eq!(
        fs::read(resumed.join("epoch002.ckpt")).unwrap(),
        fs::read(d.join("exp/epoch002.ckpt")).unwrap()
    );
}

#[test]
fn tts_synthesis_writes_features() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.conf"), format!("{SPEC}transform = tts\n")).unwrap();
    fs::write(
        d.join("run.conf"),
        "task = tts\nepochs = 1\nbatch_size = 4\nd_att = 16\nd_ff = 32\nenc_layers = 1\ndec_layers = 1\nprenet_units = 8\npostnet_layers = 2\npostnet_channels = 8\nguided_layers = 1\n",
    )
    .unwrap();
    ok(&["gen-data", "--spec", p(&d.join("spec.conf")), "--out", p(&d.join("data"))]);
    ok(&[
        "train",
        "--config",
        p(&d.join("run.conf")),
        "--data",
        p(&d.join("data")),
        "--out",
        p(&d.join("exp")),
    ]);
    let out = d.join("wav");
    ok(&[
        "synth",
        "--ckpt",
        p(&d.join("exp/model.avg.ckpt")),
        "--text",
        p(&d.join("data/test/text")),
        "--out",
        p(&out),
        "--max-frames",
        "12",
    ]);
    let scp = fs::read_to_string(out.join("feats.scp")).unwrap();
    assert_eq!(scp.lines().count(), 3);
    assert!(out.join("test0000.esf").exists());
    let out = s2s(&["decode", "--ckpt", p(&d.join("exp/model.avg.ckpt")), "--data", p(&d.join("data"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    assert_eq!(s2s(&["--help"]).status.code(), Some(0));
    assert_eq!(s2s(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(s2s(&["eval", "--ref", "x"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.conf"), "vocab_size = 4\nwobble = 1\n").unwrap();
    let out = s2s(&["gen-data", "--spec", p(&d.join("bad.conf")), "--out", p(&d.join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("wobble"));

    let missing = s2s(&["eval", "--ref", p(&d.join("none")), "--hyp", p(&d.join("none")), "--metric", "wer"]);
    assert_eq!(missing.status.code(), Some(2));
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let corrupt = s2s(&["avg-ckpt", "--in", p(&d.join("junk.ckpt")), "--out", p(&d.join("o.ckpt"))]);
    assert_eq!(corrupt.status.code(), Some(2));

    fs::write(d.join("r.txt"), "u1\ta b\n").unwrap();
    fs::write(d.join("h.txt"), "u2\ta b\n").unwrap();
    let unmatched = s2s(&[
        "eval",
        "--ref",
        p(&d.join("r.txt")),
        "--hyp",
        p(&d.join("h.txt")),
        "--metric",
        "cer",
    ]);
    assert_eq!(unmatched.status.code(), Some(2));

    fs::write(d.join("st.conf"), "task = st\nctc = true\n").unwrap();
    let st = s2s(&["train", "--config", p(&d.join("st.conf")), "--data", p(d), "--out", p(&d.join("e"))]);
    assert_eq!(st.status.code(), Some(1));
}
