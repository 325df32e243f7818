use std::path::Path;
use std::process::{Command, Output};

fn radicalc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radicalc"))
        .args(args)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .env_remove("RADICALC_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn encode_lists_eight_radicals() {
    let o = radicalc(&["encode", "慧", "--bank", "fixtures/bank"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("慧: 8 radicals"), "{out}");
    for r in "彗心丰彐三二一丨".chars() {
        assert!(out.contains(r), "missing {r} in {out}");
    }

    let o = radicalc(&["--json", "encode", "A", "--bank", "fixtures/bank"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["radicals"].as_array().unwrap().len(), 0);
}

#[test]
fn eval_self_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.tsv");
    std::fs::write(&p, "1\t慧心\n2\tABC\n3\t中国!\n").unwrap();
    let p = p.to_str().unwrap();
    let o = radicalc(&["eval", "--pred", p, "--gt", p, "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["word_acc_all"], 1.0);
    assert_eq!(v["n_non_latin"], 2);

    let o = radicalc(&["eval", "--pred", p, "--gt", p]);
    assert!(stdout(&o).contains("word_acc"));
}

#[test]
fn gradcheck_passes() {
    let o = radicalc(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("max rel err"));
}

#[test]
fn help_shows_defaults_and_exits_zero() {
    for sub in [
        vec!["--help"],
        vec!["ids", "check", "--help"],
        vec!["ids", "parse", "--help"],
        vec!["bank", "build", "--help"],
        vec!["encode", "--help"],
        vec!["gradcheck", "--help"],
        vec!["train-toy", "--help"],
        vec!["eval", "--help"],
        vec!["decode", "--help"],
        vec!["synth", "--help"],
    ] {
        let o = radicalc(&sub);
        assert_eq!(o.status.code(), Some(0), "{sub:?}");
        assert!(stdout(&o).contains("--json") || sub.len() == 1, "{sub:?}");
    }
    assert!(stdout(&radicalc(&["train-toy", "--help"])).contains("[default: .]"));
}

#[test]
fn usage_and_operational_errors() {
    assert_eq!(radicalc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(radicalc(&["eval", "--pred", "x"]).status.code(), Some(2));
    assert_eq!(
        radicalc(&["encode", "慧", "--bank", "fixtures/bank", "--bogus"])
            .status
            .code(),
        Some(2)
    );
    let o = radicalc(&["eval", "--pred", "/nonexistent", "--gt", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read"));
}

#[test]
fn ids_subcommands() {
    let o = radicalc(&["ids", "parse", "⿱彗心"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "⿱\n├─ 彗\n└─ 心\n");
    assert_eq!(radicalc(&["ids", "parse", "⿱彗"]).status.code(), Some(1));
    let o = radicalc(&["ids", "check", "fixtures/desk_ids.txt"]);
    assert_eq!(o.status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "U+6167\t慧\t⿱彗心\nU+5F57\t彗\t⿱⿰丰\n").unwrap();
    let o = radicalc(&["--json", "ids", "check", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["failures"].as_array().unwrap().len(), 1);
}

#[test]
fn bank_build_then_encode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bank");
    let o = radicalc(&[
        "bank",
        "build",
        "--charset",
        "fixtures/desk_charset.txt",
        "--ids",
        "fixtures/desk_ids.txt",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["bank.txt", "charset.txt", "bor_matrix.tsv", "ids.txt"] {
        assert!(out.join(f).exists());
    }
    let built = std::fs::read_to_string(out.join("bank.txt")).unwrap();
    let shipped =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/bank/bank.txt")).unwrap();
    assert_eq!(built, shipped);
}

#[test]
fn train_synth_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.conf");
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::write(
        &cfg,
        format!(
            "steps = 4\nbatch_size = 2\nprobe_every = 2\nwords = 10\nd_emb = 8\nd_hidden = 8\nd_vis = 8\nd_attn = 8\n\
             charset = {}\nids = {}\n",
            fixtures.join("desk_charset.txt").display(),
            fixtures.join("desk_ids.txt").display()
        ),
    )
    .unwrap();
    let out = dir.path().join("run");
    let (cfg, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let o = radicalc(&[
        "--json",
        "train-toy",
        "--config",
        cfg,
        "--out",
        out_s,
        "--no-bce",
        "--re-zero",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["steps"], 4);
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for key in ["step", "L", "l_o", "l_r", "probe_word_acc"] {
        assert!(lines[0].get(key).is_some(), "log lacks {key}");
    }
    assert_eq!(lines[1]["l_r"], 0.0);
    assert!(std::fs::read(out.join("checkpoint.rdcl"))
        .unwrap()
        .starts_with(b"RDCLv1"));

    let images = dir.path().join("img");
    let o = radicalc(&[
        "synth",
        "--config",
        cfg,
        "--out",
        images.to_str().unwrap(),
        "--count",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let labels = std::fs::read_to_string(images.join("labels.tsv")).unwrap();
    let first = labels.lines().next().unwrap().split('\t').next().unwrap();
    let ckpt = out.join("checkpoint.rdcl");
    let o = radicalc(&[
        "decode",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        images.join(first).to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    // resume to a later step
    let o = radicalc(&[
        "train-toy",
        "--config",
        cfg,
        "--out",
        out_s,
        "--resume",
        ckpt.to_str().unwrap(),
        "--steps",
        "6",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read_to_string(out.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn seed_comes_from_env() {
    let run = |env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_radicalc"));
        c.args(["--json", "gradcheck"]).current_dir(env!("CARGO_MANIFEST_DIR"));
        match env {
            Some(s) => c.env("RADICALC_SEED", s),
            None => c.env_remove("RADICALC_SEED"),
        };
        let v: serde_json::Value = serde_json::from_slice(&c.output().unwrap().stdout).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(run(Some("3")), 3);
    assert_eq!(run(None), 7);
}
