use std::fs;
use std::path::Path;

use serde_json::Value;

use d2ae_cli::cli::{EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use d2ae_cli::run;
use d2ae_core::data;
use d2ae_core::persistence;

fn d2ae(args: &[&str]) -> i32 {
    run(std::iter::once("d2ae").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": { "feat_dim_t": 6, "feat_dim_p": 6, "enc_channels": [4, 8], "branch_channels": 8, "dec_channels": [8, 4] },
  "train": { "epochs": 2, "batch_size": 8, "eval_every": 1 }
}"#;

#[test]
fn argument_errors_exit_with_2() {
    assert_eq!(d2ae(&["--no-such-flag"]), EXIT_USAGE);
    assert_eq!(d2ae(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(d2ae(&["gen-data"]), EXIT_USAGE);
    assert_eq!(d2ae(&["gen-data", "--out", "x", "--n-id", "many"]), EXIT_USAGE);
    assert_eq!(d2ae(&["edit", "--ckpt", "a", "--image", "b", "--attr", "smile"]), EXIT_USAGE);
    assert_eq!(d2ae(&["edit", "--ckpt", "a", "--image", "b", "--beta", "0.5"]), EXIT_USAGE);
    assert_eq!(d2ae(&["--help"]), EXIT_OK);
}

#[test]
fn runtime_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.d2ae");
    assert_eq!(d2ae(&["eval", "--ckpt", s(&missing), "--data", s(dir.path())]), EXIT_RUNTIME);
    assert_eq!(d2ae(&["gen-data", "--out", s(dir.path()), "--n-id", "1"]), EXIT_RUNTIME);
    let junk = dir.path().join("junk.d2ae");
    fs::write(&junk, b"D2AE garbage").unwrap();
    assert_eq!(d2ae(&["stats", "--ckpt", s(&junk), "--data", s(dir.path())]), EXIT_RUNTIME);
}

#[test]
fn pipeline_from_data_to_edit() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data_dir = root.join("data");
    let cfg = root.join("cfg.json");
    let ckpt = root.join("model.d2ae");
    fs::write(&cfg, TINY).unwrap();

    let code = d2ae(&["gen-data", "--seed", "3", "--n-id", "4", "--per-id", "125", "--size", "16", "--out", s(&data_dir)]);
    assert_eq!(code, EXIT_OK);
    let ds = data::load(&data_dir).unwrap();
    assert_eq!(ds.len(), 500);

    let code = d2ae(&["--sequential", "train", "--data", s(&data_dir), "--config", s(&cfg), "--out-ckpt", s(&ckpt)]);
    assert_eq!(code, EXIT_OK);
    let ck = persistence::load(&ckpt).unwrap();
    assert_eq!(ck.model.config().n_id, 4);
    assert_eq!(ck.model.config().input_size, 16);
    assert_eq!(ck.meta.epoch, 2);
    assert_eq!(ck.meta.metrics["epoch"], 2);

    let report = root.join("report.json");
    assert_eq!(d2ae(&["eval", "--ckpt", s(&ckpt), "--data", s(&data_dir), "--out", s(&report)]), EXIT_OK);
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["verification_t", "verification_c", "identity", "attributes", "channels", "psnr"] {
        assert!(v.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(v["attributes"]["rows"].as_array().unwrap().len(), 5);

    let probes = root.join("probes.json");
    assert_eq!(d2ae(&["probe", "--ckpt", s(&ckpt), "--data", s(&data_dir), "--out", s(&probes)]), EXIT_OK);
    let pv: Value = serde_json::from_str(&fs::read_to_string(&probes).unwrap()).unwrap();
    assert_eq!(pv["entries"].as_array().unwrap().len(), 5);

    assert_eq!(d2ae(&["stats", "--ckpt", s(&ckpt), "--data", s(&data_dir)]), EXIT_OK);

    let input = data_dir.join("images/0000/0000.png");
    let out = root.join("edited.png");
    let code = d2ae(&[
        "edit", "--ckpt", s(&ckpt), "--image", s(&input), "--probes", s(&probes), "--attr", "smile=0.5", "--out", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(data::load_png(&out, 16).unwrap().shape(), &[3, 16, 16]);

    // no edits and no identity target: the reconstruction itself
    let plain = root.join("plain.png");
    assert_eq!(d2ae(&["edit", "--ckpt", s(&ckpt), "--image", s(&input), "--out", s(&plain)]), EXIT_OK);
    let x = data::load_png(&input, 16).unwrap();
    let recon = ck.model.reconstruct(&x).unwrap();
    let quantized = data::decode_png_exact(&data::encode_png(&recon).unwrap(), 16).unwrap();
    assert_eq!(data::load_png(&plain, 16).unwrap(), quantized);

    let other = data_dir.join("images/0002/0000.png");
    let code = d2ae(&[
        "edit", "--ckpt", s(&ckpt), "--image", s(&input), "--identity-image", s(&other), "--beta", "0.3", "--out", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);

    let code = d2ae(&["edit", "--ckpt", s(&ckpt), "--image", s(&input), "--probes", s(&probes), "--attr", "beard=1", "--out", s(&out)]);
    assert_eq!(code, EXIT_RUNTIME);
    // the checkpoint carries no probes of its own
    let code = d2ae(&["edit", "--ckpt", s(&ckpt), "--image", s(&input), "--attr", "smile=1", "--out", s(&out)]);
    assert_eq!(code, EXIT_RUNTIME);
}
