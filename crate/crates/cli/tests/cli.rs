use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cirrus(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cirrus")).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = cirrus(args);
    assert!(out.status.success(), "{args:?} failed");
    serde_json::from_slice(&out.stdout).unwrap_or(serde_json::Value::Null)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let toy = tmp.path().join("toy.json");
    let run = tmp.path().join("run");

    let out = cirrus(&["synth-data", "--n-per-class", "3", "--size", "32", "--seed", "4", "--out", path(&data)]);
    assert!(out.status.success());
    assert_eq!(fs::read_dir(&data).unwrap().count(), 6);
    assert!(data.join("0_horizontal_stripes").join("00000.png").is_file());

    let trained = ok(&["train-toy", "--dataset", "synthetic:20:32:1", "--epochs", "10", "--out", path(&toy)]);
    assert!(trained["train_accuracy"].as_f64().unwrap() > 0.5);

    let summary = ok(&[
        "campaign", "--dataset", path(&data), "--model", &format!("toy:{}", toy.display()), "--generator", "random",
        "--q", "8", "--np", "6", "--mq", "30", "--resolution", "32x32", "--limit", "10", "--seed", "2", "--out", path(&run),
    ]);
    assert_eq!(summary["counts"]["n_total"], 10);
    let r = report(&run);
    assert_eq!(r["config"]["attack"]["de"]["np"], 6);
    assert_eq!(r["config"]["attack"]["de"]["cr"], 0.8);
    assert_eq!(r["labels"][0], "0_horizontal_stripes");

    let verified = cirrus(&["verify-report", path(&run)]);
    assert!(verified.status.success());
    assert!(String::from_utf8_lossy(&verified.stdout).contains("consistent"));

    let defended = ok(&["defend", path(&run), "--model", &format!("toy:{}", toy.display()), "--quality", "50"]);
    assert_eq!(defended["quality"], 50);
    let transfer = ok(&["transfer", path(&run), "--model", &format!("toy:{}", toy.display())]);
    assert_eq!(transfer["surrogate_successes"], r["counts"]["n_adv"]);

    let image = fs::read_dir(data.join("2_checkerboard")).unwrap().next().unwrap().unwrap().path();
    let single = tmp.path().join("single");
    let attacked = ok(&[
        "attack", "--image", path(&image), "--model", &format!("toy:{}", toy.display()), "--generator", "random",
        "--q", "8", "--np", "6", "--mq", "12", "--resolution", "native", "--out", path(&single),
    ]);
    assert!(attacked["queries"].as_u64().unwrap() <= 12);
    assert!(single.join("adv.png").is_file());

    let mut json = r.clone();
    json["aq"] = serde_json::json!(1.5);
    fs::write(run.join("report.json"), serde_json::to_vec(&json).unwrap()).unwrap();
    assert!(!cirrus(&["verify-report", path(&run)]).status.success());
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = tmp.path().join("toy.json");
    ok(&["train-toy", "--dataset", "synthetic:4:16:1", "--epochs", "2", "--out", path(&toy)]);
    let cfg = tmp.path().join("cirrus.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 11\ndataset = \"synthetic:1:16:3\"\nmodel = \"toy:{}\"\ngenerator = \"random\"\nq = 4\n\
             [attack]\nalpha = 0.5\nresolution = [16, 16]\n[attack.de]\nnp = 5\nmax_evals = 10\ncr = 0.6\n",
            toy.display()
        ),
    )
    .unwrap();
    let run = tmp.path().join("run");
    ok(&["--config", path(&cfg), "campaign", "--np", "4", "--out", path(&run)]);
    let r = report(&run);
    assert_eq!(r["config"]["attack"]["de"]["np"], 4, "flag wins");
    assert_eq!(r["config"]["attack"]["de"]["cr"], 0.6, "file beats default");
    assert_eq!(r["config"]["attack"]["de"]["f"], 0.5, "default");
    assert_eq!(r["config"]["attack"]["alpha"], 0.5);
    assert_eq!(r["config"]["seed"], 11);
    assert_eq!(r["counts"]["n_total"], 6);

    fs::write(&cfg, "sead = 1\n").unwrap();
    assert!(!cirrus(&["--config", path(&cfg), "verify-report", path(&run)]).status.success());
}

#[test]
fn sweep_needs_a_generator_per_q() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = tmp.path().join("toy.json");
    ok(&["train-toy", "--dataset", "synthetic:4:16:1", "--epochs", "2", "--out", path(&toy)]);
    let model = format!("toy:{}", toy.display());
    let common = ["--dataset", "synthetic:1:16:3", "--model", &model, "--np", "4", "--mq", "8", "--resolution", "16x16"];

    let mut args = vec!["sweep-q", "--qs", "4,6", "--out", path(tmp.path())];
    args.extend(common);
    let missing = cirrus(&args);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("q = 4"));

    args.push("--random-generators");
    let rows = ok(&args);
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(tmp.path().join("sweep.csv")).unwrap().lines().count(), 3);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let out = cirrus(&["campaign", "--dataset", "synthetic", "--model", "cnn:x", "--generator", "random"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model spec"));
    assert!(!cirrus(&["verify-report", "/nonexistent/campaign"]).status.success());
    assert!(!cirrus(&["frobnicate"]).status.success());
}
