use std::fs;
use std::path::Path;

use triggerless_cli::commands::{CheckpointMeta, BACKDOORED_CHECKPOINT, CLEAN_CHECKPOINT, CONFIG_FILE, METRICS_FILE};
use triggerless_cli::config::ExperimentConfig;
use triggerless_cli::execute;
use triggerless_core::data::write_fixture;
use triggerless_core::metrics::MetricsReport;
use triggerless_core::network::Checkpoint;

fn config_text(out: &Path, extra: &str) -> String {
    format!(
        "output_dir = {out:?}\n\
         [dataset]\nsource = \"synthetic\"\nsamples_per_class = 60\n\
         [model]\nhidden = [24, 16]\n\
         [train]\nepochs = 3\nbatch_size = 16\n\
         [evaluation]\nnum_queries = 20\ninference_rate = 0.05\neval_inputs = 30\n{extra}"
    )
}

fn write_config(dir: &Path, name: &str, out: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, config_text(out, extra)).unwrap();
    path
}

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut full = vec!["triggerless", "--quiet"];
    full.extend_from_slice(args);
    let code = execute(full, &mut out);
    (code, String::from_utf8(out).unwrap())
}

#[test]
fn train_writes_checkpoint_pair_and_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.toml", &out, "");
    let (code, _) = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0);
    let rep = out.join("rep-0");
    for name in [CLEAN_CHECKPOINT, BACKDOORED_CHECKPOINT] {
        let ckpt = Checkpoint::load(&rep.join(name)).unwrap();
        let meta = CheckpointMeta::parse(&ckpt.metadata).unwrap();
        assert_eq!(meta.attack.is_some(), name == BACKDOORED_CHECKPOINT);
    }
    let written = ExperimentConfig::load(&out.join(CONFIG_FILE)).unwrap();
    let original = ExperimentConfig::load(&cfg).unwrap();
    assert_eq!(written, original);
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut snapshots = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let cfg = write_config(tmp.path(), &format!("{name}.toml"), &out, "");
        let c = cfg.to_str().unwrap();
        assert_eq!(run(&["train", "--config", c]).0, 0);
        assert_eq!(run(&["evaluate", "--config", c]).0, 0);
        snapshots.push(
            [CLEAN_CHECKPOINT, BACKDOORED_CHECKPOINT]
                .iter()
                .map(|f| fs::read(out.join("rep-0").join(f)).unwrap())
                .chain([fs::read(out.join(METRICS_FILE)).unwrap()])
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(snapshots[0], snapshots[1]);
}

#[test]
fn metrics_header_is_documented_and_rate_zero_gives_zero_asr() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.toml", &out, "");
    let c = cfg.to_str().unwrap();
    assert_eq!(run(&["train", "--config", c]).0, 0);
    assert_eq!(run(&["evaluate", "--config", c, "--inference-rate", "0"]).0, 0);
    let text = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("repetition,{}", MetricsReport::csv_header()));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "0");
    let asr_col = 1 + MetricsReport::CSV_COLUMNS.iter().position(|c| *c == "attack_success_rate").unwrap();
    assert_eq!(row[asr_col], "0");
    assert!(text.lines().any(|l| l.starts_with("mean,")));
    assert!(text.lines().any(|l| l.starts_with("std,")));
}

#[test]
fn evaluate_without_checkpoints_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &tmp.path().join("none"), "");
    assert_eq!(run(&["evaluate", "--config", cfg.to_str().unwrap()]).0, 2);
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(run(&["train", "--no-such-flag"]).0, 1);
    assert_eq!(run(&["sweep", "--axis", "queries"]).0, 1);
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap()]).0, 1);
    let cfg = write_config(tmp.path(), "c.toml", &tmp.path().join("o"), "[attack]\ntarget_label = 9\n");
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap()]).0, 1);
}

#[test]
fn help_exits_zero() {
    let (code, text) = run(&["--help"]);
    assert_eq!(code, 0);
    for cmd in ["train", "evaluate", "sweep", "plan", "predict-activation", "dos-demo"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn plan_reports_queries_for_confidence() {
    let (code, text) = run(&["plan", "--rate", "0.001", "--neurons", "1", "--confidence", "0.99"]);
    assert_eq!(code, 0);
    assert!(text.contains("queries_for_confidence = 4603"), "{text}");
    let (_, text) = run(&["plan", "--rate", "0.001", "--confidence", "0"]);
    assert!(text.contains("queries_for_confidence = 1"));
    let (_, text) = run(&["plan", "--target", "0:1:0.1", "--target", "1:2:0.2"]);
    let p: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("activation_probability = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((p - 0.004).abs() < 1e-15);
    assert_eq!(run(&["plan", "--rate", "1.5"]).0, 1);
}

#[test]
fn predict_activation_and_dos_demo() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.toml", &out, "");
    let c = cfg.to_str().unwrap();
    assert_eq!(run(&["train", "--config", c]).0, 0);
    let (code, text) = run(&["predict-activation", "--config", c, "--seed", "5", "--stream", "2"]);
    assert_eq!(code, 0);
    assert!(text.contains("first_activation = "));
    let (code, text) = run(&["dos-demo", "--config", c, "--seed", "5", "--input", "3"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("activated = true"), "{text}");
    // a one-query horizon almost never suffices at rate 0.05
    let (code, _) = run(&["predict-activation", "--config", c, "--seed", "5", "--horizon", "1", "--inference-rate", "0.0001"]);
    assert_eq!(code, 3);
}

#[test]
fn sweep_writes_long_form_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.toml", &out, "");
    let c = cfg.to_str().unwrap();
    let (code, _) = run(&["sweep", "--config", c, "--axis", "queries", "--values", "5,20"]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(out.join("sweep-queries.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "axis,value,metric,mean,stddev");
    assert_eq!(lines.count(), 2 * MetricsReport::CSV_COLUMNS.len());
    let asr = |q: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(&format!("queries,{q},attack_success_rate,")))
            .unwrap()
            .split(',')
            .nth(3)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(asr("5") <= asr("20"));
    let (code, _) = run(&["sweep", "--config", c, "--axis", "neurons", "--values", "1,2"]);
    assert_eq!(code, 0);
    assert!(out.join("sweep-neurons/neurons-2/rep-0").join(BACKDOORED_CHECKPOINT).exists());
}

#[test]
fn fixture_dataset_source() {
    let tmp = tempfile::tempdir().unwrap();
    let data = triggerless_core::data::synthetic_blobs(3, 5, 30, 0.05, 4).unwrap();
    let train = tmp.path().join("train.txt");
    let test = tmp.path().join("test.txt");
    fs::write(&train, write_fixture(&data)).unwrap();
    fs::write(&test, write_fixture(&data)).unwrap();
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("c.toml");
    fs::write(
        &cfg,
        format!(
            "output_dir = {out:?}\n[dataset]\nsource = \"fixture\"\ntrain = {train:?}\ntest = {test:?}\n\
             [model]\nhidden = [8, 6]\n[train]\nepochs = 1\n"
        ),
    )
    .unwrap();
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap()]).0, 0);
    let ckpt = Checkpoint::load(&out.join("rep-0").join(CLEAN_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.spec.layer_widths(), &[5, 8, 6, 3]);
}

#[test]
fn missing_mnist_directory_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _) = run(&[
        "train",
        "--output-dir",
        tmp.path().join("o").to_str().unwrap(),
        "--mnist-dir",
        tmp.path().join("nowhere").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}
