use std::path::{Path, PathBuf};
use std::process::Command;

fn fsar(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut argv = vec!["fsar"];
    argv.extend_from_slice(args);
    let code = fsar_cli::run(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Data {
    dir: tempfile::TempDir,
}

impl Data {
    fn new(extra: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["synth", "--out", p(dir.path())];
        args.extend_from_slice(extra);
        let (code, out) = fsar(&args);
        assert_eq!(code, 0, "{out}");
        Data { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn args(&self) -> Vec<String> {
        ["--manifest", "manifest.json", "--frames", "frames.fse", "--prompts", "prompts.fsp"]
            .chunks(2)
            .flat_map(|kv| [kv[0].to_string(), self.path(kv[1]).display().to_string()])
            .collect()
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> (i32, String) {
        let owned = self.args();
        let mut args = vec![cmd];
        args.extend(owned.iter().map(String::as_str));
        args.extend_from_slice(extra);
        fsar(&args)
    }
}

const SMALL: [&str; 8] = ["--classes", "12", "--test-classes", "6", "--per-class", "6", "--C", "16"];

#[test]
fn synth_writes_the_three_containers() {
    let d = Data::new(&SMALL);
    assert_eq!(&std::fs::read(d.path("frames.fse")).unwrap()[..4], b"FSE1");
    assert_eq!(&std::fs::read(d.path("prompts.fsp")).unwrap()[..4], b"FSP1");
    let manifest = std::fs::read_to_string(d.path("manifest.json")).unwrap();
    assert!(manifest.contains("\"C\": 16"));
    let (code, _) = fsar(&["synth", "--out", p(d.dir.path()), "--classes", "10", "--test-classes", "10"]);
    assert_eq!(code, 1);
}

#[test]
fn eval_defaults_follow_the_five_way_one_shot_protocol() {
    let d = Data::new(&SMALL);
    let (code, out) = d.run("eval", &["--way", "5", "--shot", "1", "--query", "4", "--episodes", "3"]);
    assert_eq!(code, 0, "{out}");
    let (_, plain) = d.run("eval", &["--episodes", "3"]);
    let config = |s: &str| s[..s.find("accuracy ").unwrap()].to_string();
    assert_eq!(config(&out), config(&plain));
    assert!(out.contains("\"way\": 5") && out.contains("\"shot\": 1") && out.contains("\"queries\": 4"));
    assert!(out.contains("\"seeds\""));
}

#[test]
fn untrained_eval_on_noise_is_at_chance() {
    let d = Data::new(&["--classes", "24", "--per-class", "30", "--T", "8", "--C", "64", "--appearance-sep", "0", "--motion-sep", "0", "--noise", "1"]);
    let csv = d.path("eval.csv");
    let (code, out) = d.run("eval", &["--episodes", "200", "--out", p(&csv)]);
    assert_eq!(code, 0, "{out}");
    let text = std::fs::read_to_string(&csv).unwrap();
    let acc: f64 = text.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    let sigma = (0.2f64 * 0.8 / (200.0 * 20.0)).sqrt();
    assert!((acc - 0.2).abs() <= 3.0 * sigma, "accuracy {acc}");
}

#[test]
fn train_eval_report_round_trip() {
    let d = Data::new(&SMALL);
    let run_dir = d.path("run");
    let (code, out) = d.run("train", &["--episodes", "20", "--out", p(&run_dir), "--set", "optimizer.accumulation=4"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("\"accumulation\": 4"));
    let ckpt = run_dir.join("model.ckpt");
    let metrics = run_dir.join("metrics.csv");
    assert!(ckpt.exists() && metrics.exists());
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 21);

    let (code, out) = d.run("eval", &["--checkpoint", p(&ckpt), "--episodes", "4"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("\"accumulation\": 4"));
    let (code, _) = d.run("eval", &["--checkpoint", p(&ckpt), "--set", "encoder.depth=2"]);
    assert_eq!(code, 1);

    let svg = d.path("curves.svg");
    let (code, out) = fsar(&["report", "--metrics", p(&metrics), "--out", p(&svg), "--window", "5"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("metrics") && out.contains("L_CE"));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn ablate_writes_one_row_per_grid_entry() {
    let d = Data::new(&SMALL);
    let csv = d.path("ablate.csv");
    let (code, out) = d.run("ablate", &["--train-episodes", "1", "--episodes", "2", "--out", p(&csv)]);
    assert_eq!(code, 0, "{out}");
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "table,label,accuracy,ci95,episodes");
    assert_eq!(lines.len(), 16);
    assert_eq!(lines.iter().filter(|l| l.starts_with("components,")).count(), 8);
    assert_eq!(lines.iter().filter(|l| l.starts_with("fusion,")).count(), 3);
    assert_eq!(lines.iter().filter(|l| l.starts_with("constraint,")).count(), 4);
}

#[test]
fn report_on_empty_metrics_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let header_only = dir.path().join("empty.csv");
    std::fs::write(&header_only, "episode,L_CE,L_H,L_S,total,accuracy\n").unwrap();
    let blank = dir.path().join("blank.csv");
    std::fs::write(&blank, "").unwrap();
    for path in [&header_only, &blank] {
        let (code, _) = fsar(&["report", "--metrics", p(path), "--out", p(&dir.path().join("x.svg"))]);
        assert_eq!(code, 2);
    }
}

#[test]
fn missing_inputs_are_data_errors_and_bad_keys_config_errors() {
    let d = Data::new(&SMALL);
    std::fs::remove_file(d.path("prompts.fsp")).unwrap();
    assert_eq!(d.run("eval", &["--episodes", "1"]).0, 2);
    assert_eq!(fsar(&["eval", "--bogus"]).0, 1);
    assert_eq!(fsar(&["--help"]).0, 0);
}

#[test]
fn binary_reports_the_offending_key() {
    let d = Data::new(&SMALL);
    let mut args = vec!["eval".to_string()];
    args.extend(d.args());
    args.extend(["--set".into(), "optimizer.learning_rate=0.1".into()]);
    let out = Command::new(env!("CARGO_BIN_EXE_fsar")).args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("optimizer.learning_rate"), "{err}");
}

#[test]
fn gradcheck_passes() {
    let (code, out) = fsar(&["gradcheck"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("episode pipeline"));
}
