use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coslearn::data::{make_blobs, BlobSpec};
use coslearn::experiments::{run_training, TrainSettings};
use coslearn::{EmbeddingMatrix, LossKind, LossSpec, ScheduleProfile};

fn coslearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coslearn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn embed_star_hierarchy_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("star.tsv");
    std::fs::write(&h, "root\ta\nroot\tb\nroot\tc\n").unwrap();
    let out = dir.path().join("e.csv");
    let o = coslearn(&["embed", "--hierarchy", s(&h), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("classes=3"));
    let e = EmbeddingMatrix::load(&out).unwrap();
    assert_eq!(e.gram(), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn missing_hierarchy_exits_one_and_names_the_path() {
    let o = coslearn(&[
        "embed",
        "--hierarchy",
        "/no/such/tree.tsv",
        "--out",
        "/tmp/unused.csv",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/tree.tsv"), "{}", stderr(&o));
}

#[test]
fn train_on_blobs_beats_chance() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    let ckpt = dir.path().join("model.cslm");
    let o = coslearn(&[
        "train",
        "--loss",
        "cosine",
        "--epochs-profile",
        "quick",
        "--lr-max",
        "0.5",
        "--log-out",
        s(&log),
        "--checkpoint-out",
        s(&ckpt),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&log).unwrap();
    let last = text.lines().last().unwrap();
    let acc: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert!(acc > 0.5, "{last}");
    assert!(coslearn::ModelState::load(&ckpt).is_ok());
}

#[test]
fn train_log_matches_library_run() {
    let o = coslearn(&[
        "train",
        "--loss",
        "cosine",
        "--onehot",
        "--epochs-profile",
        "2:2",
        "--lr-max",
        "0.3",
        "--seed",
        "4",
        "--hidden",
        "16",
        "--samples-per-class",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let (train, test) = make_blobs(
        &BlobSpec {
            n_classes: 4,
            dim: 8,
            samples_per_class: 40,
            spread: 0.3,
            separation: 1.0,
            seed: 0,
        },
        None,
    )
    .unwrap();
    let train = train.subsample(5, 4).unwrap();
    let e = EmbeddingMatrix::onehot_named(train.class_names().to_vec()).unwrap();
    let schedule = "2:2".parse::<ScheduleProfile>().unwrap().schedule(0.3);
    let settings = TrainSettings::new(schedule, vec![16]);
    let spec = LossSpec::new(LossKind::Cosine, 4).unwrap();
    let out = run_training(&train, &test, &spec, &e, &settings, 4).unwrap();
    let mut expected = String::from("epoch,lr,train_loss,test_accuracy\n");
    for e in &out.epochs {
        expected.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.lr, e.train_loss, e.test_accuracy
        ));
    }
    assert_eq!(stdout(&o), expected);
}

#[test]
fn combined_loss_without_lambda_is_rejected() {
    let o = coslearn(&["train", "--loss", "cosine_xent", "--onehot"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--lambda"));
}

#[test]
fn experiment_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("determinism_check.json");
    let mut outputs = Vec::new();
    for workers in ["1", "4"] {
        let out = dir.path().join(workers);
        let o = coslearn(&[
            "experiment",
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--workers",
            workers,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(std::fs::read(out.join("results.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let again = dir.path().join("report");
    let o = coslearn(&[
        "report",
        "results",
        "--results",
        s(&dir.path().join("1/results.json")),
        "--out",
        s(&again),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(again.join("summary.csv")).unwrap(),
        std::fs::read(dir.path().join("1/summary.csv")).unwrap()
    );
}

#[test]
fn unknown_loss_in_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("determinism_check.json"))
        .unwrap()
        .replace("\"cross_entropy\"", "\"hinge\"")
        .replace(
            "small_hierarchy.tsv",
            s(&configs().join("small_hierarchy.tsv")),
        );
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, text).unwrap();
    let o = coslearn(&[
        "experiment",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = coslearn(&["gradcheck", "--trials", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.starts_with("case,trials,max_rel_error,status\n"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",pass")), "{text}");
}

#[test]
fn surface_spot_values() {
    let dir = tempfile::tempdir().unwrap();
    let lookup = |loss: &str, x: &str, y: &str| -> String {
        let out = dir.path().join(format!("{loss}.csv"));
        let o = coslearn(&["surface", "--loss", loss, "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = std::fs::read_to_string(&out).unwrap();
        let prefix = format!("{x},{y},");
        text.lines()
            .find_map(|l| l.strip_prefix(&prefix).map(String::from))
            .unwrap()
    };
    assert_eq!(lookup("cosine", "1", "0"), "0");
    assert_eq!(lookup("cosine", "-1", "0"), "2");
    assert_eq!(lookup("mse", "1", "0"), "0");
    assert_eq!(lookup("mse", "0", "0"), "1");
    assert_eq!(lookup("cosine", "0", "0"), "nan");
}

#[test]
fn report_lr_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lr.csv");
    let o = coslearn(&[
        "report",
        "lr",
        "--lr-max",
        "0.5",
        "--profile",
        "paper",
        "--steps-per-epoch",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,lr");
    assert_eq!(lines.len(), 1 + 372 * 2);
    assert_eq!(lines[1], "0,0.5");
    assert_eq!(lines[1 + 24], "24,0.5");
}
