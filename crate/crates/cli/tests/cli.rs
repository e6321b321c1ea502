use std::fs;
use std::path::Path;
use std::process::Command;

use uuseg::data::{write_dataset, Dataset};
use uuseg::segnet::{build_model, load_checkpoint};
use uuseg_cli::ablate::{ablate, VARIANTS};
use uuseg_cli::commands::{self, MetricsReport, CHECKPOINT_FILE, METRICS_FILE, REPORT_FILE};
use uuseg_cli::config::RunConfig;

fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "image_size = 32\ntrain_size = 8\ntest_size = 4\nwidth = 2\nd_state = 2\n\
         epochs = 1\nbatch_size = 4\nsharpness_samples = 2\nsharpness_ascent = 1\nsharpness_dirs = 1\n",
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn uuseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uuseg"))
}

#[test]
fn zero_epochs_writes_initialization_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.epochs = 0;
    commands::train(&cfg, &mut Vec::new()).unwrap();
    let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv, "epoch,mean_loss,loss_dice,loss_ce,loss_focal,sigma_1,sigma_2,sigma_3,seed\n");
    let loaded = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded.model.params.bits(), build_model(cfg.model_config()).unwrap().params.bits());
    assert!(loaded.log_vars.unwrap().data().iter().all(|&u| u == 0.0));
}

#[test]
fn cross_entropy_run_has_no_sigma_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.set("loss", "ce").unwrap();
    cfg.set("optimizer", "sgd").unwrap();
    let outcome = commands::train(&cfg, &mut Vec::new()).unwrap();
    assert!(outcome.history[0].sigmas.is_empty());
    let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "epoch,mean_loss,loss_dice,loss_ce,loss_focal,seed");
    assert_eq!(lines.next().unwrap().split(',').count(), 6);
}

#[test]
fn binary_reruns_are_byte_identical_and_respect_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    let mut text = small(dir.path()).to_file_text();
    text.push_str("epochs = 3\nseed = 11\n");
    fs::write(&config, text).unwrap();

    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = uuseg()
            .args(["train", "--config"])
            .arg(&config)
            .args(["--seed", "5", "--out"])
            .arg(&out)
            .args(["--epochs", "2"])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        outputs.push((
            fs::read(out.join(METRICS_FILE)).unwrap(),
            fs::read(out.join(CHECKPOINT_FILE)).unwrap(),
        ));
        let echo = fs::read_to_string(out.join("config.txt")).unwrap();
        assert!(echo.contains("epochs = 2\n") && echo.contains("seed = 5\n"), "{echo}");
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",5")));
}

#[test]
fn eval_over_copies_matches_single_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&dir.path().join("train"));
    commands::train(&cfg, &mut Vec::new()).unwrap();
    let model = load_checkpoint(dir.path().join("train").join(CHECKPOINT_FILE)).unwrap().model;

    let one = Dataset::generate(1, 9, 32, 32).unwrap();
    let copies = Dataset {
        seed: one.seed,
        samples: vec![one.samples[0].clone(); 5],
    };
    let a = commands::evaluate(&model, &one, &cfg).unwrap();
    let b = commands::evaluate(&model, &copies, &cfg).unwrap();
    for (x, y) in a.dsc.iter().zip(&b.dsc) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!((a.mse - b.mse).abs() < 1e-12);
    assert!((b.dsc_avg - b.dsc.iter().sum::<f64>() / 3.0).abs() < 1e-12);
}

#[test]
fn untrained_model_scores_low_and_eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        epochs: 0,
        out: dir.path().join("init"),
        ..RunConfig::default()
    };
    commands::train(&cfg, &mut Vec::new()).unwrap();
    cfg.checkpoint = Some(dir.path().join("init").join(CHECKPOINT_FILE));

    let mut reports = Vec::new();
    for name in ["e1", "e2"] {
        cfg.out = dir.path().join(name);
        let mut log = Vec::new();
        let r = commands::eval(&cfg, &mut log).unwrap();
        assert!(String::from_utf8(log).unwrap().contains("DSC LV"));
        assert!(r.dsc_avg < 0.5, "{}", r.dsc_avg);
        assert!(r.sharpness >= 0.0);
        reports.push(fs::read(cfg.out.join(REPORT_FILE)).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let back = MetricsReport::read_csv(&dir.path().join("e1").join(REPORT_FILE)).unwrap();
    assert_eq!(back.seed, cfg.seed);
}

#[test]
fn eval_rejects_incompatible_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(&dir.path().join("train"));
    cfg.epochs = 0;
    commands::train(&cfg, &mut Vec::new()).unwrap();
    let model = load_checkpoint(dir.path().join("train").join(CHECKPOINT_FILE)).unwrap().model;
    let odd = Dataset::generate(1, 0, 34, 34).unwrap();
    assert!(commands::evaluate(&model, &odd, &cfg).is_err());

    cfg.checkpoint = None;
    assert!(commands::eval(&cfg, &mut Vec::new()).is_err());
}

#[test]
fn eval_reads_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    let (train, test) = commands::gen_data(&cfg).unwrap();
    cfg.train_data = Some(train);
    cfg.test_data = Some(test.clone());
    cfg.epochs = 0;
    commands::train(&cfg, &mut Vec::new()).unwrap();
    cfg.checkpoint = Some(dir.path().join(CHECKPOINT_FILE));
    let from_file = commands::eval(&cfg, &mut Vec::new()).unwrap();

    cfg.test_data = None;
    let generated = commands::eval(&cfg, &mut Vec::new()).unwrap();
    assert_eq!(from_file.csv_row(), generated.csv_row());

    fs::write(&test, b"junk").unwrap();
    cfg.test_data = Some(test);
    assert!(commands::eval(&cfg, &mut Vec::new()).is_err());
}

#[test]
fn non_finite_training_reports_context() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.lr = 1e300;
    let err = commands::train(&cfg, &mut Vec::new()).err().unwrap();
    let msg = format!("{err:#}");
    assert!(msg.contains("epoch 1") && msg.contains("batch"), "{msg}");
}

#[test]
fn one_seed_ablation_shape_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.seeds = vec![4];

    cfg.variants = vec!["ua".into()];
    assert!(ablate(&cfg, &mut Vec::new()).unwrap().is_none());

    cfg.variants = VARIANTS.iter().map(|v| v.name.to_string()).collect();
    let mut log = Vec::new();
    let summary = ablate(&cfg, &mut log).unwrap().unwrap();
    let log = String::from_utf8(log).unwrap();
    assert_eq!(log.matches("reusing finished run").count(), 1, "{log}");
    assert_eq!(summary.rows.len(), 3);
    assert_eq!(summary.means.len(), 3);

    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 3);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        for v in &fields[7..] {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{line}");
        }
    }
    assert_eq!(lines.iter().filter(|l| l.contains(",mean,")).count(), 3);
    let ordering = fs::read_to_string(dir.path().join("ordering.csv")).unwrap();
    assert_eq!(ordering.lines().count(), 1 + 9 + 1);

    let again = ablate(&cfg, &mut Vec::new()).unwrap().unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("ablation.csv")).unwrap(), csv);
    assert_eq!(again.sharpness_wins, summary.sharpness_wins);
}

#[test]
fn gradcheck_binary_lists_losses_and_is_deterministic() {
    let run = || uuseg().args(["gradcheck", "--seed", "3"]).output().unwrap();
    let (a, b) = (run(), run());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    for name in ["dice_loss", "ce_loss", "focal_loss", "ua_loss", "segnet_8x8"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name}");
    }
}

#[test]
fn binary_reports_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "epochs = 1\nbogus = 2\n").unwrap();
    let out = uuseg().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bogus") && err.contains("line 2"), "{err}");

    let out = uuseg().args(["eval", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("checkpoint"));

    let out = uuseg().args(["train", "--lr", "-1", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let (train, _) = commands::gen_data(&cfg).unwrap();
    let expected = Dataset::generate(cfg.train_size, cfg.train_seed, 32, 32).unwrap();
    let copy = dir.path().join("copy.bin");
    write_dataset(&expected, &copy).unwrap();
    assert_eq!(fs::read(train).unwrap(), fs::read(copy).unwrap());
}
