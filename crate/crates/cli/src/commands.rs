//! The `gen-data`, `train`, `eval` and `gradcheck` commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use uuseg::data::{read_dataset, write_dataset, Dataset, SegSample, CLASS_COUNT};
use uuseg::losses::LossConfig;
use uuseg::metrics::{dsc_metric, mse_metric};
use uuseg::optim::sharpness_probe;
use uuseg::segnet::{batch_loss, build_model, load_checkpoint, save_checkpoint, stack_batch, train_epoch, EpochStats, SegModel, TrainState};
use uuseg::{Error, ParamSet, ProbMap, Tensor};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.csv";

/// Foreground classes in report order.
pub const REPORT_CLASSES: [(usize, &str); 3] = [(1, "RV"), (2, "Myo"), (3, "LV")];

/// Shortest round-trip decimal form, so equal values print equal bytes.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_config_echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_file_text()).with_context(|| format!("writing {}", path.display()))
}

fn load_or_generate(path: &Option<PathBuf>, count: usize, seed: u64, size: usize, what: &str) -> Result<Dataset> {
    match path {
        Some(p) => read_dataset(p).with_context(|| format!("loading {what} data")),
        None => Dataset::generate(count, seed, size, size).with_context(|| format!("generating {what} data")),
    }
}

pub fn train_data(cfg: &RunConfig) -> Result<Dataset> {
    load_or_generate(&cfg.train_data, cfg.train_size, cfg.train_seed, cfg.image_size, "training")
}

pub fn test_data(cfg: &RunConfig) -> Result<Dataset> {
    load_or_generate(&cfg.test_data, cfg.test_size, cfg.test_seed, cfg.image_size, "test")
}

/// Writes `train.bin` and `test.bin` under the output directory.
pub fn gen_data(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    create_out(&cfg.out)?;
    let train = Dataset::generate(cfg.train_size, cfg.train_seed, cfg.image_size, cfg.image_size)?;
    let test = Dataset::generate(cfg.test_size, cfg.test_seed, cfg.image_size, cfg.image_size)?;
    let (tp, sp) = (cfg.out.join("train.bin"), cfg.out.join("test.bin"));
    write_dataset(&train, &tp)?;
    write_dataset(&test, &sp)?;
    write_config_echo(cfg, &cfg.out)?;
    Ok((tp, sp))
}

pub fn metrics_header(sigmas: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "mean_loss", "loss_dice", "loss_ce", "loss_focal"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=sigmas).map(|m| format!("sigma_{m}")));
    h.push("seed".into());
    h
}

fn metrics_row(s: &EpochStats, seed: u64) -> Vec<String> {
    let mut r = vec![s.epoch.to_string(), fmt_f64(s.mean_loss)];
    r.extend(s.components.iter().map(|&v| fmt_f64(v)));
    r.extend(s.sigmas.iter().map(|&v| fmt_f64(v)));
    r.push(seed.to_string());
    r
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochStats>,
    pub wall_clock: Duration,
}

/// Trains on `data` from a fresh initialization, writing the per-epoch CSV,
/// the checkpoint and the config echo under `cfg.out`.
pub fn train_on(cfg: &RunConfig, data: &Dataset, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    create_out(&cfg.out)?;
    write_config_echo(cfg, &cfg.out)?;
    let loss = cfg.loss_config();
    let train = cfg.train_config();
    let mut state = TrainState::new(build_model(cfg.model_config())?, &loss)?;

    let csv_path = cfg.out.join(METRICS_FILE);
    let mut csv = csv::Writer::from_path(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    csv.write_record(metrics_header(loss.uncertainty_count()))?;
    csv.flush()?;

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let stats = match train_epoch(&mut state, &data.samples, &train, &loss) {
            Ok(s) => s,
            Err(Error::NonFiniteLoss { batch, op }) => {
                bail!("non-finite value from {op} in epoch {epoch}, batch {batch}; try a smaller learning rate")
            }
            Err(e) => return Err(e).with_context(|| format!("epoch {epoch}")),
        };
        csv.write_record(metrics_row(&stats, cfg.seed))?;
        csv.flush()?;
        writeln!(
            log,
            "epoch {:>3}  loss {:.5}  ({:.1}s)",
            stats.epoch,
            stats.mean_loss,
            start.elapsed().as_secs_f64()
        )?;
        history.push(stats);
    }
    save_checkpoint(&state, cfg.out.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome {
        state,
        history,
        wall_clock: start.elapsed(),
    })
}

pub fn train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    let data = train_data(cfg)?;
    let outcome = train_on(cfg, &data, log)?;
    writeln!(log, "wall-clock {:.1}s", outcome.wall_clock.as_secs_f64())?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Mean per-image DSC for RV, Myo and LV.
    pub dsc: [f64; 3],
    pub dsc_avg: f64,
    pub mse: f64,
    pub sharpness: f64,
    pub seed: u64,
    pub wall_clock: Duration,
    pub echo: Vec<(&'static str, String)>,
}

pub const REPORT_HEADER: [&str; 7] = ["seed", "dsc_rv", "dsc_myo", "dsc_lv", "dsc_avg", "mse", "sharpness"];

impl MetricsReport {
    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![self.seed.to_string()];
        r.extend(self.dsc.iter().map(|&v| fmt_f64(v)));
        r.extend([self.dsc_avg, self.mse, self.sharpness].map(fmt_f64));
        r
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(REPORT_HEADER)?;
        w.write_record(self.csv_row())?;
        w.flush()?;
        Ok(())
    }

    /// Reads back the numeric part of a report written by [`Self::write_csv`].
    pub fn read_csv(path: &Path) -> Result<MetricsReport> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        ensure!(
            r.headers()?.iter().eq(REPORT_HEADER),
            "{} does not have the report header",
            path.display()
        );
        let rec = r
            .records()
            .next()
            .with_context(|| format!("{} has no data row", path.display()))??;
        let f = |i: usize| -> Result<f64> { Ok(rec[i].parse()?) };
        Ok(MetricsReport {
            seed: rec[0].parse()?,
            dsc: [f(1)?, f(2)?, f(3)?],
            dsc_avg: f(4)?,
            mse: f(5)?,
            sharpness: f(6)?,
            wall_clock: Duration::ZERO,
            echo: Vec::new(),
        })
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<10} {:>10}\n", "metric", "value"));
        for ((_, name), v) in REPORT_CLASSES.iter().zip(self.dsc) {
            s.push_str(&format!("{:<10} {:>10.4}\n", format!("DSC {name}"), v));
        }
        s.push_str(&format!("{:<10} {:>10.4}\n", "DSC avg", self.dsc_avg));
        s.push_str(&format!("{:<10} {:>10.6}\n", "MSE", self.mse));
        s.push_str(&format!("{:<10} {:>10.6}\n", "sharpness", self.sharpness));
        s.push_str(&format!("{:<10} {:>9.1}s\n", "wall-clock", self.wall_clock.as_secs_f64()));
        for (k, v) in &self.echo {
            s.push_str(&format!("  {k} = {v}\n"));
        }
        s
    }
}

fn check_compatible(model: &SegModel, data: &Dataset) -> Result<()> {
    let (h, w) = data.geometry()?;
    let d = model.cfg.divisor();
    ensure!(
        h % d == 0 && w % d == 0,
        "dataset images are {h}x{w} but the checkpoint's model needs sides divisible by {d}"
    );
    ensure!(
        model.cfg.classes == CLASS_COUNT && model.cfg.in_channels == 1,
        "checkpoint has {} classes and {} input channels; the dataset has {CLASS_COUNT} and 1",
        model.cfg.classes,
        model.cfg.in_channels
    );
    Ok(())
}

/// Cross-entropy of the model alone on a fixed subset, as the function whose
/// sharpness is reported. The same objective serves every loss setting so
/// that values compare across runs.
fn sharpness_of(model: &SegModel, samples: &[SegSample], cfg: &RunConfig) -> Result<f64> {
    let subset: Vec<&SegSample> = samples.iter().take(cfg.sharpness_samples).collect();
    let (images, targets) = stack_batch(&subset)?;
    let ce = LossConfig::cross_entropy_only();
    let mcfg = model.cfg;
    let mut objective = |p: &ParamSet| {
        let (v, _, g) = batch_loss(&mcfg, p, &images, &targets, &ce)?;
        Ok((v, g))
    };
    Ok(sharpness_probe(
        &model.params,
        &mut objective,
        cfg.sharpness_rho,
        cfg.sharpness_ascent,
        cfg.sharpness_dirs,
        cfg.seed,
    )?)
}

/// DSC, MSE and sharpness of `model` on `data`.
pub fn evaluate(model: &SegModel, data: &Dataset, cfg: &RunConfig) -> Result<MetricsReport> {
    let start = Instant::now();
    check_compatible(model, data)?;
    let mut probs: Vec<ProbMap> = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(cfg.batch_size.max(1)) {
        let images: Vec<Tensor> = chunk.iter().map(SegSample::image_tensor).collect();
        probs.extend(model.predict_batch(&images)?);
    }
    let mut dsc = [0.0; 3];
    for (p, s) in probs.iter().zip(&data.samples) {
        let hard = p.argmax();
        for (slot, &(class, _)) in dsc.iter_mut().zip(&REPORT_CLASSES) {
            *slot += dsc_metric(&hard, &s.mask, class)?;
        }
    }
    let n = data.len() as f64;
    let dsc = dsc.map(|v| v / n);
    let truths: Vec<_> = data.samples.iter().map(|s| s.mask.clone()).collect();
    Ok(MetricsReport {
        dsc,
        dsc_avg: dsc.iter().sum::<f64>() / 3.0,
        mse: mse_metric(&probs, &truths)?,
        sharpness: sharpness_of(model, &data.samples, cfg)?,
        seed: cfg.seed,
        wall_clock: start.elapsed(),
        echo: cfg.echo(),
    })
}

/// Evaluates `cfg.checkpoint` on the test data and writes the report.
pub fn eval(cfg: &RunConfig, log: &mut dyn Write) -> Result<MetricsReport> {
    cfg.validate()?;
    let path = cfg.checkpoint.as_ref().context("eval needs --checkpoint")?;
    let state = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let data = test_data(cfg)?;
    let report = evaluate(&state.model, &data, cfg)?;
    create_out(&cfg.out)?;
    report.write_csv(&cfg.out.join(REPORT_FILE))?;
    write_config_echo(cfg, &cfg.out)?;
    write!(log, "{}", report.table())?;
    Ok(report)
}

/// Prints one line per registered case; returns whether all passed.
pub fn gradcheck(seed: u64, log: &mut dyn Write) -> Result<bool> {
    let mut ok = true;
    for case in uuseg::gradsuite::registry() {
        let r = case.run(seed, uuseg::gradsuite::POINTS)?;
        ok &= r.passed();
        writeln!(
            log,
            "{:<24} {:.3e}  {}",
            r.name,
            r.max_error,
            if r.passed() { "ok" } else { "FAIL" }
        )?;
    }
    Ok(ok)
}
