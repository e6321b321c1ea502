//! Three-way comparison of loss and optimizer choices over several seeds.
//!
//! Each (variant, seed) run lives in its own directory and is skipped when
//! its report already exists, so separate processes can each take a subset
//! of `variants` and a final invocation aggregates.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use uuseg::data::Dataset;
use uuseg::segnet::OptimizerKind;

use crate::commands::{self, fmt_f64, MetricsReport, CHECKPOINT_FILE, CONFIG_FILE, REPORT_FILE};
use crate::config::{LossPreset, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub loss: LossPreset,
    pub optimizer: OptimizerKind,
}

pub const VARIANTS: [Variant; 3] = [
    Variant {
        name: "ce",
        loss: LossPreset::CrossEntropy,
        optimizer: OptimizerKind::Sgd,
    },
    Variant {
        name: "ua",
        loss: LossPreset::Uncertainty,
        optimizer: OptimizerKind::Sgd,
    },
    Variant {
        name: "ua_sam",
        loss: LossPreset::Uncertainty,
        optimizer: OptimizerKind::Sam,
    },
];

/// Keys allowed to differ between runs of one ablation. Only `loss` and
/// `optimizer` change what is trained; the rest name the run.
const VARYING_KEYS: [&str; 7] = ["loss", "optimizer", "seed", "seeds", "variants", "out", "checkpoint"];

pub fn variant(name: &str) -> Result<Variant> {
    VARIANTS
        .iter()
        .find(|v| v.name == name)
        .copied()
        .with_context(|| format!("unknown ablation variant {name:?}"))
}

pub fn run_dir(out: &Path, v: &Variant, seed: u64) -> PathBuf {
    out.join(v.name).join(format!("seed_{seed}"))
}

/// The base configuration specialized to one run.
pub fn run_config(base: &RunConfig, v: &Variant, seed: u64) -> RunConfig {
    let dir = run_dir(&base.out, v, seed);
    RunConfig {
        loss: v.loss,
        optimizer: v.optimizer,
        seed,
        seeds: vec![seed],
        variants: vec![v.name.to_string()],
        checkpoint: Some(dir.join(CHECKPOINT_FILE)),
        out: dir,
        ..base.clone()
    }
}

/// The finished report of a run whose recorded config matches `cfg`.
fn finished(cfg: &RunConfig) -> Result<Option<MetricsReport>> {
    let report = cfg.out.join(REPORT_FILE);
    if !report.exists() {
        return Ok(None);
    }
    let recorded = fs::read_to_string(cfg.out.join(CONFIG_FILE)).unwrap_or_default();
    if recorded != cfg.to_file_text() {
        return Ok(None);
    }
    MetricsReport::read_csv(&report).map(Some)
}

/// Trains and evaluates one run unless its report already exists.
pub fn run_variant(cfg: &RunConfig, train: &Dataset, test: &Dataset, log: &mut dyn Write) -> Result<MetricsReport> {
    if let Some(r) = finished(cfg)? {
        writeln!(log, "{}: reusing finished run", cfg.out.display())?;
        return Ok(r);
    }
    writeln!(log, "{}: training", cfg.out.display())?;
    let outcome = commands::train_on(cfg, train, log)?;
    let report = commands::evaluate(&outcome.state.model, test, cfg)?;
    report.write_csv(&cfg.out.join(REPORT_FILE))?;
    writeln!(
        log,
        "{}: dsc_avg {:.4}  mse {:.5}  train {:.1}s",
        cfg.out.display(),
        report.dsc_avg,
        report.mse,
        outcome.wall_clock.as_secs_f64()
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantMean {
    pub name: &'static str,
    pub dsc_avg: f64,
    pub mse: f64,
    pub sharpness: f64,
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    /// `(variant, report)` in seed-major order.
    pub rows: Vec<(&'static str, MetricsReport)>,
    pub means: Vec<VariantMean>,
    /// Seeds where the `ua_sam` run was no sharper than the `ce` run.
    pub sharpness_wins: usize,
}

impl AblationSummary {
    pub fn mean(&self, name: &str) -> Option<&VariantMean> {
        self.means.iter().find(|m| m.name == name)
    }
}

fn echo_without_varying(cfg: &RunConfig) -> Vec<(&'static str, String)> {
    cfg.echo().into_iter().filter(|(k, _)| !VARYING_KEYS.contains(k)).collect()
}

fn relation(a: f64, b: f64) -> &'static str {
    match a.partial_cmp(&b) {
        Some(Ordering::Less) => "<",
        Some(Ordering::Greater) => ">",
        _ => "=",
    }
}

fn write_outputs(base: &RunConfig, s: &AblationSummary) -> Result<()> {
    let path = base.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["variant", "loss", "optimizer", "seed", "dsc_rv", "dsc_myo", "dsc_lv", "dsc_avg", "mse", "sharpness"])?;
    for (name, r) in &s.rows {
        let v = variant(name)?;
        let mut rec = vec![name.to_string(), v.loss.name().into(), v.optimizer.name().into()];
        rec.extend(r.csv_row());
        w.write_record(rec)?;
    }
    for m in &s.means {
        let v = variant(m.name)?;
        w.write_record([
            m.name.to_string(),
            v.loss.name().into(),
            v.optimizer.name().into(),
            "mean".into(),
            String::new(),
            String::new(),
            String::new(),
            fmt_f64(m.dsc_avg),
            fmt_f64(m.mse),
            fmt_f64(m.sharpness),
        ])?;
    }
    w.flush()?;

    let path = base.out.join("ordering.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["metric", "left", "relation", "right"])?;
    let metrics: [(&str, fn(&VariantMean) -> f64); 3] =
        [("dsc_avg", |m| m.dsc_avg), ("mse", |m| m.mse), ("sharpness", |m| m.sharpness)];
    for (metric, get) in metrics {
        for (i, a) in s.means.iter().enumerate() {
            for b in &s.means[i + 1..] {
                w.write_record([metric, a.name, relation(get(a), get(b)), b.name])?;
            }
        }
    }
    let seeds = s.rows.len() / VARIANTS.len();
    w.write_record([
        "sharpness_ua_sam_le_ce_seeds",
        &s.sharpness_wins.to_string(),
        "of",
        &seeds.to_string(),
    ])?;
    w.flush()?;

    // Settings common to every run; each run directory adds its own.
    let shared: String = echo_without_varying(base)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    let path = base.out.join(CONFIG_FILE);
    fs::write(&path, shared).with_context(|| format!("writing {}", path.display()))
}

/// Runs the selected variants for every seed, then aggregates when all runs
/// of the full grid are present. Returns `None` if some are still missing.
pub fn ablate(base: &RunConfig, log: &mut dyn Write) -> Result<Option<AblationSummary>> {
    base.validate()?;
    ensure!(!base.seeds.is_empty(), "ablation needs at least one seed");
    let selected: Vec<Variant> = base.variants.iter().map(|n| variant(n)).collect::<Result<_>>()?;
    let train = commands::train_data(base)?;
    let test = commands::test_data(base)?;

    for &seed in &base.seeds {
        for v in &selected {
            let cfg = run_config(base, v, seed);
            run_variant(&cfg, &train, &test, log).with_context(|| format!("variant {}, seed {seed}", v.name))?;
        }
    }

    let mut rows = Vec::new();
    let mut missing = 0;
    for &seed in &base.seeds {
        for v in &VARIANTS {
            let cfg = run_config(base, v, seed);
            match finished(&cfg)? {
                // `finished` only accepts runs whose recorded config is this
                // base with the mechanism swapped in.
                Some(r) => rows.push((v.name, r)),
                None => missing += 1,
            }
        }
    }
    if missing > 0 {
        writeln!(log, "{missing} runs still missing; aggregate once they finish")?;
        return Ok(None);
    }

    let n = base.seeds.len() as f64;
    let means = VARIANTS
        .iter()
        .map(|v| {
            let mine = rows.iter().filter(|(name, _)| *name == v.name).map(|(_, r)| r);
            let (mut d, mut m, mut s) = (0.0, 0.0, 0.0);
            for r in mine {
                d += r.dsc_avg;
                m += r.mse;
                s += r.sharpness;
            }
            VariantMean {
                name: v.name,
                dsc_avg: d / n,
                mse: m / n,
                sharpness: s / n,
            }
        })
        .collect();
    let sharpness_wins = rows
        .chunks(VARIANTS.len())
        .filter(|runs| {
            let get = |name: &str| runs.iter().find(|(n, _)| *n == name).map(|(_, r)| r.sharpness);
            matches!((get("ua_sam"), get("ce")), (Some(a), Some(b)) if a <= b)
        })
        .count();
    let summary = AblationSummary {
        rows,
        means,
        sharpness_wins,
    };
    write_outputs(base, &summary)?;
    for m in &summary.means {
        writeln!(
            log,
            "{:<8} dsc_avg {:.4}  mse {:.5}  sharpness {:.5}",
            m.name, m.dsc_avg, m.mse, m.sharpness
        )?;
    }
    Ok(Some(summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_differ_only_in_mechanism() {
        let base = RunConfig::default();
        let a = run_config(&base, &VARIANTS[0], 3);
        let b = run_config(&base, &VARIANTS[2], 3);
        assert_eq!(echo_without_varying(&a), echo_without_varying(&b));
        assert_ne!(a.out, b.out);
        assert_eq!(a.seed, 3);
        assert!(variant("adam").is_err());
    }

    #[test]
    fn relations() {
        assert_eq!(relation(1.0, 2.0), "<");
        assert_eq!(relation(2.0, 1.0), ">");
        assert_eq!(relation(1.0, 1.0), "=");
    }
}
