//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs the full training and five-seed ablation, so expect well over an
//! hour on one core. Set `UUSEG_ACCEPTANCE_DIR` to keep the run directories.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uuseg::data::{read_dataset, write_dataset, Dataset};
use uuseg::losses::{cross_entropy_loss, focal_loss, uncertainty_aware_loss, UncertaintyWeights};
use uuseg::nn::{ssm_scan, SsmParams};
use uuseg::optim::{sam_step, sgd_step, SamConfig};
use uuseg::segnet::{build_model, load_checkpoint, save_checkpoint, ModelConfig, TrainState};
use uuseg::{Error, LabelMask, ParamSet, ProbMap, Tensor};
use uuseg_cli::ablate::{self, run_config, run_variant};
use uuseg_cli::commands::{self, CHECKPOINT_FILE, METRICS_FILE};
use uuseg_cli::config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const TRAIN_LIMIT: Duration = Duration::from_secs(10 * 60);
const ABLATION_LIMIT: Duration = Duration::from_secs(150 * 60);

/// Forwards progress lines, dropping the per-epoch ones.
struct Progress(Vec<u8>);

impl Write for Progress {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.extend_from_slice(buf);
        while let Some(pos) = self.0.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = self.0.drain(..=pos).collect();
            if !line.starts_with(b"epoch") {
                io::stderr().write_all(b"    ")?;
                io::stderr().write_all(&line)?;
            }
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn non_reproduction_statement() -> Result<String> {
    let readme = std::fs::read_to_string(workspace_root().join("README.md")).context("reading README.md")?;
    let line = readme
        .lines()
        .find(|l| l.contains("not reproduced"))
        .context("README has no statement on which reference results are not reproduced")?;
    Ok(line.trim().to_string())
}

fn gradient_suite() -> Result<String> {
    let start = Instant::now();
    let mut out = Vec::new();
    let ok = commands::gradcheck(0, &mut out)?;
    let elapsed = start.elapsed();
    let text = String::from_utf8(out)?;
    for name in [
        "attention",
        "conv_norm_act",
        "residual_block",
        "mamba_block",
        "dice_loss",
        "ce_loss",
        "focal_loss",
        "ua_loss",
        "segnet_8x8",
    ] {
        ensure!(text.lines().any(|l| l.starts_with(name)), "case {name} is not registered");
    }
    let worst = text
        .lines()
        .filter_map(|l| {
            let mut f = l.split_whitespace();
            Some((f.next()?, f.next()?.parse::<f64>().ok()?))
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .context("empty registry")?;
    ensure!(ok, "some cases exceed the tolerance:\n{text}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{} cases, worst {} at {:.2e}, {:.2}s",
        text.lines().count(),
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    ))
}

fn scalar_params(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("theta", Tensor::scalar(v)).unwrap();
    p
}

fn sam_oracle() -> Result<String> {
    let mut half_square = |p: &ParamSet| Ok((0.5 * p.get("theta").unwrap().item().powi(2), p.clone()));
    let cfg = SamConfig {
        rho: 0.05,
        lr: 0.1,
        ..SamConfig::default()
    };
    let theta = sam_step(&scalar_params(1.0), &mut half_square, &cfg)?.params.get("theta").unwrap().item();
    ensure!((theta - 0.895).abs() < 1e-12, "theta = {theta}");

    // Random quartic objectives from random starts.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 5;
    let coef: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
    let mut objective = |p: &ParamSet| {
        let x = p.get("w").unwrap().data();
        let v = x.iter().zip(&coef).map(|(t, c)| c * t * t + 0.1 * t.powi(4)).sum();
        let g: Vec<f64> = x.iter().zip(&coef).map(|(t, c)| 2.0 * c * t + 0.4 * t.powi(3)).collect();
        let mut out = ParamSet::new();
        out.insert("w", Tensor::new(vec![n], g).unwrap()).unwrap();
        Ok((v, out))
    };
    let zero = SamConfig {
        rho: 0.0,
        lr: 0.05,
        ..SamConfig::default()
    };
    let mut a = ParamSet::new();
    a.insert("w", Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())?)?;
    let mut b = a.clone();
    for step in 0..100 {
        a = sam_step(&a, &mut objective, &zero)?.params;
        let (_, g) = objective(&b)?;
        b = sgd_step(&b, &g, zero.lr)?;
        ensure!(a.bits() == b.bits(), "rho = 0 diverged from SGD at step {step}");
    }
    Ok(format!("theta = {theta}, rho = 0 matches SGD bitwise for 100 steps"))
}

/// The recurrence written out as plain loops.
fn naive_scan(p: &SsmParams, u: &Tensor) -> Vec<f64> {
    let (ds, di, dout) = (p.a.shape()[0], p.b.shape()[1], p.c.shape()[0]);
    let (a, b, c, d) = (p.a.data(), p.b.data(), p.c.data(), p.d.data());
    let mut x = p.x0.data().to_vec();
    let mut ys = Vec::new();
    for row in u.data().chunks(di) {
        for o in 0..dout {
            let cx: f64 = (0..ds).map(|s| c[o * ds + s] * x[s]).sum();
            let du: f64 = (0..di).map(|i| d[o * di + i] * row[i]).sum();
            ys.push(cx + du);
        }
        x = (0..ds)
            .map(|s| {
                let ax: f64 = (0..ds).map(|k| a[s * ds + k] * x[k]).sum();
                let bu: f64 = (0..di).map(|i| b[s * di + i] * row[i]).sum();
                ax + bu
            })
            .collect();
    }
    ys
}

fn scan_oracle() -> Result<String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rand_t = |rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ds = rng.gen_range(1..=4);
        let di = rng.gen_range(1..=3);
        let dout = rng.gen_range(1..=3);
        let t = rng.gen_range(1..=16);
        let params = SsmParams {
            a: rand_t(&mut rng, vec![ds, ds], 0.5),
            b: rand_t(&mut rng, vec![ds, di], 1.0),
            c: rand_t(&mut rng, vec![dout, ds], 1.0),
            d: rand_t(&mut rng, vec![dout, di], 1.0),
            x0: rand_t(&mut rng, vec![ds], 1.0),
            noise: None,
        };
        let u = rand_t(&mut rng, vec![t, di], 1.0);
        let fused = ssm_scan(&params, &u, true)?;
        for (f, n) in fused.data().iter().zip(naive_scan(&params, &u)) {
            worst = worst.max((f - n).abs());
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("max deviation {worst:.1e} over 100 instances, {:.3}s", elapsed.as_secs_f64()))
}

fn random_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ProbMap {
    let plane = h * w;
    let logits: Vec<f64> = (0..c * plane).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut p = vec![0.0; c * plane];
    for i in 0..plane {
        let z: f64 = (0..c).map(|k| logits[k * plane + i].exp()).sum();
        for k in 0..c {
            p[k * plane + i] = logits[k * plane + i].exp() / z;
        }
    }
    ProbMap::new(Tensor::new(vec![c, h, w], p).unwrap()).unwrap()
}

fn loss_identities() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let p = random_probs(&mut rng, 4, 6, 5);
        let mask = LabelMask::new(6, 5, 4, (0..30).map(|_| rng.gen_range(0..4u8)).collect())?;
        let (f, c) = (focal_loss(&p, &mask, 0.0)?, cross_entropy_loss(&p, &mask)?);
        ensure!(f.to_bits() == c.to_bits(), "focal(0) = {f} but CE = {c}");
    }
    for m in 1..=4 {
        let losses: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..3.0)).collect();
        let ua = uncertainty_aware_loss(&losses, &UncertaintyWeights::new(m)?)?;
        let expected = 0.5 * losses.iter().sum::<f64>() + m as f64 * 2f64.ln();
        ensure!((ua - expected).abs() < 1e-12, "M = {m}: {ua} vs {expected}");
    }

    let half = ProbMap::new(Tensor::new(vec![2, 1, 1], vec![0.5, 0.5])?)?;
    let first = LabelMask::new(1, 1, 2, vec![0])?;
    let hand = [
        (cross_entropy_loss(&half, &first)?, 0.69315),
        (focal_loss(&half, &first, 2.0)?, 0.17329),
        (uncertainty_aware_loss(&[0.0], &UncertaintyWeights::new(1)?)?, 0.69315),
        (uncertainty_aware_loss(&[1.0; 3], &UncertaintyWeights::new(3)?)?, 3.57944),
    ];
    for (got, want) in hand {
        ensure!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
    Ok(format!(
        "focal(0) = CE bitwise, UA identity at sigma = 1, hand values {:?}",
        hand.map(|(g, _)| (g * 1e5).round() / 1e5)
    ))
}

struct Runs {
    root: PathBuf,
    base: RunConfig,
    train: Dataset,
    test: Dataset,
    ablation_time: Duration,
}

fn training_convergence(runs: &mut Runs) -> Result<String> {
    let cfg = run_config(&runs.base, &ablate::variant("ua_sam")?, 0);
    let default_run = RunConfig {
        out: cfg.out.clone(),
        checkpoint: cfg.checkpoint.clone(),
        seeds: cfg.seeds.clone(),
        variants: cfg.variants.clone(),
        ..RunConfig::default()
    };
    ensure!(cfg == default_run, "seed-0 ua_sam run does not use the default configuration");
    let start = Instant::now();
    let report = run_variant(&cfg, &runs.train, &runs.test, &mut Progress(Vec::new()))?;
    let elapsed = start.elapsed();
    runs.ablation_time += elapsed;
    let csv = std::fs::read_to_string(cfg.out.join(METRICS_FILE))?;
    let losses: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    ensure!(losses.len() == 50, "{} epochs recorded", losses.len());
    ensure!(losses[49] < losses[0], "mean loss went from {} to {}", losses[0], losses[49]);
    ensure!(report.dsc_avg >= 0.90, "mean foreground DSC {:.4}", report.dsc_avg);
    ensure!(elapsed < TRAIN_LIMIT, "took {:.0}s", elapsed.as_secs_f64());
    Ok(format!(
        "mean foreground DSC {:.4} (RV {:.4}, Myo {:.4}, LV {:.4}) in {:.0}s",
        report.dsc_avg,
        report.dsc[0],
        report.dsc[1],
        report.dsc[2],
        elapsed.as_secs_f64()
    ))
}

fn ablation_trend(runs: &mut Runs) -> Result<String> {
    let start = Instant::now();
    let summary = ablate::ablate(&runs.base, &mut Progress(Vec::new()))?.context("ablation incomplete")?;
    runs.ablation_time += start.elapsed();
    let (ce, ua, sam) = (
        summary.mean("ce").unwrap(),
        summary.mean("ua").unwrap(),
        summary.mean("ua_sam").unwrap(),
    );
    let detail = format!(
        "DSC ce {:.4} / ua {:.4} / ua_sam {:.4}; MSE ce {:.5} / ua {:.5} / ua_sam {:.5}; \
         ua_sam no sharper than ce in {}/5 seeds; {:.0} min",
        ce.dsc_avg,
        ua.dsc_avg,
        sam.dsc_avg,
        ce.mse,
        ua.mse,
        sam.mse,
        summary.sharpness_wins,
        runs.ablation_time.as_secs_f64() / 60.0
    );
    ensure!(sam.dsc_avg >= ce.dsc_avg, "DSC ordering fails: {detail}");
    ensure!(sam.mse <= ce.mse, "MSE ordering fails: {detail}");
    ensure!(summary.sharpness_wins >= 4, "sharpness comparison fails: {detail}");
    ensure!(runs.ablation_time < ABLATION_LIMIT, "too slow: {detail}");
    Ok(detail)
}

fn determinism(runs: &Runs) -> Result<String> {
    let mut artifacts = Vec::new();
    for name in ["first", "second"] {
        let cfg = RunConfig {
            epochs: 2,
            out: runs.root.join("determinism").join(name),
            ..RunConfig::default()
        };
        commands::train_on(&cfg, &runs.train, &mut io::sink())?;
        artifacts.push((
            std::fs::read(cfg.out.join(METRICS_FILE))?,
            std::fs::read(cfg.out.join(CHECKPOINT_FILE))?,
        ));
    }
    ensure!(artifacts[0].0 == artifacts[1].0, "metrics CSV differs");
    ensure!(artifacts[0].1 == artifacts[1].1, "checkpoint differs");
    Ok(format!(
        "2-epoch default runs: CSV ({} bytes) and checkpoint ({} bytes) identical",
        artifacts[0].0.len(),
        artifacts[0].1.len()
    ))
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::BadMagic { .. } => "bad-magic",
        Error::UnsupportedVersion { .. } => "version",
        Error::Truncated { .. } => "truncated",
        Error::LengthMismatch { .. } => "length",
        Error::Corrupt { .. } => "corrupt",
        Error::Io { .. } => "io",
        _ => "other",
    }
}

/// Applies each corruption to `good`, loads it with `load`, and returns the
/// error kinds raised in order.
fn corruption_kinds(
    dir: &Path,
    good: &[u8],
    cases: &[(&str, Box<dyn Fn(&mut Vec<u8>)>)],
    load: impl Fn(&Path) -> uuseg::Result<()>,
) -> Result<Vec<&'static str>> {
    let path = dir.join("corrupted.bin");
    let mut kinds = Vec::new();
    for (what, damage) in cases {
        let mut bytes = good.to_vec();
        damage(&mut bytes);
        std::fs::write(&path, &bytes)?;
        match load(&path) {
            Ok(()) => anyhow::bail!("{what}: loaded without error"),
            Err(e) => kinds.push(error_kind(&e)),
        }
    }
    Ok(kinds)
}

fn format_fidelity(runs: &Runs) -> Result<String> {
    let dir = runs.root.join("formats");
    std::fs::create_dir_all(&dir)?;

    let data_path = dir.join("test.bin");
    write_dataset(&runs.test, &data_path)?;
    let back = read_dataset(&data_path)?;
    ensure!(back.seed == runs.test.seed && back.len() == runs.test.len(), "dataset header changed");
    for (a, b) in back.samples.iter().zip(&runs.test.samples) {
        let same = a.image.iter().zip(&b.image).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(same && a.mask == b.mask, "dataset sample changed");
    }
    let copy = dir.join("copy.bin");
    write_dataset(&back, &copy)?;
    ensure!(std::fs::read(&copy)? == std::fs::read(&data_path)?, "dataset bytes changed");

    let state = TrainState::new(
        build_model(ModelConfig {
            seed: 3,
            ..ModelConfig::default()
        })?,
        &RunConfig::default().loss_config(),
    )?;
    let ck_path = dir.join("model.bin");
    save_checkpoint(&state, &ck_path)?;
    let loaded = load_checkpoint(&ck_path)?;
    ensure!(loaded.trainable().bits() == state.trainable().bits(), "checkpoint tensors changed");
    let ck_copy = dir.join("model-copy.bin");
    save_checkpoint(&loaded, &ck_copy)?;
    ensure!(std::fs::read(&ck_copy)? == std::fs::read(&ck_path)?, "checkpoint bytes changed");

    type Damage = Box<dyn Fn(&mut Vec<u8>)>;
    let cases = |inconsistent: Damage| -> Vec<(&'static str, Damage)> {
        vec![
            ("magic", Box::new(|b: &mut Vec<u8>| b[0] ^= 0xff)),
            ("version", Box::new(|b: &mut Vec<u8>| b[8] = 9)),
            ("truncated", Box::new(|b: &mut Vec<u8>| b.truncate(b.len() - 1))),
            ("trailing", Box::new(|b: &mut Vec<u8>| b.extend_from_slice(&[0; 5]))),
            ("inconsistent", inconsistent),
        ]
    };
    let expected = ["bad-magic", "version", "truncated", "length", "corrupt"];

    // A label outside the class range.
    let bad_label: Damage = Box::new(|b| {
        let n = b.len();
        b[n - 1] = 9;
    });
    let data_kinds = corruption_kinds(&dir, &std::fs::read(&data_path)?, &cases(bad_label), |p| read_dataset(p).map(drop))?;
    ensure!(data_kinds == expected, "dataset errors {data_kinds:?}");
    // Offset 24 holds the model width; the tensors no longer fit it.
    let bad_width: Damage = Box::new(|b| b[24] = 3);
    let ck_kinds = corruption_kinds(&dir, &std::fs::read(&ck_path)?, &cases(bad_width), |p| load_checkpoint(p).map(drop))?;
    ensure!(ck_kinds == expected, "checkpoint errors {ck_kinds:?}");
    ensure!(matches!(read_dataset(dir.join("missing.bin")), Err(Error::Io { .. })), "missing file");

    Ok(format!("bitwise round trips; distinct errors {expected:?} for both formats"))
}

fn report(id: usize, name: &str, result: Result<String>) -> bool {
    match result {
        Ok(detail) => {
            println!("PASS  [{id}] {name}: {detail}");
            true
        }
        Err(e) => {
            println!("FAIL  [{id}] {name}: {e:#}");
            false
        }
    }
}

fn main() {
    let kept = std::env::var_os("UUSEG_ACCEPTANCE_DIR").map(PathBuf::from);
    let temp = tempfile::tempdir().expect("temp dir");
    let root = kept.unwrap_or_else(|| temp.path().to_path_buf());
    std::fs::create_dir_all(&root).expect("acceptance dir");

    let mut ok = true;
    ok &= report(1, "non-reproduction statement", non_reproduction_statement());
    ok &= report(2, "gradient suite", gradient_suite());
    ok &= report(3, "SAM oracle", sam_oracle());
    ok &= report(4, "scan oracle", scan_oracle());
    ok &= report(5, "loss identities", loss_identities());

    let base = RunConfig {
        out: root.join("ablation"),
        ..RunConfig::default()
    };
    let data = commands::train_data(&base).and_then(|t| Ok((t, commands::test_data(&base)?)));
    match data {
        Ok((train, test)) => {
            let mut runs = Runs {
                root: root.clone(),
                base,
                train,
                test,
                ablation_time: Duration::ZERO,
            };
            ok &= report(6, "training convergence", training_convergence(&mut runs));
            ok &= report(7, "ablation trend", ablation_trend(&mut runs));
            ok &= report(8, "determinism", determinism(&runs));
            ok &= report(9, "format fidelity", format_fidelity(&runs));
        }
        Err(e) => {
            for (id, name) in [(6, "training convergence"), (7, "ablation trend"), (8, "determinism"), (9, "format fidelity")] {
                ok &= report(id, name, Err(anyhow::anyhow!("no data: {e:#}")));
            }
        }
    }
    println!("{}", if ok { "all criteria passed" } else { "some criteria failed" });
    if !ok {
        std::process::exit(1);
    }
}
