use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hba_core::augment::{apply_policy_traced, AppliedOp, AugmentSpace, Image, PolicyParams, Slot};
use hba_core::gradcheck;
use hba_core::hba::{Checkpoint, Trainer};
use hba_core::hyperlayers::SharingStrategy;
use hba_core::network::Network;
use hba_core::pbt::pbt_run_network;
use hba_core::rng::{self, tag};
use hba_core::schedule::{rescale_index, Schedule, ScheduleMeta};
use hba_core::train::train_plain;
use serde::Serialize;

use crate::config::{Overrides, RunConfig};
use crate::CliError;

/// Logits beyond this are clamped so that probabilities of exactly 0 or 1
/// in a hand-written policy stay representable.
const LOGIT_CAP: f64 = 50.0;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))
}

/// Creates the output directory and dumps the resolved config into it.
fn prepare(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir().to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok(dir)
}

fn meta(cfg: &RunConfig, command: &str, strategy: SharingStrategy) -> ScheduleMeta {
    let hash = cfg.hash();
    ScheduleMeta {
        run_id: format!("{command}-{}-{}-s{}", cfg.task.name(), &hash[..12], cfg.seed),
        seed: cfg.seed,
        strategy: strategy.to_string(),
        config_hash: hash,
        space: cfg.space(),
    }
}

fn load_schedule(path: &Path) -> Result<Schedule, CliError> {
    Schedule::load(path).map_err(|e| {
        let mut err = CliError::from_config(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

pub fn search(run: &Overrides, resume: Option<&Path>) -> Result<(), CliError> {
    let cfg = run.resolve("search")?;
    let (train, val) = cfg.datasets()?;
    let space = cfg.space();
    let spec = cfg.network_spec(&train.input_shape(), train.classes())?;
    let net = Network::build(&spec, cfg.strategy, space.dim(), cfg.seed).map_err(CliError::from_config)?;
    let dir = prepare(&cfg)?;
    let mut trainer = Trainer::new(
        cfg.hba.clone(),
        space,
        cfg.baseline.clone(),
        net,
        &train,
        &val,
        cfg.seed,
        meta(&cfg, "search", cfg.strategy),
    )
    .map_err(CliError::from_config)?;
    if let Some(path) = resume {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let ck = Checkpoint::from_json(&text).map_err(CliError::from_config)?;
        trainer.restore(ck).map_err(CliError::from_config)?;
        log::info!("resumed at epoch {}", trainer.state.epoch);
    }
    log::info!(
        "search: task {} network {} strategy {} seed {} -> {}",
        cfg.task.name(),
        cfg.network,
        cfg.strategy,
        cfg.seed,
        dir.display()
    );
    let ck_path = dir.join("checkpoint.json");
    while trainer.state.epoch < trainer.config.epochs {
        let r = trainer.run_epoch()?;
        log::info!("epoch {} train {:.4} val {:.4}", r.epoch, r.train_loss, r.val_loss);
        write(&ck_path, &trainer.checkpoint().to_json()?)?;
    }
    write(&ck_path, &trainer.checkpoint().to_json()?)?;
    write(&dir.join("schedule.json"), &trainer.state.schedule.to_json()?)?;
    let mut metrics = String::new();
    for m in &trainer.state.metrics {
        metrics.push_str(&serde_json::to_string(m).map_err(|e| CliError::runtime(e.to_string()))?);
        metrics.push('\n');
    }
    write(&dir.join("metrics.jsonl"), &metrics)?;
    write(&dir.join("model.json"), &json(&trainer.materialize()?)?)?;
    let final_val = trainer.state.metrics.last().map_or(f64::NAN, |m| m.val_loss);
    println!("final val loss {final_val:.6}");
    if let AugmentSpace::GaussianNoise { max_scale } = trainer.space {
        println!(
            "noise scale {:.6}",
            AugmentSpace::noise_scale(max_scale, trainer.lambda()[0])
        );
    }
    Ok(())
}

pub fn replay(run: &Overrides, schedule_path: &Path) -> Result<(), CliError> {
    let cfg = run.resolve("replay")?;
    let schedule = load_schedule(schedule_path)?;
    if schedule.is_empty() {
        return Err(CliError::usage(format!(
            "{}: schedule is empty",
            schedule_path.display()
        )));
    }
    let target = cfg.replay.epochs;
    let schedule = if schedule.len() != target {
        log::info!("rescaling schedule from {} to {} epochs", schedule.len(), target);
        for e in 0..target {
            log::info!("  epoch {e} <- entry {}", rescale_index(e, schedule.len(), target));
        }
        schedule.rescale(target).map_err(CliError::from_config)?
    } else {
        schedule
    };
    let policies = (0..target)
        .map(|e| schedule.replay(e))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::from_config)?;
    let (train, val) = cfg.datasets()?;
    let space = schedule.meta.space.clone();
    let spec = cfg.network_spec(&train.input_shape(), train.classes())?;
    let mut net = Network::build(&spec, SharingStrategy::None, 0, cfg.seed).map_err(CliError::from_config)?;
    let dir = prepare(&cfg)?;
    let report = train_plain(
        &mut net,
        &train,
        &val,
        &space,
        &cfg.baseline,
        |e| policies[e].clone(),
        &cfg.replay,
        cfg.seed,
    )?;
    write(&dir.join("report.json"), &json(&report)?)?;
    write(&dir.join("model.json"), &json(&net)?)?;
    println!(
        "final val loss {:.6} accuracy {:.4}",
        report.final_val_loss, report.final_val_accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct RoundLine<'a> {
    round: usize,
    best: usize,
    val_losses: &'a [f64],
}

pub fn pbt(run: &Overrides) -> Result<(), CliError> {
    let cfg = run.resolve("pbt")?;
    let (train, val) = cfg.datasets()?;
    let space = cfg.space();
    let spec = cfg.network_spec(&train.input_shape(), train.classes())?;
    let dir = prepare(&cfg)?;
    log::info!(
        "pbt: task {} n {} seed {} -> {}",
        cfg.task.name(),
        cfg.pbt.n,
        cfg.seed,
        dir.display()
    );
    let out = pbt_run_network(
        &cfg.pbt,
        &train,
        &val,
        &space,
        &cfg.baseline,
        &spec,
        cfg.seed,
        meta(&cfg, "pbt", SharingStrategy::None),
    )
    .map_err(CliError::from_config)?;
    let mut history = String::new();
    for r in &out.history {
        let line = RoundLine {
            round: r.round,
            best: r.best,
            val_losses: &r.val_losses,
        };
        history.push_str(&serde_json::to_string(&line).map_err(|e| CliError::runtime(e.to_string()))?);
        history.push('\n');
    }
    write(&dir.join("history.jsonl"), &history)?;
    write(&dir.join("schedule.json"), &out.schedule.to_json()?)?;
    write(&dir.join("model.json"), &json(&out.best.net)?)?;
    if let Some(last) = out.history.last() {
        println!(
            "final best member {} summed val loss {:.6}",
            last.best, last.val_losses[last.best]
        );
    }
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<(), CliError> {
    let reports = gradcheck::run_suite(seed)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{} {:<40} entries {:>5} max_abs {:.3e} max_rel {:.3e}",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.entries,
            r.max_abs_err,
            r.max_rel_err
        );
        failed += usize::from(!r.passed);
    }
    println!("{} checks, {failed} failed", reports.len());
    if failed > 0 {
        return Err(CliError::runtime(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

/// Reads either a schedule (taking entry `epoch`) or a bare slot list.
fn load_policy(path: &Path, epoch: usize) -> Result<PolicyParams, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let space = AugmentSpace::Pba;
    let lambda = if let Ok(s) = Schedule::from_json(&text) {
        if s.meta.space != space {
            return Err(CliError::usage("preview needs an image policy schedule"));
        }
        s.replay(epoch).map_err(CliError::from_config)?
    } else {
        let slots: Vec<Slot> = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: not a schedule or slot list: {e}", path.display())))?;
        space.lambda_from_slots(&slots).map_err(CliError::from_config)?
    };
    let lambda = lambda.into_iter().map(|v| v.clamp(-LOGIT_CAP, LOGIT_CAP)).collect();
    PolicyParams::from_logits(lambda).map_err(CliError::from_config)
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    ops: Vec<AppliedOp>,
}

pub fn augment_preview(policy: &Path, images: &Path, out: &Path, seed: u64, epoch: usize) -> Result<(), CliError> {
    let policy = load_policy(policy, epoch)?;
    let mut files: Vec<PathBuf> = fs::read_dir(images)
        .map_err(|e| CliError::usage(format!("{}: {e}", images.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut manifest = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let rgb = image::open(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = rgb.dimensions();
        let img = Image::new(h as usize, w as usize, 3, rgb.into_raw())?;
        let mut rng = rng::stream(seed, &[tag::AUGMENT, i as u64]);
        let (aug, ops) = apply_policy_traced(&img, &policy, &mut rng)?;
        let name = path.file_name().expect("read_dir entries have names");
        let target = out.join(name);
        image::RgbImage::from_raw(w, h, aug.into_data())
            .expect("augmentation keeps the image size")
            .save(&target)
            .map_err(|e| CliError::runtime(format!("{}: {e}", target.display())))?;
        manifest.push(ManifestEntry {
            file: name.to_string_lossy().into_owned(),
            ops,
        });
    }
    write(&out.join("manifest.json"), &json(&manifest)?)?;
    println!("wrote {} images to {}", manifest.len(), out.display());
    Ok(())
}

pub fn export_csv(schedule: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let s = load_schedule(schedule)?;
    let csv = s.to_csv();
    match out {
        Some(p) => write(p, &csv),
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| CliError::runtime(e.to_string())),
    }
}
