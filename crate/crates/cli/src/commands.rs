use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use morphseg::acwe::{acwe_run, init_levelset, AcweParams, InitMode};
use morphseg::autodiff::Checkpoint;
use morphseg::error::{Error as LibError, Result as LibResult};
use morphseg::gradsuite::{self, Scope};
use morphseg::infer::{sliding_window_segment, threshold, InferenceConfig};
use morphseg::metrics::evaluate;
use morphseg::network::Network;
use morphseg::train::{finetune as run_finetune, train as run_train, Budget, StepOutcome, TrainConfig};
use morphseg::volume::{
    dataset_stats, load_mask, load_volume, make_phantom, normalize, normalize_with, save_mask, save_volume, NormStats,
    PhantomSpec, Volume3D,
};

use crate::{
    overlay, AcweArgs, EvalArgs, FinetuneArgs, GradScope, GradcheckArgs, Init, Normalize, PhantomArgs, SegmentArgs,
    TrainArgs,
};

const TRAIN_CONFIG_FILE: &str = "train.json";
const NORM_FILE: &str = "norm.json";
const LOG_FILE: &str = "train_log.jsonl";

/// Failures detected by the command line itself.
#[derive(Debug)]
pub enum CliError {
    GradCheckFailed(usize),
    NoVolumes(PathBuf),
    MissingNorm(PathBuf),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::GradCheckFailed(_) => "gradcheck_failed",
            CliError::NoVolumes(_) => "no_volumes",
            CliError::MissingNorm(_) => "missing_norm",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::GradCheckFailed(n) => write!(f, "{n} gradient check(s) above tolerance"),
            CliError::NoVolumes(p) => write!(f, "no .nrrd volumes in {}", p.display()),
            CliError::MissingNorm(p) => {
                write!(f, "{} has no {NORM_FILE}; it was not trained with --normalize dataset", p.display())
            }
        }
    }
}

impl std::error::Error for CliError {}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> LibResult<T> {
    let text = fs::read_to_string(path).map_err(|e| LibError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> LibResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| LibError::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn phantom(a: PhantomArgs) -> Result<()> {
    let mut spec: PhantomSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let (img, gt) = make_phantom(&spec)?;
    ensure_parent(&a.out)?;
    ensure_parent(&a.gt)?;
    save_volume(&img, &a.out)?;
    save_mask(&gt, &a.gt)?;
    println!("phantom {} with {} foreground voxels", img.shape(), gt.count_ones());
    Ok(())
}

pub fn acwe(a: AcweArgs) -> Result<()> {
    let params = AcweParams { alpha: a.alpha, beta: a.beta, mu: a.mu, iterations: a.iters, ..AcweParams::default() };
    params.validate()?;
    let img = load_volume(&a.input)?;
    let mode = match a.init {
        Init::Mean => InitMode::MeanThreshold,
        Init::Checkerboard => InitMode::Checkerboard(a.period),
    };
    let run = acwe_run(&img, init_levelset(&img, mode)?, &params)?;
    ensure_parent(&a.out)?;
    save_mask(&run.mask, &a.out)?;
    if let Some(log) = &a.log {
        ensure_parent(log)?;
        run.log.write_csv(log)?;
    }
    let iters = run.log.records.len();
    println!(
        "acwe: {iters} iterations, converged = {}, {} foreground voxels",
        run.log.converged(),
        run.mask.count_ones()
    );
    Ok(())
}

/// Volumes of a directory (`*.nrrd`, sorted by name).
fn load_dir(dir: &Path) -> Result<Vec<Volume3D>> {
    let entries = fs::read_dir(dir).map_err(|e| LibError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "nrrd"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::NoVolumes(dir.to_path_buf()).into());
    }
    paths.iter().map(|p| Ok(load_volume(p)?)).collect()
}

fn load_norm(ckpt: &Path) -> Result<NormStats> {
    let path = ckpt.join(NORM_FILE);
    if !path.exists() {
        return Err(CliError::MissingNorm(ckpt.to_path_buf()).into());
    }
    Ok(read_json(&path)?)
}

fn apply_norm(vols: Vec<Volume3D>, mode: Normalize, stats: Option<&NormStats>) -> Vec<Volume3D> {
    match (mode, stats) {
        (Normalize::Volume, _) => vols.iter().map(normalize).collect(),
        (Normalize::Dataset, Some(s)) => vols.iter().map(|v| normalize_with(v, s)).collect(),
        _ => vols,
    }
}

/// Writes the network, the effective training configuration and, in
/// dataset mode, the normalization statistics.
fn save_ckpt(dir: &Path, net: &Network, step: u64, cfg: &TrainConfig, norm: Option<&NormStats>) -> LibResult<()> {
    net.to_checkpoint(step)?.save(dir)?;
    write_json(&dir.join(TRAIN_CONFIG_FILE), cfg)?;
    if let Some(s) = norm {
        write_json(&dir.join(NORM_FILE), s)?;
    }
    Ok(())
}

fn step_logger<'a>(
    log: &'a mut fs::File,
    out: &'a Path,
    cfg: &'a TrainConfig,
    norm: Option<&'a NormStats>,
    base_step: u64,
) -> impl FnMut(&StepOutcome, &Network) -> LibResult<()> + 'a {
    use std::io::Write;
    move |o, net| {
        let io = |e| LibError::io(out.join(LOG_FILE), e);
        match o {
            StepOutcome::Updated(r) => {
                writeln!(log, "{}", r.to_json_line()).map_err(io)?;
                if cfg.checkpoint_every > 0 && (r.step + 1) % cfg.checkpoint_every == 0 {
                    save_ckpt(out, net, base_step + r.step as u64 + 1, cfg, norm)?;
                }
            }
            StepOutcome::Collapsed { step, message } => {
                let line = serde_json::json!({ "step": step, "collapsed": message });
                writeln!(log, "{line}").map_err(io)?;
            }
        }
        Ok(())
    }
}

fn create_log(out: &Path) -> Result<fs::File> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(LOG_FILE);
    Ok(fs::File::create(&path).map_err(|e| LibError::io(&path, e))?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let raw = load_dir(&a.data)?;
    let norm = (a.normalize == Normalize::Dataset).then(|| dataset_stats(&raw));
    let vols = apply_norm(raw, a.normalize, norm.as_ref());
    let mut log = create_log(&a.out)?;
    let outcome = {
        let mut on_step = step_logger(&mut log, &a.out, &cfg, norm.as_ref(), 0);
        run_train(&vols, &cfg, &mut on_step)?
    };
    let updated = outcome.records().count();
    save_ckpt(&a.out, &outcome.network, outcome.log.len() as u64, &cfg, norm.as_ref())?;
    if let Some(last) = outcome.records().last() {
        println!("trained {} steps ({updated} updates); last total loss {:.6}", outcome.log.len(), last.loss.total);
    }
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let net = Network::from_checkpoint(&ck)?;
    let cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => {
            let stored = a.ckpt.join(TRAIN_CONFIG_FILE);
            if stored.exists() {
                read_json(&stored)?
            } else {
                TrainConfig { crop_shape: net.config().input_shape, ..TrainConfig::default() }
            }
        }
    };
    cfg.validate()?;
    let budget = match (a.budget_steps, a.budget_seconds) {
        (Some(n), _) => Budget::Steps(n),
        (None, Some(t)) => Budget::Seconds(t),
        (None, None) => unreachable!("clap requires one budget"),
    };
    let norm = if a.normalize == Normalize::Dataset { Some(load_norm(&a.ckpt)?) } else { None };
    let vols = apply_norm(load_dir(&a.data)?, a.normalize, norm.as_ref());
    let mut log = create_log(&a.out)?;
    let outcome = {
        let mut on_step = step_logger(&mut log, &a.out, &cfg, norm.as_ref(), ck.step);
        run_finetune(net, &vols, budget, &cfg, &mut on_step)?
    };
    save_ckpt(&a.out, &outcome.network, ck.step + outcome.log.len() as u64, &cfg, norm.as_ref())?;
    println!("fine-tuned {} steps", outcome.log.len());
    Ok(())
}

pub fn segment(a: SegmentArgs) -> Result<()> {
    let cfg = InferenceConfig { window: a.window, stride: a.stride, threshold: a.threshold };
    cfg.validate()?;
    let net = Network::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let raw = load_volume(&a.input)?;
    let norm = if a.normalize == Normalize::Dataset { Some(load_norm(&a.ckpt)?) } else { None };
    let vol = apply_norm(vec![raw], a.normalize, norm.as_ref()).remove(0);
    let prob = sliding_window_segment(&net, &vol, &cfg)?;
    ensure_parent(&a.out)?;
    save_volume(&prob, &a.out)?;
    let mask = threshold(&prob, cfg.threshold)?;
    if let Some(p) = &a.mask {
        ensure_parent(p)?;
        save_mask(&mask, p)?;
    }
    if let Some(dir) = &a.overlay_dir {
        let n = overlay::write_slices(&vol, &mask, dir)?;
        println!("wrote {n} overlay slices to {}", dir.display());
    }
    println!("segmented {}: {} foreground voxels", vol.shape(), mask.count_ones());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let pred = load_volume(&a.pred)?;
    let gt = load_mask(&a.gt)?;
    let report = evaluate(&pred, &gt, a.threshold)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(p) = &a.report {
        ensure_parent(p)?;
        let text = if p.extension().is_some_and(|x| x == "csv") { csv } else { report.to_json() + "\n" };
        fs::write(p, text).map_err(|e| LibError::io(p, e))?;
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let scope = match a.scope {
        GradScope::Op => Scope::Op,
        GradScope::Layer => Scope::Layer,
        GradScope::End2end => Scope::EndToEnd,
    };
    let results = gradsuite::run(scope, a.seed)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        failed += !r.passed() as usize;
        println!(
            "{:<26} max_rel_error {:.3e}  tol {:.0e}  checked {:>4}  {verdict}",
            r.name, r.report.max_rel_error, r.tolerance, r.report.checked
        );
    }
    if failed > 0 {
        return Err(CliError::GradCheckFailed(failed).into());
    }
    Ok(())
}
