use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{error, info};
use mhajam::eval::{MetricsReport, OffroadRule};
use mhajam::losses::LossBreakdown;
use mhajam::model::{ModelConfig, Variant};
use mhajam::nn::checkpoint::Checkpoint;
use mhajam::pipeline::gradcheck::{corrupted_cube_check, run_suite, GradCheckConfig};
use mhajam::pipeline::plot::{attention_export, render_svg, PlotOptions};
use mhajam::pipeline::{evaluate, load_model, predict, prepare, Prepared, RunConfig, Trainer};
use mhajam::synth::{generate_dataset, read_dataset, write_dataset_to, Layout, ScenarioSpec};
use serde::Serialize;

use crate::{ConfigArgs, EvalArgs, GenDataArgs, GradCheckArgs, PlotArgs, TrainArgs};

/// A gradient check exceeded its tolerance.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn invalid(field: &str, reason: impl Into<String>) -> anyhow::Error {
    mhajam::Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
    .into()
}

fn pair<T: Copy>(v: &[T]) -> (T, T) {
    (v[0], v[1])
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let layout = Layout::parse(&a.layout).ok_or_else(|| invalid("layout", format!("unknown layout `{}`", a.layout)))?;
    let mut spec = ScenarioSpec::for_layout(layout);
    if let Some(v) = &a.n_vehicles {
        spec.n_vehicles = pair(v);
    }
    if let Some(v) = &a.n_pedestrians {
        spec.n_pedestrians = pair(v);
    }
    if let Some(v) = &a.speed {
        spec.speed = pair(v);
    }
    if let Some(p) = a.branch_probabilities {
        spec.branch_probabilities = p;
    }
    if let Some(x) = a.noise {
        spec.noise = x;
    }
    if let Some(x) = a.yield_probability {
        spec.yield_probability = x;
    }
    spec.validate()?;
    let file = File::create(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    let episodes = generate_dataset(&spec, a.n, a.seed)?;
    write_dataset_to(BufWriter::new(file), &episodes)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in &episodes {
        *counts.entry(e.meta.layout.name().to_string()).or_default() += 1;
        *counts.entry(format!("{}/{:?}", e.meta.layout.name(), e.meta.maneuver).to_lowercase()).or_default() += 1;
    }
    println!("wrote {} episodes to {}", episodes.len(), a.out.display());
    if counts.is_empty() {
        println!("{}: 0", layout.name());
    }
    for (k, n) in counts {
        println!("{k}: {n}");
    }
    Ok(())
}

impl ConfigArgs {
    fn is_empty_for_resume(&self) -> bool {
        self.config.is_none()
            && self.preset.is_none()
            && self.variant.is_none()
            && self.modes.is_none()
            && self.lambda_cl.is_none()
            && self.lambda_or.is_none()
            && self.batch_size.is_none()
            && self.lr.is_none()
            && self.final_lr_fraction.is_none()
            && self.grad_clip.is_none()
            && self.seed.is_none()
    }

    /// Config file, then flags; flags win.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(name) = &self.preset {
            let variant = cfg.model.variant;
            cfg.model = ModelConfig::preset(name).ok_or_else(|| invalid("model.preset", format!("unknown preset `{name}`")))?;
            cfg.model.variant = variant;
        }
        if let Some(v) = &self.variant {
            cfg.model.variant = Variant::parse(v).ok_or_else(|| invalid("model.variant", format!("unknown variant `{v}`")))?;
        }
        if let Some(l) = self.modes {
            cfg.model.modes = l;
        }
        if let Some(x) = self.lambda_cl {
            cfg.loss.lambda_cl = x;
        }
        if let Some(x) = self.lambda_or {
            cfg.loss.lambda_or = x;
        }
        if let Some(x) = self.epochs {
            cfg.train.epochs = x;
        }
        if let Some(x) = self.batch_size {
            cfg.train.batch_size = x;
        }
        if let Some(x) = self.lr {
            cfg.train.lr = x;
        }
        if let Some(x) = self.final_lr_fraction {
            cfg.train.final_lr_fraction = x;
        }
        if self.grad_clip.is_some() {
            cfg.train.grad_clip = self.grad_clip;
        }
        if let Some(x) = self.seed {
            cfg.train.seed = x;
        }
        Ok(cfg)
    }
}

fn load_prepared(path: &Path, model: &ModelConfig) -> Result<Vec<Prepared>> {
    let episodes = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(prepare(episodes, model)?)
}

fn json_line<T: Serialize>(w: &mut impl Write, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// One line of `val.jsonl`, written after every epoch.
#[derive(Serialize)]
struct ValidationRecord<'a> {
    epoch: usize,
    step: u64,
    loss: &'a LossBreakdown,
    metrics: Option<&'a MetricsReport>,
}

fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("checkpoint-epoch{epoch}.mjam"))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (mut trainer, resumed) = match &a.resume {
        Some(p) => {
            if !a.config.is_empty_for_resume() {
                bail!(invalid("resume", "only --epochs and data paths may change when resuming"));
            }
            let ck = Checkpoint::load(p).with_context(|| format!("reading {}", p.display()))?;
            let mut t = Trainer::from_checkpoint(&ck)?;
            if let Some(e) = a.config.epochs {
                t.config.train.epochs = e;
            }
            (t, true)
        }
        None => (Trainer::new(a.config.resolve()?)?, false),
    };
    let cfg = &mut trainer.config;
    if let Some(p) = a.train {
        cfg.data.train = Some(p);
    }
    if let Some(p) = a.val {
        cfg.data.val = Some(p);
    }
    if let Some(p) = a.out_dir {
        cfg.data.out_dir = p;
    }
    cfg.validate()?;
    let train_path = cfg.data.train.clone().ok_or_else(|| invalid("data.train", "no training dataset given"))?;
    let out_dir = cfg.data.out_dir.clone();
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string()?)?;

    let model = cfg.model.clone();
    let train = load_prepared(&train_path, &model)?;
    let val = match &cfg.data.val {
        Some(p) => Some(load_prepared(p, &model)?),
        None => None,
    };
    info!(
        "training {} ({} modes) on {} episodes for {} epochs",
        model.variant.name(),
        model.modes,
        train.len(),
        cfg.train.epochs
    );

    let open = |name: &str| -> Result<BufWriter<File>> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(resumed)
            .truncate(!resumed)
            .open(out_dir.join(name))?;
        Ok(BufWriter::new(f))
    };
    let mut log = open("train.jsonl")?;
    let mut val_log = open("val.jsonl")?;

    while trainer.epoch < trainer.config.train.epochs {
        let records = trainer.train_epoch(&train, |r| {
            serde_json::to_writer(&mut log, r)?;
            log.write_all(b"\n")?;
            Ok(())
        });
        log.flush()?;
        let records = match records {
            Ok(r) => r,
            Err(e) => {
                error!("aborting: {e}");
                return Err(e.into());
            }
        };
        let mean = records.iter().map(|r| r.total).sum::<f64>() / records.len().max(1) as f64;
        let path = checkpoint_path(&out_dir, trainer.epoch);
        let ck = trainer.checkpoint()?;
        ck.save(&path)?;
        ck.save(&out_dir.join("checkpoint.mjam"))?;
        info!("epoch {} done: mean loss {mean:.4}, saved {}", trainer.epoch, path.display());
        if let Some(val) = &val {
            let c = &trainer.config;
            let loss = trainer.mean_loss(val)?;
            let (table, _) = evaluate(&c.model, &trainer.params, val, &c.eval, c.train.batch_size)?;
            let record = ValidationRecord {
                epoch: trainer.epoch,
                step: trainer.step,
                loss: &loss,
                metrics: table.rows.get_index(0).map(|(_, m)| m),
            };
            json_line(&mut val_log, &record)?;
            val_log.flush()?;
            info!("epoch {} validation loss {:.4}", trainer.epoch, loss.total);
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let (mut cfg, params) = load_model(&ck)?;
    if let Some(p) = &a.config {
        let user = RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?;
        if user.model != cfg.model {
            bail!(invalid("model", "configuration does not match the checkpoint"));
        }
    }
    if let Some(ks) = a.ks {
        cfg.eval.ks = ks;
    }
    if let Some(d) = a.d {
        cfg.eval.miss_distances = d;
    }
    if a.offroad_k.is_some() {
        cfg.eval.offroad_k = a.offroad_k;
    }
    if a.final_point {
        cfg.eval.offroad_rule = OffroadRule::FinalPoint;
    }
    cfg.validate()?;
    let batch = a.batch_size.unwrap_or(cfg.train.batch_size);
    if batch == 0 {
        bail!(invalid("batch_size", "must be at least 1"));
    }
    let data = load_prepared(&a.data, &cfg.model)?;
    let (table, preds) = evaluate(&cfg.model, &params, &data, &cfg.eval, batch)?;
    let json = table.to_json()?;
    match &a.out {
        Some(p) => fs::write(p, format!("{json}\n")).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.attention_out {
        let mut w = BufWriter::new(File::create(p).with_context(|| format!("writing {}", p.display()))?);
        for (i, pred) in preds.iter().enumerate() {
            json_line(&mut w, &attention_export(&cfg.model, pred, i))?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn plot(a: PlotArgs) -> Result<()> {
    if !(a.pixels_per_meter > 0.0 && a.pixels_per_meter.is_finite()) {
        bail!(invalid("pixels_per_meter", "must be positive"));
    }
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let (cfg, params) = load_model(&ck)?;
    let episodes = read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let n = episodes.len();
    let episode = episodes
        .into_iter()
        .nth(a.episode)
        .ok_or_else(|| invalid("episode", format!("index {} out of range for {n} episodes", a.episode)))?;
    let item = prepare(vec![episode], &cfg.model)?.remove(0);
    let pred = predict(&cfg.model, &params, std::slice::from_ref(&item), 1)?.remove(0);
    let attention = if a.no_attention {
        None
    } else {
        let blocks = pred.attention.len();
        if a.block >= blocks {
            bail!(invalid("block", format!("model has {blocks} attention blocks")));
        }
        if a.head >= cfg.model.modes {
            bail!(invalid("head", format!("model has {} heads", cfg.model.modes)));
        }
        Some((a.block, a.head))
    };
    let opts = PlotOptions {
        attention,
        pixels_per_meter: a.pixels_per_meter,
    };
    let svg = render_svg(&cfg.model, &item, &pred, &opts)?;
    fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.attention_json {
        let export = attention_export(&cfg.model, &pred, a.episode);
        fs::write(p, serde_json::to_string_pretty(&export)?).with_context(|| format!("writing {}", p.display()))?;
    }
    info!("wrote {}", a.out.display());
    Ok(())
}

pub fn grad_check(a: GradCheckArgs) -> Result<()> {
    let mut cfg = GradCheckConfig {
        model: ModelConfig::preset(&a.preset).ok_or_else(|| invalid("preset", format!("unknown preset `{}`", a.preset)))?,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    if let Some(d) = a.delta {
        if !(d > 0.0 && d.is_finite()) {
            bail!(invalid("delta", "must be positive"));
        }
        cfg.delta = d;
    }
    if let Some(t) = a.tolerance {
        if !(t > 0.0 && t.is_finite()) {
            bail!(invalid("tolerance", "must be positive"));
        }
        cfg.tolerance = t;
    }
    let mut suite = run_suite(&cfg)?;
    if a.corrupt_fixture {
        suite.checks.push(corrupted_cube_check(cfg.seed, cfg.delta)?);
    }
    for c in &suite.checks {
        let ok = c.report.max_rel_error < suite.tolerance;
        println!(
            "{:<36} max rel error {:.3e}  {}",
            c.name,
            c.report.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&suite)?).with_context(|| format!("writing {}", p.display()))?;
    }
    let failures = suite.failures();
    if failures.is_empty() {
        println!("all {} checks below {:e}", suite.checks.len(), suite.tolerance);
        return Ok(());
    }
    for f in &failures {
        eprintln!("failed: {f}");
    }
    Err(NumericalFailure(format!("{} tensors exceed tolerance {:e}: {}", failures.len(), suite.tolerance, failures.join(", "))).into())
}
