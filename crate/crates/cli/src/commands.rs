use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::{Deserialize, Serialize};

use xflood_core::checkpoint;
use xflood_core::data::{generate, DataShape, SyntheticSample};
use xflood_core::gradcam;
use xflood_core::gradcheck::{self, Selector};
use xflood_core::metrics::{compute_metrics, mcnemar_test, McNemar, MetricsReport};
use xflood_core::train::{self, evaluate, TrainOptions};
use xflood_core::{Error, Model, ModelConfig, Result};

use crate::Common;

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.xfld";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const FINAL_METRICS_FILE: &str = "final_metrics.json";

/// Per-sample output of a model on a labelled split.
#[derive(Debug, Serialize, Deserialize)]
pub struct Predictions {
    pub probs: Vec<f64>,
    pub preds: Vec<u8>,
    pub labels: Vec<u8>,
}

/// Prefixes I/O errors with the file they concern.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        e => e,
    })
}

/// Config from `--config` (desk defaults otherwise) with `--seed` applied.
fn load_config(common: &Common) -> Result<ModelConfig> {
    let mut cfg = match &common.config {
        Some(p) => at(p, ModelConfig::load(p))?,
        None => ModelConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_samples(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_samples(path: &Path, shape: DataShape) -> Result<Vec<SyntheticSample>> {
    let mut out = Vec::new();
    let file = at(path, File::open(path).map_err(Error::from))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SyntheticSample = serde_json::from_str(&line)?;
        if s.image.shape() != [shape.image_size[0], shape.image_size[1], 3] || s.tokens.len() != shape.n_t {
            return Err(Error::Input(format!(
                "{} line {}: sample does not match the configured image size and caption length",
                path.display(),
                i + 1
            )));
        }
        out.push(s);
    }
    Ok(out)
}

/// Train and validation splits, from `data_dir` or generated from the config.
fn splits(cfg: &ModelConfig, data_dir: Option<&Path>) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let shape = DataShape::from(cfg);
    match data_dir {
        Some(d) => Ok((
            read_samples(&d.join("train.ndjson"), shape)?,
            read_samples(&d.join("val.ndjson"), shape)?,
        )),
        None => {
            let d = &cfg.data;
            Ok((
                generate(d.n_train, d.seed, d.difficulty, shape)?,
                generate(d.n_val, d.val_seed, d.difficulty, shape)?,
            ))
        }
    }
}

pub fn gen_data(common: &Common, n_train: Option<usize>, n_val: Option<usize>, difficulty: Option<f64>) -> Result<ExitCode> {
    let mut cfg = match &common.config {
        Some(p) => at(p, ModelConfig::load(p))?,
        None => ModelConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.data.seed = s;
        cfg.data.val_seed = s.wrapping_add(1);
    }
    cfg.data.n_train = n_train.unwrap_or(cfg.data.n_train);
    cfg.data.n_val = n_val.unwrap_or(cfg.data.n_val);
    cfg.data.difficulty = difficulty.unwrap_or(cfg.data.difficulty);
    cfg.validate()?;
    let dir = out_dir(common)?;
    let (tr, va) = splits(&cfg, None)?;
    write_samples(&dir.join("train.ndjson"), &tr)?;
    write_samples(&dir.join("val.ndjson"), &va)?;
    write_json(&dir.join("data_config.json"), &cfg.data)?;
    println!("wrote {} training and {} validation samples to {}", tr.len(), va.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(common: &Common, data_dir: Option<&Path>, eval_train: bool) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let dir = out_dir(common)?;
    let (tr, va) = splits(&cfg, data_dir)?;
    let model = Model::new(cfg.clone())?;
    let mut store = model.init_params(cfg.seed)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json_pretty() + "\n")?;

    let mut trace = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    let mut io_err = None;
    let history = train::train(&model, &mut store, &tr, &va, TrainOptions { eval_train }, |rec| {
        eprintln!(
            "epoch {:>3}  train_loss {:.5}  val_loss {:.5}  val_acc {:.4}{}",
            rec.epoch + 1,
            rec.train_loss,
            rec.val_loss,
            rec.val.accuracy,
            rec.train.map(|t| format!("  train_acc {:.4}", t.accuracy)).unwrap_or_default()
        );
        let line = serde_json::to_string(rec).map_err(Error::from).and_then(|s| {
            writeln!(trace, "{s}")?;
            Ok(())
        });
        if let Err(e) = line {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    trace.flush()?;

    checkpoint::save(&store, &dir.join(CHECKPOINT_FILE))?;
    let ev = evaluate(&model, &store, &va)?;
    write_json(
        &dir.join(PREDICTIONS_FILE),
        &Predictions {
            probs: ev.probs,
            preds: ev.preds,
            labels: va.iter().map(|s| s.label).collect(),
        },
    )?;
    let last = history.last().map(|r| r.val).unwrap_or(ev.report);
    write_json(&dir.join(FINAL_METRICS_FILE), &last)?;
    println!("{}", serde_json::to_string_pretty(&last)?);
    Ok(ExitCode::SUCCESS)
}

pub fn eval(common: &Common, ckpt: &Path, data_dir: Option<&Path>, train_split: bool) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let model = Model::new(cfg.clone())?;
    let store = at(ckpt, checkpoint::load(ckpt))?;
    checkpoint::check_compatible(&store, &model.init_params(cfg.seed)?)?;
    let (tr, va) = splits(&cfg, data_dir)?;
    let set = if train_split { &tr } else { &va };
    let ev = evaluate(&model, &store, set)?;
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("eval_metrics.json"), &ev.report)?;
        write_json(
            &dir.join("eval_predictions.json"),
            &Predictions {
                probs: ev.probs.clone(),
                preds: ev.preds.clone(),
                labels: set.iter().map(|s| s.label).collect(),
            },
        )?;
    }
    println!("{}", serde_json::to_string_pretty(&ev.report)?);
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(common: &Common, module: &str) -> Result<ExitCode> {
    let selector: Selector = module.parse()?;
    let cfg = load_config(common)?;
    cfg.validate()?;
    let results = gradcheck::run(selector, &cfg, cfg.seed)?;
    for r in &results {
        println!("{r}");
    }
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &results)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        eprintln!("{failed} of {} gradient checks failed", results.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn explain(common: &Common, ckpt: Option<&Path>, sample: usize, layer: usize) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let model = Model::new(cfg.clone())?;
    let fresh = model.init_params(cfg.seed)?;
    let store = match ckpt {
        Some(p) => {
            let s = at(p, checkpoint::load(p))?;
            checkpoint::check_compatible(&s, &fresh)?;
            s
        }
        None => fresh,
    };
    let (_, va) = splits(&cfg, None)?;
    let s = va.get(sample).ok_or_else(|| {
        Error::Input(format!("sample {sample} out of range; the validation split has {}", va.len()))
    })?;
    let map = gradcam::grad_cam(&model, &store, s, layer)?;
    let dir = out_dir(common)?;
    let stem = format!("gradcam_s{sample}_l{layer}");
    map.write(&dir, &stem)?;
    println!(
        "label {}  p(flood) {:.4}  wrote {}.pgm and {}.json ({}×{})",
        s.label,
        map.probability,
        dir.join(&stem).display(),
        stem,
        map.height,
        map.width
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct MetricsOutput {
    metrics: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    compare: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mcnemar: Option<McNemar>,
}

fn read_predictions(path: &Path) -> Result<Predictions> {
    let text = at(path, fs::read_to_string(path).map_err(Error::from))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn metrics(common: &Common, path: &Path, compare: Option<&Path>) -> Result<ExitCode> {
    let a = read_predictions(path)?;
    let metrics = compute_metrics(&a.preds, &a.probs, &a.labels)?;
    let (compare, mcnemar) = match compare {
        Some(p) => {
            let b = read_predictions(p)?;
            if b.labels != a.labels {
                return Err(Error::Input("the two prediction files have different labels".into()));
            }
            (
                Some(compute_metrics(&b.preds, &b.probs, &b.labels)?),
                Some(mcnemar_test(&a.preds, &b.preds, &a.labels)?),
            )
        }
        None => (None, None),
    };
    let out = MetricsOutput {
        metrics,
        compare,
        mcnemar,
    };
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("metrics.json"), &out)?;
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}
