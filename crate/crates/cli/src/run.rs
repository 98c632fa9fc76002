//! `train`, `eval` and `synth`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use serde_json::json;
use siavc_core::data::{
    generate_synthetic, make_split, write_dataset, write_tensor, Dataset, DatasetManifest, Split, SplitSpec,
};
use siavc_core::sab::write_events_csv;
use siavc_core::trainer::{checkpoint_name, evaluate, infer, load_model, MetricsWriter};
use siavc_core::{Error, RunConfig, TrainData, Trainer, VideoTensor};

use crate::config::CliConfig;
use crate::{runtime, usage, Outcome};

fn load_dataset(cfg: &CliConfig, run: &RunConfig) -> anyhow::Result<Dataset> {
    if cfg.synthetic {
        Ok(generate_synthetic(
            run.num_classes,
            cfg.per_class,
            run.frames,
            run.height,
            run.width,
            run.seed,
        )?)
    } else if let Some(path) = &cfg.manifest {
        let manifest = DatasetManifest::read(path)?;
        let ds = Dataset::load(&manifest, run.frames, run.height, run.width)?;
        if ds.classes.len() != run.num_classes {
            bail!(
                "manifest has {} classes but num_classes = {}",
                ds.classes.len(),
                run.num_classes
            );
        }
        Ok(ds)
    } else {
        bail!("no dataset: pass --synthetic or --manifest");
    }
}

fn split(cfg: &CliConfig, ds: &Dataset) -> anyhow::Result<TrainData> {
    let seed = cfg.run.seed;
    let spec = match cfg.labels {
        Some(budget) => SplitSpec { budget, seed },
        None => SplitSpec::from_fraction(cfg.labels_frac, ds.train_len(), seed)?,
    };
    Ok(make_split(ds, &spec)?)
}

/// Keeps the header and the rows up to `step` so a resumed run continues
/// the file exactly where the checkpoint left it.
fn truncate_metrics(path: &Path, step: u64) -> anyhow::Result<()> {
    let kept: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .enumerate()
        .filter_map(|(i, line)| match line {
            Err(e) => Some(Err(e)),
            Ok(l) => {
                let row_step = l.split(',').next().and_then(|s| s.parse::<u64>().ok());
                (i == 0 || row_step.is_some_and(|s| s <= step)).then_some(Ok(l))
            }
        })
        .collect::<Result<_, _>>()?;
    let mut out = BufWriter::new(File::create(path)?);
    for line in kept {
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn train(cfg: &CliConfig, resume: Option<&Path>) -> Outcome {
    let ds = load_dataset(cfg, &cfg.run).map_err(usage)?;
    let data = split(cfg, &ds).map_err(usage)?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(usage)?;
    let metrics_path = out.join("metrics.csv");

    let (mut trainer, mut metrics) = match resume {
        Some(path) => {
            let t = Trainer::load_checkpoint(path, data).map_err(usage)?;
            if t.config() != &cfg.run {
                log::warn!("continuing with the configuration stored in {}", path.display());
            }
            truncate_metrics(&metrics_path, t.step_count())
                .with_context(|| format!("rewinding {}", metrics_path.display()))
                .map_err(usage)?;
            let file = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(usage)?;
            (t, MetricsWriter::append(BufWriter::new(file)))
        }
        None => {
            let t = Trainer::new(cfg.run.clone(), data).map_err(usage)?;
            let file = File::create(&metrics_path).map_err(usage)?;
            (t, MetricsWriter::new(BufWriter::new(file)).map_err(usage)?)
        }
    };
    let mut resolved = cfg.clone();
    resolved.run = trainer.config().clone();
    fs::write(out.join("run.conf"), resolved.to_text()).map_err(usage)?;

    let interval = cfg.checkpoint_interval;
    let total = trainer.config().total_steps;
    while !trainer.is_finished() {
        let m = trainer.step().map_err(runtime)?;
        metrics.write(&m).map_err(runtime)?;
        if let Some(e) = m.eval {
            metrics.flush().map_err(runtime)?;
            log::info!("step {}/{total}: loss {:.4} top1 {:.4} top5 {:.4}", m.step, m.total, e.top1, e.top5);
        }
        let due = interval > 0 && m.step % interval == 0;
        if due || trainer.is_finished() {
            trainer
                .save_checkpoint(&out.join(checkpoint_name(m.step)))
                .map_err(runtime)?;
        }
    }
    metrics.flush().map_err(runtime)?;
    finish(&trainer, out, total).map_err(runtime)
}

fn finish(trainer: &Trainer, out: &Path, total: u64) -> anyhow::Result<()> {
    let events = File::create(out.join("sab_events.csv"))?;
    write_events_csv(BufWriter::new(events), trainer.sab_events())?;
    let last = trainer.last_eval().map(|e| json!({"top1": e.top1, "top5": e.top5}));
    let best = trainer
        .best_eval()
        .map(|(step, e)| json!({"step": step, "top1": e.top1, "top5": e.top5}));
    let cfg = trainer.config();
    let report = json!({
        "steps": total,
        "seed": cfg.seed,
        "use_sat": cfg.use_sat,
        "use_fairness": cfg.use_fairness,
        "use_sab": cfg.use_sab,
        "use_vcam": cfg.use_vcam,
        "final": last,
        "best": best,
        "checkpoint": checkpoint_name(trainer.step_count()),
    });
    write_json(&out.join("report.json"), &report)?;
    if let Some(e) = trainer.last_eval() {
        println!("final top1 {:.4} top5 {:.4}", e.top1, e.top5);
    }
    Ok(())
}

pub fn eval(cfg: &CliConfig, checkpoint: &Path) -> Outcome {
    let (run, model) = load_model(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))
        .map_err(usage)?;
    let ds = load_dataset(cfg, &run).map_err(usage)?;
    let test: Vec<_> = ds
        .items
        .iter()
        .filter(|i| i.split == Split::Test)
        .map(|i| siavc_core::LabeledSample { id: i.id, video: i.video.clone(), label: i.label })
        .collect();
    let metrics = evaluate(&model, &test).map_err(usage)?;
    let videos: Vec<&VideoTensor> = test.iter().map(|s| s.video.as_ref()).collect();
    let (_, latents) = infer(&model, &videos).map_err(runtime)?;

    let out = &cfg.out_dir;
    let write = || -> anyhow::Result<()> {
        fs::create_dir_all(out)?;
        let dim = latents.first().map_or(0, Vec::len);
        let flat: Vec<f32> = latents.iter().flatten().copied().collect();
        write_tensor(&out.join("latents.bin"), &[latents.len(), dim], &flat)?;
        let mut index = BufWriter::new(File::create(out.join("latents.csv"))?);
        writeln!(index, "row,sample_id,label,class")?;
        for (row, s) in test.iter().enumerate() {
            writeln!(index, "{row},{},{},{}", s.id, s.label, ds.classes[s.label])?;
        }
        index.flush()?;
        write_json(
            &out.join("eval.json"),
            &json!({"checkpoint": checkpoint.display().to_string(), "top1": metrics.top1, "top5": metrics.top5}),
        )
    };
    write().map_err(usage)?;
    println!("top1 {} top5 {}", metrics.top1, metrics.top5);
    Ok(())
}

pub fn synth(out: &Path, classes: usize, per_class: usize, [t, h, w]: [usize; 3], seed: u64) -> Outcome {
    let ds = generate_synthetic(classes, per_class, t, h, w, seed).map_err(usage)?;
    let manifest = write_dataset(&ds, out).map_err(|e| match e {
        Error::Io(_) => runtime(e),
        other => usage(other),
    })?;
    println!(
        "wrote {} clips over {} classes to {}",
        manifest.entries().len(),
        manifest.classes().len(),
        out.display()
    );
    Ok(())
}
