use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use smp_core::analyze::{analysis_to_csv, head_distribution, layer_distribution};
use smp_core::artifact::MaskArtifact;
use smp_core::checkpoint::{checkpoint_to_model, model_to_checkpoint, Checkpoint};
use smp_core::compact::{compact as compact_model, probe_batch};
use smp_core::data::write_atomic;
use smp_core::model::EncoderModel;
use smp_core::train::{train_run, Method, RunOutput, RunReport};
use smp_core::{Error, Result};

use crate::config::{DatasetSource, ExperimentConfig};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.dataset == Some(DatasetSource::Tsv) {
        return Err(Error::Config(
            "gen-data only produces synthetic datasets".into(),
        ));
    }
    let out = cfg.out_dir()?;
    let (train, dev) = cfg.synthetic_spec().generate()?;
    create_dir(out)?;
    train.save_tsv(&out.join("train.tsv"))?;
    dev.save_tsv(&out.join("dev.tsv"))?;
    println!(
        "wrote {} train and {} dev examples to {}",
        train.len(),
        dev.len(),
        out.display()
    );
    Ok(())
}

fn load_teacher(cfg: &ExperimentConfig) -> Result<Option<EncoderModel>> {
    match (&cfg.teacher, cfg.kd) {
        (Some(p), true) => Ok(Some(checkpoint_to_model(&Checkpoint::load(p)?)?)),
        _ => Ok(None),
    }
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    write_atomic(
        &dir.join("layer_density.csv"),
        analysis_to_csv(&report.layer_densities)?.as_bytes(),
    )?;
    write_atomic(
        &dir.join("head_density.csv"),
        analysis_to_csv(&report.head_densities)?.as_bytes(),
    )
}

fn run_one(
    cfg: &ExperimentConfig,
    method: Method,
    remaining: f64,
    teacher: Option<&EncoderModel>,
    dir: &Path,
) -> Result<RunOutput> {
    let tc = if method == cfg.method && remaining == cfg.remaining {
        cfg.primary_train_config()?
    } else {
        cfg.train_config(method, remaining)?
    };
    let (train, dev) = cfg.load_datasets()?;
    let model = EncoderModel::build(cfg.model_config()?, cfg.model_seed)?;
    create_dir(dir)?;
    match train_run(&tc, model, &train, &dev, teacher) {
        Ok(out) => {
            write_report(dir, &out.report)?;
            write_atomic(&dir.join("masks.smpm"), &out.artifact.serialize()?)?;
            model_to_checkpoint(&out.model).save(&dir.join("model.smpc"))?;
            Ok(out)
        }
        Err(abort) => {
            write_atomic(&dir.join("report.csv"), abort.report.to_csv().as_bytes())?;
            Err(abort.error)
        }
    }
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    let tc = cfg.primary_train_config()?;
    let out_dir = cfg.out_dir()?;
    let teacher = load_teacher(cfg)?;
    create_dir(out_dir)?;
    write_atomic(&out_dir.join("config.txt"), cfg.to_text().as_bytes())?;
    let out = run_one(cfg, tc.method, tc.remaining, teacher.as_ref(), out_dir)?;
    for (k, v) in out.report.summary() {
        println!("{k}={v}");
    }
    Ok(())
}

fn worker_count(cells: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var("SMP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available);
    cap.min(cells).max(1)
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let out_dir = cfg.out_dir()?;
    if cfg.sweep_remaining.is_empty() || cfg.sweep_methods.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one method and one ratio".into(),
        ));
    }
    for &r in &cfg.sweep_remaining {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config(format!("sweep ratio {r} outside (0, 1]")));
        }
    }
    let teacher = load_teacher(cfg)?;
    create_dir(out_dir)?;
    let cells: Vec<(Method, f64)> = cfg
        .sweep_methods
        .iter()
        .flat_map(|&m| cfg.sweep_remaining.iter().map(move |&r| (m, r)))
        .collect();
    let results: Mutex<Vec<Option<Result<f64>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..worker_count(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(method, r)) = cells.get(i) else {
                    break;
                };
                let dir = out_dir.join(format!("{}_{r}", method.name()));
                let res = cfg
                    .train_config(method, r)
                    .and_then(|_| run_one(cfg, method, r, teacher.as_ref(), &dir))
                    .map(|o| o.report.final_dev_accuracy.unwrap_or(f64::NAN));
                results.lock().expect("results lock")[i] = Some(res);
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    let mut csv = String::from("method,remaining,accuracy\n");
    let mut first_error = None;
    for (&(method, r), res) in cells.iter().zip(results) {
        let cell = match res.expect("every cell ran") {
            Ok(acc) => format!("{acc:.6}"),
            Err(e) => {
                eprintln!("{} at {r}: {e}", method.name());
                first_error.get_or_insert(e);
                "NA".to_string()
            }
        };
        csv.push_str(&format!("{},{r},{cell}\n", method.name()));
    }
    write_atomic(&out_dir.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    first_error.map_or(Ok(()), Err)
}

pub fn analyze(cfg: &ExperimentConfig, artifact: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let model_cfg = match checkpoint {
        Some(p) => Checkpoint::load(p)?.config,
        None => cfg.model_config()?,
    };
    let bytes = fs::read(artifact).map_err(|e| Error::Io {
        path: artifact.display().to_string(),
        source: e,
    })?;
    let masks = MaskArtifact::deserialize(&bytes, &model_cfg)?.masks_for(&model_cfg)?;
    let layers = analysis_to_csv(&layer_distribution(&masks, &model_cfg)?)?;
    let heads = analysis_to_csv(&head_distribution(&masks, &model_cfg)?)?;
    let out = cfg.out_dir()?;
    create_dir(out)?;
    write_atomic(&out.join("layer_density.csv"), layers.as_bytes())?;
    write_atomic(&out.join("head_density.csv"), heads.as_bytes())?;
    print!("{layers}");
    Ok(())
}

pub fn compact(cfg: &ExperimentConfig, artifact: &Path, checkpoint: &Path) -> Result<()> {
    let model = checkpoint_to_model(&Checkpoint::load(checkpoint)?)?;
    let bytes = fs::read(artifact).map_err(|e| Error::Io {
        path: artifact.display().to_string(),
        source: e,
    })?;
    let masks = MaskArtifact::deserialize(&bytes, &model.config)?.masks_for(&model.config)?;
    let probe = probe_batch(&model.config, cfg.probes, cfg.seed);
    let report = compact_model(&model, &masks, cfg.min_row_weights, &probe)?;
    let out = cfg.out_dir()?;
    create_dir(out)?;
    report
        .model
        .to_checkpoint()
        .save(&out.join("compacted.smpc"))?;
    let text = format!(
        "min_row_weights={}\nparams_before={}\nparams_after={}\nremoved_ffn_units={}\nremoved_heads={}\nprobes={}\nmax_deviation={:e}\n",
        report.min_row_weights,
        report.params_before,
        report.params_after,
        report.removed_units,
        report.removed_heads,
        probe.len(),
        report.max_deviation
    );
    write_atomic(&out.join("compaction.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
