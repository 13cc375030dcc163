use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

use citytft::checkpoint::Checkpoint;
use citytft::dataio::{parse_building_csv, parse_weather_csv, Dataset, SplitTag, HOURS_PER_YEAR};
use citytft::eval::{evaluate, predict_year, write_reports};
use citytft::loss::TriggerWeighting;
use citytft::model::{ModelConfig, ModelKind};
use citytft::synthgen::{write_synth_dataset, SynthConfig};
use citytft::train::{Trainer, TrainConfig, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE};
use citytft::Error;

use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{Cli, Command, EvaluateArgs, PredictArgs, Preset, SplitArg, SynthArgs, TrainArgs};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::Predict(a) => predict(cli, a),
    }
}

fn say(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", msg.as_ref());
    }
}

fn synth_data(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => SynthConfig::from_path(p)?,
        None => match a.preset {
            Preset::Default => SynthConfig::default_desk(),
            Preset::Benchmark => SynthConfig::benchmark(),
        },
    };
    cfg.validate()?;
    let mut m = RunManifest::new("synth-data", cli.threads).output("dataset", &a.out);
    if let Some(p) = &a.config {
        m = m.input("config", p);
    }
    m.config = serde_json::to_value(&cfg)?;
    m.write(&a.out.join(MANIFEST_FILE))?;
    let ds = write_synth_dataset(&cfg, &a.out)?;
    say(
        cli,
        format!(
            "wrote {} climates x {} buildings to {}",
            ds.climates.len(),
            ds.buildings.len(),
            a.out.display()
        ),
    );
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn resolve_train(a: &TrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let file = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str::<TrainFile>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainFile::default(),
    };
    let mut model = file.model.unwrap_or_default();
    let mut train = file.train.unwrap_or_default();
    if let Some(k) = a.model_kind {
        train.model_kind = k.into();
    }
    if let Some(v) = a.epochs {
        train.epochs = v;
    }
    if let Some(v) = a.lr {
        train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = a.seed {
        train.seed = v;
        model.seed = v;
    }
    if let Some(v) = a.weight_decay {
        train.weight_decay = v;
    }
    if let Some(v) = a.grad_clip {
        train.grad_clip_norm = Some(v);
    }
    if a.class_balanced {
        train.weighting = TriggerWeighting::ClassBalanced;
    }
    if let Some(v) = a.d_model {
        model.d_model = v;
    }
    if let Some(v) = a.n_heads {
        model.n_heads = v;
    }
    if let Some(v) = a.dropout {
        model.dropout = v;
    }
    if let Some(q) = &a.quantiles {
        model.quantiles = q.clone();
    }
    if a.stride == 0 {
        return Err(Error::Config("--stride must be positive".into()).into());
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let (model_cfg, train_cfg) = resolve_train(a)?;
    let mut m = RunManifest::new("train", cli.threads)
        .input("data", &a.data)
        .output("best_checkpoint", &a.out.join(BEST_CHECKPOINT))
        .output("last_checkpoint", &a.out.join(LAST_CHECKPOINT))
        .output("log", &a.out.join(LOG_FILE));
    if let Some(p) = &a.config {
        m = m.input("config", p);
    }
    m.seed = Some(train_cfg.seed);
    m.config = serde_json::json!({
        "model": model_cfg,
        "train": train_cfg,
        "stride": a.stride,
        "resume": a.resume,
    });
    m.write(&a.out.join(MANIFEST_FILE))?;

    let ds = Dataset::load(&a.data)?;
    let stats = ds.train_stats()?;
    let train_w = ds.windows(SplitTag::Train, &stats, a.stride)?;
    let val_w = ds.windows(SplitTag::Val, &stats, a.stride)?;
    log::info!(
        "{} train windows, {} val windows, model {}",
        train_w.windows.len(),
        val_w.windows.len(),
        train_cfg.model_kind
    );
    let resume = if a.resume {
        let p = a.out.join(LAST_CHECKPOINT);
        Some(Checkpoint::load(&p).with_context(|| format!("resuming from {}", p.display()))?)
    } else {
        None
    };
    let trainer = Trainer {
        train: &train_w.windows,
        val: &val_w.windows,
        stats: &stats,
        cfg: train_cfg,
        out_dir: Some(a.out.clone()),
    };
    let run = trainer.run(&model_cfg, resume)?;
    say(
        cli,
        format!(
            "trained {} for {} epochs ({} parameters); best epoch {:?}; checkpoints in {}",
            run.model.kind,
            run.last.epoch,
            run.model.param_count(),
            run.best.best_epoch,
            a.out.display()
        ),
    );
    Ok(())
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!("threshold {} outside [0, 1]", a.threshold)).into());
    }
    if a.stride == 0 {
        return Err(Error::Config("--stride must be positive".into()).into());
    }
    let mut m = RunManifest::new("evaluate", cli.threads)
        .input("data", &a.data)
        .output("report_json", &a.out.join("report.json"))
        .output("report_csv", &a.out.join("report.csv"));
    for (i, c) in a.checkpoints.iter().enumerate() {
        m = m.input(&format!("checkpoint_{i}"), c);
    }
    let split = match a.split {
        SplitArg::Train => SplitTag::Train,
        SplitArg::Val => SplitTag::Val,
        SplitArg::Test => SplitTag::Test,
    };
    m.config = serde_json::json!({
        "split": split,
        "threshold": a.threshold,
        "stride": a.stride,
    });
    m.write(&a.out.join(MANIFEST_FILE))?;

    let checkpoints: Vec<Checkpoint> = a.checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<_>>()?;
    let ds = Dataset::load(&a.data)?;
    let data_stats = ds.train_stats()?;
    let windows = ds.windows(split, &data_stats, a.stride)?;
    if windows.windows.is_empty() {
        return Err(Error::Config(format!("the {split} split has no windows")).into());
    }
    let mut reports = Vec::new();
    let mut seen: Vec<ModelKind> = Vec::new();
    for (ck, path) in checkpoints.iter().zip(&a.checkpoints) {
        let n = seen.iter().filter(|k| **k == ck.kind).count();
        seen.push(ck.kind);
        let name = if n == 0 {
            ck.kind.to_string()
        } else {
            format!("{}_{}", ck.kind, n + 1)
        };
        let model = ck.to_model()?;
        let r = evaluate(&name, &model, &ck.stats, &data_stats, &windows.windows, a.threshold)
            .with_context(|| format!("evaluating {}", path.display()))?;
        for x in &r {
            log::info!(
                "{:<12} {:<9} F1 {:>7.3}%  RMSE nz {:>9}  RMSE {:>9}  MAPE nz {:>8}",
                x.model,
                x.scope,
                x.f1_percent,
                fmt_opt(x.rmse_nonzero_kwh),
                fmt_opt(x.rmse_total_kwh),
                fmt_opt(x.mape_nonzero_percent)
            );
        }
        reports.extend(r);
    }
    write_reports(&reports, &a.out)?;
    say(cli, format!("wrote {} report rows to {}", reports.len(), a.out.display()));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn predict(cli: &Cli, a: &PredictArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!("threshold {} outside [0, 1]", a.threshold)).into());
    }
    let manifest_path = a.out.with_extension("run.json");
    let mut m = RunManifest::new("predict", cli.threads)
        .input("checkpoint", &a.checkpoint)
        .input("weather", &a.weather)
        .input("building", &a.building)
        .output("predictions", &a.out)
        .output("manifest", &manifest_path);
    m.config = serde_json::json!({ "threshold": a.threshold, "building_id": a.building_id });
    m.write(&manifest_path)?;

    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.to_model()?;
    let weather = parse_weather_csv(&a.weather)?;
    let mut buildings = parse_building_csv(&a.building)?;
    if let Some(id) = &a.building_id {
        buildings.retain(|b| &b.building_id == id);
        if buildings.is_empty() {
            return Err(Error::Argument(format!("building `{id}` not found in {}", a.building.display())).into());
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["hour_of_year", "building_id", "heat_pred", "cool_pred", "heat_prob", "cool_prob"])?;
    for b in &buildings {
        let s = predict_year(&model, &ck.stats, b, &weather, a.threshold)?;
        for h in 0..HOURS_PER_YEAR {
            w.write_record([
                weather.records[h].hour_of_year.to_string(),
                b.building_id.clone(),
                s.predicted_kwh.get(h, 0).to_string(),
                s.predicted_kwh.get(h, 1).to_string(),
                s.trigger_prob.get(h, 0).to_string(),
                s.trigger_prob.get(h, 1).to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.into(),
            source: e,
        })?;
    }
    std::fs::write(&a.out, bytes).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    say(
        cli,
        format!(
            "wrote {} rows for {} buildings to {}",
            buildings.len() * HOURS_PER_YEAR,
            buildings.len(),
            a.out.display()
        ),
    );
    Ok(())
}
