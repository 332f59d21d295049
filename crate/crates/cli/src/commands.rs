use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use spikecalib::analysis::{self, BoundTrials, EnergyCosts};
use spikecalib::ann::{self, TrainConfig};
use spikecalib::calibration::{self, WeightCalibration};
use spikecalib::data;
use spikecalib::io::{self, Provenance, Sidecar};
use spikecalib::{CalibrationConfig, Dataset, Error, Network, Pipeline, Result, SimOptions, ThresholdPolicy};

use crate::args::*;

fn provenance() -> Value {
    json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
    })
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => io::write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

pub fn convert(a: &ConvertArgs) -> Result<()> {
    let (model, model_digest) = io::load_model_with_digest(&a.model)?;
    let (calib, calib_digest) = io::load_dataset_with_digest(&a.calib, None)?;
    let policy = ThresholdPolicy {
        mode: a.threshold_mode,
        grid: a.grid,
        percentile: a.percentile,
    };
    policy.validate()?;
    let cfg = CalibrationConfig {
        pipeline: a.pipeline,
        bias_samples: a.bias_samples,
        weight_samples: a.weight_samples,
        weights: WeightCalibration {
            iterations: a.iterations,
            lr: a.lr,
            momentum: a.momentum,
            batch_size: a.wc_batch,
        },
        potential_mode: a.potential_mode,
        order: a.order,
        seed: a.seed,
    };
    if calib.len() < a.weight_samples.max(a.bias_samples) {
        log::warn!(
            "calibration set has {} samples; fewer than requested ({} / {})",
            calib.len(),
            a.bias_samples,
            a.weight_samples
        );
    }
    let conv = calibration::convert(&model, &calib.inputs, a.time_steps, &policy, a.round_mode, &cfg)?;
    for l in &conv.report.layers {
        if let Some(wc) = &l.weight_calibration {
            if !(wc.final_objective <= wc.initial_objective) {
                return Err(Error::Numeric(format!(
                    "layer {}: weight calibration ended at {} above its initial objective {}",
                    l.layer, wc.final_objective, wc.initial_objective
                )));
            }
        }
    }
    let prov = Provenance {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        calibration_sha256: calib_digest,
        calibration_samples: calib.len(),
        threshold_policy: policy,
        calibration: cfg,
        source_model_sha256: model_digest.clone(),
    };
    let weights_changed = conv.report.layers.iter().any(|l| l.weight_change_norm > 0.0);
    let (sidecar, model_path) = if weights_changed {
        let path = a.model_out.clone().unwrap_or_else(|| a.output.with_extension("scm"));
        if path == a.model {
            return Err(Error::InvalidArgument("refusing to overwrite the input model".into()));
        }
        let bytes = io::model_to_bytes(&conv.snn.source_network())?;
        let (stored, digest) = io::model_from_bytes(&bytes)?;
        let sidecar = Sidecar::describe(&conv.snn, &stored, &digest, prov)?;
        io::write_atomic(&path, &bytes)?;
        (sidecar, path)
    } else {
        (
            Sidecar::describe(&conv.snn, &model, &model_digest, prov)?,
            a.model.clone(),
        )
    };
    sidecar.save(&a.output)?;
    if let Some(log_path) = &a.log {
        io::write_atomic(log_path, conv.report.to_json_lines().as_bytes())?;
    }
    let summary = json!({
        "sidecar": a.output,
        "model": model_path,
        "model_sha256": sidecar.model_sha256,
        "time_steps": a.time_steps,
        "pipeline": a.pipeline,
        "weights_changed": weights_changed,
        "layers": conv.report.layers,
        "provenance": provenance(),
    });
    emit(None, &to_json(&summary))
}

struct LoadedModel {
    path: PathBuf,
    net: Network,
    digest: String,
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<LoadedModel>> {
    paths
        .iter()
        .map(|p| {
            let (net, digest) = io::load_model_with_digest(p)?;
            Ok(LoadedModel {
                path: p.clone(),
                net,
                digest,
            })
        })
        .collect()
}

fn labelled(path: &Path, limit: Option<usize>) -> Result<(Dataset, String)> {
    let (data, digest) = io::load_dataset_with_digest(path, limit)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{}: no samples to evaluate", path.display())));
    }
    data.labels_required()?;
    Ok((data, digest))
}

fn matching<'a>(models: &'a [LoadedModel], side: &Sidecar, path: &Path) -> Result<&'a LoadedModel> {
    models.iter().find(|m| m.digest == side.model_sha256).ok_or_else(|| {
        Error::from(spikecalib::FormatError::DigestMismatch {
            expected: side.model_sha256.clone(),
            found: format!(
                "{} (no --model matches sidecar {})",
                models.iter().map(|m| m.digest.as_str()).collect::<Vec<_>>().join(", "),
                path.display()
            ),
        })
    })
}

#[derive(Serialize)]
struct EvalRow {
    sidecar: PathBuf,
    model: PathBuf,
    time_steps: usize,
    pipeline: Pipeline,
    snn_accuracy: f64,
    energy_ratio: Option<f64>,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let models = load_models(&a.model)?;
    let (data, data_digest) = labelled(&a.data, a.limit)?;
    let labels = data.labels_required()?;
    let ann_accuracy = ann::accuracy(&models[0].net, &data)?;
    let mut rows = Vec::new();
    for path in &a.sidecar {
        let side = Sidecar::load(path)?;
        let m = matching(&models, &side, path)?;
        let snn = side.apply(&m.net, &m.digest)?;
        let sim = snn.simulate(&data.inputs, &SimOptions::default())?;
        let energy = analysis::estimate_energy(&sim, snn.network(), EnergyCosts::default())?;
        rows.push(EvalRow {
            sidecar: path.clone(),
            model: m.path.clone(),
            time_steps: side.time_steps,
            pipeline: side.provenance.calibration.pipeline,
            snn_accuracy: analysis::output_accuracy(sim.output.as_ref().expect("full run"), labels),
            energy_ratio: energy.ratio,
        });
    }
    if !a.time_steps.is_empty() {
        let found: Vec<usize> = rows.iter().map(|r| r.time_steps).collect();
        if found != a.time_steps {
            return Err(Error::InvalidArgument(format!(
                "time steps {:?} requested but the sidecars are for {found:?}",
                a.time_steps
            )));
        }
    }
    let text = match a.format {
        Format::Json => to_json(&json!({
            "samples": data.len(),
            "data_sha256": data_digest,
            "model_sha256": models[0].digest,
            "ann_accuracy": ann_accuracy,
            "rows": rows,
            "provenance": provenance(),
        })),
        Format::Csv => {
            let mut out = String::from("network,time_steps,pipeline,accuracy,energy_ratio\n");
            out.push_str(&format!("ann,,,{ann_accuracy},\n"));
            for r in &rows {
                out.push_str(&format!(
                    "snn,{},{},{},{}\n",
                    r.time_steps,
                    r.pipeline,
                    r.snn_accuracy,
                    r.energy_ratio.map(|v| v.to_string()).unwrap_or_default()
                ));
            }
            out
        }
    };
    emit(a.output.as_deref(), &text)
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let models = load_models(std::slice::from_ref(&a.model))?;
    let side = Sidecar::load(&a.sidecar)?;
    let m = matching(&models, &side, &a.sidecar)?;
    let snn = side.apply(&m.net, &m.digest)?;
    let (data, data_digest) = io::load_dataset_with_digest(&a.data, a.limit)?;
    let costs = EnergyCosts {
        add: a.add_energy,
        mult: a.mult_energy,
    };
    let diag = analysis::diagnose(&m.net.fold_bn()?, &snn, &data, costs)?;
    let text = match a.format {
        Format::Json => to_json(&json!({
            "model_sha256": m.digest,
            "data_sha256": data_digest,
            "diagnostics": diag,
            "provenance": provenance(),
        })),
        Format::Csv => diag.to_csv(),
    };
    emit(a.output.as_deref(), &text)
}

pub fn bound_check(a: &BoundCheckArgs) -> Result<()> {
    let cfg = BoundTrials {
        width: a.width,
        depth: a.depth,
        trials: a.trials,
        seed: a.seed,
        mode: a.round_mode,
    };
    if a.trials == 0 {
        log::warn!("no trials requested; the check passes vacuously");
    }
    let trials = cfg.run()?;
    let held = trials.iter().filter(|t| t.check.holds).count();
    let held_exact = trials.iter().filter(|t| t.check.holds_exact).count();
    let text = match a.format {
        Format::Json => to_json(&json!({
            "trials": trials,
            "held": held,
            "held_exact": held_exact,
            "total": trials.len(),
            "passed": held == trials.len(),
            "provenance": provenance(),
        })),
        Format::Csv => {
            let mut out = String::from("trial,widths,time_steps,lhs,rhs,holds,lhs_exact,holds_exact,crossings\n");
            for t in &trials {
                let widths: Vec<String> = t.widths.iter().map(|w| w.to_string()).collect();
                out.push_str(&format!(
                    "{},{},{},{:e},{:e},{},{:e},{},{}\n",
                    t.trial,
                    widths.join("-"),
                    t.time_steps,
                    t.check.lhs,
                    t.check.rhs,
                    t.check.holds,
                    t.check.lhs_exact,
                    t.check.holds_exact,
                    t.check.crossings
                ));
            }
            out
        }
    };
    emit(a.output.as_deref(), &text)?;
    eprintln!(
        "bound held in {held}/{} trials (exact output error: {held_exact}/{})",
        trials.len(),
        trials.len()
    );
    if held < trials.len() {
        return Err(Error::Numeric(format!(
            "bound violated in {} trials",
            trials.len() - held
        )));
    }
    Ok(())
}

pub fn train_demo(a: &TrainDemoArgs) -> Result<()> {
    let (train, val) = match (&a.train, &a.val) {
        (Some(t), Some(v)) => (labelled(t, None)?.0, labelled(v, None)?.0),
        _ => {
            let n = a.train_samples + a.val_samples;
            if a.train_samples == 0 || a.val_samples == 0 {
                return Err(Error::InvalidArgument(
                    "train and validation sample counts must be positive".into(),
                ));
            }
            let all = match a.dataset {
                Synthetic::Digits => data::digits(n, a.seed),
                Synthetic::Blobs => data::blobs(n, 4, 8, a.seed),
            };
            all.split(a.train_samples as f64 / n as f64)
        }
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (net, mut report) = ann::train_desk_scale(a.arch, &train, &val, &cfg)?;
    let bytes = io::model_to_bytes(&net)?;
    let (stored, digest) = io::model_from_bytes(&bytes)?;
    let stored_data =
        |d: &Dataset| -> Result<Dataset> { Ok(io::dataset_from_bytes(&io::dataset_to_bytes(d)?, None)?.0) };
    report.train_accuracy = ann::accuracy(&stored, &stored_data(&train)?)?;
    report.val_accuracy = ann::accuracy(&stored, &stored_data(&val)?)?;
    io::write_atomic(&a.output, &bytes)?;
    if let Some(p) = &a.save_train {
        io::save_dataset(&train, p)?;
    }
    if let Some(p) = &a.save_val {
        io::save_dataset(&val, p)?;
    }
    emit(
        None,
        &to_json(&json!({
            "model": a.output,
            "model_sha256": digest,
            "train_samples": train.len(),
            "val_samples": val.len(),
            "report": report,
            "provenance": provenance(),
        })),
    )
}
