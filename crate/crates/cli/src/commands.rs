use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anticipation_core::data::{
    factor_distribution, mix_augment as mix, read_bundle, start_frame_stats, DatasetManifest,
    FactorDistribution, StartFrameStats,
};
use anticipation_core::evaluation::{
    evaluate, export_report, predict_split, smooth, AnticipationResult, MetricsReport,
    SMOOTHING_SIGMA,
};
use anticipation_core::network::forward;
use anticipation_core::synth::{gen_dataset_split, ScenarioParams, SplitCounts};
use anticipation_core::training::{
    load_checkpoint, load_checkpoint_for, load_clips, train_clips_with, EpochRecord, TrainConfig,
    TrainState,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{EvalArgs, GenSynthArgs, MixArgs, PredictArgs, StatsArgs, TrainArgs};

fn say(out: &mut dyn Write, line: std::fmt::Arguments) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::Runtime(format!("stdout: {e}")))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn gen_synth(args: &GenSynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut params = match &args.params {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => ScenarioParams::default(),
    };
    params.seed = args.seed;
    if let Some(n) = args.agents {
        params.num_agents = n;
    }
    if let Some(t) = args.frames {
        params.num_frames = t;
    }
    if let Some(f) = args.feature_dim {
        params.feature_dim = f;
    }
    let counts = match (args.n_test_pos, args.n_test_neg) {
        (Some(test_pos), Some(test_neg)) => SplitCounts {
            train_pos: args.n_pos,
            train_neg: args.n_neg,
            test_pos,
            test_neg,
        },
        _ => SplitCounts::eighty_twenty(args.n_pos, args.n_neg),
    };
    let manifest = gen_dataset_split(counts, &params, &args.out)?;
    say(
        out,
        format_args!(
            "wrote {} videos ({} train, {} test) to {}",
            manifest.samples.len(),
            manifest.splits["train"].len(),
            manifest.splits["test"].len(),
            args.out.display()
        ),
    )
}

fn check_resumable(saved: &TrainConfig, current: &TrainConfig) -> CliResult<()> {
    let normalize = |t: &TrainConfig| TrainConfig {
        epochs: 0,
        checkpoint_dir: None,
        ..t.clone()
    };
    if normalize(saved) != normalize(current) {
        return Err(CliError::Usage(
            "checkpoint was trained with a different train config (only epochs may change on resume)".into(),
        ));
    }
    Ok(())
}

fn print_report(out: &mut dyn Write, report: &MetricsReport) -> CliResult<()> {
    say(
        out,
        format_args!(
            "AP {}  mTTA {} s  TTA@best {} s  (threshold {}, {} positive / {} negative)",
            report.ap,
            report.mtta_s,
            report.tta_at_best_ap_s,
            report.best_threshold,
            report.n_pos,
            report.n_neg
        ),
    )
}

fn report(
    results: &[AnticipationResult],
    dir: &Path,
    out: &mut dyn Write,
) -> CliResult<MetricsReport> {
    let report = evaluate(results)?;
    let path =
        export_report(&report, results, dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    print_report(out, &report)?;
    say(out, format_args!("metrics written to {}", path.display()))?;
    Ok(report)
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = RunConfig::load(&args.config)?;
    let manifest = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| CliError::Usage("config has no data.manifest".into()))?;
    let train_cfg = TrainConfig {
        checkpoint_dir: Some(cfg.checkpoint_dir()),
        ..cfg.train.clone()
    };
    let state = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint_for(path, &cfg.model)?;
            check_resumable(&ckpt.train, &train_cfg)?;
            say(
                out,
                format_args!(
                    "resuming from {} at epoch {}",
                    path.display(),
                    ckpt.state.epoch
                ),
            )?;
            ckpt.state
        }
        None => TrainState::new(&cfg.model, &train_cfg)?,
    };
    let clips = load_clips(&manifest, &cfg.data.train_split, &cfg.model)?;
    say(
        out,
        format_args!(
            "training on {} videos, {} parameters",
            clips.len(),
            state.params.num_scalars()
        ),
    )?;
    let total = train_cfg.epochs;
    let state = train_clips_with(&clips, &cfg.model, &train_cfg, state, |r: &EpochRecord| {
        let val = r
            .val_loss
            .map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            out,
            "epoch {}/{total}  train_loss {:.6}  val_loss {val}  lr {:e}",
            r.epoch, r.train_loss, r.lr
        );
    })?;
    say(
        out,
        format_args!("checkpoints written to {}", cfg.checkpoint_dir().display()),
    )?;
    if cfg.eval.after_train {
        let results = predict_split(&manifest, &cfg.eval.split, &state.params, &cfg.model)?;
        report(&results, &cfg.output.dir.join("eval"), out)?;
    }
    Ok(())
}

fn load_probs(
    path: &Path,
    manifest: &DatasetManifest,
    split: &str,
) -> CliResult<Vec<AnticipationResult>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut probs: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let samples = manifest.split(split)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("split {split} is empty")));
    }
    samples
        .into_iter()
        .map(|s| {
            let p = probs.remove(&s.id).ok_or_else(|| {
                CliError::Usage(format!("{}: no probabilities for {}", path.display(), s.id))
            })?;
            if p.len() != s.num_frames {
                return Err(CliError::Usage(format!(
                    "{}: {} has {} probabilities, expected {}",
                    path.display(),
                    s.id,
                    p.len(),
                    s.num_frames
                )));
            }
            Ok(AnticipationResult {
                id: s.id.clone(),
                probs: p,
                label: s.label,
                toa: s.toa,
                fps: s.fps,
            })
        })
        .collect()
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let results = match (&args.probs_file, &args.checkpoint) {
        (Some(probs), _) => {
            load_probs(probs, &DatasetManifest::load(&args.manifest)?, &args.split)?
        }
        (None, Some(ckpt)) => {
            let ckpt = load_checkpoint(ckpt)?;
            predict_split(&args.manifest, &args.split, &ckpt.state.params, &ckpt.model)?
        }
        (None, None) => return Err(CliError::Usage("need --checkpoint or --probs-file".into())),
    };
    report(&results, &args.out, out).map(|_| ())
}

pub fn predict(args: &PredictArgs, out: &mut dyn Write) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let bundle = read_bundle(&args.bundle)?;
    let probs = forward(&bundle, &ckpt.state.params, &ckpt.model)?.probs;
    let smoothed = smooth(&probs, SMOOTHING_SIGMA)?;
    let mut csv = String::from("frame,p_raw,p_smoothed\n");
    for (t, (p, s)) in probs.iter().zip(&smoothed).enumerate() {
        csv.push_str(&format!("{t},{p},{s}\n"));
    }
    match &args.out {
        Some(path) => {
            write_file(path, &csv)?;
            say(
                out,
                format_args!("{} frames written to {}", probs.len(), path.display()),
            )
        }
        None => out
            .write_all(csv.as_bytes())
            .map_err(|e| CliError::Runtime(format!("stdout: {e}"))),
    }
}

fn absolute_paths(manifest: &mut DatasetManifest, manifest_path: &Path) -> CliResult<()> {
    for s in &mut manifest.samples {
        let p = DatasetManifest::bundle_path(manifest_path, s);
        let abs = std::path::absolute(&p)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        s.bundle_path = abs.to_string_lossy().into_owned();
    }
    Ok(())
}

pub fn mix_augment(args: &MixArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut base = DatasetManifest::load(&args.manifest)?;
    let mut generated = DatasetManifest::load(&args.generated)?;
    absolute_paths(&mut base, &args.manifest)?;
    absolute_paths(&mut generated, &args.generated)?;
    let mixed = mix(
        &base,
        &generated.samples,
        args.ratio,
        args.seed,
        args.mode.into(),
    )?;
    let text =
        serde_json::to_string_pretty(&mixed).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&args.out, &text)?;
    let before = base.splits.get("train").map_or(0, Vec::len);
    say(
        out,
        format_args!(
            "train split: {before} -> {} videos; test split unchanged; wrote {}",
            mixed.splits["train"].len(),
            args.out.display()
        ),
    )
}

/// Written by `stats --out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub start_frames: StartFrameStats,
    pub factors: Option<FactorDistribution>,
}

pub fn stats(args: &StatsArgs, out: &mut dyn Write) -> CliResult<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let start_frames = start_frame_stats(&manifest)?;
    let annotated = manifest
        .split(&args.split)?
        .iter()
        .any(|s| s.factors.is_some());
    let factors = if annotated {
        Some(factor_distribution(&manifest, &args.split)?)
    } else {
        None
    };
    let q = &start_frames.overall;
    say(
        out,
        format_args!(
            "{} positives; toa min {} q1 {} median {} q3 {} max {}",
            q.count, q.min, q.q1, q.median, q.q3, q.max
        ),
    )?;
    for (toa, n) in &start_frames.histogram {
        say(out, format_args!("  toa {toa}: {n}"))?;
    }
    for (kind, q) in &start_frames.by_type {
        say(
            out,
            format_args!("  {kind}: n {} median {}", q.count, q.median),
        )?;
    }
    if let Some(f) = &factors {
        for (name, cats) in f {
            let parts: Vec<String> = cats.iter().map(|(c, p)| format!("{c} {p:.3}")).collect();
            say(out, format_args!("factor {name}: {}", parts.join(", ")))?;
        }
    }
    if let Some(path) = &args.out {
        let report = StatsReport {
            start_frames,
            factors,
        };
        let text =
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_file(path, &text)?;
    }
    Ok(())
}
