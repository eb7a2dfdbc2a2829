use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, summarize, write_csv, write_summary_json, MetricReport, MetricSummary};
use crate::model::{IfCorrNet, InputVariant, ModelConfig, OutputVariant, VARIANTS};
use crate::signal::{read_wav, write_wav, Waveform, SAMPLE_RATE};
use crate::synth::{derive_seed, make_dataset, read_manifest, Manifest};
use crate::training::{self, TrainOutcome};

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const TAP_SWEEP_CSV: &str = "tap_sweep.csv";
pub const NO_PROCESSING_JSON: &str = "no_processing.json";
pub const ESTIMATES_DIR: &str = "estimates";

/// Writes `n_utts` synthetic utterances and their manifest under `out`.
pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.echo(out)?;
    make_dataset(cfg.data.n_utts, cfg.seed, &cfg.data.synth, out)
}

pub fn train(cfg: &RunConfig, manifest: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.echo(out)?;
    let m = read_manifest(manifest)?;
    training::train(&cfg.model, &cfg.train, &cfg.loss, &m, out, resume)
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, wav_in: &Path, wav_out: &Path) -> Result<Waveform> {
    training::infer(checkpoint, wav_in, wav_out, cfg.data.synth.wav_format)
}

/// What to score against the manifest targets.
#[derive(Debug, Clone)]
pub enum EvalSource {
    /// Enhance each mixture with this checkpoint; estimates are written to
    /// `estimates/` in the output directory.
    Checkpoint(PathBuf),
    /// Pre-computed estimates named `{id}.wav`.
    Estimates(PathBuf),
    /// The mixtures themselves.
    Unprocessed,
}

/// Scores every manifest entry, in manifest order, and writes
/// `metrics.csv` and `summary.json` under `out`.
pub fn evaluate(cfg: &RunConfig, manifest: &Manifest, source: &EvalSource, out: &Path) -> Result<(Vec<MetricReport>, MetricSummary)> {
    cfg.echo(out)?;
    let model = match source {
        EvalSource::Checkpoint(p) => {
            std::fs::create_dir_all(out.join(ESTIMATES_DIR))?;
            Some(IfCorrNet::load(p)?)
        }
        _ => None,
    };
    let rows: Vec<MetricReport> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let (mix, target, _) = manifest.load_triplet(e)?;
            let est: Vec<f64> = match (source, &model) {
                (EvalSource::Checkpoint(_), Some(m)) => {
                    mix.require_pipeline_rate()?;
                    let y = Waveform::new(m.enhance_waveform(mix.samples())?, SAMPLE_RATE)?;
                    write_wav(&out.join(ESTIMATES_DIR).join(format!("{}.wav", e.id)), &y, cfg.data.synth.wav_format)?;
                    y.into_samples()
                }
                (EvalSource::Estimates(dir), _) => {
                    let y = read_wav(&dir.join(format!("{}.wav", e.id)))?;
                    if y.sample_rate() != target.sample_rate() {
                        return Err(Error::Data(format!("{}: estimate is {} Hz", e.id, y.sample_rate())));
                    }
                    y.into_samples()
                }
                _ => mix.into_samples(),
            };
            if est.len() != target.len() {
                return Err(Error::Data(format!(
                    "{}: estimate has {} samples, target {}",
                    e.id,
                    est.len(),
                    target.len()
                )));
            }
            evaluate_pair(&e.id, &est, target.samples(), cfg.metrics)
        })
        .collect::<Result<_>>()?;
    let summary = summarize(&rows);
    write_csv(&out.join(METRICS_CSV), &rows)?;
    write_summary_json(&out.join(SUMMARY_JSON), &summary)?;
    Ok((rows, summary))
}

/// Train and eval manifests for the comparative commands: the given ones,
/// or freshly synthesized sets under `out/data` (eval uses a derived seed).
fn comparison_data(cfg: &RunConfig, out: &Path, train: Option<&Path>, eval: Option<&Path>) -> Result<(Manifest, Manifest)> {
    let train = match train {
        Some(p) => read_manifest(p)?,
        None => make_dataset(cfg.data.n_utts, cfg.seed, &cfg.data.synth, &out.join("data").join("train"))?,
    };
    let eval = match eval {
        Some(p) => read_manifest(p)?,
        None => make_dataset(
            cfg.data.n_eval_utts,
            derive_seed(cfg.seed, u64::MAX),
            &cfg.data.synth,
            &out.join("data").join("eval"),
        )?,
    };
    if eval.is_empty() {
        return Err(Error::Data("evaluation manifest is empty".into()));
    }
    Ok((train, eval))
}

/// Trains (possibly for zero epochs) and evaluates one model config in `dir`.
fn train_and_score(cfg: &RunConfig, model: &ModelConfig, train_set: &Manifest, eval_set: &Manifest, dir: &Path) -> Result<MetricSummary> {
    let run = RunConfig {
        model: model.clone(),
        ..cfg.clone()
    };
    run.validate()?;
    run.echo(dir)?;
    let outcome = if train_set.is_empty() && run.train.max_epochs == 0 {
        None
    } else {
        Some(training::train(&run.model, &run.train, &run.loss, train_set, dir, None)?)
    };
    let ckpt = match outcome {
        Some(o) => o.best,
        None => {
            let p = dir.join(training::CHECKPOINT_DIR).join("init.safetensors");
            std::fs::create_dir_all(p.parent().unwrap_or(dir))?;
            IfCorrNet::new(&run.model, Default::default())?.save(&p)?;
            p
        }
    };
    let (_, summary) = evaluate(&run, eval_set, &EvalSource::Checkpoint(ckpt), &dir.join("eval"))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub input: InputVariant,
    pub output: OutputVariant,
    pub input_channels: usize,
    pub output_channels: usize,
    pub summary: MetricSummary,
}

impl AblationRow {
    pub fn label(&self) -> String {
        format!("{} + {}", self.input.label(), self.output.label())
    }
}

fn kebab<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn variant_dir(input: InputVariant, output: OutputVariant) -> String {
    format!("{}_{}", kebab(&input), kebab(&output))
}

pub const ABLATION_HEADER: &str = "variant,input_channels,output_channels,cd,llr,fwsnr,srmr,si_sdr";

/// Trains and scores the four input/output variants on the same data and
/// seeds. Writes `ablation.csv` (one row per variant) and the unprocessed
/// baseline to `no_processing.json`.
pub fn ablate(cfg: &RunConfig, out: &Path, train_manifest: Option<&Path>, eval_manifest: Option<&Path>) -> Result<Vec<AblationRow>> {
    cfg.echo(out)?;
    let (train_set, eval_set) = comparison_data(cfg, out, train_manifest, eval_manifest)?;
    let (_, baseline) = evaluate(cfg, &eval_set, &EvalSource::Unprocessed, &out.join("no_processing"))?;
    write_summary_json(&out.join(NO_PROCESSING_JSON), &baseline)?;
    let mut rows = Vec::new();
    for (input, output) in VARIANTS {
        let model = cfg.model.clone().with_variant(input, output);
        log::info!("ablation: {} + {}", input.label(), output.label());
        let summary = train_and_score(cfg, &model, &train_set, &eval_set, &out.join(variant_dir(input, output)))?;
        rows.push(AblationRow {
            input,
            output,
            input_channels: model.input_channels(),
            output_channels: model.output_channels(),
            summary,
        });
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(out.join(ABLATION_CSV))?);
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in &rows {
        let s = &r.summary;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.label(),
            r.input_channels,
            r.output_channels,
            s.cd,
            s.llr,
            s.fwsnr,
            s.srmr,
            s.si_sdr
        )?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub half_width: usize,
    pub taps: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    pub summary: MetricSummary,
}

pub const TAP_SWEEP_HEADER: &str = "L,taps,input_channels,output_channels,cd,llr,fwsnr,srmr,si_sdr";

/// Trains and scores the configured model at each `L` in `cfg.sweep.taps`.
/// Writes `tap_sweep.csv`, one row per `L`.
pub fn tap_sweep(cfg: &RunConfig, out: &Path, train_manifest: Option<&Path>, eval_manifest: Option<&Path>) -> Result<Vec<SweepRow>> {
    if cfg.sweep.taps.is_empty() {
        return Err(Error::Config("sweep.taps is empty".into()));
    }
    cfg.echo(out)?;
    let (train_set, eval_set) = comparison_data(cfg, out, train_manifest, eval_manifest)?;
    let mut rows = Vec::new();
    for &l in &cfg.sweep.taps {
        let model = ModelConfig {
            half_width: l,
            ..cfg.model.clone()
        };
        log::info!("tap sweep: L = {l}");
        let summary = train_and_score(cfg, &model, &train_set, &eval_set, &out.join(format!("L{l}")))?;
        rows.push(SweepRow {
            half_width: l,
            taps: model.taps(),
            input_channels: model.input_channels(),
            output_channels: model.output_channels(),
            summary,
        });
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(out.join(TAP_SWEEP_CSV))?);
    writeln!(w, "{TAP_SWEEP_HEADER}")?;
    for r in &rows {
        let s = &r.summary;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.half_width, r.taps, r.input_channels, r.output_channels, s.cd, s.llr, s.fwsnr, s.srmr, s.si_sdr
        )?;
    }
    w.flush()?;
    Ok(rows)
}
