use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ifcorrnet::metrics::{evaluate_pair, MetricOptions};
use ifcorrnet::model::{IfCorrNet, ModelConfig};
use ifcorrnet::pipeline::load_config;
use ifcorrnet::signal::{istft, stft, StftConfig, Waveform, SAMPLE_RATE};
use ifcorrnet::synth::{make_mixture, make_rir, speechlike, NoiseKind, RirSpec};
use ifcorrnet::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Wav(_) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) | Error::Tensor(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn preset(name: &str) -> PyResult<ModelConfig> {
    match name {
        "full" => Ok(ModelConfig::full()),
        "small" => Ok(ModelConfig::small()),
        "tiny" => Ok(ModelConfig::tiny()),
        _ => Err(PyValueError::new_err(format!("unknown preset {name:?}; use full, small or tiny"))),
    }
}

/// Trainable parameter count of a preset model.
#[pyfunction]
fn parameter_count(preset_name: &str) -> PyResult<usize> {
    Ok(preset(preset_name)?.parameter_count())
}

/// Centered STFT; returns `(real, imag)` as frame-major nested lists.
#[pyfunction]
#[pyo3(name = "stft", signature = (x, n_fft = 512, hop = 256))]
fn stft_py(x: Vec<f64>, n_fft: usize, hop: usize) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let cfg = StftConfig::new(n_fft, hop).map_err(to_py)?;
    let s = stft(&x, cfg).map_err(to_py)?;
    let re = s.values.rows().into_iter().map(|r| r.iter().map(|c| c.re).collect()).collect();
    let im = s.values.rows().into_iter().map(|r| r.iter().map(|c| c.im).collect()).collect();
    Ok((re, im))
}

/// STFT followed by its inverse; useful for checking reconstruction.
#[pyfunction]
#[pyo3(signature = (x, n_fft = 512, hop = 256))]
fn round_trip(x: Vec<f64>, n_fft: usize, hop: usize) -> PyResult<Vec<f64>> {
    let cfg = StftConfig::new(n_fft, hop).map_err(to_py)?;
    istft(&stft(&x, cfg).map_err(to_py)?).map_err(to_py)
}

/// Enhances 16 kHz samples with a checkpoint.
#[pyfunction]
fn enhance(py: Python<'_>, checkpoint: &str, samples: Vec<f64>) -> PyResult<Vec<f64>> {
    let path = checkpoint.to_string();
    py.detach(move || {
        let net = IfCorrNet::load(&path)?;
        net.enhance_waveform(&samples)
    })
    .map_err(to_py)
}

/// CD, LLR, fwSegSNR, SRMR and SI-SDR of `est` against `reference`.
#[pyfunction]
#[pyo3(signature = (est, reference, align = false))]
fn evaluate<'py>(py: Python<'py>, est: Vec<f64>, reference: Vec<f64>, align: bool) -> PyResult<Bound<'py, PyDict>> {
    let r = py
        .detach(move || evaluate_pair("", &est, &reference, MetricOptions { align }))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("cd", r.cd)?;
    d.set_item("llr", r.llr)?;
    d.set_item("fwsnr", r.fwsnr)?;
    d.set_item("srmr", r.srmr)?;
    d.set_item("si_sdr", r.si_sdr)?;
    Ok(d)
}

/// Synthetic reverberant mixture from a speech-like source. Returns a dict
/// with `mixture`, `target` (direct path) and `clean`.
#[pyfunction]
#[pyo3(signature = (seed, t60, snr_db = None, duration = 3.0))]
fn synth_mixture<'py>(
    py: Python<'py>,
    seed: u64,
    t60: f64,
    snr_db: Option<f64>,
    duration: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let len = (duration * SAMPLE_RATE as f64).round() as usize;
    let clean = Waveform::new(speechlike(len, seed), SAMPLE_RATE).map_err(to_py)?;
    let rir = make_rir(&RirSpec::exp_decay(t60, seed)).map_err(to_py)?;
    let m = make_mixture(&clean, &rir, snr_db, NoiseKind::HumWhite, seed).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mixture", m.mixture.samples().to_vec())?;
    d.set_item("target", m.target.samples().to_vec())?;
    d.set_item("clean", m.clean.samples().to_vec())?;
    Ok(d)
}

/// Resolves a run config (file plus dotted overrides) and returns it as TOML.
#[pyfunction]
#[pyo3(signature = (path = None, overrides = Vec::new(), seed = None))]
fn resolve_config(path: Option<String>, overrides: Vec<String>, seed: Option<u64>) -> PyResult<String> {
    let cfg = load_config(path.as_deref().map(std::path::Path::new), &overrides, seed).map_err(to_py)?;
    cfg.to_toml().map_err(to_py)
}

#[pymodule]
#[pyo3(name = "ifcorrnet")]
fn ifcorrnet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SAMPLE_RATE", SAMPLE_RATE)?;
    m.add_function(wrap_pyfunction!(parameter_count, m)?)?;
    m.add_function(wrap_pyfunction!(stft_py, m)?)?;
    m.add_function(wrap_pyfunction!(round_trip, m)?)?;
    m.add_function(wrap_pyfunction!(enhance, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    Ok(())
}
