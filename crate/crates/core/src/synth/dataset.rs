use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{read_wav, write_wav, WavFormat};
use crate::signal::{Waveform, SAMPLE_RATE};

use super::mixture::{make_mixture_with_window, MixtureSample, DEFAULT_DIRECT_WINDOW_MS, DEFAULT_SNR_DB};
use super::rir::{make_rir, RirMethod, RirSpec, DEFAULT_TAIL_GAIN};
use super::source::{speechlike, NoiseKind};
use super::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub duration_secs: f64,
    /// Uniform t60 range, used when `t60_grid` is empty.
    pub t60_range: [f64; 2],
    /// Stratified mode: utterance `i` uses `t60_grid[i % len]`.
    pub t60_grid: Vec<f64>,
    /// `None` disables additive noise.
    pub snr_db: Option<f64>,
    pub noise_kind: NoiseKind,
    pub rir_method: RirMethod,
    pub tail_gain: f64,
    /// Largest direct-path delay in samples; drawn uniformly in `[0, max]`.
    pub max_direct_delay: usize,
    pub direct_window_ms: f64,
    /// Directory of 16 kHz mono WAVs to use instead of synthetic sources.
    pub clean_dir: Option<PathBuf>,
    pub wav_format: WavFormat,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_secs: 3.0,
            t60_range: [0.2, 0.8],
            t60_grid: Vec::new(),
            snr_db: Some(DEFAULT_SNR_DB),
            noise_kind: NoiseKind::HumWhite,
            rir_method: RirMethod::ExpDecayNoise,
            tail_gain: DEFAULT_TAIL_GAIN,
            max_direct_delay: 64,
            direct_window_ms: DEFAULT_DIRECT_WINDOW_MS,
            clean_dir: None,
            wav_format: WavFormat::Float32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_secs >= 1.0) {
            return Err(Error::Config(format!("duration must be >= 1 s, got {}", self.duration_secs)));
        }
        let [lo, hi] = self.t60_range;
        if !(lo <= hi) {
            return Err(Error::Config(format!("t60 range [{lo}, {hi}] is empty")));
        }
        for &t in self.t60_range.iter().chain(&self.t60_grid) {
            if !(super::rir::T60_MIN..=super::rir::T60_MAX).contains(&t) {
                return Err(Error::Config(format!("t60 {t} outside the supported range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub mixture_path: PathBuf,
    pub target_path: PathBuf,
    pub clean_path: PathBuf,
    pub t60: f64,
    /// `null` means no noise was added.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_triplet(&self, entry: &ManifestEntry) -> Result<(Waveform, Waveform, Waveform)> {
        Ok((
            read_wav(self.resolve(&entry.mixture_path))?,
            read_wav(self.resolve(&entry.target_path))?,
            read_wav(self.resolve(&entry.clean_path))?,
        ))
    }
}

fn clean_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no WAV files in {}", dir.display())));
    }
    Ok(files)
}

/// Builds utterance `index` without touching the filesystem (except to read
/// a user-supplied clean file).
pub fn synth_sample(index: usize, seed: u64, cfg: &SynthConfig, clean_pool: &[PathBuf]) -> Result<(MixtureSample, f64, u64)> {
    let utt_seed = derive_seed(seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
    let len = (cfg.duration_secs * SAMPLE_RATE as f64).round() as usize;
    let clean = if clean_pool.is_empty() {
        Waveform::new(speechlike(len, rng.gen()), SAMPLE_RATE)?
    } else {
        let wav = read_wav(&clean_pool[index % clean_pool.len()])?;
        wav.require_pipeline_rate()?;
        let mut s = wav.into_samples();
        s.truncate(len);
        Waveform::new(s, SAMPLE_RATE)?
    };
    let t60 = if cfg.t60_grid.is_empty() {
        let [lo, hi] = cfg.t60_range;
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    } else {
        cfg.t60_grid[index % cfg.t60_grid.len()]
    };
    let spec = RirSpec {
        t60,
        direct_delay: rng.gen_range(0..=cfg.max_direct_delay),
        method: cfg.rir_method.clone(),
        tail_gain: cfg.tail_gain,
        seed: rng.gen(),
        length: None,
    };
    let rir = make_rir(&spec)?;
    let noise_seed = rng.gen();
    let sample = make_mixture_with_window(&clean, &rir, cfg.snr_db, cfg.noise_kind, noise_seed, cfg.direct_window_ms)?;
    Ok((sample, t60, utt_seed))
}

/// Writes WAV triplets under `out_dir/wav/` and `out_dir/manifest.jsonl`.
/// Utterances are generated in parallel; the manifest is ordered by index.
pub fn make_dataset(n_utts: usize, seed: u64, cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let pool = match &cfg.clean_dir {
        Some(d) => clean_files(d)?,
        None => Vec::new(),
    };
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir)?;
    let entries: Vec<ManifestEntry> = (0..n_utts)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let (sample, t60, utt_seed) = synth_sample(i, seed, cfg, &pool)?;
            let id = format!("utt{i:05}");
            let rel = |kind: &str| PathBuf::from("wav").join(format!("{id}_{kind}.wav"));
            let entry = ManifestEntry {
                mixture_path: rel("mixture"),
                target_path: rel("target"),
                clean_path: rel("clean"),
                id,
                t60,
                snr_db: sample.snr_db,
                seed: utt_seed,
            };
            write_wav(out_dir.join(&entry.mixture_path), &sample.mixture, cfg.wav_format)?;
            write_wav(out_dir.join(&entry.target_path), &sample.target, cfg.wav_format)?;
            write_wav(out_dir.join(&entry.clean_path), &sample.clean, cfg.wav_format)?;
            Ok(entry)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    write_manifest(&out_dir.join(MANIFEST_FILE), &manifest.entries)?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Accepts either the manifest file or the directory containing it.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let reader = std::io::BufReader::new(
        std::fs::File::open(&file).map_err(|e| Error::Data(format!("{}: {e}", file.display())))?,
    );
    let mut entries = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", file.display(), n + 1)))?;
        entries.push(entry);
    }
    Ok(Manifest {
        root: file.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            duration_secs: 1.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn dataset_is_deterministic_and_loadable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = make_dataset(3, 11, &small_cfg(), a.path()).unwrap();
        make_dataset(3, 11, &small_cfg(), b.path()).unwrap();
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), MANIFEST_FILE), read(b.path(), MANIFEST_FILE));
        for e in &ma.entries {
            assert_eq!(read(a.path(), e.mixture_path.to_str().unwrap()), read(b.path(), e.mixture_path.to_str().unwrap()));
            let (m, t, c) = ma.load_triplet(e).unwrap();
            assert_eq!(m.sample_rate(), SAMPLE_RATE);
            assert_eq!(m.len(), t.len());
            assert_eq!(m.len(), c.len());
            assert!((0.2..=0.8).contains(&e.t60));
        }
        let back = read_manifest(a.path()).unwrap();
        assert_eq!(back.entries, ma.entries);
    }

    #[test]
    fn empty_and_grid_modes() {
        let d = tempfile::tempdir().unwrap();
        let m = make_dataset(0, 1, &small_cfg(), d.path()).unwrap();
        assert!(m.is_empty());
        assert!(read_manifest(d.path()).unwrap().is_empty());
        let grid = SynthConfig {
            t60_grid: vec![0.3, 0.6],
            snr_db: None,
            ..small_cfg()
        };
        let g = make_dataset(4, 2, &grid, d.path()).unwrap();
        let t: Vec<f64> = g.entries.iter().map(|e| e.t60).collect();
        assert_eq!(t, vec![0.3, 0.6, 0.3, 0.6]);
        assert!(g.entries.iter().all(|e| e.snr_db.is_none()));
    }

    #[test]
    fn user_clean_directory() {
        let src = tempfile::tempdir().unwrap();
        let clean = Waveform::new(speechlike(20000, 4), SAMPLE_RATE).unwrap();
        write_wav(src.path().join("a.wav"), &clean, WavFormat::Float32).unwrap();
        let cfg = SynthConfig {
            clean_dir: Some(src.path().to_path_buf()),
            duration_secs: 1.0,
            ..SynthConfig::default()
        };
        let out = tempfile::tempdir().unwrap();
        let m = make_dataset(1, 3, &cfg, out.path()).unwrap();
        let (_, _, c) = m.load_triplet(&m.entries[0]).unwrap();
        assert_eq!(c.len(), 16000);
        for (a, b) in c.samples().iter().zip(clean.samples()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
