use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::name_hash;
use crate::synth::{derive_seed, Manifest};

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub mixture: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn load_utterances(manifest: &Manifest, indices: &[usize]) -> Result<Vec<Utterance>> {
    indices
        .iter()
        .map(|&i| {
            let e = manifest
                .entries
                .get(i)
                .ok_or_else(|| Error::Data(format!("manifest has no entry {i}")))?;
            let (mix, target, _) = manifest.load_triplet(e)?;
            mix.require_pipeline_rate()?;
            if mix.len() != target.len() {
                return Err(Error::Data(format!("{}: mixture and target lengths differ", e.id)));
            }
            Ok(Utterance {
                id: e.id.clone(),
                mixture: mix.into_samples(),
                target: target.into_samples(),
            })
        })
        .collect()
}

/// Index-based split: the last `round(n * fraction)` entries (at least one,
/// and never all of them) are held out. Fewer than two entries means no
/// validation set.
pub fn split_indices(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_val = if n < 2 || fraction <= 0.0 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    };
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

/// Epoch order of training indices, a pure function of `(seed, epoch)`.
pub fn epoch_batches(train: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Crop start for `id`: uniform over valid offsets, seeded by
/// `(seed, epoch, id)`.
pub fn crop_offset(len: usize, segment: usize, seed: u64, epoch: u64, id: &str) -> usize {
    if len <= segment {
        return 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, epoch), name_hash(id)));
    rng.gen_range(0..=len - segment)
}

/// Segment of `x` starting at `offset`, zero-padded to `segment` samples.
pub fn crop(x: &[f64], offset: usize, segment: usize) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().skip(offset).take(segment).copied().collect();
    out.resize(segment, 0.0);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub mixture: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `Some(epoch)` draws random crops; `None` takes the leading segment.
    pub fn from_utterances(utts: &[&Utterance], segment: usize, seed: u64, epoch: Option<u64>) -> Self {
        let mut b = Batch {
            ids: Vec::new(),
            mixture: Vec::new(),
            target: Vec::new(),
        };
        for u in utts {
            let off = epoch.map_or(0, |e| crop_offset(u.mixture.len(), segment, seed, e, &u.id));
            b.ids.push(u.id.clone());
            b.mixture.push(crop(&u.mixture, off, segment));
            b.target.push(crop(&u.target, off, segment));
        }
        b
    }
}
