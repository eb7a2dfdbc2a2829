//! Synthetic reverberant-noisy mixtures with direct-path targets.

mod conv;
mod dataset;
mod mixture;
mod rir;
mod source;

pub use conv::fft_convolve;
pub use dataset::{
    make_dataset, read_manifest, synth_sample, write_manifest, Manifest, ManifestEntry, SynthConfig, MANIFEST_FILE,
};
pub use mixture::{
    direct_part, make_mixture, make_mixture_with_window, MixtureSample, DEFAULT_DIRECT_WINDOW_MS, DEFAULT_SNR_DB,
};
pub use rir::{make_rir, RirMethod, RirSpec, RoomGeometry, DEFAULT_TAIL_GAIN, T60_MAX, T60_MIN};
pub use source::{noise, speechlike, NoiseKind};

/// Per-item seed from a base seed and an index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
