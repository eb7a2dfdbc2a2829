use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use num_complex::Complex64;

use super::config::{InputVariant, ModelConfig, OutputVariant};
use super::layers::{swiglu, BinNorm, BlockDims, MacaronBlock, Pointwise};
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};
use crate::features::{build_stack, correlation_features_channel_last};
use crate::filtering::DeepFilter;
use crate::signal::{istft, stft, Spectrogram};

#[derive(Debug, Clone, Copy)]
pub struct InitOptions {
    pub seed: u64,
    pub dtype: DType,
    /// Zero the output projection so an untrained model emits silence.
    pub zero_head: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: DType::F32,
            zero_head: true,
        }
    }
}

/// Host-prepared tensors for one batch of equally sized spectrograms.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    /// `(B, T, F, C_in)`.
    pub features: Tensor,
    /// `(B, T, F, taps)`; a single tap (the current frame) for masks.
    pub stack_re: Tensor,
    pub stack_im: Tensor,
    /// `(B, 1, 1)` per-utterance scale, only used by the mapping head.
    pub scale: Tensor,
    pub frames: usize,
    pub bins: usize,
}

impl ModelInputs {
    pub fn from_spectrograms(specs: &[&Spectrogram], cfg: &ModelConfig, dtype: DType) -> Result<Self> {
        let first = specs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (frames, bins) = first.values.dim();
        if specs.iter().any(|s| s.values.dim() != (frames, bins)) {
            return Err(Error::Shape("batch spectrograms differ in shape".into()));
        }
        let filter_half_width = match cfg.output {
            OutputVariant::MfFilter => cfg.half_width,
            _ => 0,
        };
        let taps = 2 * filter_half_width + 1;
        let cin = cfg.input_channels();
        let mut feats = Vec::with_capacity(specs.len() * frames * bins * cin);
        let mut sre = Vec::with_capacity(specs.len() * frames * bins * taps);
        let mut sim = Vec::with_capacity(sre.capacity());
        let mut scales = Vec::with_capacity(specs.len());
        for spec in specs {
            let scale = match cfg.output {
                OutputVariant::Mapping => spectral_rms(&spec.values) + 1e-8,
                _ => 1.0,
            };
            scales.push(scale);
            match cfg.input {
                InputVariant::IfCorr => {
                    let stack = build_stack(spec, cfg.half_width);
                    feats.extend(correlation_features_channel_last(&stack, cfg.beta, cfg.epsilon)?);
                }
                InputVariant::SfRaw => {
                    for v in spec.values.iter() {
                        feats.push(v.re / scale);
                        feats.push(v.im / scale);
                    }
                }
            }
            let stack = build_stack(spec, filter_half_width);
            for v in stack.taps.iter() {
                sre.push(v.re);
                sim.push(v.im);
            }
        }
        let dev = Device::Cpu;
        let b = specs.len();
        let mk = |v: Vec<f64>, c: usize| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (b, frames, bins, c), &dev)?.to_dtype(dtype)?)
        };
        Ok(Self {
            features: mk(feats, cin)?,
            stack_re: mk(sre, taps)?,
            stack_im: mk(sim, taps)?,
            scale: Tensor::from_vec(scales, (b, 1, 1), &dev)?.to_dtype(dtype)?,
            frames,
            bins,
        })
    }
}

fn spectral_rms(x: &Array2<Complex64>) -> f64 {
    (x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Raw head output `(B, T, F, C_out)`.
    pub head: Tensor,
    /// Estimated spectrum `(B, T, F)`.
    pub y_re: Tensor,
    pub y_im: Tensor,
}

#[derive(Debug, Clone)]
struct InputLayer {
    expand: Pointwise,
    conv_weight: Tensor,
    conv_bias: Tensor,
    norm: BinNorm,
}

/// The dual-path correlation-to-filter network.
#[derive(Debug, Clone)]
pub struct IfCorrNet {
    cfg: ModelConfig,
    store: ParamStore,
    input: InputLayer,
    freq: Vec<MacaronBlock>,
    time: Vec<MacaronBlock>,
    head: Pointwise,
}

impl IfCorrNet {
    pub fn new(cfg: &ModelConfig, opts: InitOptions) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(opts.seed, opts.dtype, Device::Cpu);
        let c = cfg.channels;
        let input = InputLayer {
            expand: Pointwise::new(&mut store, "input.conv1", cfg.input_channels(), 4 * c, true, Init::TruncNormal)?,
            conv_weight: store.create("input.conv2.weight", &[c, 2 * c, 3, 3], Init::TruncNormal)?,
            conv_bias: store.create("input.conv2.bias", &[c], Init::Zeros)?,
            norm: BinNorm::new(&mut store, "input.norm", c, cfg.norm_eps)?,
        };
        let dims = BlockDims {
            dim: c,
            hidden: cfg.ffn_hidden,
            kernel: cfg.ffn_kernel,
            heads: cfg.heads,
            scale: cfg.macaron_scale,
            rope_base: cfg.rope_base,
            norm_eps: cfg.norm_eps,
        };
        let mut freq = Vec::with_capacity(cfg.blocks);
        let mut time = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            freq.push(MacaronBlock::new(&mut store, &format!("blocks.{b}.freq"), dims)?);
            time.push(MacaronBlock::new(&mut store, &format!("blocks.{b}.time"), dims)?);
        }
        let head_init = if opts.zero_head { Init::Zeros } else { Init::TruncNormal };
        let head = Pointwise::new(&mut store, "head", c, cfg.output_channels(), true, head_init)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            input,
            freq,
            time,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// `(B, T, F, C_in) -> (B, T, F, C)`.
    pub fn input_layer(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, _, cin) = x.dims4()?;
        if cin != self.cfg.input_channels() {
            return Err(Error::Shape(format!(
                "input has {cin} channels, {} expects {}",
                self.cfg.input.label(),
                self.cfg.input_channels()
            )));
        }
        let h = swiglu(&self.input.expand.forward(x)?, 3)?;
        let h = h.permute((0, 3, 1, 2))?.contiguous()?;
        let h = h
            .conv2d(&self.input.conv_weight, 1, 1, 1, 1)?
            .broadcast_add(&self.input.conv_bias.reshape((1, (), 1, 1))?)?;
        let h = h.permute((0, 2, 3, 1))?.contiguous()?;
        self.input.norm.forward(&h)
    }

    /// Block `index` along frequency: `T` independent sequences of length `F`.
    pub fn freq_module(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let (b, t, f, c) = x.dims4()?;
        let y = self.freq[index].forward(&x.reshape((b * t, f, c))?)?;
        Ok(y.reshape((b, t, f, c))?)
    }

    /// Block `index` along time: `F` independent sequences of length `T`.
    pub fn time_module(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let (b, t, f, c) = x.dims4()?;
        let seq = x.permute((0, 2, 1, 3))?.contiguous()?.reshape((b * f, t, c))?;
        let y = self.time[index].forward(&seq)?;
        Ok(y.reshape((b, f, t, c))?.permute((0, 2, 1, 3))?.contiguous()?)
    }

    pub fn output_head(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(x)
    }

    pub fn backbone(&self, features: &Tensor) -> Result<Tensor> {
        let mut h = self.input_layer(features)?;
        for i in 0..self.cfg.blocks {
            h = self.freq_module(i, &h)?;
            h = self.time_module(i, &h)?;
        }
        Ok(h)
    }

    /// Applies the head output to the input according to the output variant.
    pub fn apply_head(&self, head: &Tensor, inputs: &ModelInputs) -> Result<(Tensor, Tensor)> {
        match self.cfg.output {
            OutputVariant::MfFilter | OutputVariant::SfMask => {
                let taps = head.dim(3)? / 2;
                if taps != inputs.stack_re.dim(3)? {
                    return Err(Error::Shape(format!(
                        "head has {taps} taps, stack has {}",
                        inputs.stack_re.dim(3)?
                    )));
                }
                let wr = head.narrow(3, 0, taps)?;
                let wi = head.narrow(3, taps, taps)?;
                let xr = &inputs.stack_re;
                let xi = &inputs.stack_im;
                let y_re = ((&wr * xr)? - (&wi * xi)?)?.sum(3)?;
                let y_im = ((&wr * xi)? + (&wi * xr)?)?.sum(3)?;
                Ok((y_re, y_im))
            }
            OutputVariant::Mapping => {
                let y_re = head.narrow(3, 0, 1)?.squeeze(3)?.broadcast_mul(&inputs.scale)?;
                let y_im = head.narrow(3, 1, 1)?.squeeze(3)?.broadcast_mul(&inputs.scale)?;
                Ok((y_re, y_im))
            }
        }
    }

    pub fn forward(&self, inputs: &ModelInputs) -> Result<ModelOutput> {
        let h = self.backbone(&inputs.features)?;
        let head = self.output_head(&h)?;
        let (y_re, y_im) = self.apply_head(&head, inputs)?;
        Ok(ModelOutput { head, y_re, y_im })
    }

    /// Single-utterance forward pass: returns the estimated filter and the
    /// enhanced spectrogram.
    pub fn enhance(&self, x: &Spectrogram) -> Result<(DeepFilter, Spectrogram)> {
        if x.config != self.cfg.stft {
            return Err(Error::InvalidArgument(format!(
                "spectrogram uses {:?}, model expects {:?}",
                x.config, self.cfg.stft
            )));
        }
        let inputs = ModelInputs::from_spectrograms(&[x], &self.cfg, self.dtype())?;
        let out = self.forward(&inputs)?;
        let filter = head_to_filter(&out.head, &inputs, self.cfg.output)?;
        let re = to_f64_vec(&out.y_re)?;
        let im = to_f64_vec(&out.y_im)?;
        let (frames, bins) = x.values.dim();
        let values = Array2::from_shape_fn((frames, bins), |(t, f)| {
            Complex64::new(re[t * bins + f], im[t * bins + f])
        });
        Ok((filter, x.with_values(values)?))
    }

    /// STFT, forward pass and inverse STFT, length-matched to the input.
    pub fn enhance_waveform(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let spec = stft(samples, self.cfg.stft)?;
        let (_, y) = self.enhance(&spec)?;
        istft(&y)
    }
}

pub(crate) fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn head_to_filter(head: &Tensor, inputs: &ModelInputs, output: OutputVariant) -> Result<DeepFilter> {
    let (_, frames, bins, ch) = head.dims4()?;
    let v = to_f64_vec(&head.get(0)?)?;
    let at = |t: usize, f: usize, c: usize| v[(t * bins + f) * ch + c];
    Ok(match output {
        OutputVariant::MfFilter => {
            let taps = ch / 2;
            DeepFilter::MultiFrame(Array3::from_shape_fn((frames, bins, taps), |(t, f, m)| {
                Complex64::new(at(t, f, m), at(t, f, taps + m))
            }))
        }
        OutputVariant::SfMask => {
            DeepFilter::Mask(Array2::from_shape_fn((frames, bins), |(t, f)| {
                Complex64::new(at(t, f, 0), at(t, f, 1))
            }))
        }
        OutputVariant::Mapping => {
            let scale = to_f64_vec(&inputs.scale.get(0)?)?[0];
            DeepFilter::Mapping(Array2::from_shape_fn((frames, bins), |(t, f)| {
                Complex64::new(at(t, f, 0) * scale, at(t, f, 1) * scale)
            }))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VARIANTS;
    use crate::signal::StftConfig;

    fn spec(seed: u64, len: usize) -> Spectrogram {
        let x = crate::synth::noise(crate::synth::NoiseKind::White, len, seed);
        stft(&x, StftConfig::default()).unwrap()
    }

    fn tiny(input: InputVariant, output: OutputVariant) -> ModelConfig {
        ModelConfig {
            channels: 8,
            blocks: 1,
            ffn_hidden: 16,
            ..ModelConfig::tiny()
        }
        .with_variant(input, output)
    }

    fn random_head() -> InitOptions {
        InitOptions {
            seed: 3,
            dtype: DType::F64,
            zero_head: false,
        }
    }

    #[test]
    fn shapes_and_counts_for_every_variant() {
        let s = spec(1, 2048);
        let (t, f) = s.values.dim();
        for (i, o) in VARIANTS {
            let cfg = tiny(i, o);
            let net = IfCorrNet::new(&cfg, random_head()).unwrap();
            assert_eq!(net.parameter_count(), cfg.parameter_count());
            let inputs = ModelInputs::from_spectrograms(&[&s, &s], &cfg, DType::F64).unwrap();
            assert_eq!(inputs.features.dims(), &[2, t, f, cfg.input_channels()]);
            let out = net.forward(&inputs).unwrap();
            assert_eq!(out.head.dims(), &[2, t, f, cfg.output_channels()]);
            assert_eq!(out.y_re.dims(), &[2, t, f]);
            assert_eq!(out.y_im.dims(), &[2, t, f]);
        }
        for cfg in [ModelConfig::full(), ModelConfig::small()] {
            let net = IfCorrNet::new(&cfg, InitOptions::default()).unwrap();
            assert_eq!(net.parameter_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn batch_items_do_not_interact() {
        let cfg = tiny(InputVariant::IfCorr, OutputVariant::MfFilter);
        let net = IfCorrNet::new(&cfg, random_head()).unwrap();
        let (a, b) = (spec(1, 2048), spec(2, 2048));
        let ab = net.forward(&ModelInputs::from_spectrograms(&[&a, &b], &cfg, DType::F64).unwrap()).unwrap();
        let ba = net.forward(&ModelInputs::from_spectrograms(&[&b, &a], &cfg, DType::F64).unwrap()).unwrap();
        let solo = net.forward(&ModelInputs::from_spectrograms(&[&b], &cfg, DType::F64).unwrap()).unwrap();
        let v = |t: &Tensor| to_f64_vec(t).unwrap();
        let close = |x: Vec<f64>, y: Vec<f64>| {
            let d = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(d < 1e-10, "{d}");
        };
        close(v(&ab.y_re.get(1).unwrap()), v(&ba.y_re.get(0).unwrap()));
        close(v(&ab.y_im.get(0).unwrap()), v(&ba.y_im.get(1).unwrap()));
        close(v(&ab.y_re.get(1).unwrap()), v(&solo.y_re.get(0).unwrap()));
    }

    #[test]
    fn construction_and_forward_are_deterministic() {
        let cfg = tiny(InputVariant::IfCorr, OutputVariant::MfFilter);
        let s = spec(4, 2048);
        let run = || {
            let net = IfCorrNet::new(&cfg, random_head()).unwrap();
            let out = net.forward(&ModelInputs::from_spectrograms(&[&s], &cfg, DType::F64).unwrap()).unwrap();
            to_f64_vec(&out.y_re).unwrap()
        };
        assert_eq!(run(), run());
        let other = IfCorrNet::new(&cfg, InitOptions { seed: 4, ..random_head() }).unwrap();
        let net = IfCorrNet::new(&cfg, random_head()).unwrap();
        assert_ne!(
            to_f64_vec(other.params().get("head.weight").unwrap()).unwrap(),
            to_f64_vec(net.params().get("head.weight").unwrap()).unwrap()
        );
    }

    #[test]
    fn zero_head_emits_silence() {
        let cfg = tiny(InputVariant::IfCorr, OutputVariant::MfFilter);
        let net = IfCorrNet::new(&cfg, InitOptions { dtype: DType::F64, ..InitOptions::default() }).unwrap();
        let y = net.enhance_waveform(&crate::synth::speechlike(4000, 1)).unwrap();
        assert_eq!(y.len(), 4000);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn center_tap_head_passes_input_through() {
        let cfg = tiny(InputVariant::IfCorr, OutputVariant::MfFilter);
        let net = IfCorrNet::new(&cfg, random_head()).unwrap();
        let cout = cfg.output_channels();
        let mut bias = vec![0.0; cout];
        bias[cfg.half_width] = 1.0;
        let dev = Device::Cpu;
        net.params().set("head.weight", &Tensor::zeros((cout, cfg.channels, 1, 1), DType::F64, &dev).unwrap()).unwrap();
        net.params().set("head.bias", &Tensor::from_vec(bias, cout, &dev).unwrap()).unwrap();
        let x = crate::synth::speechlike(8000, 2);
        let y = net.enhance_waveform(&x).unwrap();
        let d = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-9, "{d}");
    }

    #[test]
    fn single_tap_filter_equals_mask_on_shared_weights() {
        let filter = ModelConfig { half_width: 0, ..tiny(InputVariant::SfRaw, OutputVariant::MfFilter) };
        let mask = ModelConfig { half_width: 0, ..tiny(InputVariant::SfRaw, OutputVariant::SfMask) };
        let a = IfCorrNet::new(&filter, random_head()).unwrap();
        let b = IfCorrNet::new(&mask, random_head()).unwrap();
        assert_eq!(
            a.params().names().collect::<Vec<_>>(),
            b.params().names().collect::<Vec<_>>()
        );
        let x = crate::synth::speechlike(8000, 5);
        assert_eq!(a.enhance_waveform(&x).unwrap(), b.enhance_waveform(&x).unwrap());
    }

    #[test]
    fn rejects_foreign_stft_config() {
        let cfg = tiny(InputVariant::IfCorr, OutputVariant::MfFilter);
        let net = IfCorrNet::new(&cfg, random_head()).unwrap();
        let x = crate::synth::speechlike(4000, 1);
        let s = stft(&x, StftConfig::new(256, 128).unwrap()).unwrap();
        assert!(matches!(net.enhance(&s), Err(Error::InvalidArgument(_))));
    }
}
