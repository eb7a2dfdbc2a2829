use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{correlation_channels, DEFAULT_BETA, DEFAULT_EPSILON};
use crate::signal::StftConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputVariant {
    /// PHAT-β weighted inter-frame correlations.
    IfCorr,
    /// Single-frame `[Re X; Im X]`.
    SfRaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputVariant {
    /// `2L + 1` complex taps per bin.
    MfFilter,
    /// One complex gain per bin.
    SfMask,
    /// Direct complex spectrum.
    Mapping,
}

impl InputVariant {
    pub fn label(self) -> &'static str {
        match self {
            InputVariant::IfCorr => "IF-Corr",
            InputVariant::SfRaw => "SF-Raw",
        }
    }
}

impl OutputVariant {
    pub fn label(self) -> &'static str {
        match self {
            OutputVariant::MfFilter => "MF-Filter",
            OutputVariant::SfMask => "SF-Mask",
            OutputVariant::Mapping => "Mapping",
        }
    }
}

/// The four input/output combinations the network supports.
pub const VARIANTS: [(InputVariant, OutputVariant); 4] = [
    (InputVariant::IfCorr, OutputVariant::MfFilter),
    (InputVariant::SfRaw, OutputVariant::MfFilter),
    (InputVariant::SfRaw, OutputVariant::SfMask),
    (InputVariant::SfRaw, OutputVariant::Mapping),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `L`: the filter spans `2L + 1` frames.
    pub half_width: usize,
    /// Embedding channels `C`.
    pub channels: usize,
    /// Number of frequency/time module pairs `B`.
    pub blocks: usize,
    /// ConvFFN hidden width `C_H` (post-gate).
    pub ffn_hidden: usize,
    /// ConvFFN kernel size `K`.
    pub ffn_kernel: usize,
    pub heads: usize,
    pub input: InputVariant,
    pub output: OutputVariant,
    /// Residual scale of both ConvFFN branches.
    pub macaron_scale: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            half_width: 3,
            channels: 96,
            blocks: 6,
            ffn_hidden: 192,
            ffn_kernel: 7,
            heads: 4,
            input: InputVariant::IfCorr,
            output: OutputVariant::MfFilter,
            macaron_scale: 0.5,
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
            stft: StftConfig::default(),
        }
    }

    pub fn small() -> Self {
        Self {
            channels: 64,
            ffn_hidden: 128,
            ffn_kernel: 3,
            ..Self::full()
        }
    }

    /// Desk-scale configuration for smoke tests.
    pub fn tiny() -> Self {
        Self {
            channels: 16,
            blocks: 2,
            ffn_hidden: 32,
            ffn_kernel: 3,
            heads: 2,
            ..Self::full()
        }
    }

    pub fn with_variant(mut self, input: InputVariant, output: OutputVariant) -> Self {
        self.input = input;
        self.output = output;
        self
    }

    pub fn taps(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn input_channels(&self) -> usize {
        match self.input {
            InputVariant::IfCorr => correlation_channels(self.half_width),
            InputVariant::SfRaw => 2,
        }
    }

    pub fn output_channels(&self) -> usize {
        match self.output {
            OutputVariant::MfFilter => 2 * self.taps(),
            OutputVariant::SfMask | OutputVariant::Mapping => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for RoPE", self.head_dim()));
        }
        if self.ffn_kernel % 2 == 0 {
            return bad(format!("ffn_kernel must be odd, got {}", self.ffn_kernel));
        }
        if self.blocks == 0 {
            return bad("blocks must be at least 1".into());
        }
        if self.ffn_hidden == 0 {
            return bad("ffn_hidden must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.beta) || !(self.epsilon > 0.0) {
            return bad(format!("invalid PHAT-β settings beta={} eps={}", self.beta, self.epsilon));
        }
        if !VARIANTS.contains(&(self.input, self.output)) {
            return bad(format!(
                "unsupported variant {} + {}",
                self.input.label(),
                self.output.label()
            ));
        }
        self.stft.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Closed-form trainable parameter count.
    ///
    /// ```text
    /// input:  Cin*4C + 4C            1x1 conv, SwiGLU -> 2C
    ///         2C*C*9 + C             3x3 conv
    ///         2C                     per-bin LN
    /// block:  2 * [C*2C_H*K + 2C_H + C_H*C*K + C]   two ConvFFNs
    ///         3C^2 + 3C + C^2 + C    MHSA (qkv + output projection)
    ///         4 * 2C                 three pre-norms and one output norm
    /// blocks: 2B (frequency + time)
    /// head:   C*Cout + Cout
    /// ```
    pub fn parameter_count(&self) -> usize {
        let c = self.channels;
        let h = self.ffn_hidden;
        let k = self.ffn_kernel;
        let cin = self.input_channels();
        let cout = self.output_channels();
        let input = cin * 4 * c + 4 * c + 2 * c * c * 9 + c + 2 * c;
        let ffn = c * 2 * h * k + 2 * h + h * c * k + c;
        let attn = 4 * c * c + 4 * c;
        let block = 2 * ffn + attn + 4 * 2 * c;
        let head = c * cout + cout;
        input + 2 * self.blocks * block + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::small().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn channel_arithmetic() {
        let cfg = ModelConfig::full();
        assert_eq!(cfg.input_channels(), 98);
        assert_eq!(cfg.output_channels(), 14);
        let raw = cfg.clone().with_variant(InputVariant::SfRaw, OutputVariant::SfMask);
        assert_eq!((raw.input_channels(), raw.output_channels()), (2, 2));
        for l in [0usize, 1, 3, 5] {
            let c = ModelConfig { half_width: l, ..ModelConfig::full() };
            assert_eq!(c.input_channels(), 2 * (2 * l + 1) * (2 * l + 1));
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::tiny();
        c.ffn_kernel = 4;
        assert!(c.validate().is_err());
        let c = ModelConfig { channels: 18, heads: 4, ..ModelConfig::tiny() };
        assert!(c.validate().is_err());
        let c = ModelConfig::tiny().with_variant(InputVariant::IfCorr, OutputVariant::Mapping);
        assert!(c.validate().is_err());
        let c = ModelConfig { blocks: 0, ..ModelConfig::tiny() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn reported_sizes() {
        let full = ModelConfig::full().parameter_count() as f64 / 1e6;
        let small = ModelConfig::small().parameter_count() as f64 / 1e6;
        assert!((8.5..=11.5).contains(&full), "{full}");
        assert!((1.7..=2.5).contains(&small), "{small}");
    }
}
