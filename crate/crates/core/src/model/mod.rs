//! The correlation-to-filter network.
//!
//! ```text
//! features (B,T,F,Cin)
//!   -> 1x1 conv (4C) -> SwiGLU (2C) -> 3x3 conv (C) -> per-bin LN
//!   -> B x [frequency block, time block]        (macaron, RoPE MHSA)
//!   -> 1x1 conv head (2(2L+1) | 2)
//!   -> multi-frame filter / mask / direct spectrum
//! ```

mod checkpoint;
mod config;
pub mod layers;
mod net;
mod params;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{InputVariant, ModelConfig, OutputVariant, VARIANTS};
pub use net::{IfCorrNet, InitOptions, ModelInputs, ModelOutput};
pub use params::{name_hash, Init, ParamStore, INIT_STD};
