//! Acoustic weather classification trained from coarse hourly gridded labels.
//!
//! Pipeline: PCM-16 recordings are cut into 10-second clips ([`audio_io`]),
//! turned into log-mel spectrograms ([`features`]), aligned to hourly grid
//! cells ([`weather`]), joined into site-exclusive splits ([`datasets`]) and
//! used to train a small CNN ([`nn`]) that is scored against threshold
//! baselines ([`eval`]). [`attenuation`] holds the atmospheric absorption
//! model and [`synth`] generates corpora with known clip-level truth.

pub mod attenuation;
pub mod audio_io;
pub mod datasets;
pub mod eval;
pub mod exec;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod time;
pub mod weather;

pub use exec::Exec;
pub use time::Timestamp;
