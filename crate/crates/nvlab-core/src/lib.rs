//! Simulation and analysis toolkit for a fiber-coupled NV-diamond magnetometer.
//!
//! The crate models the full detection chain of a CW ODMR magnetometer:
//! spin resonances and lineshapes ([`nv`]), microwave and coil hardware
//! ([`hardware`]), the frequency-modulated detection path with logarithmic
//! balanced amplification and lock-in demodulation ([`signal`]), the
//! measurement pipeline from demodulated spectra to field sensitivity and
//! Allan deviation ([`analysis`]), and a closed-loop resonance tracker
//! ([`tracker`]). [`config`], [`experiments`] and [`io`] build reproducible
//! file-based experiment runs on top of the library API.
//!
//! Everything is deterministic: noise comes from counter-based seeded
//! streams, and identical configurations produce bit-identical outputs.

pub mod analysis;
pub mod config;
pub mod experiments;
pub mod fitting;
pub mod hardware;
pub mod io;
pub mod nv;
pub mod signal;
pub mod tracker;

mod error;
pub use error::{Error, Result};
