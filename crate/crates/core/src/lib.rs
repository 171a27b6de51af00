//! Multi-country influenza forecasting.
//!
//! Weekly ILI rates are split by STL into a seasonal part, extended
//! periodically into the future, and a deseasonalized part forecast by a GRU
//! encoder-decoder that attends over encoded search-query series. One model
//! can be trained jointly over several countries with shared recurrent
//! weights, country-specific attention and output heads, and a learned
//! country embedding as the initial encoder state.

pub mod datahub;
pub mod decompose;
pub mod error;
pub mod evalbench;
pub mod fluenet;
pub mod numkit;
pub mod querysel;
pub mod trainer;

pub use error::{Error, Result};
