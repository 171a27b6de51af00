//! GRU encoder-decoder with query attention and per-country heads.

mod checkpoint;
mod layers;
mod model;
mod params;

pub use checkpoint::{Checkpoint, CountryState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{
    attend, attention, decode, decode_one, encode_ili, encode_queries, fuse, gru_cell, gru_fold,
    gru_step, mlp, AttentionVars, GruVars, MlpVars, Sampling,
};
pub use model::{
    batch_gradients, batch_loss, forecast, forecast_batch, forward, inference_mse,
    reached_gradients, Batch, ForecastResult, Forward,
};
pub use params::{
    AttentionParams, Bound, CellKind, GruParams, MlpParams, ModelConfig, ModelParams, ParamStore,
    QueryMode,
};
