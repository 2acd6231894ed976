//! Stream assembly, parameter accounting, score tables and checkpoints.

mod checkpoint;
mod config;
mod model;
mod scores;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    GraphSpec, LayerSpec, NetworkConfig, SpatialKind, Stream, TemporalKind, DESK_BASE_WIDTH, PLAIN_LAYERS, STANDARD_STRIDES, STANDARD_WIDTHS,
};
pub use model::{count_params, unit_param_table, Layer, Model, Network, ParamReport, ParamRow, SpatialUnit, TemporalUnit};
pub use scores::{argmax, fuse_scores, Fused, FusedRow, ScoreRow, ScoreTable, SCORES_HEADER};
