//! DCA-CRN: convolutional aggregation over dynamic connectivity, optional
//! per-channel attention, and a recurrent temporal head.

mod attention;
mod config;
mod forward;
mod params;

pub use attention::{color, heatmap_svg, matrix_csv, read_matrix_csv, AttentionScores};
pub use config::{DkMode, ModelConfig};
pub use forward::{
    con1_forward, con2_forward, con3_forward, dca_forward, model_forward, model_loss, stack_batch,
    temporal_head_forward, ConvOutput, DcaOutput, ForwardOutput, HeadOutput, ShapeTrace, LAYER_NORM_EPS,
};
pub use params::{BoundParams, ConvVars, DcaVars, LinearVars, ModelParams, ParameterCounts};
