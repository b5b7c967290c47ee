//! Graph metric network over score coordinates: vertex construction, learned
//! edges from absolute node differences, graph convolution over `{I, Ã}` and
//! per-query classification.

mod net;
mod ops;

pub use net::{
    metric_forward, metric_loss, GnnLayer, GnnLayerGrads, MetricGrads, MetricNet, MetricNetConfig,
};
pub use ops::{build_vertices, edge_block, graph_conv, Adjacency, VertexMatrix};
