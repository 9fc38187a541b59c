//! Deep-learning operator set and the training stages, with data-parallel
//! and spatially parallel execution plus the pipeline schedule simulator.

pub mod data;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod pipeline;

pub use data::{read_dataset, synthetic_batch, write_dataset};
pub use layers::{
    conv1d_backward, conv1d_forward, dense_backward, dense_forward, flatten_forward,
    max_pool1d_backward, max_pool1d_forward, relu_backward, relu_forward, softmax_xent, unflatten,
};
pub use model::{
    backward_pass, forward_loss, forward_pass, reference_cnn4, sgd_step, Batch, LayerGrads,
    LayerSpec, ModelGrads, ModelSpec, SolverConfig, SolverMode, CNN4_CHANNELS, CNN4_CLASSES,
    CNN4_LENGTH,
};
pub use parallel::{
    data_parallel_step, distributed_loss, spatial_conv_forward, spatial_conv_with_halo, DistBatch,
};
pub use pipeline::{pipeline_schedule, Activity, PipelineSchedule, SchedulePolicy};
