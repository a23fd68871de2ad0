//! Toy segmentation network built from the dual-scan blocks, synthetic
//! ring data, training, evaluation and reporting.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod net;
pub mod optim;
pub mod pgm;
pub mod report;
pub mod synth;
pub mod train;
