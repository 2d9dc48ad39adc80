//! A miniature optimizing compiler whose loop-unroll and inlining passes can
//! delegate profitability decisions to models served by a separate process.

pub mod ir;
pub mod cost;
pub mod features;
pub mod passes;
pub mod mlp;
pub mod mlif;
pub mod server;
pub mod model;
pub mod tuner;
pub mod trainer;
pub mod suite;
pub mod report;
