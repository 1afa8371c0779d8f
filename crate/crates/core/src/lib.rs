pub mod tensor;
pub mod warp;
pub mod data;
pub mod models;
pub mod samplers;
pub mod ebm_train;
pub mod pipeline;
pub mod io;
pub mod selftest;
