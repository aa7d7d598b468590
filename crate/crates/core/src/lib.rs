pub mod density;
pub mod error;
pub mod fft;
pub mod cli;
pub mod filters;
pub mod geometry;
pub mod gridding;
pub mod io;
pub mod operators;
pub mod oracle;
pub mod phantom;
pub mod pipeline;
pub mod solvers;
