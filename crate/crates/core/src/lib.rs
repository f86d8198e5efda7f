pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod codebook;
pub mod infer;
pub mod ndiff;
pub mod optim;
pub mod ot;
pub mod reflectgen;
pub mod sampling;
pub mod tasks;
pub mod train;
pub mod vocab;
