//! File formats, checkpoints, threaded training and the command line
//! around `torpido_core`.

pub mod checkpoint;
pub mod cli;
pub mod instance_io;
pub mod parallel;
pub mod records;
