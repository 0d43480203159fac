pub mod audio;
pub mod bootstrap;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod external;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod multires;
pub mod numerics;
pub mod objective;
pub mod optimizer;
pub mod probe;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
