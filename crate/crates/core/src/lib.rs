pub mod analysis;
pub mod envs;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod lapg;
pub mod params;
pub mod policy;
pub mod seed;
pub mod space;
pub mod transport;

pub use error::{Error, Result};
pub use params::ParamVector;
