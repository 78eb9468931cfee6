pub mod connectome;
pub mod error;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod modulation;
pub mod parcel;
pub mod pipeline;
pub mod repr;
pub mod synth;
pub mod wave;

pub use error::{Error, ErrorClass, Result};
