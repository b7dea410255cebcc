pub mod adapter;
pub mod bench;
pub mod data;
pub mod error;
pub mod image;
pub mod model;
pub mod params;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;
pub mod vq;

pub use error::{Error, Result};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use task::TaskType;
pub use tensor::{Graph, Tensor, Var};
