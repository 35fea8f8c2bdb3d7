pub mod cells;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod reference;
pub mod renet;
pub mod search;

pub use error::{Error, Result};
