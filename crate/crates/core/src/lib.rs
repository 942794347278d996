pub mod audience_profile;
pub mod error;
pub mod geo_grid;
pub mod lift_engine;
pub mod location_graph;
pub mod matching;
pub mod quality;
pub mod synthgen;
pub mod visit_engine;

pub use error::{Error, Result};
