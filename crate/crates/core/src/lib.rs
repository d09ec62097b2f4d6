pub mod analysis;
pub mod dataset;
pub mod grad;
pub mod model;
pub mod runner;
pub mod stats;
pub mod training;
