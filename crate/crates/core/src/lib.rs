pub mod analysis;
pub mod datagen;
pub mod jsonfmt;
pub mod machines;
pub mod model;
pub mod netcore;
pub mod rng;
pub mod trainer;
