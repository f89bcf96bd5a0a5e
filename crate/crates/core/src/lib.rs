pub mod datagen;
pub mod encoders;
pub mod fedruntime;
pub mod harness;
pub mod injection;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod prompt_gen;
pub mod seed;
