pub mod cells;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod network;
pub mod numerics;
pub mod training;
