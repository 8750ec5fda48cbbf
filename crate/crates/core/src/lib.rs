pub mod data;
pub mod engine;
pub mod evaluate;
pub mod models;
pub mod numerics;
pub mod popularity;
