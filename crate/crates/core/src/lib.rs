pub mod ablation;
pub mod autodiff;
pub mod data;
pub mod ensemble;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod program;
pub mod seed;
pub mod train;
pub mod world;
