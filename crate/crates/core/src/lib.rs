pub mod autodiff;
pub mod data;
pub mod fabric;
pub mod nn;
pub mod protocol;
pub mod verify;
