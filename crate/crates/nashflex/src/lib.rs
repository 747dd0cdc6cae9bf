pub mod cli;
pub mod decompose;
pub mod extend;
pub mod fields;
pub mod frames;
pub mod io;
pub mod iterate;
pub mod mollify;
pub mod stage;
pub mod verify;
