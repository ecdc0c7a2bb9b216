pub mod attack;
pub mod cli;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod peft;
pub mod tasks;
pub mod tensor;
pub mod train;
