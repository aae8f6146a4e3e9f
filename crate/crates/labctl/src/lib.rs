pub mod acceptance;
pub mod cli;
