pub mod campaign;
pub mod cli;
pub mod config;
pub mod evaluate;
pub mod images;
pub mod plot;
pub mod train;
