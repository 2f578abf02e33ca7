pub mod audio;
pub mod fixtures;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod syntax;
pub mod text;
pub mod train;
