pub mod adapters;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod graph;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod prompt;
pub mod select;
pub mod tensor;
pub mod text;
pub mod train;
