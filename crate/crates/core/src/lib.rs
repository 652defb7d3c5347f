//! Decomposed dynamic radiance fields with channel-streamed feature grids.

pub mod feature_grid;
pub mod grad;
pub mod fields;
pub mod image;
pub mod render;
pub mod train;
pub mod scenes;
pub mod stream_io;
