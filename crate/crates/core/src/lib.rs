//! Pixel-rendered text representations for multilingual translation.

pub mod analysis;
pub mod error;
pub mod model;
pub mod pixeltok;
pub mod subword;
pub mod textimage;
pub mod trainkit;

pub use error::{Error, Result};
