//! Image and weight-file formats.

pub mod ppm;
pub mod weights;

pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm, ImageRgb};
pub use weights::{
    decode_weights, encode_weights, load_generator, load_weights, save_generator, save_weights,
};
