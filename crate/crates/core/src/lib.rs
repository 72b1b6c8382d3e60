pub mod error;
pub mod fem;
pub mod hifi;
pub mod par;

pub use error::{Result, SvrbError};
pub mod rb;
pub mod svgd;
pub mod backend;
pub mod adaptive;
pub mod error_lab;
pub mod harness;
