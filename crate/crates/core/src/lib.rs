//! Multi-modal few-shot object detection.
//!
//! A siamese two-stage detector is conditioned on class prototypes built from
//! a handful of support crops. Each prototype fuses the averaged support
//! features with a semantic vector obtained by feeding generated soft prompts
//! through a frozen text encoder. A teacher generator also sees the class name;
//! a student generator, which sees only the visual prototype, is distilled
//! from it and used for unnamed novel classes.
//!
//! Model code is generic over [`autograd::Scalar`]; training runs in `f32`,
//! gradient checks in `f64`.

pub mod config;
pub mod dataspec;
pub mod detector;
pub mod encoders;
pub mod evalkit;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod mpg;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
pub use mmfsod_autograd as autograd;
pub use model::{Model, Model32, Model64};
