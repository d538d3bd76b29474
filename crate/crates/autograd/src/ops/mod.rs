mod conv;
mod elementwise;
mod linalg;
mod loss;
mod nn;
mod reduce;
mod roi;

pub mod roi_helpers {
    pub use super::roi::{bilinear_taps, bin_center};
}

pub use conv::Conv2d;
pub use roi::RoiBox;
