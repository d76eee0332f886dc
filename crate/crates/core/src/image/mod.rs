//! Luminance planes, netpbm I/O and directory datasets.

mod dataset;
mod filter;
mod plane;
mod pnm;

pub use dataset::{load_dataset, Dataset};
pub use filter::blur_replicate;
pub(crate) use filter::separable_replicate;
pub use plane::{rgb_to_luma, ImagePlane};
pub use pnm::{read_pgm, read_pnm, read_ppm, write_pgm, Pnm};
