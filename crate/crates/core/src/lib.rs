//! Aorta segmentation with a dilated fully-convolutional network.
//!
//! The crate covers the whole path from synthetic data to evaluation:
//!
//! * [`tensor`]: dense tensors and the forward/backward kernels the network needs
//!   (dilated valid convolution, batch normalization, ReLU, channel softmax, dropout, padding).
//! * [`net`]: the ten-layer dilated network, receptive-field and parameter accounting,
//!   and the binary checkpoint format.
//! * [`train`]: soft Dice loss, Adam, tri-planar sub-image sampling and the training loop.
//! * [`pipeline`]: volumetric segmentation (normalize, resample, per-plane inference,
//!   probability fusion, argmax, largest-component filtering).
//! * [`metrics`]: Dice, average symmetric surface distance and reports.
//! * [`phantom`]: deterministic "candy-cane" aorta phantoms with exact labels.
//! * [`io`]: MetaImage volume files and run configuration.

pub mod error;
pub mod io;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod pipeline;
pub mod study;
pub mod tensor;
pub mod threads;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use net::{Checkpoint, Network, NetworkSpec};
pub use tensor::{Scalar, Tensor};
pub use volume::{IntensityUnit, LabelVolume, Plane, ProbabilityVolume, Volume};
