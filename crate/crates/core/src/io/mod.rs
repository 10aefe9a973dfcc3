pub mod container;
pub mod wav;

pub use container::Container;
pub use wav::{load_waveform, resample_linear, write_waveform, Waveform};
