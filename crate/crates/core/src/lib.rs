//! Frequency-aware RGB-thermal feature alignment and fusion.
//!
//! The pipeline extracts a feature pyramid from each modality, aligns their
//! local spectra patch by patch, derives a six-channel guidance map from the
//! spectral disagreement, and uses it to steer a deformable resampling step
//! before fusing the two streams.

pub mod backbone;
pub mod config;
pub mod error;
pub mod eval;
pub mod fgsa;
pub mod gradcheck;
pub mod io;
pub mod lfca;
pub mod lfgm;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod selftest;
pub mod spectral;
pub mod synth;
pub mod tensor;

pub use config::Config;
pub use error::{Error, Result};
pub use eval::{BBox, Detection, EvalReport, GroundTruth};
pub use gradcheck::{GradOp, GradReport};
pub use lfgm::{GuidanceMap, GuidanceVector};
pub use params::{ParamStore, Tensor};
pub use pipeline::{FusionResult, ModelParams};
pub use spectral::{LocalSpectrum, PatchGrid};
pub use synth::{SynthConfig, SynthPair, Texture};
pub use tensor::{ComplexGrid, ConvWeights, FeatureMap};
