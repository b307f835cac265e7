//! Two-phase prediction of progression from mild cognitive impairment to
//! Alzheimer's disease.
//!
//! Phase one ([`stem`], [`vit`]) turns each visit image into 256 features
//! with a convolutional stem and a frozen vision transformer trained only
//! through low-rank adapters. Phase two ([`recurrent`]) reads four visits
//! of image features and biomarkers with a bidirectional LSTM trained under
//! focal loss. [`data`] holds the synthetic cohort and sequence assembly,
//! [`train`] the optimizer, cross-validation and checkpoints.
//!
//! ```
//! use mciprog::recurrent::{BiLstmConfig, Predictor};
//! use mciprog::Tensor;
//! use rand::SeedableRng;
//!
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
//! let model = Predictor::new(&BiLstmConfig::desk(), &mut rng)?;
//! let seq = Tensor::randn(&[4, 273], 1.0, &mut rng);
//! let logit = model.predict(&[&seq])?.item();
//! assert!(logit.is_finite());
//! # Ok::<(), mciprog::Error>(())
//! ```

pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod recurrent;
pub mod stem;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

// The book's code listings, compiled and run by `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/extractor.md")]
    mod extractor {}
    #[doc = include_str!("../../../book/src/sequences.md")]
    mod sequences {}
    #[doc = include_str!("../../../book/src/predictor.md")]
    mod predictor {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/checkpoint-format.md")]
    mod checkpoint_format {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
