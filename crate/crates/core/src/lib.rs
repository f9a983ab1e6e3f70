//! Preference fine-tuning for masked discrete diffusion models.
//!
//! The modules build bottom-up: [`ctmc`] holds the masking chain, rates and
//! sampler; [`net`] the denoiser network and optimizer; [`losses`] the
//! pretraining and preference objectives; [`oracle`] independent checks;
//! [`experiment`] the odd-integer preference experiment.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ctmc;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod net;
pub mod oracle;

pub use error::{Error, Result};
