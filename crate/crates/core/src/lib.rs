//! Pairwise-sign image watermarking.
//!
//! A user's public key is an n-bit string; the private key is a list of
//! index pairs. Bit `j` is carried by the order of the two values at pair
//! `j`: `value[a] >= value[b]` reads as 0, otherwise 1. Embedding optimizes
//! the image until every pair is ordered with a margin, in the pixel domain
//! and optionally in translation- and rotation-invariant spectral domains.

pub mod attacks;
pub mod bench;
pub mod certify;
pub mod embedding;
pub mod error;
pub mod extraction;
pub mod io;
pub mod keygen;
pub mod model;
pub mod optim;
pub mod statistics;
pub mod transforms;

pub use error::{Error, Result};
pub use model::{BitString, DetectionPolicy, Domain, ImageBuffer, IndexPair, Registry, SecretKey, UserRecord};
