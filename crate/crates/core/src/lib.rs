pub mod analysis;
pub mod augmentation;
pub mod autodiff;
pub mod backbones;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod textprep;
pub mod tracking;
pub mod training;

pub use error::{Error, ErrorKind, Result};

/// Lowercase hex SHA-256 of `bytes`.
pub fn digest_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
