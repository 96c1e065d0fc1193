//! Token encoders (string to `R^D`) and context encoders (sequence of token
//! encodings to `R^H`).

mod cache;
mod context;
mod token;

pub use cache::EncodingCache;
pub use context::{positional_encoding, ContextEncoder};
pub use token::{annotate, TokenArtifacts, TokenEncoder, CHAR_MIN_LEN, CHAR_MAX_LEN};

use ncc_tensor::{ParamId, ParamStore, Scalar, Tensor};
use rand::Rng;

use crate::{Error, Result};

pub(crate) fn uniform<S: Scalar>(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Tensor<S> {
    let data = (0..rows * cols)
        .map(|_| S::from_f64(rng.gen_range(-limit..=limit)))
        .collect();
    Tensor::new(rows, cols, data).expect("length matches shape")
}

/// Glorot-uniform weight matrix.
pub(crate) fn glorot<S: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<S> {
    uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

pub(crate) fn lookup<S: Scalar>(store: &ParamStore<S>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
}
