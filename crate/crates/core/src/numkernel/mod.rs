//! Deterministic dense math in double precision: kernels with hand-written
//! backward passes, a named parameter store with Adam, finite-difference
//! gradient checking and seeded random streams.

pub mod ops;
pub mod params;
pub mod rng;

pub use ops::{
    affine_backward, affine_forward, cosine, cosine_logits, cosine_logits_backward, cosine_softmax,
    add_outer, axpy, dot, gaussian_kl, kl_categorical, kl_from_logits, log_softmax, matvec, matvec_t, norm, normalize,
    normalize_backward, softmax, AffineCache, Matrix, FLOOR,
};
pub use params::{grad_check, AdamConfig, HasParams, ParamStore, Tensor};
pub use rng::{normal, normal_vec, Rng, RngStream};
