//! Natural-looking cloud adversarial examples for image classifiers.
//!
//! A compact parameter vector `r = [z, k, t]` drives the whole pipeline: a
//! generator network maps the latent `z` to five gradient lattices, each
//! lattice is rendered as Perlin noise, the octaves are mixed by `k` and
//! scaled by the thickness `t`, and the resulting mask is blended into the
//! image. Differential evolution searches `r` using nothing but the target
//! model's probability outputs.

pub mod attack;
pub mod de;
pub mod harness;
pub mod imaging;
pub mod models;
pub mod perlin;
pub mod pggn;
pub mod tensor;
