//! Seeded synthetic data: a Markov character corpus and a spectral
//! regression target with separable smooth and high-frequency parts.

mod corpus;
mod spectral;

pub use corpus::{CharCorpus, CorpusSpec, Split, TokenBatch};
pub use spectral::{
    gen_spectral_batch, mixup_blend, RegressionBatch, Sinusoid, SpectralDiagnostics, SpectralSpec, SpectralTarget,
};
