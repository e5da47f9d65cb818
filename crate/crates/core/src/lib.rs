//! Speech emotion recognition from raw waveforms.
//!
//! The model learns its own front end: parallel 1-D convolutions with
//! several filter lengths read raw samples at multiple temporal
//! resolutions, and their pooled feature maps feed a CNN-LSTM-dense
//! classifier trained end to end with cross-entropy. The crate also carries
//! everything needed to run speaker-independent experiments on top of it:
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`audio`] | WAV I/O, silence trimming, speed perturbation, windowing |
//! | [`corpus`] | Manifests, augmentation bookkeeping, speaker-aware folds, synthetic corpora |
//! | [`tensor`] | Dense `f64` arrays with reverse-mode differentiation |
//! | [`layers`] | Convolutions, pooling, batch norm, LSTM, dense, dropout, losses |
//! | [`model`] | Architecture configuration and assembly, ablation variants |
//! | [`training`] | RMSProp, UAR-driven LR schedule, fold training, repeats |
//! | [`evaluation`] | UAR metric, LOSO harness, ablation and input-length sweeps |
//! | [`gradcheck`] | Finite-difference verification suite over all layers |

pub mod audio;
pub mod corpus;
pub mod evaluation;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;

/// Derive a child RNG seed from a base seed and a path of indices.
///
/// SplitMix64 steps keep streams independent and platform-stable, so a
/// (fold, repeat) run gets the same stream no matter which worker executes
/// it or in which order.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut state = base;
    for &p in path {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x9e3779b97f4a7c15)));
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
