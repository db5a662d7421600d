//! Fixtures shared by the benchmarks.

use nestedmorph::synth::{synth_pair, DEFAULT_SMOOTHNESS};
use nestedmorph::{ModelConfig, Pair, Scalar, Tensor};

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn noise<T: Scalar>(shape: &[usize], salt: u64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |i| {
        let x = (i as u64 ^ salt).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        T::lit(((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
    })
}

/// Synthetic registration pair of extent `n` per axis.
pub fn pair<T: Scalar>(n: usize, seed: u64) -> Pair<T> {
    let p = synth_pair::<T>(seed, [n; 3], 2.0, DEFAULT_SMOOTHNESS).expect("synthetic pair");
    Pair::new(p.moving, p.fixed).expect("matching shapes")
}

/// Default configuration with stride-2 stages, so 16³ inputs are valid.
pub fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.stage_strides = vec![2, 2, 2, 2];
    cfg
}
