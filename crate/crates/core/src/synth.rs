//! Synthetic registration pairs: an ellipsoid phantom, a smooth random
//! displacement, and a monotone intensity remap of the warped phantom.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::{gaussian_taps, jacobian_determinants};
use crate::tensor::{Scalar, Tensor};
use crate::warp::warp_trilinear;

/// Exponent of the moving-image intensity remap `v ↦ v^γ`.
pub const INTENSITY_GAMMA: f64 = 1.1;
const PHANTOM_BLOBS: usize = 8;
/// Relative amplitude of the interior sinusoidal texture.
const PHANTOM_TEXTURE: f64 = 0.3;
pub const DEFAULT_SMOOTHNESS: f64 = 4.0;
const MAX_HALVINGS: usize = 8;

#[derive(Clone, Debug)]
pub struct SynthPair<T> {
    pub moving: Tensor<T>,
    pub fixed: Tensor<T>,
    /// Displacement that produced `moving` from `fixed`.
    pub field: Tensor<T>,
    /// Amplitude actually used (halved on folding).
    pub amplitude: f64,
}

/// Soft-edged ellipsoids over a textured head-like ellipsoid, values in
/// `[0, 1]`.
pub fn phantom(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let ext = dims.map(|n| n as f64);
    let centre = ext.map(|e| (e - 1.0) / 2.0);
    struct Blob {
        c: [f64; 3],
        r: [f64; 3],
        level: f64,
    }
    let mut blobs = vec![Blob {
        c: [0, 1, 2].map(|a| centre[a] + rng.gen_range(-0.03..0.03) * ext[a]),
        r: [0, 1, 2].map(|a| rng.gen_range(0.36..0.42) * ext[a]),
        level: 0.5,
    }];
    for _ in 0..PHANTOM_BLOBS {
        blobs.push(Blob {
            c: [0, 1, 2].map(|a| centre[a] + rng.gen_range(-0.22..0.22) * ext[a]),
            r: [0, 1, 2].map(|a| rng.gen_range(0.05..0.12) * ext[a]),
            level: rng.gen_range(-0.35..0.4),
        });
    }
    let freq: [[f64; 3]; 2] = [0, 1].map(|_| [0, 1, 2].map(|_| rng.gen_range(0.8..1.5)));
    let phase: [f64; 2] = [0, 1].map(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let edge = 0.05;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let mut v = 0.0;
                for b in &blobs {
                    let r = (0..3).map(|a| ((p[a] - b.c[a]) / b.r[a]).powi(2)).sum::<f64>().sqrt();
                    v += b.level / (1.0 + ((r - 1.0) / edge).exp());
                }
                if v > 0.05 {
                    let tex: f64 = (0..2)
                        .map(|k| (0..3).map(|a| freq[k][a] * p[a]).sum::<f64>() + phase[k])
                        .map(f64::sin)
                        .sum();
                    v += PHANTOM_TEXTURE * tex * v.min(1.0);
                }
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Gaussian blur with border clamping along each axis of `[D, H, W]`.
fn blur(x: &mut [f64], dims: [usize; 3], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as usize;
    let taps = gaussian_taps(2 * radius + 1, sigma);
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis];
        let st = strides[axis];
        let src = x.to_vec();
        for (i, out) in x.iter_mut().enumerate() {
            let pos = (i / st) % n;
            let base = i - pos * st;
            let mut acc = 0.0;
            for (t, &wt) in taps.iter().enumerate() {
                let q = (pos + t).saturating_sub(radius).min(n - 1);
                acc += wt * src[base + q * st];
            }
            *out = acc;
        }
    }
}

/// Gaussian-smoothed white noise, rescaled so the largest component
/// magnitude equals `amplitude` voxels. Noise is drawn on a grid padded by
/// the filter radius and cropped, so the field statistics do not depend on
/// the distance to the border.
pub fn random_field(rng: &mut ChaCha8Rng, dims: [usize; 3], amplitude: f64, smoothness: f64) -> Vec<f64> {
    let pad = if smoothness > 0.0 { (3.0 * smoothness).ceil() as usize } else { 0 };
    let big = dims.map(|n| n + 2 * pad);
    let big_vol = big.iter().product::<usize>();
    let vol = dims.iter().product::<usize>();
    let mut u = Vec::with_capacity(3 * vol);
    for _ in 0..3 {
        let mut noise: Vec<f64> = (0..big_vol).map(|_| rng.sample(StandardNormal)).collect();
        if smoothness > 0.0 {
            blur(&mut noise, big, smoothness);
        }
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let row = ((z + pad) * big[1] + y + pad) * big[2] + pad;
                u.extend_from_slice(&noise[row..row + dims[2]]);
            }
        }
    }
    let peak = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let k = if peak > 0.0 { amplitude / peak } else { 0.0 };
    u.iter_mut().for_each(|v| *v *= k);
    u
}

/// Deterministic synthetic pair for `seed`. If the drawn field folds, its
/// amplitude is halved (with a warning) until it does not.
pub fn synth_pair<T: Scalar>(seed: u64, dims: [usize; 3], amplitude: f64, smoothness: f64) -> Result<SynthPair<T>> {
    if dims.contains(&0) || !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::arg(
            "synth_pair",
            format!("need positive extents and finite amplitude >= 0, got {dims:?}, {amplitude}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fixed = phantom(&mut rng, dims);
    let noise_rng = rng.clone();
    let shape = vec![1, dims[0], dims[1], dims[2]];
    let field_shape = vec![3, dims[0], dims[1], dims[2]];

    let mut amp = amplitude;
    let mut field = None;
    for _ in 0..=MAX_HALVINGS {
        let u = random_field(&mut noise_rng.clone(), dims, amp, smoothness);
        let t = Tensor::<f64>::new(field_shape.clone(), u)?;
        let folds = dims.iter().all(|&n| n >= 3)
            && jacobian_determinants(&t)?.iter().any(|&d| d <= 0.0);
        if !folds {
            field = Some(t);
            break;
        }
        log::warn!("synth_pair: amplitude {amp} folds, halving");
        amp /= 2.0;
    }
    let field = field.ok_or_else(|| Error::NonFinite("synth_pair could not avoid folding".into()))?;
    let fixed = Tensor::new(shape, fixed)?;
    let moving = warp_trilinear(&fixed, &field)?.map(|v| v.max(0.0).powf(INTENSITY_GAMMA));
    Ok(SynthPair {
        moving: moving.cast(),
        fixed: fixed.cast(),
        field: field.cast(),
        amplitude: amp,
    })
}
