//! One random instance per call: run the library and the matching oracle,
//! return the discrepancy.

use nestedmorph::attention::{channel_attention_core, efficient_attention_core};
use nestedmorph::decoder::NestedAttentionFusion;
use nestedmorph::kernels::conv::Conv3dSpec;
use nestedmorph::losses::ncc_loss;
use nestedmorph::metrics::{hd95, sdlogj, ssim, Mask};
use nestedmorph::nn::ParamRegistry;
use nestedmorph::warp::warp_trilinear;
use nestedmorph::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const INSTANCES: u64 = 24;

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt))
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn qkv(r: &mut ChaCha8Rng) -> (usize, usize, usize, [Vec<f64>; 3]) {
    let n = r.gen_range(2..10);
    let heads = r.gen_range(1..3);
    let d = heads * r.gen_range(1..5);
    let m = [(); 3].map(|_| uniform(r, n * d, -2.0, 2.0));
    (n, d, heads, m)
}

pub fn efficient_attention_case(seed: u64) -> f64 {
    let mut r = rng(seed, 1);
    let (n, d, heads, [q, k, v]) = qkv(&mut r);
    let mut t = Tape::new();
    let vars = [&q, &k, &v].map(|m| t.constant(tensor(&[n, d], m.clone())));
    let y = efficient_attention_core(&mut t, vars[0], vars[1], vars[2], heads).unwrap();
    max_scaled_diff(t.value(y).data(), &efficient_attention(&q, &k, &v, n, d, heads))
}

pub fn channel_attention_case(seed: u64) -> f64 {
    let mut r = rng(seed, 2);
    let (n, d, heads, [q, k, v]) = qkv(&mut r);
    let lt = uniform(&mut r, heads, -0.5, 1.0);
    let mut t = Tape::new();
    let vars = [&q, &k, &v].map(|m| t.constant(tensor(&[n, d], m.clone())));
    let tau = t.constant(tensor(&[heads], lt.clone()));
    let y = channel_attention_core(&mut t, vars[0], vars[1], vars[2], tau, heads).unwrap();
    max_scaled_diff(t.value(y).data(), &channel_attention(&q, &k, &v, &lt, n, d, heads))
}

pub fn conv3d_case(seed: u64) -> f64 {
    let mut r = rng(seed, 3);
    let groups = r.gen_range(1..3);
    let ci = groups * r.gen_range(1..3);
    let co = groups * r.gen_range(1..3);
    let k = r.gen_range(1..4);
    let mut spec = Conv3dSpec {
        groups,
        ..Default::default()
    };
    for a in 0..3 {
        spec.stride[a] = r.gen_range(1..3);
        spec.dilation[a] = r.gen_range(1..3);
        spec.pad_lo[a] = r.gen_range(0..3);
        spec.pad_hi[a] = r.gen_range(0..3);
    }
    let span = |a: usize| spec.dilation[a] * (k - 1) + 1;
    let dims: Vec<usize> = (0..3)
        .map(|a| {
            let min = span(a).saturating_sub(spec.pad_lo[a] + spec.pad_hi[a]).max(1);
            r.gen_range(min..min + 4)
        })
        .collect();
    let xs = [ci, dims[0], dims[1], dims[2]];
    let ws = [co, ci / groups, k, k, k];
    let x = uniform(&mut r, xs.iter().product(), -1.0, 1.0);
    let w = uniform(&mut r, ws.iter().product(), -1.0, 1.0);
    let b = uniform(&mut r, co, -1.0, 1.0);
    let mut t = Tape::new();
    let xv = t.constant(tensor(&xs, x.clone()));
    let wv = t.constant(tensor(&ws, w.clone()));
    let bv = t.constant(tensor(&[co], b.clone()));
    let y = t.conv3d(xv, wv, Some(bv), spec).unwrap();
    let (expect, shape) = conv3d(&x, xs, &w, ws, Some(&b), &spec);
    assert_eq!(t.shape(y), shape.as_slice(), "{spec:?}");
    max_scaled_diff(t.value(y).data(), &expect)
}

pub fn nested_fusion_case(seed: u64) -> f64 {
    let mut r = rng(seed, 4);
    let c = r.gen_range(2..5);
    let kernel = r.gen_range(2..4);
    let xs = [c, r.gen_range(2..5), r.gen_range(2..5), r.gen_range(2..5)];
    let mut reg = ParamRegistry::new();
    let fusion = NestedAttentionFusion::new(&mut reg, "fuse", c, kernel);
    // every parameter randomized, including the zero/one initialized ones
    let mut params = reg.initialize::<f64>(seed);
    for (_, v) in params.iter_mut() {
        for x in v.data_mut() {
            *x = r.gen_range(-0.8..0.8);
        }
    }
    let n = xs.iter().product();
    let (x1, x2) = (uniform(&mut r, n, -1.5, 1.5), uniform(&mut r, n, -1.5, 1.5));
    let mut t = Tape::new();
    let bound = params.bind_frozen(&mut t);
    let a = t.constant(tensor(&xs, x1.clone()));
    let b = t.constant(tensor(&xs, x2.clone()));
    let y = fusion.forward(&mut t, &bound, a, b).unwrap();
    max_scaled_diff(t.value(y).data(), &nested_fusion(&params, "fuse", &x1, &x2, xs, kernel))
}

pub fn warp_case(seed: u64) -> f64 {
    let mut r = rng(seed, 5);
    let is = [r.gen_range(1..3), r.gen_range(2..6), r.gen_range(2..6), r.gen_range(2..6)];
    let vol = is[1] * is[2] * is[3];
    let img = uniform(&mut r, is[0] * vol, -1.0, 1.0);
    let field = uniform(&mut r, 3 * vol, -2.5, 2.5);
    let y = warp_trilinear(
        &tensor(&is, img.clone()),
        &tensor(&[3, is[1], is[2], is[3]], field.clone()),
    )
    .unwrap();
    max_scaled_diff(y.data(), &warp(&img, is, &field))
}

pub fn ncc_case(seed: u64) -> f64 {
    let mut r = rng(seed, 6);
    let win = [1, 3, 5][r.gen_range(0..3)];
    let dims = [(); 3].map(|_| r.gen_range(win..win + 4));
    let n = dims.iter().product();
    let f = uniform(&mut r, n, 0.0, 1.0);
    // partly correlated with f so cc spans its range
    let mix = r.gen_range(0.0..1.0);
    let g: Vec<f64> = f.iter().map(|&v| mix * v + (1.0 - mix) * r.gen_range(0.0..1.0)).collect();
    let shape = [1, dims[0], dims[1], dims[2]];
    let mut t = Tape::new();
    let fv = t.constant(tensor(&shape, f.clone()));
    let gv = t.constant(tensor(&shape, g.clone()));
    let l = ncc_loss(&mut t, fv, gv, win, 1e-5).unwrap();
    (t.value(l).item() - super::ncc_loss(&f, &g, dims, win, 1e-5)).abs()
}

pub fn ssim_case(seed: u64) -> f64 {
    let mut r = rng(seed, 7);
    let dims = [(); 3].map(|_| r.gen_range(3..10));
    let n = dims.iter().product();
    let a = uniform(&mut r, n, 0.0, 1.0);
    let noise = r.gen_range(0.0..0.5);
    let b: Vec<f64> = a.iter().map(|&v| v + noise * r.gen_range(-1.0..1.0)).collect();
    let shape = [1, dims[0], dims[1], dims[2]];
    let got = ssim(&tensor(&shape, a.clone()), &tensor(&shape, b.clone())).unwrap();
    (got - super::ssim(&a, &b, dims)).abs()
}

/// Union of a few random boxes.
fn random_mask(r: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<bool> {
    let mut m = vec![false; dims.iter().product()];
    for _ in 0..r.gen_range(1..4) {
        let lo = dims.map(|n| r.gen_range(0..n));
        let hi = [0, 1, 2].map(|a| r.gen_range(lo[a]..dims[a]) + 1);
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    m[(z * dims[1] + y) * dims[2] + x] = true;
                }
            }
        }
    }
    m
}

/// Library and oracle HD95 for one random mask pair.
pub fn hd95_case(seed: u64) -> (f64, f64) {
    let mut r = rng(seed, 8);
    let dims = [(); 3].map(|_| r.gen_range(3..9));
    let (a, b) = (random_mask(&mut r, dims), random_mask(&mut r, dims));
    let got = hd95(
        &Mask::from_bools(dims, a.clone()).unwrap(),
        &Mask::from_bools(dims, b.clone()).unwrap(),
    )
    .unwrap();
    (got, super::hd95(&a, &b, dims))
}

pub fn sdlogj_case(seed: u64) -> f64 {
    let mut r = rng(seed, 9);
    let dims = [(); 3].map(|_| r.gen_range(3..7));
    let n: usize = dims.iter().product();
    let amp = r.gen_range(0.05..0.4);
    let field = uniform(&mut r, 3 * n, -amp, amp);
    let got = sdlogj(&tensor(&[3, dims[0], dims[1], dims[2]], field.clone())).unwrap();
    (got.sdlogj - super::sdlogj(&field, dims)).abs()
}

/// Worst discrepancy of every oracle family over `INSTANCES` seeds, HD95
/// reported as the count of inexact instances.
pub fn all_families() -> Vec<(&'static str, f64)> {
    let worst = |f: fn(u64) -> f64| (0..INSTANCES).map(f).fold(0.0, f64::max);
    let hd_mismatches = (0..INSTANCES)
        .filter(|&s| {
            let (a, b) = hd95_case(s);
            a != b
        })
        .count();
    vec![
        ("efficient attention", worst(efficient_attention_case)),
        ("channel attention", worst(channel_attention_case)),
        ("nested fusion", worst(nested_fusion_case)),
        ("conv3d", worst(conv3d_case)),
        ("trilinear warp", worst(warp_case)),
        ("windowed NCC", worst(ncc_case)),
        ("SSIM", worst(ssim_case)),
        ("HD95 (inexact instances)", hd_mismatches as f64),
        ("SDlogJ", worst(sdlogj_case)),
    ]
}
