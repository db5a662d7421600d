use nestedmorph::attention::{channel_attention_core, efficient_attention_core};
use nestedmorph::io::{decode_volume, encode_volume};
use nestedmorph::kernels::conv::Conv3dSpec;
use nestedmorph::losses::{composite_loss_value, ncc_loss, LossConfig};
use nestedmorph::metrics::{hd95, sdlogj, ssim, Mask};
use nestedmorph::warp::{identity_field, warp_trilinear};
use nestedmorph::{ModelConfig, Tape, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn ea(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let [q, k, v] = [q, k, v].map(|m| tape.constant(t(&[n, d], m.to_vec())));
    let y = efficient_attention_core(&mut tape, q, k, v, 1).unwrap();
    tape.value(y).data().to_vec()
}

fn column_range(v: &[f64], n: usize, d: usize, j: usize) -> (f64, f64) {
    (0..n).map(|i| v[i * d + j]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

/// `[n, d]` token matrices with `n` in 2..8 and `d` in 1..5.
fn tokens() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..8, 1usize..5).prop_flat_map(|(n, d)| {
        let m = || vec(-3.0f64..3.0, n * d);
        (Just(n), Just(d), m(), m(), m())
    })
}

fn volume(max: usize) -> impl Strategy<Value = ([usize; 3], Vec<f64>)> {
    (3usize..max, 3usize..max, 3usize..max)
        .prop_flat_map(|(d, h, w)| (Just([d, h, w]), vec(0.0f64..1.0, d * h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn efficient_attention_is_permutation_equivariant((n, d, q, k, v) in tokens(), shift in 1usize..7) {
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let permute = |m: &[f64]| perm.iter().flat_map(|&i| m[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>();
        let y = ea(&q, &k, &v, n, d);
        let yp = ea(&permute(&q), &permute(&k), &permute(&v), n, d);
        for (a, b) in permute(&y).iter().zip(&yp) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_outputs_stay_within_value_range((n, d, q, k, v) in tokens(), log_tau in -1.0f64..1.0) {
        let y = ea(&q, &k, &v, n, d);
        for j in 0..d {
            let (lo, hi) = column_range(&v, n, d, j);
            for i in 0..n {
                prop_assert!(y[i * d + j] >= lo - 1e-12 && y[i * d + j] <= hi + 1e-12);
            }
        }
        let mut tape = Tape::new();
        let [qv, kv, vv] = [&q, &k, &v].map(|m| tape.constant(t(&[n, d], m.to_vec())));
        let tau = tape.constant(t(&[1], vec![log_tau]));
        let c = channel_attention_core(&mut tape, qv, kv, vv, tau, 1).unwrap();
        let c = tape.value(c).data();
        for i in 0..n {
            let row = &v[i * d..(i + 1) * d];
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for j in 0..d {
                prop_assert!(c[i * d + j] >= lo - 1e-12 && c[i * d + j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn conv3d_is_linear_in_its_input(
        x in vec(-1.0f64..1.0, 2 * 27),
        y in vec(-1.0f64..1.0, 2 * 27),
        w in vec(-1.0f64..1.0, 3 * 2 * 8),
        a in -2.0f64..2.0,
    ) {
        let spec = Conv3dSpec::same(2, 1, 1);
        let conv = |inp: Vec<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(t(&[2, 3, 3, 3], inp));
            let wv = tape.constant(t(&[3, 2, 2, 2, 2], w.clone()));
            let out = tape.conv3d(xv, wv, None, spec).unwrap();
            tape.value(out).data().to_vec()
        };
        let mixed = conv(x.iter().zip(&y).map(|(p, q)| a * p + q).collect());
        let (cx, cy) = (conv(x.clone()), conv(y.clone()));
        prop_assert_eq!(mixed.len(), 3 * 27);
        for i in 0..mixed.len() {
            prop_assert!((mixed[i] - (a * cx[i] + cy[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn warping_a_constant_volume_leaves_it_constant(
        c in -5.0f64..5.0,
        field in vec(-4.0f64..4.0, 3 * 4 * 3 * 5),
    ) {
        let img = Tensor::full(vec![1, 4, 3, 5], c);
        let out = warp_trilinear(&img, &t(&[3, 4, 3, 5], field)).unwrap();
        for v in out.data() {
            prop_assert!((v - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }

    #[test]
    fn integer_shift_moves_interior_voxels(
        img in vec(-1.0f64..1.0, 6 * 6 * 6),
        dz in -2i32..3, dy in -2i32..3, dx in -2i32..3,
    ) {
        let n = 6usize;
        let vol = n * n * n;
        let mut field = vec![0.0; 3 * vol];
        for (c, s) in [dz, dy, dx].into_iter().enumerate() {
            field[c * vol..(c + 1) * vol].fill(s as f64);
        }
        let out = warp_trilinear(&t(&[1, 6, 6, 6], img.clone()), &t(&[3, 6, 6, 6], field)).unwrap();
        for z in 2..4 {
            for y in 2..4 {
                for x in 2..4 {
                    let src = (((z as i32 + dz) as usize * n) + (y as i32 + dy) as usize) * n + (x as i32 + dx) as usize;
                    prop_assert_eq!(out.data()[(z * n + y) * n + x], img[src]);
                }
            }
        }
    }

    #[test]
    fn zero_field_warp_is_bit_exact((dims, data) in volume(7)) {
        let img = t(&[1, dims[0], dims[1], dims[2]], data);
        prop_assert!(warp_trilinear(&img, &identity_field(dims)).unwrap().bit_eq(&img));
    }

    #[test]
    fn ncc_ignores_positive_affine_intensity_changes(
        (dims, f) in volume(6),
        noise in vec(0.0f64..1.0, 216),
        gain in 0.2f64..5.0,
        offset in -3.0f64..3.0,
    ) {
        let n: usize = dims.iter().product();
        let g: Vec<f64> = f.iter().zip(&noise[..n]).map(|(a, b)| 0.7 * a + 0.3 * b).collect();
        let shape = [1, dims[0], dims[1], dims[2]];
        let loss = |g: Vec<f64>| {
            let mut tape = Tape::new();
            let fv = tape.constant(t(&shape, f.clone()));
            let gv = tape.constant(t(&shape, g));
            let l = ncc_loss(&mut tape, fv, gv, 3, 1e-14).unwrap();
            tape.value(l).item()
        };
        let base = loss(g.clone());
        let scaled = loss(g.iter().map(|v| gain * v + offset).collect());
        prop_assert!((0.0..=1.0 + 1e-9).contains(&base));
        prop_assert!((base - scaled).abs() < 1e-6, "{} vs {}", base, scaled);
    }

    #[test]
    fn self_comparison_has_zero_loss((dims, f) in volume(7)) {
        let shape = vec![1, dims[0], dims[1], dims[2]];
        let v = t(&shape, f);
        let cfg = LossConfig { ncc_window: 3, ..Default::default() };
        let (total, sim, smooth) = composite_loss_value(&v, &v, &identity_field(dims), &cfg).unwrap();
        prop_assert_eq!((total, sim, smooth), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_itself((dims, a) in volume(9), noise in vec(-0.3f64..0.3, 512)) {
        let n: usize = dims.iter().product();
        let b: Vec<f64> = a.iter().zip(&noise[..n]).map(|(x, e)| x + e).collect();
        let shape = [1, dims[0], dims[1], dims[2]];
        let (ta, tb) = (t(&shape, a), t(&shape, b));
        let ab = ssim(&ta, &tb).unwrap();
        prop_assert!((ab - ssim(&tb, &ta).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-9);
        prop_assert!((ssim(&ta, &ta).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hd95_is_a_symmetric_nonnegative_distance(
        a in vec(any::<bool>(), 125),
        b in vec(any::<bool>(), 125),
    ) {
        prop_assume!(a.iter().any(|&x| x) && b.iter().any(|&x| x));
        let ma = Mask::from_bools([5, 5, 5], a).unwrap();
        let mb = Mask::from_bools([5, 5, 5], b).unwrap();
        let d = hd95(&ma, &mb).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, hd95(&mb, &ma).unwrap());
        prop_assert_eq!(hd95(&ma, &ma).unwrap(), 0.0);
    }

    #[test]
    fn affine_fields_have_zero_sdlogj(m in vec(-0.2f64..0.2, 9), b in vec(-2.0f64..2.0, 3)) {
        let dims = [5usize, 4, 6];
        let vol = dims.iter().product::<usize>();
        let mut field = vec![0.0; 3 * vol];
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let v = (z * dims[1] + y) * dims[2] + x;
                    for c in 0..3 {
                        field[c * vol + v] = m[3 * c] * z as f64 + m[3 * c + 1] * y as f64 + m[3 * c + 2] * x as f64 + b[c];
                    }
                }
            }
        }
        let stats = sdlogj(&t(&[3, dims[0], dims[1], dims[2]], field)).unwrap();
        prop_assert!(stats.sdlogj < 1e-9, "{}", stats.sdlogj);
    }

    #[test]
    fn volumes_round_trip_bit_exactly(data in vec(any::<f64>(), 24), small in vec(any::<f32>(), 24)) {
        let v = t(&[2, 3, 2, 2], data);
        let back = decode_volume(&encode_volume(&v).unwrap()).unwrap().into_tensor::<f64>();
        prop_assert!(back.bit_eq(&v));
        let s = Tensor::<f32>::new(vec![1, 2, 3, 4], small).unwrap();
        let back = decode_volume(&encode_volume(&s).unwrap()).unwrap().into_tensor::<f32>();
        prop_assert!(back.bit_eq(&s));
    }

    #[test]
    fn config_json_round_trips(heads in prop::sample::select(vec![1usize, 2, 4, 8]), lambda in 0.0f64..10.0, seed in any::<u64>(), lr in 1e-6f64..1.0) {
        let mut cfg = ModelConfig::default();
        cfg.attention.heads = heads;
        cfg.loss.lambda = lambda;
        cfg.seed = seed;
        cfg.optimizer.learning_rate = lr;
        let back = ModelConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}
