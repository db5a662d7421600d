//! Brute-force reference transcriptions shared by the integration tests.
//! Everything here works on flat `f64` slices with explicit shapes and
//! loops over indices directly; nothing calls into the library's kernels.
#![allow(dead_code)]

use nestedmorph::kernels::conv::Conv3dSpec;
use nestedmorph::nn::ParamStore;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest `|a - b| / max(1, |b|)`.
pub fn max_scaled_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Efficient attention on `[n, d]` row-major token matrices.
pub fn efficient_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        let c0 = h * dh;
        // query rows normalized over this head's channels
        let rq: Vec<Vec<f64>> = (0..n).map(|i| softmax(&q[i * d + c0..i * d + c0 + dh])).collect();
        // key channels normalized over positions
        let rk: Vec<Vec<f64>> = (0..dh)
            .map(|c| softmax(&(0..n).map(|i| k[i * d + c0 + c]).collect::<Vec<_>>()))
            .collect();
        for i in 0..n {
            for j in 0..dh {
                let mut acc = 0.0;
                for c in 0..dh {
                    let mut ctx = 0.0;
                    for m in 0..n {
                        ctx += rk[c][m] * v[m * d + c0 + j];
                    }
                    acc += rq[i][c] * ctx;
                }
                out[i * d + c0 + j] = acc;
            }
        }
    }
    out
}

/// Channel attention on `[n, d]` tokens with per-head `log τ`.
pub fn channel_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    log_tau: &[f64],
    n: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        let c0 = h * dh;
        let tau = log_tau[h].exp();
        let mut attn = vec![vec![0.0; dh]; dh];
        for b in 0..dh {
            let col: Vec<f64> = (0..dh)
                .map(|a| (0..n).map(|i| k[i * d + c0 + a] * q[i * d + c0 + b]).sum::<f64>() / tau)
                .collect();
            for (a, p) in softmax(&col).into_iter().enumerate() {
                attn[a][b] = p;
            }
        }
        for i in 0..n {
            for b in 0..dh {
                out[i * d + c0 + b] = (0..dh).map(|a| v[i * d + c0 + a] * attn[a][b]).sum();
            }
        }
    }
    out
}

/// Direct 3D cross-correlation of `x: [ci, d, h, w]` with
/// `w: [co, ci/groups, k, k, k]`.
pub fn conv3d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    spec: &Conv3dSpec,
) -> (Vec<f64>, [usize; 4]) {
    let [ci, d, h, wd] = xs;
    let [co, cig, kz, ky, kx] = ws;
    let ks = [kz, ky, kx];
    let ins = [d, h, wd];
    let os: Vec<usize> = (0..3)
        .map(|a| {
            (ins[a] + spec.pad_lo[a] + spec.pad_hi[a] - spec.dilation[a] * (ks[a] - 1) - 1) / spec.stride[a] + 1
        })
        .collect();
    let cog = co / spec.groups;
    assert_eq!(cig * spec.groups, ci);
    let mut out = vec![0.0; co * os[0] * os[1] * os[2]];
    let src = |a: usize, o: usize, t: usize| -> Option<usize> {
        let p = (o * spec.stride[a] + t * spec.dilation[a]) as isize - spec.pad_lo[a] as isize;
        (p >= 0 && (p as usize) < ins[a]).then_some(p as usize)
    };
    for oc in 0..co {
        let g = oc / cog;
        for oz in 0..os[0] {
            for oy in 0..os[1] {
                for ox in 0..os[2] {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for c in 0..cig {
                        let ic = g * cig + c;
                        for tz in 0..kz {
                            let Some(iz) = src(0, oz, tz) else { continue };
                            for ty in 0..ky {
                                let Some(iy) = src(1, oy, ty) else { continue };
                                for tx in 0..kx {
                                    let Some(ix) = src(2, ox, tx) else { continue };
                                    acc += x[((ic * d + iz) * h + iy) * wd + ix]
                                        * w[(((oc * cig + c) * kz + tz) * ky + ty) * kx + tx];
                                }
                            }
                        }
                    }
                    out[((oc * os[0] + oz) * os[1] + oy) * os[2] + ox] = acc;
                }
            }
        }
    }
    (out, [co, os[0], os[1], os[2]])
}

/// Trilinear sampling written as a sum of tent weights over every lattice
/// point, with sample positions clamped to the volume.
pub fn warp(img: &[f64], is: [usize; 4], field: &[f64]) -> Vec<f64> {
    let [c, d, h, w] = is;
    let vol = d * h * w;
    let tent = |t: f64| (1.0 - t.abs()).max(0.0);
    let mut out = vec![0.0; c * vol];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = (z * h + y) * w + x;
                let pz = (z as f64 + field[v]).clamp(0.0, (d - 1) as f64);
                let py = (y as f64 + field[vol + v]).clamp(0.0, (h - 1) as f64);
                let px = (x as f64 + field[2 * vol + v]).clamp(0.0, (w - 1) as f64);
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..d {
                        let wz = tent(pz - i as f64);
                        if wz == 0.0 {
                            continue;
                        }
                        for j in 0..h {
                            let wy = tent(py - j as f64);
                            if wy == 0.0 {
                                continue;
                            }
                            for k in 0..w {
                                acc += wz * wy * tent(px - k as f64) * img[ch * vol + (i * h + j) * w + k];
                            }
                        }
                    }
                    out[ch * vol + v] = acc;
                }
            }
        }
    }
    out
}

/// `1 - mean cc` over fully contained cubic windows.
pub fn ncc_loss(f: &[f64], g: &[f64], dims: [usize; 3], win: usize, eps: f64) -> f64 {
    let [d, h, w] = dims;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=d - win {
        for y in 0..=h - win {
            for x in 0..=w - win {
                let mut a = Vec::new();
                let mut b = Vec::new();
                for i in z..z + win {
                    for j in y..y + win {
                        for k in x..x + win {
                            a.push(f[(i * h + j) * w + k]);
                            b.push(g[(i * h + j) * w + k]);
                        }
                    }
                }
                let n = a.len() as f64;
                let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
                let cross: f64 = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum();
                let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
                let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
                total += (cross * cross + eps) / (va * vb + eps);
                count += 1;
            }
        }
    }
    1.0 - total / count as f64
}

/// Mean windowed SSIM with a separable Gaussian window of extent
/// `min(7, n)` and σ 1.5 per axis, evaluated at fully contained windows.
pub fn ssim(a: &[f64], b: &[f64], dims: [usize; 3]) -> f64 {
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let l = hi - lo;
    if l == 0.0 {
        return 1.0;
    }
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let taps = |n: usize| -> Vec<f64> {
        let len = n.min(7);
        let mid = (len - 1) as f64 / 2.0;
        let raw: Vec<f64> = (0..len).map(|i| (-(i as f64 - mid).powi(2) / 4.5).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|r| r / s).collect()
    };
    let [d, h, w] = dims;
    let (tz, ty, tx) = (taps(d), taps(h), taps(w));
    let mut acc = 0.0;
    let mut count = 0usize;
    for z in 0..=d - tz.len() {
        for y in 0..=h - ty.len() {
            for x in 0..=w - tx.len() {
                let mut samples = Vec::new();
                for (i, wz) in tz.iter().enumerate() {
                    for (j, wy) in ty.iter().enumerate() {
                        for (k, wx) in tx.iter().enumerate() {
                            let idx = ((z + i) * h + y + j) * w + x + k;
                            samples.push((wz * wy * wx, a[idx], b[idx]));
                        }
                    }
                }
                let ma: f64 = samples.iter().map(|s| s.0 * s.1).sum();
                let mb: f64 = samples.iter().map(|s| s.0 * s.2).sum();
                let va: f64 = samples.iter().map(|s| s.0 * (s.1 - ma).powi(2)).sum();
                let vb: f64 = samples.iter().map(|s| s.0 * (s.2 - mb).powi(2)).sum();
                let cov: f64 = samples.iter().map(|s| s.0 * (s.1 - ma) * (s.2 - mb)).sum();
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<[i64; 3]> {
    let [d, h, w] = dims.map(|n| n as i64);
    let inside = |z: i64, y: i64, x: i64| {
        z >= 0 && y >= 0 && x >= 0 && z < d && y < h && x < w && mask[((z * h + y) * w + x) as usize]
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !inside(z, y, x) {
                    continue;
                }
                let steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if steps.iter().any(|&(a, b, c)| !inside(z + a, y + b, x + c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Symmetric 95th-percentile surface distance by exhaustive pairing.
pub fn hd95(a: &[bool], b: &[bool], dims: [usize; 3]) -> f64 {
    let (sa, sb) = (surface(a, dims), surface(b, dims));
    let nearest = |p: &[i64; 3], set: &[[i64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).pow(2) + (p[1] - q[1]).pow(2) + (p[2] - q[2]).pow(2)) as f64)
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let mut all: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    all.extend(sb.iter().map(|p| nearest(p, &sa)));
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    all[lo] + (all[hi] - all[lo]) * (rank - lo as f64)
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    // Leibniz expansion over the six permutations
    const PERMS: [([usize; 3], f64); 6] = [
        ([0, 1, 2], 1.0),
        ([1, 2, 0], 1.0),
        ([2, 0, 1], 1.0),
        ([0, 2, 1], -1.0),
        ([2, 1, 0], -1.0),
        ([1, 0, 2], -1.0),
    ];
    PERMS
        .iter()
        .map(|(p, s)| s * m[0][p[0]] * m[1][p[1]] * m[2][p[2]])
        .sum()
}

/// Population std of `ln det(I + ∇u)` over interior voxels with positive
/// determinant; central differences.
pub fn sdlogj(field: &[f64], dims: [usize; 3]) -> f64 {
    let [d, h, w] = dims;
    let vol = d * h * w;
    let u = |c: usize, z: usize, y: usize, x: usize| field[c * vol + (z * h + y) * w + x];
    let mut logs = Vec::new();
    for z in 1..d - 1 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut m = [[0.0; 3]; 3];
                for (c, row) in m.iter_mut().enumerate() {
                    row[0] = 0.5 * (u(c, z + 1, y, x) - u(c, z - 1, y, x));
                    row[1] = 0.5 * (u(c, z, y + 1, x) - u(c, z, y - 1, x));
                    row[2] = 0.5 * (u(c, z, y, x + 1) - u(c, z, y, x - 1));
                    row[c] += 1.0;
                }
                let det = det3(&m);
                if det > 0.0 {
                    logs.push(det.ln());
                }
            }
        }
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn param(p: &ParamStore<f64>, name: &str) -> Vec<f64> {
    p.get(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
}

fn conv_param(p: &ParamStore<f64>, name: &str, x: &[f64], xs: [usize; 4], spec: &Conv3dSpec) -> Vec<f64> {
    let w = p.get(&format!("{name}.weight")).unwrap();
    let s = w.shape();
    conv3d(
        x,
        xs,
        w.data(),
        [s[0], s[1], s[2], s[3], s[4]],
        Some(&param(p, &format!("{name}.bias"))),
        spec,
    )
    .0
}

/// Nested attention fusion of `x1`, `x2: [c, d, h, w]` with parameters
/// named under `prefix`, depthwise kernel `kernel`.
pub fn nested_fusion(
    p: &ParamStore<f64>,
    prefix: &str,
    x1: &[f64],
    x2: &[f64],
    xs: [usize; 4],
    kernel: usize,
) -> Vec<f64> {
    let [c, d, h, w] = xs;
    let vol = d * h * w;
    let same = |k: usize, dil: usize, groups: usize| {
        let total = dil * (k - 1);
        Conv3dSpec {
            stride: [1; 3],
            pad_lo: [total / 2; 3],
            pad_hi: [total - total / 2; 3],
            dilation: [dil; 3],
            groups,
        }
    };
    let pointwise = Conv3dSpec::default();

    // global descriptor of x2: shared projection of avg and max pools
    let gw = param(p, &format!("{prefix}.global.proj.weight"));
    let gb = param(p, &format!("{prefix}.global.proj.bias"));
    let mut global = vec![0.0; c];
    for pooled in [
        (0..c).map(|ch| x2[ch * vol..(ch + 1) * vol].iter().sum::<f64>() / vol as f64).collect::<Vec<_>>(),
        (0..c)
            .map(|ch| x2[ch * vol..(ch + 1) * vol].iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    ] {
        for (j, g) in global.iter_mut().enumerate() {
            *g += gb[j] + (0..c).map(|i| pooled[i] * gw[i * c + j]).sum::<f64>();
        }
    }

    // local features of x1
    let l = conv_param(p, &format!("{prefix}.local.dw"), x1, xs, &same(kernel, 1, c));
    let l = conv_param(p, &format!("{prefix}.local.pw"), &l, xs, &pointwise);
    let l = conv_param(p, &format!("{prefix}.local.dw_dilated"), &l, xs, &same(kernel, 2, c));
    let l = conv_param(p, &format!("{prefix}.local.reduce"), &l, xs, &pointwise);

    let gamma = param(p, &format!("{prefix}.norm.gamma"));
    let beta = param(p, &format!("{prefix}.norm.beta"));
    let mut u = vec![0.0; c * vol];
    for v in 0..vol {
        let row: Vec<f64> = (0..c).map(|ch| l[ch * vol + v] + global[ch]).collect();
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / c as f64;
        for ch in 0..c {
            u[ch * vol + v] = gamma[ch] * (row[ch] - mean) / (var + 1e-5).sqrt() + beta[ch];
        }
    }

    let logits = conv_param(p, &format!("{prefix}.select"), &u, xs, &pointwise);
    let mut up = vec![0.0; c * vol];
    for v in 0..vol {
        let sm = softmax(&(0..c).map(|ch| logits[ch * vol + v]).collect::<Vec<_>>());
        for ch in 0..c {
            let i = ch * vol + v;
            let a = sm[ch] * x1[i] + x1[i];
            let b = sm[ch] * x2[i] + x2[i];
            up[i] = (a * sigmoid(b)) * (b * sigmoid(a));
        }
    }
    let g = conv_param(p, &format!("{prefix}.gate"), &up, xs, &pointwise);
    let gated: Vec<f64> = g.iter().zip(x1).map(|(g, x)| sigmoid(*g) * x).collect();
    conv_param(p, &format!("{prefix}.out"), &gated, xs, &pointwise)
}
pub mod compare;
