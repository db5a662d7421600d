//! Evaluation metrics: SSIM, HD95 on thresholded masks, and Jacobian
//! statistics of a displacement field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{composite_loss_value, LossConfig};
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Default relative threshold for [`mask_from_volume`].
pub const MASK_REL_THRESHOLD: f64 = 0.1;
pub const HD_PERCENTILE: f64 = 95.0;

/// Spatial extents of a `[D, H, W]` or `[1, D, H, W]` volume.
pub fn spatial_dims(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [d, h, w] | [1, d, h, w] => Ok([*d, *h, *w]),
        s => Err(Error::arg("volume", format!("expected [D,H,W] or [1,D,H,W], got {s:?}"))),
    }
}

/// Normalized 1D Gaussian taps of length `len`, centred.
pub fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid separable filtering of a `[D, H, W]` array with per-axis taps.
fn filter_valid(x: &[f64], dims: [usize; 3], taps: &[Vec<f64>; 3]) -> (Vec<f64>, [usize; 3]) {
    let mut cur = x.to_vec();
    let mut cd = dims;
    for axis in 0..3 {
        let k = taps[axis].len();
        let mut nd = cd;
        nd[axis] = cd[axis] - k + 1;
        let outer: usize = cd[..axis].iter().product();
        let inner: usize = cd[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * nd[axis] * inner];
        for o in 0..outer {
            for j in 0..nd[axis] {
                let dst = (o * nd[axis] + j) * inner;
                for (t, &wt) in taps[axis].iter().enumerate() {
                    let src = (o * cd[axis] + j + t) * inner;
                    for i in 0..inner {
                        out[dst + i] += wt * cur[src + i];
                    }
                }
            }
        }
        cur = out;
        cd = nd;
    }
    (cur, cd)
}

/// Mean local SSIM with a Gaussian window (extent 7, σ 1.5; shortened to
/// the volume extent on small axes) over fully contained windows.
/// `L` is the joint dynamic range; two identical constant volumes give 1.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let dims = spatial_dims(a.shape())?;
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let av: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let bv: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    let lo = av.iter().chain(&bv).copied().fold(f64::INFINITY, f64::min);
    let hi = av.iter().chain(&bv).copied().fold(f64::NEG_INFINITY, f64::max);
    let l = hi - lo;
    if !l.is_finite() {
        return Err(Error::NonFinite("ssim input".into()));
    }
    if l == 0.0 {
        return Ok(1.0);
    }
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let taps = dims.map(|n| gaussian_taps(SSIM_WINDOW.min(n), SSIM_SIGMA));
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, _) = filter_valid(&av, dims, &taps);
    let (mu_b, _) = filter_valid(&bv, dims, &taps);
    let (e_aa, _) = filter_valid(&sq(&av, &av), dims, &taps);
    let (e_bb, _) = filter_valid(&sq(&bv, &bv), dims, &taps);
    let (e_ab, _) = filter_valid(&sq(&av, &bv), dims, &taps);
    let n = mu_a.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let saa = e_aa[i] - ma * ma;
        let sbb = e_bb[i] - mb * mb;
        let sab = e_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * sab + c2)) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
    }
    Ok(acc / n as f64)
}

/// Binary mask over a `[D, H, W]` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
    /// Set when no voxel passed the threshold.
    pub empty: bool,
}

impl Mask {
    pub fn from_bools(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::arg("mask", format!("{} values for dims {dims:?}", data.len())));
        }
        let empty = !data.iter().any(|&b| b);
        Ok(Self { dims, data, empty })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Mask voxels with at least one 6-neighbour outside the mask (voxels
    /// beyond the grid count as outside).
    pub fn surface(&self) -> Vec<[usize; 3]> {
        let [d, h, w] = self.dims;
        let at = |z: usize, y: usize, x: usize| self.data[(z * h + y) * w + x];
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !at(z, y, x) {
                        continue;
                    }
                    let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                    if border
                        || !at(z - 1, y, x)
                        || !at(z + 1, y, x)
                        || !at(z, y - 1, x)
                        || !at(z, y + 1, x)
                        || !at(z, y, x - 1)
                        || !at(z, y, x + 1)
                    {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

/// Voxels with intensity strictly above `rel_threshold · max`.
pub fn mask_from_volume<T: Scalar>(v: &Tensor<T>, rel_threshold: f64) -> Result<Mask> {
    let dims = spatial_dims(v.shape())?;
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::arg(
            "mask_from_volume",
            format!("relative threshold must lie in (0, 1), got {rel_threshold}"),
        ));
    }
    let max = v.max_value().as_f64();
    if !(max > 0.0) {
        log::warn!("mask_from_volume: volume has no positive intensity, mask is empty");
        return Mask::from_bools(dims, vec![false; v.numel()]);
    }
    let thr = rel_threshold * max;
    let mask = Mask::from_bools(dims, v.data().iter().map(|x| x.as_f64() > thr).collect())?;
    if mask.empty {
        log::warn!("mask_from_volume: empty mask");
    }
    Ok(mask)
}

/// Squared distance transform along one line (lower envelope of parabolas
/// rooted at the finite entries of `f`).
fn edt_line(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k: Option<usize> = None;
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        let Some(mut kk) = k else {
            k = Some(0);
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        };
        let s = loop {
            let p = v[kk];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[kk] {
                kk -= 1;
            } else {
                break s;
            }
        };
        kk += 1;
        v[kk] = q;
        z[kk] = s;
        z[kk + 1] = f64::INFINITY;
        k = Some(kk);
    }
    if k.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest seed.
pub fn squared_distance_transform(dims: [usize; 3], seeds: &[[usize; 3]]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g = vec![f64::INFINITY; d * h * w];
    for &[z, y, x] in seeds {
        g[(z * h + y) * w + x] = 0.0;
    }
    let maxn = d.max(h).max(w);
    let (mut f, mut o) = (vec![0.0; maxn], vec![0.0; maxn]);
    let (mut v, mut zb) = (vec![0usize; maxn], vec![0.0; maxn + 1]);
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = dims[axis];
        let st = strides[axis];
        let others: Vec<usize> = (0..d * h * w)
            .filter(|&i| (i / st) % n == 0)
            .collect();
        for base in others {
            for i in 0..n {
                f[i] = g[base + i * st];
            }
            edt_line(&f[..n], &mut o[..n], &mut v[..n], &mut zb[..n + 1]);
            for i in 0..n {
                g[base + i * st] = o[i];
            }
        }
    }
    g
}

/// Percentile with linear interpolation between order statistics
/// (`rank = p/100 · (n - 1)`). `sorted` must be ascending and nonempty.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Directed surface distances A→B followed by B→A.
pub fn surface_distances(a: &Mask, b: &Mask) -> Result<Vec<f64>> {
    if a.dims != b.dims {
        return Err(Error::shape("hd95", &a.dims, &b.dims));
    }
    if a.empty || b.empty {
        return Err(Error::UndefinedMetric("HD95 needs two nonempty masks".into()));
    }
    let (sa, sb) = (a.surface(), b.surface());
    let [_, h, w] = a.dims;
    let idx = |p: &[usize; 3]| (p[0] * h + p[1]) * w + p[2];
    let db = squared_distance_transform(a.dims, &sb);
    let da = squared_distance_transform(a.dims, &sa);
    let mut out: Vec<f64> = sa.iter().map(|p| db[idx(p)].sqrt()).collect();
    out.extend(sb.iter().map(|p| da[idx(p)].sqrt()));
    Ok(out)
}

/// Symmetric 95th-percentile surface distance in voxels.
pub fn hd95(a: &Mask, b: &Mask) -> Result<f64> {
    let mut d = surface_distances(a, b)?;
    d.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&d, HD_PERCENTILE))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    pub sdlogj: f64,
    pub nonpositive_fraction: f64,
}

/// Determinants of `I + ∇u` at interior voxels via central differences.
pub fn jacobian_determinants<T: Scalar>(field: &Tensor<T>) -> Result<Vec<f64>> {
    let s = field.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(Error::arg("sdlogj", format!("field shape {s:?}")));
    }
    let (d, h, w) = (s[1], s[2], s[3]);
    if d < 3 || h < 3 || w < 3 {
        return Err(Error::arg("sdlogj", format!("extents {:?} must each be >= 3", &s[1..])));
    }
    let vol = d * h * w;
    let u = field.data();
    let at = |c: usize, z: usize, y: usize, x: usize| u[c * vol + (z * h + y) * w + x].as_f64();
    let mut dets = Vec::with_capacity((d - 2) * (h - 2) * (w - 2));
    for z in 1..d - 1 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut j = [[0.0; 3]; 3];
                for (c, row) in j.iter_mut().enumerate() {
                    row[0] = (at(c, z + 1, y, x) - at(c, z - 1, y, x)) / 2.0;
                    row[1] = (at(c, z, y + 1, x) - at(c, z, y - 1, x)) / 2.0;
                    row[2] = (at(c, z, y, x + 1) - at(c, z, y, x - 1)) / 2.0;
                    row[c] += 1.0;
                }
                dets.push(
                    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]),
                );
            }
        }
    }
    Ok(dets)
}

/// Population standard deviation of `log det` over voxels with `det > 0`,
/// and the fraction of interior voxels with `det <= 0`.
pub fn sdlogj<T: Scalar>(field: &Tensor<T>) -> Result<JacobianStats> {
    let dets = jacobian_determinants(field)?;
    let logs: Vec<f64> = dets.iter().filter(|&&x| x > 0.0).map(|x| x.ln()).collect();
    if logs.is_empty() {
        return Err(Error::UndefinedMetric(
            "every Jacobian determinant is non-positive".into(),
        ));
    }
    // shift by the first value so equal inputs give exactly zero
    let x0 = logs[0];
    let n = logs.len() as f64;
    let mean = logs.iter().map(|x| x - x0).sum::<f64>() / n;
    let var = logs.iter().map(|x| (x - x0 - mean).powi(2)).sum::<f64>() / n;
    Ok(JacobianStats {
        sdlogj: var.sqrt(),
        nonpositive_fraction: (dets.len() - logs.len()) as f64 / dets.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub ssim: f64,
    /// Voxels.
    pub hd95: f64,
    pub sdlogj: f64,
    pub ncc: f64,
    pub loss_total: f64,
    pub loss_sim: f64,
    pub loss_smooth: f64,
    pub nonpositive_jacobian_fraction: f64,
}

/// All metrics for one registered pair. `warped` is `moving` after
/// applying `field`.
pub fn registration_report<T: Scalar>(
    fixed: &Tensor<T>,
    moving: &Tensor<T>,
    warped: &Tensor<T>,
    field: &Tensor<T>,
    loss: &LossConfig,
) -> Result<RegistrationReport> {
    let (loss_total, loss_sim, loss_smooth) = composite_loss_value(fixed, moving, field, loss)?;
    let jac = sdlogj(field)?;
    let hd = hd95(
        &mask_from_volume(warped, MASK_REL_THRESHOLD)?,
        &mask_from_volume(fixed, MASK_REL_THRESHOLD)?,
    )?;
    Ok(RegistrationReport {
        ssim: ssim(warped, fixed)?,
        hd95: hd,
        sdlogj: jac.sdlogj,
        ncc: 1.0 - loss_sim,
        loss_total,
        loss_sim,
        loss_smooth,
        nonpositive_jacobian_fraction: jac.nonpositive_fraction,
    })
}
