//! Linear resampling along one axis and trilinear warping.

use crate::tensor::{Scalar, Tensor};

/// Per-output-index interpolation stencil along one axis.
#[derive(Clone, Debug)]
pub struct AxisStencil<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_lo: Vec<T>,
    pub w_hi: Vec<T>,
}

impl<T: Scalar> AxisStencil<T> {
    /// Half-pixel-centred (align-corners-false) upsampling by an integer factor.
    pub fn upsample(len: usize, factor: usize) -> Self {
        let out = len * factor;
        let mut s = Self {
            lo: Vec::with_capacity(out),
            hi: Vec::with_capacity(out),
            w_lo: Vec::with_capacity(out),
            w_hi: Vec::with_capacity(out),
        };
        let f = T::lit(factor as f64);
        let half = T::lit(0.5);
        let max = T::lit((len - 1) as f64);
        for o in 0..out {
            let src = ((T::lit(o as f64) + half) / f - half).max(T::zero()).min(max);
            let i0 = src.floor();
            let frac = src - i0;
            let i0 = i0.as_f64() as usize;
            s.lo.push(i0);
            s.hi.push((i0 + 1).min(len - 1));
            s.w_lo.push(T::one() - frac);
            s.w_hi.push(frac);
        }
        s
    }

    pub fn out_len(&self) -> usize {
        self.lo.len()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn resample_axis<T: Scalar>(x: &Tensor<T>, axis: usize, st: &AxisStencil<T>) -> Tensor<T> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let m = st.out_len();
    let xd = x.data();
    let mut out = vec![T::zero(); outer * m * inner];
    for a in 0..outer {
        for o in 0..m {
            let src0 = (a * n + st.lo[o]) * inner;
            let src1 = (a * n + st.hi[o]) * inner;
            let dst = (a * m + o) * inner;
            let (w0, w1) = (st.w_lo[o], st.w_hi[o]);
            for k in 0..inner {
                out[dst + k] = w0 * xd[src0 + k] + w1 * xd[src1 + k];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = m;
    Tensor::new(shape, out).expect("shape")
}

pub fn resample_axis_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_shape: &[usize],
    axis: usize,
    st: &AxisStencil<T>,
) -> Tensor<T> {
    let (outer, n, inner) = split_axis(in_shape, axis);
    let m = st.out_len();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); outer * n * inner];
    for a in 0..outer {
        for o in 0..m {
            let dst0 = (a * n + st.lo[o]) * inner;
            let dst1 = (a * n + st.hi[o]) * inner;
            let src = (a * m + o) * inner;
            let (w0, w1) = (st.w_lo[o], st.w_hi[o]);
            for k in 0..inner {
                let g = gd[src + k];
                gx[dst0 + k] = gx[dst0 + k] + w0 * g;
                gx[dst1 + k] = gx[dst1 + k] + w1 * g;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx).expect("shape")
}

/// Clamped sample position along one axis: `(i0, i1, frac, inside)` where
/// `inside` is false when clamping was active (zero derivative).
#[inline]
fn locate<T: Scalar>(pos: T, len: usize) -> (usize, usize, T, bool) {
    let max = T::lit((len - 1) as f64);
    let inside = pos >= T::zero() && pos <= max;
    let p = pos.max(T::zero()).min(max);
    let f = p.floor();
    let i0 = f.as_f64() as usize;
    (i0, (i0 + 1).min(len - 1), p - f, inside)
}

/// Trilinear warp of `image: [C, D, H, W]` by displacement `field: [3, D, H, W]`
/// (components ordered z, y, x, in voxels). Each output voxel `v` samples the
/// image at `v + u(v)` from its eight lattice neighbours; positions outside
/// the volume are clamped to the border.
pub fn warp_forward<T: Scalar>(image: &Tensor<T>, field: &Tensor<T>) -> Tensor<T> {
    let [c, d, h, w] = dims4(image.shape());
    let vol = d * h * w;
    let (img, fd) = (image.data(), field.data());
    let mut out = vec![T::zero(); c * vol];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = (z * h + y) * w + x;
                let (z0, z1, fz, _) = locate(T::lit(z as f64) + fd[v], d);
                let (y0, y1, fy, _) = locate(T::lit(y as f64) + fd[vol + v], h);
                let (x0, x1, fx, _) = locate(T::lit(x as f64) + fd[2 * vol + v], w);
                let (gz, gy, gx) = (T::one() - fz, T::one() - fy, T::one() - fx);
                let corners = [
                    ((z0, y0, x0), gz * gy * gx),
                    ((z0, y0, x1), gz * gy * fx),
                    ((z0, y1, x0), gz * fy * gx),
                    ((z0, y1, x1), gz * fy * fx),
                    ((z1, y0, x0), fz * gy * gx),
                    ((z1, y0, x1), fz * gy * fx),
                    ((z1, y1, x0), fz * fy * gx),
                    ((z1, y1, x1), fz * fy * fx),
                ];
                for ch in 0..c {
                    let base = ch * vol;
                    let mut acc = T::zero();
                    for &((cz, cy, cx), wt) in &corners {
                        acc = acc + img[base + (cz * h + cy) * w + cx] * wt;
                    }
                    out[base + v] = acc;
                }
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("shape")
}

/// Gradients of the warp with respect to the image and the field.
pub fn warp_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    image: &Tensor<T>,
    field: &Tensor<T>,
    need_image: bool,
    need_field: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let [c, d, h, w] = dims4(image.shape());
    let vol = d * h * w;
    let (img, fd, gd) = (image.data(), field.data(), grad_out.data());
    let mut g_img = need_image.then(|| vec![T::zero(); image.numel()]);
    let mut g_fld = need_field.then(|| vec![T::zero(); field.numel()]);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = (z * h + y) * w + x;
                let (z0, z1, fz, in_z) = locate(T::lit(z as f64) + fd[v], d);
                let (y0, y1, fy, in_y) = locate(T::lit(y as f64) + fd[vol + v], h);
                let (x0, x1, fx, in_x) = locate(T::lit(x as f64) + fd[2 * vol + v], w);
                let (gz, gy, gx) = (T::one() - fz, T::one() - fy, T::one() - fx);
                let idx = |cz: usize, cy: usize, cx: usize| (cz * h + cy) * w + cx;
                for ch in 0..c {
                    let base = ch * vol;
                    let go = gd[base + v];
                    if let Some(gi) = g_img.as_mut() {
                        let gi = &mut gi[base..base + vol];
                        gi[idx(z0, y0, x0)] = gi[idx(z0, y0, x0)] + go * gz * gy * gx;
                        gi[idx(z0, y0, x1)] = gi[idx(z0, y0, x1)] + go * gz * gy * fx;
                        gi[idx(z0, y1, x0)] = gi[idx(z0, y1, x0)] + go * gz * fy * gx;
                        gi[idx(z0, y1, x1)] = gi[idx(z0, y1, x1)] + go * gz * fy * fx;
                        gi[idx(z1, y0, x0)] = gi[idx(z1, y0, x0)] + go * fz * gy * gx;
                        gi[idx(z1, y0, x1)] = gi[idx(z1, y0, x1)] + go * fz * gy * fx;
                        gi[idx(z1, y1, x0)] = gi[idx(z1, y1, x0)] + go * fz * fy * gx;
                        gi[idx(z1, y1, x1)] = gi[idx(z1, y1, x1)] + go * fz * fy * fx;
                    }
                    if let Some(gf) = g_fld.as_mut() {
                        let im = |cz, cy, cx| img[base + idx(cz, cy, cx)];
                        let (a000, a001, a010, a011) =
                            (im(z0, y0, x0), im(z0, y0, x1), im(z0, y1, x0), im(z0, y1, x1));
                        let (a100, a101, a110, a111) =
                            (im(z1, y0, x0), im(z1, y0, x1), im(z1, y1, x0), im(z1, y1, x1));
                        if in_z {
                            let dz = gy * gx * (a100 - a000)
                                + gy * fx * (a101 - a001)
                                + fy * gx * (a110 - a010)
                                + fy * fx * (a111 - a011);
                            gf[v] = gf[v] + go * dz;
                        }
                        if in_y {
                            let dy = gz * gx * (a010 - a000)
                                + gz * fx * (a011 - a001)
                                + fz * gx * (a110 - a100)
                                + fz * fx * (a111 - a101);
                            gf[vol + v] = gf[vol + v] + go * dy;
                        }
                        if in_x {
                            let dx = gz * gy * (a001 - a000)
                                + gz * fy * (a011 - a010)
                                + fz * gy * (a101 - a100)
                                + fz * fy * (a111 - a110);
                            gf[2 * vol + v] = gf[2 * vol + v] + go * dx;
                        }
                    }
                }
            }
        }
    }
    (
        g_img.map(|g| Tensor::new(image.shape().to_vec(), g).expect("shape")),
        g_fld.map(|g| Tensor::new(field.shape().to_vec(), g).expect("shape")),
    )
}

pub(crate) fn dims4(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_stencil_factor_one_is_identity() {
        let st = AxisStencil::<f64>::upsample(5, 1);
        for o in 0..5 {
            assert_eq!((st.lo[o], st.w_lo[o], st.w_hi[o]), (o, 1.0, 0.0));
        }
    }

    #[test]
    fn ramp_doubles_with_half_pixel_centres() {
        let x = Tensor::<f64>::new(vec![2], vec![0.0, 1.0]).unwrap();
        let st = AxisStencil::upsample(2, 2);
        let y = resample_axis(&x, 0, &st);
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }
}
