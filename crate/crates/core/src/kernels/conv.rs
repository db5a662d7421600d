//! Direct 3D cross-correlation over `[C, D, H, W]` volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of a 3D convolution. Padding may be asymmetric so that even
/// kernels can still preserve spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub pad_lo: [usize; 3],
    pub pad_hi: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            pad_lo: [0; 3],
            pad_hi: [0; 3],
            dilation: [1; 3],
            groups: 1,
        }
    }
}

impl Conv3dSpec {
    /// Cubic stride, symmetric padding and dilation.
    pub fn uniform(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride: [stride; 3],
            pad_lo: [padding; 3],
            pad_hi: [padding; 3],
            dilation: [dilation; 3],
            groups,
        }
    }

    /// Stride-1 geometry whose output extent equals its input extent.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        let total = dilation * (kernel - 1);
        let lo = total / 2;
        Self {
            stride: [1; 3],
            pad_lo: [lo; 3],
            pad_hi: [total - lo; 3],
            dilation: [dilation; 3],
            groups,
        }
    }

    pub fn output_extent(&self, axis: usize, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + self.pad_lo[axis] + self.pad_hi[axis];
        let span = self.dilation[axis] * (kernel - 1) + 1;
        (kernel >= 1 && padded >= span).then(|| (padded - span) / self.stride[axis] + 1)
    }
}

pub(crate) struct ConvDims {
    pub cout: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
}

pub(crate) fn conv_dims(x: &[usize], w: &[usize], spec: &Conv3dSpec) -> Result<ConvDims> {
    if x.len() != 4 || w.len() != 5 {
        return Err(Error::shape("conv3d", x, w));
    }
    let g = spec.groups;
    if g == 0 || !x[0].is_multiple_of(g) || !w[0].is_multiple_of(g) || w[1] * g != x[0] {
        return Err(Error::arg(
            "conv3d",
            format!(
                "channels in {} / out {} / kernel-in {} incompatible with {} groups",
                x[0], w[0], w[1], g
            ),
        ));
    }
    if spec.stride.contains(&0) || spec.dilation.contains(&0) {
        return Err(Error::arg("conv3d", "stride and dilation must be positive"));
    }
    let input = [x[1], x[2], x[3]];
    let kernel = [w[2], w[3], w[4]];
    let mut output = [0; 3];
    for a in 0..3 {
        output[a] = spec.output_extent(a, input[a], kernel[a]).ok_or_else(|| {
            Error::Config(format!(
                "conv3d output extent < 1 on axis {a}: input {}, kernel {}, dilation {}, padding {}+{}",
                input[a], kernel[a], spec.dilation[a], spec.pad_lo[a], spec.pad_hi[a]
            ))
        })?;
    }
    Ok(ConvDims {
        cout: w[0],
        cin_g: w[1],
        cout_g: w[0] / g,
        input,
        kernel,
        output,
    })
}

/// Output positions `o` in `[lo, hi)` whose input coordinate
/// `o*stride + offset` lands inside `[0, len)`.
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = (len as isize - offset + s - 1).div_euclid(s).max(0);
    let lo = lo.min(out_len as isize) as usize;
    let hi = (hi as usize).min(out_len);
    (lo, hi.max(lo))
}

/// Iterates every (output index, input index) pair contributing through one
/// kernel tap, calling `f(out_flat, in_flat)`.
#[inline]
fn for_each_tap(
    dims: &ConvDims,
    spec: &Conv3dSpec,
    tap: [usize; 3],
    mut f: impl FnMut(usize, usize, usize),
) {
    let mut offs = [0isize; 3];
    let mut ranges = [(0usize, 0usize); 3];
    for a in 0..3 {
        offs[a] = (tap[a] * spec.dilation[a]) as isize - spec.pad_lo[a] as isize;
        ranges[a] = valid_range(offs[a], spec.stride[a], dims.input[a], dims.output[a]);
        if ranges[a].0 == ranges[a].1 {
            return;
        }
    }
    let [_, oh, ow] = dims.output;
    let [_, ih, iw] = dims.input;
    let (sz, sy, sx) = (spec.stride[0], spec.stride[1], spec.stride[2]);
    for oz in ranges[0].0..ranges[0].1 {
        let iz = (oz * sz) as isize + offs[0];
        for oy in ranges[1].0..ranges[1].1 {
            let iy = (oy * sy) as isize + offs[1];
            let out_row = (oz * oh + oy) * ow;
            let in_row = (iz as usize * ih + iy as usize) * iw;
            let ix0 = (ranges[2].0 * sx) as isize + offs[2];
            f(out_row + ranges[2].0, in_row + ix0 as usize, ranges[2].1 - ranges[2].0);
        }
    }
}

pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv3dSpec,
) -> Result<Tensor<T>> {
    let dims = conv_dims(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [dims.cout] {
            return Err(Error::shape("conv3d bias", b.shape(), &[dims.cout]));
        }
    }
    let in_vol: usize = dims.input.iter().product();
    let out_vol: usize = dims.output.iter().product();
    let ksize: usize = dims.kernel.iter().product();
    let sx = spec.stride[2];
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); dims.cout * out_vol];

    for co in 0..dims.cout {
        let group = co / dims.cout_g;
        let out_c = &mut out[co * out_vol..(co + 1) * out_vol];
        if let Some(b) = bias {
            out_c.fill(b.data()[co]);
        }
        for cil in 0..dims.cin_g {
            let ci = group * dims.cin_g + cil;
            let x_c = &xd[ci * in_vol..(ci + 1) * in_vol];
            let w_base = (co * dims.cin_g + cil) * ksize;
            for kz in 0..dims.kernel[0] {
                for ky in 0..dims.kernel[1] {
                    for kx in 0..dims.kernel[2] {
                        let k = (kz * dims.kernel[1] + ky) * dims.kernel[2] + kx;
                        let wv = wd[w_base + k];
                        for_each_tap(&dims, spec, [kz, ky, kx], |o, i, n| {
                            for t in 0..n {
                                out_c[o + t] = out_c[o + t] + wv * x_c[i + t * sx];
                            }
                        });
                    }
                }
            }
        }
    }
    let mut shape = vec![dims.cout];
    shape.extend_from_slice(&dims.output);
    Tensor::new(shape, out)
}

/// Gradients of a conv3d with respect to input, weight and bias.
pub fn conv3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &Conv3dSpec,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let dims = conv_dims(x.shape(), w.shape(), spec).expect("validated in forward");
    let in_vol: usize = dims.input.iter().product();
    let out_vol: usize = dims.output.iter().product();
    let ksize: usize = dims.kernel.iter().product();
    let sx = spec.stride[2];
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    let mut gx = need_input.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_weight.then(|| vec![T::zero(); w.numel()]);

    for co in 0..dims.cout {
        let group = co / dims.cout_g;
        let g_c = &gd[co * out_vol..(co + 1) * out_vol];
        for cil in 0..dims.cin_g {
            let ci = group * dims.cin_g + cil;
            let x_c = &xd[ci * in_vol..(ci + 1) * in_vol];
            let w_base = (co * dims.cin_g + cil) * ksize;
            for kz in 0..dims.kernel[0] {
                for ky in 0..dims.kernel[1] {
                    for kx in 0..dims.kernel[2] {
                        let k = (kz * dims.kernel[1] + ky) * dims.kernel[2] + kx;
                        let wv = wd[w_base + k];
                        let mut acc = T::zero();
                        let gx_c = gx.as_mut().map(|g| &mut g[ci * in_vol..(ci + 1) * in_vol]);
                        match gx_c {
                            Some(gx_c) => for_each_tap(&dims, spec, [kz, ky, kx], |o, i, n| {
                                for t in 0..n {
                                    let go = g_c[o + t];
                                    gx_c[i + t * sx] = gx_c[i + t * sx] + wv * go;
                                    acc = acc + go * x_c[i + t * sx];
                                }
                            }),
                            None => for_each_tap(&dims, spec, [kz, ky, kx], |o, i, n| {
                                for t in 0..n {
                                    acc = acc + g_c[o + t] * x_c[i + t * sx];
                                }
                            }),
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[w_base + k] = gw[w_base + k] + acc;
                        }
                    }
                }
            }
        }
    }
    let gb: Vec<T> = (0..dims.cout)
        .map(|co| gd[co * out_vol..(co + 1) * out_vol].iter().copied().sum())
        .collect();
    (
        gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape")),
        gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("shape")),
        Tensor::new(vec![dims.cout], gb).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_padding() {
        // input 4, pad 1, kernel tap 0 → offset -1; out 4 stride 1: o in [1, 4)
        assert_eq!(valid_range(-1, 1, 4, 4), (1, 4));
        // tap 2 → offset +1: o + 1 < 4 → o in [0, 3)
        assert_eq!(valid_range(1, 1, 4, 4), (0, 3));
        // stride 2, offset -3, input 8, out 2: o*2-3 >= 0 → o >= 2 → empty
        assert_eq!(valid_range(-3, 2, 8, 2), (2, 2));
    }

    #[test]
    fn same_spec_preserves_extent_for_even_kernels() {
        let spec = Conv3dSpec::same(6, 1, 1);
        assert_eq!(spec.output_extent(0, 5, 6), Some(5));
        let spec = Conv3dSpec::same(3, 2, 1);
        assert_eq!(spec.output_extent(0, 4, 3), Some(4));
    }
}
