//! Applying displacement fields to volumes.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::resample::warp_forward;
use crate::tensor::{Scalar, Tensor};

/// Zero displacement `[3, D, H, W]`.
pub fn identity_field<T: Scalar>(spatial: [usize; 3]) -> Tensor<T> {
    Tensor::zeros(vec![3, spatial[0], spatial[1], spatial[2]])
}

/// Checks that `field` is a finite `[3, D, H, W]` displacement.
pub fn check_field<T: Scalar>(field: &Tensor<T>) -> Result<[usize; 3]> {
    let s = field.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(Error::arg(
            "deformation field",
            format!("expected [3, D, H, W], got {s:?}"),
        ));
    }
    field.ensure_finite("deformation field")?;
    Ok([s[1], s[2], s[3]])
}

/// Promotes a rank-3 volume to `[1, D, H, W]`; rank-4 inputs pass through.
pub fn as_channels<T: Scalar>(volume: &Tensor<T>) -> Result<Tensor<T>> {
    match volume.shape() {
        [d, h, w] => volume.clone().reshape(vec![1, *d, *h, *w]),
        [_, _, _, _] => Ok(volume.clone()),
        s => Err(Error::arg("volume", format!("expected rank 3 or 4, got {s:?}"))),
    }
}

/// Border-clamped trilinear warp of `moving: [C, D, H, W]` (or `[D, H, W]`),
/// sampling at `v + u(v)`. Output has the shape of `moving`.
pub fn warp_trilinear<T: Scalar>(moving: &Tensor<T>, field: &Tensor<T>) -> Result<Tensor<T>> {
    let spatial = check_field(field)?;
    let m = as_channels(moving)?;
    if m.shape()[1..] != spatial {
        return Err(Error::shape("warp_trilinear", moving.shape(), field.shape()));
    }
    warp_forward(&m, field).reshape(moving.shape().to_vec())
}

/// Differentiable warp on a tape; see [`Tape::warp`].
pub fn warp_var<T: Scalar>(tape: &mut Tape<T>, moving: Var, field: Var) -> Result<Var> {
    tape.warp(moving, field)
}
