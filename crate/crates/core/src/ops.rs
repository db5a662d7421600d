//! Differentiable primitives recorded on a [`Tape`].

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::conv::{conv3d_backward, conv3d_forward, conv_dims, Conv3dSpec};
use crate::kernels::resample::{
    resample_axis, resample_axis_backward, warp_backward, warp_forward, AxisStencil,
};
use crate::tensor::{numel, Scalar, Tensor};

/// Default layer-norm variance floor.
pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// GELU, tanh approximation:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    T::lit(0.5) * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// Numerically stable logistic function; never produces NaN for finite input.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

/// Broadcast batch shape of two batch-dimension lists (numpy rules).
fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat batch index of `operand` for each flat index of the broadcast batch.
fn batch_offsets(operand: &[usize], full: &[usize]) -> Vec<usize> {
    let total = numel(full);
    let lead = full.len() - operand.len();
    (0..total)
        .map(|mut flat| {
            let mut idx = vec![0; full.len()];
            for ax in (0..full.len()).rev() {
                idx[ax] = flat % full[ax];
                flat /= full[ax];
            }
            let mut off = 0;
            for (k, &n) in operand.iter().enumerate() {
                let i = if n == 1 { 0 } else { idx[lead + k] };
                off = off * n + i;
            }
            off
        })
        .collect()
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] = row[j] + av * brow[j];
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn unary<F, D>(&mut self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let y = self.value(x).map(f);
        self.record(y, &[x], move |g, inp, out| {
            let data = g
                .data()
                .iter()
                .zip(inp[0].data())
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("shape"))]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(y, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(y, &[a, b], |g, _, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(y, &[a, b], |g, inp, _| {
            vec![
                Some(g.zip_map(inp[1], |g, b| g * b).expect("shape")),
                Some(g.zip_map(inp[0], |g, a| g * a).expect("shape")),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "div", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.record(y, &[a, b], |g, inp, out| {
            let ga = g.zip_map(inp[1], |g, b| g / b).expect("shape");
            let gb = Tensor::new(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(inp[1].data())
                    .zip(out.data())
                    .map(|((&g, &b), &q)| -g * q / b)
                    .collect(),
            )
            .expect("shape");
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, |v| v + c, |_, _| T::one())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| T::lit(2.0) * x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar_var", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let y = self.value(x).map(|v| v * sv);
        Ok(self.record(y, &[x, s], |g, inp, _| {
            let s = inp[1].item();
            let gs = g
                .data()
                .iter()
                .zip(inp[0].data())
                .map(|(&g, &x)| g * x)
                .sum::<T>();
            vec![
                Some(g.map(|v| v * s)),
                Some(Tensor::full(inp[1].shape().to_vec(), gs)),
            ]
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.record(y, &[x], |g, inp, _| {
            vec![Some(Tensor::full(inp[0].shape().to_vec(), g.item()))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let y = Tensor::scalar(self.value(x).sum() / n);
        self.record(y, &[x], move |g, inp, _| {
            vec![Some(Tensor::full(inp[0].shape().to_vec(), g.item() / n))]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.record(y, &[x], |g, inp, _| {
            vec![Some(g.clone().reshape(inp[0].shape().to_vec()).expect("shape"))]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).transpose_last2()?;
        Ok(self.record(y, &[x], |g, _, _| {
            vec![Some(g.transpose_last2().expect("rank"))]
        }))
    }

    /// `[..., m, k] @ [..., k, n]` with numpy-style broadcasting of batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_batch(ba, bb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let off_a = batch_offsets(ba, &batch);
        let off_b = batch_offsets(bb, &batch);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); off_a.len() * m * n];
        for (i, (&oa, &ob)) in off_a.iter().zip(&off_b).enumerate() {
            matmul_raw(
                &av[oa * m * k..(oa + 1) * m * k],
                &bv[ob * k * n..(ob + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = batch.clone();
        shape.extend([m, n]);
        let y = Tensor::new(shape, out)?;
        Ok(self.record(y, &[a, b], move |g, inp, _| {
            let (av, bv, gv) = (inp[0].data(), inp[1].data(), g.data());
            let mut ga = vec![T::zero(); inp[0].numel()];
            let mut gb = vec![T::zero(); inp[1].numel()];
            for (bi, (&oa, &ob)) in off_a.iter().zip(&off_b).enumerate() {
                let gblk = &gv[bi * m * n..(bi + 1) * m * n];
                let ablk = &av[oa * m * k..(oa + 1) * m * k];
                let bblk = &bv[ob * k * n..(ob + 1) * k * n];
                // dA = dY · Bᵀ
                let ga_blk = &mut ga[oa * m * k..(oa + 1) * m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + gblk[i * n + j] * bblk[p * n + j];
                        }
                        ga_blk[i * k + p] = ga_blk[i * k + p] + acc;
                    }
                }
                // dB = Aᵀ · dY
                let gb_blk = &mut gb[ob * k * n..(ob + 1) * k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ablk[i * k + p];
                        for j in 0..n {
                            gb_blk[p * n + j] = gb_blk[p * n + j] + av * gblk[i * n + j];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(inp[0].shape().to_vec(), ga).expect("shape")),
                Some(Tensor::new(inp[1].shape().to_vec(), gb).expect("shape")),
            ]
        }))
    }

    /// Contiguous sub-range `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::arg(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let y = Tensor::new(oshape, out)?;
        Ok(self.record(y, &[x], move |g, _, _| {
            let mut gx = vec![T::zero(); outer * n * inner];
            let gv = g.data();
            for o in 0..outer {
                let base = (o * n + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&gv[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
        }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::arg("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::arg("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &l) in xs.iter().zip(&lens) {
                let xv = self.value(x).data();
                out.extend_from_slice(&xv[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let y = Tensor::new(shape, out)?;
        Ok(self.record(y, xs, move |g, inp, _| {
            let gv = g.data();
            let mut parts: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (p, &l) in parts.iter_mut().zip(&lens) {
                    p.extend_from_slice(&gv[off..off + l * inner]);
                    off += l * inner;
                }
            }
            parts
                .into_iter()
                .zip(inp)
                .map(|(p, x)| Some(Tensor::new(x.shape().to_vec(), p).expect("shape")))
                .collect()
        }))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..n {
                    mx = mx.max(xv[at(k)]);
                }
                let mut s = T::zero();
                for k in 0..n {
                    let e = (xv[at(k)] - mx).exp();
                    out[at(k)] = e;
                    s = s + e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / s;
                }
            }
        }
        let y = Tensor::new(shape, out)?;
        Ok(self.record(y, &[x], move |g, _, out| {
            let (gv, yv) = (g.data(), out.data());
            let mut gx = vec![T::zero(); gv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: T = (0..n).map(|k| gv[at(k)] * yv[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = yv[at(k)] * (gv[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(out.shape().to_vec(), gx).expect("shape"))]
        }))
    }

    /// Normalizes over the last axis, then applies `gamma * x̂ + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::arg("layernorm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layernorm", &shape, self.shape(gamma)));
        }
        let eps = T::lit(eps);
        let rows = self.value(x).numel() / c.max(1);
        let (xv, gm, bt) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let cn = T::lit(c as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = gm[j] * h + bt[j];
            }
        }
        let y = Tensor::new(shape, out)?;
        Ok(self.record(y, &[x, gamma, beta], move |g, inp, _| {
            let (gv, gm) = (g.data(), inp[1].data());
            let mut gx = vec![T::zero(); gv.len()];
            let mut ggam = vec![T::zero(); c];
            let mut gbet = vec![T::zero(); c];
            for r in 0..rows {
                let gr = &gv[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                let mut sum_d = T::zero();
                let mut sum_dh = T::zero();
                for j in 0..c {
                    let d = gr[j] * gm[j];
                    sum_d = sum_d + d;
                    sum_dh = sum_dh + d * hr[j];
                    ggam[j] = ggam[j] + gr[j] * hr[j];
                    gbet[j] = gbet[j] + gr[j];
                }
                for j in 0..c {
                    let d = gr[j] * gm[j];
                    gx[r * c + j] = inv_std[r] * (d - sum_d / cn - hr[j] * sum_dh / cn);
                }
            }
            vec![
                Some(Tensor::new(inp[0].shape().to_vec(), gx).expect("shape")),
                Some(Tensor::new(vec![c], ggam).expect("shape")),
                Some(Tensor::new(vec![c], gbet).expect("shape")),
            ]
        }))
    }

    /// Adds `b: [C]` along the last axis of `x: [..., C]`.
    pub fn add_bias_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(Error::shape("add_bias_last", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data().to_vec();
        let mut y = self.value(x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = *v + bv[i % c];
        }
        Ok(self.record(y, &[x, b], move |g, _, _| {
            let mut gb = vec![T::zero(); c];
            for (i, &v) in g.data().iter().enumerate() {
                gb[i % c] = gb[i % c] + v;
            }
            vec![Some(g.clone()), Some(Tensor::new(vec![c], gb).expect("shape"))]
        }))
    }

    /// Adds `b: [C]` to every voxel of channel `c` in `x: [C, ...]`.
    pub fn add_bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).first().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(Error::shape("add_bias_channels", self.shape(x), self.shape(b)));
        }
        let vol = self.value(x).numel() / c.max(1);
        let bv = self.value(b).data().to_vec();
        let mut y = self.value(x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = *v + bv[i / vol];
        }
        Ok(self.record(y, &[x, b], move |g, _, _| {
            let gb = (0..c)
                .map(|ch| g.data()[ch * vol..(ch + 1) * vol].iter().copied().sum())
                .collect();
            vec![Some(g.clone()), Some(Tensor::new(vec![c], gb).expect("shape"))]
        }))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let y = conv3d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let parents: Vec<Var> = [x, w].into_iter().chain(bias).collect();
        Ok(self.record(y, &parents, move |g, inp, _| {
            let (gx, gw, gb) = conv3d_backward(g, inp[0], inp[1], &spec, need_x, need_w);
            let mut out = vec![gx, gw];
            if inp.len() == 3 {
                out.push(Some(gb));
            }
            out
        }))
    }

    /// Per-channel reduction of `x: [C, D, H, W]` (or any `[C, ...]`) to `[C]`.
    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        let vol = numel(&shape[1..]);
        if vol == 0 {
            return Err(Error::arg("global_pool", "empty spatial extent"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c);
        let mut arg = Vec::with_capacity(c);
        for ch in 0..c {
            let s = &xv[ch * vol..(ch + 1) * vol];
            match mode {
                PoolMode::Avg => out.push(s.iter().copied().sum::<T>() / T::lit(vol as f64)),
                PoolMode::Max => {
                    let mut best = 0;
                    for (i, &v) in s.iter().enumerate() {
                        if v > s[best] {
                            best = i;
                        }
                    }
                    arg.push(best);
                    out.push(s[best]);
                }
            }
        }
        let y = Tensor::new(vec![c], out)?;
        Ok(self.record(y, &[x], move |g, _, _| {
            let mut gx = vec![T::zero(); c * vol];
            for ch in 0..c {
                let gc = g.data()[ch];
                match mode {
                    PoolMode::Avg => {
                        let share = gc / T::lit(vol as f64);
                        gx[ch * vol..(ch + 1) * vol].fill(share);
                    }
                    PoolMode::Max => gx[ch * vol + arg[ch]] = gc,
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
        }))
    }

    fn resample(&mut self, x: Var, axis: usize, st: AxisStencil<T>) -> Var {
        let y = resample_axis(self.value(x), axis, &st);
        let in_shape = self.shape(x).to_vec();
        self.record(y, &[x], move |g, _, _| {
            vec![Some(resample_axis_backward(g, &in_shape, axis, &st))]
        })
    }

    /// Trilinear upsampling of `x: [C, d, h, w]` by an integer factor,
    /// half-pixel centred. Factor 1 is the identity.
    pub fn upsample_trilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || factor == 0 {
            return Err(Error::arg(
                "upsample_trilinear",
                format!("need [C,D,H,W] and factor >= 1, got {shape:?} ×{factor}"),
            ));
        }
        if factor == 1 {
            return Ok(x);
        }
        let mut y = x;
        for axis in 1..4 {
            let st = AxisStencil::upsample(shape[axis], factor);
            y = self.resample(y, axis, st);
        }
        Ok(y)
    }

    /// Spatial transformer: samples `image: [C, D, H, W]` at `v + u(v)` for the
    /// displacement `field: [3, D, H, W]`.
    pub fn warp(&mut self, image: Var, field: Var) -> Result<Var> {
        let (si, sf) = (self.shape(image), self.shape(field));
        if si.len() != 4 || sf.len() != 4 || sf[0] != 3 || si[1..] != sf[1..] {
            return Err(Error::shape("warp", si, sf));
        }
        let y = warp_forward(self.value(image), self.value(field));
        let need_img = self.requires_grad(image);
        let need_fld = self.requires_grad(field);
        Ok(self.record(y, &[image, field], move |g, inp, _| {
            let (gi, gf) = warp_backward(g, inp[0], inp[1], need_img, need_fld);
            vec![gi, gf]
        }))
    }

    /// Sums over every fully contained `w×w×w` window of the last three axes.
    /// Output extent per axis is `n - w + 1`.
    pub fn box_sum(&mut self, x: Var, window: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 3 || window == 0 || shape[r - 3..].iter().any(|&n| n < window) {
            return Err(Error::arg(
                "box_sum",
                format!("window {window} does not fit shape {shape:?}"),
            ));
        }
        let mut y = x;
        for axis in r - 3..r {
            y = self.window_sum_axis(y, axis, window);
        }
        Ok(y)
    }

    fn window_sum_axis(&mut self, x: Var, axis: usize, window: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let m = n - window + 1;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * m * inner];
        for o in 0..outer {
            for j in 0..m {
                let dst = (o * m + j) * inner;
                for t in 0..window {
                    let src = (o * n + j + t) * inner;
                    for k in 0..inner {
                        out[dst + k] = out[dst + k] + xv[src + k];
                    }
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[axis] = m;
        let y = Tensor::new(oshape, out).expect("shape");
        self.record(y, &[x], move |g, _, _| {
            let gv = g.data();
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for j in 0..m {
                    let src = (o * m + j) * inner;
                    for t in 0..window {
                        let dst = (o * n + j + t) * inner;
                        for k in 0..inner {
                            gx[dst + k] = gx[dst + k] + gv[src + k];
                        }
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
        })
    }

    /// Forward difference `x[i+1] - x[i]` along `axis` (extent shrinks by 1).
    pub fn diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] < 2 {
            return Err(Error::arg("diff", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (n - 1) * inner);
        for o in 0..outer {
            for j in 0..n - 1 {
                let a = (o * n + j) * inner;
                let b = a + inner;
                out.extend((0..inner).map(|k| xv[b + k] - xv[a + k]));
            }
        }
        let mut oshape = shape.clone();
        oshape[axis] = n - 1;
        let y = Tensor::new(oshape, out)?;
        Ok(self.record(y, &[x], move |g, _, _| {
            let gv = g.data();
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for j in 0..n - 1 {
                    let src = (o * (n - 1) + j) * inner;
                    let a = (o * n + j) * inner;
                    let b = a + inner;
                    for k in 0..inner {
                        gx[b + k] = gx[b + k] + gv[src + k];
                        gx[a + k] = gx[a + k] - gv[src + k];
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
        }))
    }

    /// `[C, D, H, W]` → `[D·H·W, C]` token layout.
    pub fn volume_to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::arg("volume_to_tokens", format!("shape {s:?}")));
        }
        let flat = self.reshape(x, &[s[0], s[1] * s[2] * s[3]])?;
        self.transpose(flat)
    }

    /// `[N, C]` → `[C, d, h, w]`; `N` must equal `d·h·w`.
    pub fn tokens_to_volume(&mut self, x: Var, spatial: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != spatial.iter().product::<usize>() {
            return Err(Error::shape("tokens_to_volume", &s, &spatial));
        }
        let t = self.transpose(x)?;
        self.reshape(t, &[s[1], spatial[0], spatial[1], spatial[2]])
    }
}

/// Validates conv geometry without running it; returns the output shape.
pub fn conv3d_output_shape(x: &[usize], w: &[usize], spec: &Conv3dSpec) -> Result<Vec<usize>> {
    let d = conv_dims(x, w, spec)?;
    let mut out = vec![d.cout];
    out.extend_from_slice(&d.output);
    Ok(out)
}
