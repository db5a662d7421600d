//! Efficient attention, channel (transpose) attention, Mix-FFN and the dual
//! attention transformer block built from them.
//!
//! Tokens are rows of an `[N, d_model]` matrix, one row per voxel of the
//! feature volume in row-major `(z, y, x)` order.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::conv::Conv3dSpec;
use crate::nn::{Bound, Conv3d, Init, LayerNorm, Linear, ParamRegistry};
use crate::tensor::Scalar;

/// Hidden width of Mix-FFN relative to the model width.
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub efficient: bool,
    pub channel: bool,
    /// Cubic extent of the depthwise kernels inside Mix-FFN and the fusion
    /// feature extractor.
    pub ffn_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            efficient: true,
            channel: true,
            ffn_kernel: 3,
        }
    }
}

fn split_heads(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by {heads} heads"
        )));
    }
    Ok(d_model / heads)
}

/// Per head: `ρ_q(Q) (ρ_k(K)ᵀ V)` where `ρ_q` is a softmax over each query
/// row's channels and `ρ_k` a softmax over positions for each key channel.
/// Heads are concatenated along channels; no output projection.
pub fn efficient_attention_core<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = split_heads(d, heads)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * dh, dh)?;
        let kh = tape.narrow(k, 1, h * dh, dh)?;
        let vh = tape.narrow(v, 1, h * dh, dh)?;
        let rq = tape.softmax(qh, 1)?;
        let rk = tape.softmax(kh, 0)?;
        let rkt = tape.transpose(rk)?;
        let context = tape.matmul(rkt, vh)?;
        outs.push(tape.matmul(rq, context)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// Per head: `V · softmax(Kᵀ Q / τ)`, the softmax normalizing each column of
/// the `[d_head, d_head]` cross-covariance so every output channel is a convex
/// combination of value channels. `log_tau: [heads]`.
pub fn channel_attention_core<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    log_tau: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = split_heads(d, heads)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * dh, dh)?;
        let kh = tape.narrow(k, 1, h * dh, dh)?;
        let vh = tape.narrow(v, 1, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(kt, qh)?;
        let lt = tape.narrow(log_tau, 0, h, 1)?;
        let neg = tape.scale(lt, -1.0);
        let inv_tau = tape.exp(neg);
        let scaled = tape.mul_scalar_var(scores, inv_tau)?;
        let attn = tape.softmax(scaled, 0)?;
        outs.push(tape.matmul(vh, attn)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// Q/K/V projections (no bias) plus a biased output projection.
#[derive(Clone, Debug)]
pub struct QkvProjections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl QkvProjections {
    fn new(reg: &mut ParamRegistry, prefix: &str, d_model: usize) -> Self {
        Self {
            q: Linear::new(reg, &format!("{prefix}.q"), d_model, d_model, false),
            k: Linear::new(reg, &format!("{prefix}.k"), d_model, d_model, false),
            v: Linear::new(reg, &format!("{prefix}.v"), d_model, d_model, false),
            out: Linear::new(reg, &format!("{prefix}.proj"), d_model, d_model, true),
        }
    }

    fn project<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var, Var)> {
        Ok((
            self.q.forward(tape, p, x)?,
            self.k.forward(tape, p, x)?,
            self.v.forward(tape, p, x)?,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct EfficientAttention {
    pub proj: QkvProjections,
    pub heads: usize,
}

impl EfficientAttention {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        split_heads(d_model, heads)?;
        Ok(Self {
            proj: QkvProjections::new(reg, prefix, d_model),
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (q, k, v) = self.proj.project(tape, p, x)?;
        let y = efficient_attention_core(tape, q, k, v, self.heads)?;
        self.proj.out.forward(tape, p, y)
    }
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub proj: QkvProjections,
    pub log_tau: String,
    pub heads: usize,
}

impl ChannelAttention {
    /// `τ` starts at `sqrt(d_head)` and is stored as `ln τ`.
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        let dh = split_heads(d_model, heads)?;
        let log_tau = reg.declare(
            format!("{prefix}.log_tau"),
            &[heads],
            Init::Const((dh as f64).sqrt().ln()),
        );
        Ok(Self {
            proj: QkvProjections::new(reg, prefix, d_model),
            log_tau,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (q, k, v) = self.proj.project(tape, p, x)?;
        let y = channel_attention_core(tape, q, k, v, p.var(&self.log_tau)?, self.heads)?;
        self.proj.out.forward(tape, p, y)
    }
}

/// `FC(GELU(DW-Conv(FC(X))))` with the depthwise conv applied on the token
/// grid reshaped back to its volume.
#[derive(Clone, Debug)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dw: Conv3d,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d_model: usize, kernel: usize) -> Self {
        let hidden = d_model * MLP_RATIO;
        Self {
            fc1: Linear::new(reg, &format!("{prefix}.fc1"), d_model, hidden, true),
            dw: Conv3d::new(
                reg,
                &format!("{prefix}.dwconv"),
                hidden,
                hidden,
                kernel,
                Conv3dSpec::same(kernel, 1, hidden),
            ),
            fc2: Linear::new(reg, &format!("{prefix}.fc2"), hidden, d_model, true),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        spatial: [usize; 3],
    ) -> Result<Var> {
        let n = tape.shape(x)[0];
        if n != spatial.iter().product::<usize>() {
            return Err(Error::shape("mix_ffn", tape.shape(x), &spatial));
        }
        let h = self.fc1.forward(tape, p, x)?;
        let vol = tape.tokens_to_volume(h, spatial)?;
        let vol = self.dw.forward(tape, p, vol)?;
        let h = tape.volume_to_tokens(vol)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Efficient attention then channel attention, each followed by a
/// layer-normed Mix-FFN, with residual connections:
///
/// ```text
/// EA_b = EA(X) + X
/// M1   = MLP(LN(EA_b))
/// Z    = EA_b + M1
/// CA_b = CA(Z) + Z
/// M2   = MLP(LN(CA_b))
/// out  = CA_b + M2
/// ```
///
/// A disabled mechanism passes its input through unchanged.
#[derive(Clone, Debug)]
pub struct DualAttentionBlock {
    pub efficient: Option<EfficientAttention>,
    pub norm1: LayerNorm,
    pub mlp1: MixFfn,
    pub channel: Option<ChannelAttention>,
    pub norm2: LayerNorm,
    pub mlp2: MixFfn,
}

impl DualAttentionBlock {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        d_model: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        if !cfg.efficient && !cfg.channel {
            return Err(Error::Config(
                "at least one of efficient/channel attention must be enabled".into(),
            ));
        }
        let efficient = cfg
            .efficient
            .then(|| EfficientAttention::new(reg, &format!("{prefix}.ea"), d_model, cfg.heads))
            .transpose()?;
        let norm1 = LayerNorm::new(reg, &format!("{prefix}.norm1"), d_model);
        let mlp1 = MixFfn::new(reg, &format!("{prefix}.mlp1"), d_model, cfg.ffn_kernel);
        let channel = cfg
            .channel
            .then(|| ChannelAttention::new(reg, &format!("{prefix}.ca"), d_model, cfg.heads))
            .transpose()?;
        let norm2 = LayerNorm::new(reg, &format!("{prefix}.norm2"), d_model);
        let mlp2 = MixFfn::new(reg, &format!("{prefix}.mlp2"), d_model, cfg.ffn_kernel);
        Ok(Self {
            efficient,
            norm1,
            mlp1,
            channel,
            norm2,
            mlp2,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        spatial: [usize; 3],
    ) -> Result<Var> {
        let ea_b = match &self.efficient {
            Some(ea) => {
                let a = ea.forward(tape, p, x)?;
                tape.add(a, x)?
            }
            None => x,
        };
        let n1 = self.norm1.forward(tape, p, ea_b)?;
        let m1 = self.mlp1.forward(tape, p, n1, spatial)?;
        let z = tape.add(ea_b, m1)?;
        let ca_b = match &self.channel {
            Some(ca) => {
                let a = ca.forward(tape, p, z)?;
                tape.add(a, z)?
            }
            None => z,
        };
        let n2 = self.norm2.forward(tape, p, ca_b)?;
        let m2 = self.mlp2.forward(tape, p, n2, spatial)?;
        tape.add(ca_b, m2)
    }
}
