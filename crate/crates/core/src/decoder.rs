//! Decoder: DAE-Former and LKA stages, nested attention fusion over encoder
//! skips, and the three-channel deformation head.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, DualAttentionBlock};
use crate::autodiff::{Tape, Var};
use crate::encoder::{EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::kernels::conv::Conv3dSpec;
use crate::nn::{Bound, Conv3d, Init, LayerNorm, Linear, ParamRegistry};
use crate::ops::PoolMode;
use crate::tensor::Scalar;

/// Depthwise kernel of the LKA local branch.
pub const LKA_LOCAL_KERNEL: usize = 5;
/// Dilated depthwise kernel of the LKA long-range branch.
pub const LKA_DILATED_KERNEL: usize = 7;
pub const LKA_DILATION: usize = 3;
/// Dilation of the second depthwise conv in fusion feature extraction.
pub const FEATURE_DILATION: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub dae_former_count: usize,
    pub lka_count: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dae_former_count: 2,
            lka_count: 2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, enc: &EncoderConfig, errors: &mut Vec<String>) {
        let stages = enc.num_stages();
        if self.dae_former_count + self.lka_count != stages {
            errors.push(format!(
                "decoder blocks ({} DAE-Former + {} LKA) must equal the {} encoder stages",
                self.dae_former_count, self.lka_count, stages
            ));
        }
    }
}

/// Large-kernel attention: `x + A ⊙ x` with
/// `A = pointwise(dilated_depthwise(depthwise(x)))`.
#[derive(Clone, Debug)]
pub struct LkaBlock {
    pub local: Conv3d,
    pub dilated: Conv3d,
    pub pointwise: Conv3d,
}

impl LkaBlock {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, channels: usize) -> Self {
        Self {
            local: Conv3d::new(
                reg,
                &format!("{prefix}.dw"),
                channels,
                channels,
                LKA_LOCAL_KERNEL,
                Conv3dSpec::same(LKA_LOCAL_KERNEL, 1, channels),
            ),
            dilated: Conv3d::new(
                reg,
                &format!("{prefix}.dw_dilated"),
                channels,
                channels,
                LKA_DILATED_KERNEL,
                Conv3dSpec::same(LKA_DILATED_KERNEL, LKA_DILATION, channels),
            ),
            pointwise: Conv3d::new(
                reg,
                &format!("{prefix}.pw"),
                channels,
                channels,
                1,
                Conv3dSpec::default(),
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let a = self.local.forward(tape, p, x)?;
        let a = self.dilated.forward(tape, p, a)?;
        let a = self.pointwise.forward(tape, p, a)?;
        let gated = tape.mul(a, x)?;
        tape.add(x, gated)
    }
}

/// Dual attention block applied to a `[C, d, h, w]` volume.
#[derive(Clone, Debug)]
pub struct DaeFormerBlock {
    pub block: DualAttentionBlock,
}

impl DaeFormerBlock {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        channels: usize,
        attn: &AttentionConfig,
    ) -> Result<Self> {
        Ok(Self {
            block: DualAttentionBlock::new(reg, &format!("{prefix}.block"), channels, attn)?,
        })
    }

    pub fn forward_tokens<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
        spatial: [usize; 3],
    ) -> Result<Var> {
        self.block.forward(tape, p, tokens, spatial)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let spatial = [s[1], s[2], s[3]];
        let tokens = tape.volume_to_tokens(x)?;
        let y = self.forward_tokens(tape, p, tokens, spatial)?;
        tape.tokens_to_volume(y, spatial)
    }
}

/// Average- and max-pooled channel descriptors through one shared
/// projection, summed.
#[derive(Clone, Debug)]
pub struct GlobalExtract {
    pub proj: Linear,
}

impl GlobalExtract {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, channels: usize) -> Self {
        Self {
            proj: Linear::new(reg, &format!("{prefix}.proj"), channels, channels, true),
        }
    }

    /// `[C, d, h, w]` → `[C]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.shape(x)[0];
        let mut acc = None;
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let pooled = tape.global_pool(x, mode)?;
            let row = tape.reshape(pooled, &[1, c])?;
            let y = self.proj.forward(tape, p, row)?;
            acc = Some(match acc {
                None => y,
                Some(a) => tape.add(a, y)?,
            });
        }
        tape.reshape(acc.expect("two pools"), &[c])
    }
}

/// Depthwise → pointwise → dilated depthwise → 1×1 reduction, all
/// size-preserving.
#[derive(Clone, Debug)]
pub struct FeatureExtract {
    pub depthwise: Conv3d,
    pub pointwise: Conv3d,
    pub dilated: Conv3d,
    pub reduce: Conv3d,
}

impl FeatureExtract {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, channels: usize, kernel: usize) -> Self {
        let c = channels;
        Self {
            depthwise: Conv3d::new(reg, &format!("{prefix}.dw"), c, c, kernel, Conv3dSpec::same(kernel, 1, c)),
            pointwise: Conv3d::new(reg, &format!("{prefix}.pw"), c, c, 1, Conv3dSpec::default()),
            dilated: Conv3d::new(
                reg,
                &format!("{prefix}.dw_dilated"),
                c,
                c,
                kernel,
                Conv3dSpec::same(kernel, FEATURE_DILATION, c),
            ),
            reduce: Conv3d::new(reg, &format!("{prefix}.reduce"), c, c, 1, Conv3dSpec::default()),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(tape, p, x)?;
        let y = self.pointwise.forward(tape, p, y)?;
        let y = self.dilated.forward(tape, p, y)?;
        self.reduce.forward(tape, p, y)
    }
}

/// Intermediate values of one fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionTrace {
    pub u: Var,
    pub selection: Var,
    pub x1_selected: Var,
    pub x2_selected: Var,
    pub u_prime: Var,
    pub output: Var,
}

/// Fuses decoder features `x1` with encoder skip features `x2` (same shape):
///
/// ```text
/// U   = LN(FeatureExtract(X1) + GlobalExtract(X2))
/// SM  = softmax_channels(Conv1x1(U))
/// X1' = SM ⊙ X1 + X1,  X2' = SM ⊙ X2 + X2
/// U'  = (X1' ⊙ σ(X2')) ⊙ (X2' ⊙ σ(X1'))
/// out = Conv1x1(σ(Conv1x1(U')) ⊙ X1)
/// ```
#[derive(Clone, Debug)]
pub struct NestedAttentionFusion {
    pub global: GlobalExtract,
    pub local: FeatureExtract,
    pub norm: LayerNorm,
    pub select: Conv3d,
    pub gate: Conv3d,
    pub out: Conv3d,
}

impl NestedAttentionFusion {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, channels: usize, kernel: usize) -> Self {
        let c = channels;
        let pw = |reg: &mut ParamRegistry, name: &str| {
            Conv3d::new(reg, &format!("{prefix}.{name}"), c, c, 1, Conv3dSpec::default())
        };
        Self {
            global: GlobalExtract::new(reg, &format!("{prefix}.global"), c),
            local: FeatureExtract::new(reg, &format!("{prefix}.local"), c, kernel),
            norm: LayerNorm::new(reg, &format!("{prefix}.norm"), c),
            select: pw(reg, "select"),
            gate: pw(reg, "gate"),
            out: pw(reg, "out"),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x1: Var, x2: Var) -> Result<Var> {
        Ok(self.forward_trace(tape, p, x1, x2)?.output)
    }

    pub fn forward_trace<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x1: Var,
        x2: Var,
    ) -> Result<FusionTrace> {
        if tape.shape(x1) != tape.shape(x2) {
            return Err(Error::InvalidArgument {
                op: "nested_attention_fusion",
                msg: format!(
                    "decoder features {:?} and skip features {:?} differ; upsample and project the decoder features first",
                    tape.shape(x1),
                    tape.shape(x2)
                ),
            });
        }
        let global = self.global.forward(tape, p, x2)?;
        let local = self.local.forward(tape, p, x1)?;
        let fused = tape.add_bias_channels(local, global)?;
        let u = self.norm.forward_volume(tape, p, fused)?;

        let logits = self.select.forward(tape, p, u)?;
        let sm = tape.softmax(logits, 0)?;
        let s1 = tape.mul(sm, x1)?;
        let x1p = tape.add(s1, x1)?;
        let s2 = tape.mul(sm, x2)?;
        let x2p = tape.add(s2, x2)?;

        let sig2 = tape.sigmoid(x2p);
        let sig1 = tape.sigmoid(x1p);
        let a = tape.mul(x1p, sig2)?;
        let b = tape.mul(x2p, sig1)?;
        let u_prime = tape.mul(a, b)?;

        let g = self.gate.forward(tape, p, u_prime)?;
        let g = tape.sigmoid(g);
        let gated = tape.mul(g, x1)?;
        let output = self.out.forward(tape, p, gated)?;
        Ok(FusionTrace {
            u,
            selection: sm,
            x1_selected: x1p,
            x2_selected: x2p,
            u_prime,
            output,
        })
    }
}

#[derive(Clone, Debug)]
pub enum DecoderBlock {
    DaeFormer(DaeFormerBlock),
    Lka(LkaBlock),
}

impl DecoderBlock {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            DecoderBlock::DaeFormer(b) => b.forward(tape, p, x),
            DecoderBlock::Lka(b) => b.forward(tape, p, x),
        }
    }
}

/// Resolution step between decoder stages.
#[derive(Clone, Debug)]
pub struct UpStep {
    pub factor: usize,
    pub proj: Conv3d,
    pub fusion: NestedAttentionFusion,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub block: DecoderBlock,
    /// Pyramid level this stage reads (deepest first).
    pub level: usize,
    pub up: Option<UpStep>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<DecoderStage>,
    pub final_factor: usize,
    pub head: Conv3d,
}

impl Decoder {
    /// Stages run deepest to shallowest: the first `dae_former_count` use
    /// DAE-Former blocks, the rest LKA. Parameter prefixes are
    /// `{prefix}.dae{i}` / `{prefix}.lka{i}` (1-based) and `{prefix}.head`.
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        cfg: &DecoderConfig,
        enc: &EncoderConfig,
        attn: &AttentionConfig,
    ) -> Result<Self> {
        let mut errors = Vec::new();
        cfg.validate(enc, &mut errors);
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        let n = enc.num_stages();
        let mut stages = Vec::with_capacity(n);
        for k in 0..n {
            let level = n - 1 - k;
            let c = enc.stage_channels[level];
            let (sp, block) = if k < cfg.dae_former_count {
                let sp = format!("{prefix}.dae{}", k + 1);
                let b = DaeFormerBlock::new(reg, &sp, c, attn)?;
                (sp, DecoderBlock::DaeFormer(b))
            } else {
                let sp = format!("{prefix}.lka{}", k + 1 - cfg.dae_former_count);
                let b = LkaBlock::new(reg, &format!("{sp}.lka"), c);
                (sp, DecoderBlock::Lka(b))
            };
            let up = (level > 0).then(|| {
                let c_next = enc.stage_channels[level - 1];
                UpStep {
                    factor: enc.stage_strides[level],
                    proj: Conv3d::new(reg, &format!("{sp}.up_proj"), c, c_next, 1, Conv3dSpec::default()),
                    fusion: NestedAttentionFusion::new(reg, &format!("{sp}.fusion"), c_next, attn.ffn_kernel),
                }
            });
            stages.push(DecoderStage { block, level, up });
        }
        let head = Conv3d::with_init(
            reg,
            &format!("{prefix}.head"),
            enc.stage_channels[0],
            3,
            1,
            Conv3dSpec::default(),
            Init::Zeros,
        );
        Ok(Self {
            stages,
            final_factor: enc.stage_strides[0],
            head,
        })
    }

    /// Maps the pyramid to a displacement field `[3, D, H, W]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, pyramid: &FeaturePyramid) -> Result<Var> {
        if pyramid.stages.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "pyramid has {} levels but decoder expects {}",
                pyramid.stages.len(),
                self.stages.len()
            )));
        }
        let mut h = pyramid.stages[self.stages[0].level].features;
        for stage in &self.stages {
            h = stage.block.forward(tape, p, h)?;
            if let Some(up) = &stage.up {
                let x = tape.upsample_trilinear(h, up.factor)?;
                let x = up.proj.forward(tape, p, x)?;
                let skip = pyramid.stages[stage.level - 1].features;
                h = up.fusion.forward(tape, p, x, skip)?;
            }
        }
        let full = tape.upsample_trilinear(h, self.final_factor)?;
        self.head.forward(tape, p, full)
    }
}
