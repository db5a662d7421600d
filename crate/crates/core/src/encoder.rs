//! Multi-stage overlapping-patch encoder producing the feature pyramid.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, DualAttentionBlock};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::conv::Conv3dSpec;
use crate::nn::{Bound, Conv3d, LayerNorm, ParamRegistry};
use crate::tensor::Scalar;

/// Channels of the encoder input (moving and fixed volumes stacked).
pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub stage_strides: Vec<usize>,
    pub patch_kernels: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_strides: vec![4, 2, 2, 2],
            patch_kernels: vec![7, 3, 3, 3],
            stage_channels: vec![8, 16, 32, 64],
            blocks_per_stage: 1,
        }
    }
}

impl EncoderConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_strides.len()
    }

    /// Product of all stage strides; every input extent must be a multiple.
    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        let n = self.stage_strides.len();
        if n == 0 {
            errors.push("encoder needs at least one stage".into());
        }
        if self.patch_kernels.len() != n || self.stage_channels.len() != n {
            errors.push(format!(
                "encoder lists differ in length: strides {}, kernels {}, channels {}",
                n,
                self.patch_kernels.len(),
                self.stage_channels.len()
            ));
            return;
        }
        for (i, (&k, &s)) in self.patch_kernels.iter().zip(&self.stage_strides).enumerate() {
            if s == 0 {
                errors.push(format!("stage {i}: stride must be positive"));
            } else if k % 2 == 0 {
                errors.push(format!("stage {i}: patch kernel {k} must be odd"));
            } else if k <= s {
                errors.push(format!(
                    "stage {i}: patch kernel {k} must exceed stride {s} for overlapping patches"
                ));
            }
        }
        if self.stage_channels.contains(&0) {
            errors.push("stage channels must be positive".into());
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            errors.push(format!(
                "stage channels must be non-decreasing, got {:?}",
                self.stage_channels
            ));
        }
    }

    /// Spatial extents of each pyramid stage for a given input.
    pub fn stage_extents(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let total = self.total_stride();
        if input.iter().any(|&e| e == 0 || e % total != 0) {
            return Err(Error::Config(format!(
                "input extents {input:?} must each be a positive multiple of {total} (product of stage strides {:?})",
                self.stage_strides
            )));
        }
        let mut cur = input;
        let mut out = Vec::with_capacity(self.num_stages());
        for &s in &self.stage_strides {
            cur = cur.map(|e| e / s);
            out.push(cur);
        }
        Ok(out)
    }
}

/// Strided convolution with half-kernel padding followed by channel
/// layer-norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv3d,
    pub norm: LayerNorm,
    pub stride: usize,
    pub kernel: usize,
}

impl PatchEmbed {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel <= stride {
            return Err(Error::Config(format!(
                "overlap violation: patch kernel {kernel} must exceed stride {stride}"
            )));
        }
        let spec = Conv3dSpec::uniform(stride, kernel / 2, 1, 1);
        Ok(Self {
            conv: Conv3d::new(reg, &format!("{prefix}.proj"), c_in, c_out, kernel, spec),
            norm: LayerNorm::new(reg, &format!("{prefix}.norm"), c_out),
            stride,
            kernel,
        })
    }

    /// `[C_in, D, H, W]` → tokens `[N, C_out]` and their spatial shape.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, [usize; 3])> {
        let y = self.conv.forward(tape, p, x)?;
        let s = tape.shape(y).to_vec();
        let spatial = [s[1], s[2], s[3]];
        let tokens = tape.volume_to_tokens(y)?;
        Ok((self.norm.forward(tape, p, tokens)?, spatial))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub embed: PatchEmbed,
    pub blocks: Vec<DualAttentionBlock>,
    pub norm: LayerNorm,
}

/// Per-stage feature volumes `[C_i, d_i, h_i, w_i]`, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: Vec<PyramidLevel>,
}

#[derive(Clone, Copy, Debug)]
pub struct PyramidLevel {
    pub features: Var,
    pub spatial: [usize; 3],
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        cfg: &EncoderConfig,
        attn: &AttentionConfig,
    ) -> Result<Self> {
        let mut errors = Vec::new();
        cfg.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        let mut c_in = INPUT_CHANNELS;
        let mut stages = Vec::with_capacity(cfg.num_stages());
        for i in 0..cfg.num_stages() {
            let c = cfg.stage_channels[i];
            let sp = format!("{prefix}.stage{i}");
            let embed = PatchEmbed::new(
                reg,
                &format!("{sp}.embed"),
                c_in,
                c,
                cfg.patch_kernels[i],
                cfg.stage_strides[i],
            )?;
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| DualAttentionBlock::new(reg, &format!("{sp}.block{b}"), c, attn))
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(reg, &format!("{sp}.norm"), c);
            stages.push(EncoderStage { embed, blocks, norm });
            c_in = c;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    /// Stacks `moving` and `fixed` (each `[1, D, H, W]`) into a two-channel
    /// input and runs every stage.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        moving: Var,
        fixed: Var,
    ) -> Result<FeaturePyramid> {
        let (sm, sf) = (tape.shape(moving).to_vec(), tape.shape(fixed).to_vec());
        if sm != sf || sm.len() != 4 || sm[0] != 1 {
            return Err(Error::shape("encoder input", &sm, &sf));
        }
        let extents = self.cfg.stage_extents([sm[1], sm[2], sm[3]])?;
        let mut x = tape.concat(&[moving, fixed], 0)?;
        let mut levels = Vec::with_capacity(self.stages.len());
        for (stage, expect) in self.stages.iter().zip(extents) {
            let (mut tokens, spatial) = stage.embed.forward(tape, p, x)?;
            debug_assert_eq!(spatial, expect);
            for block in &stage.blocks {
                tokens = block.forward(tape, p, tokens, spatial)?;
            }
            let tokens = stage.norm.forward(tape, p, tokens)?;
            x = tape.tokens_to_volume(tokens, spatial)?;
            levels.push(PyramidLevel {
                features: x,
                spatial,
                channels: tape.shape(x)[0],
            });
        }
        Ok(FeaturePyramid { stages: levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_extents_follow_stride_product() {
        let cfg = EncoderConfig::default();
        let e = cfg.stage_extents([32, 32, 32]).unwrap();
        assert_eq!(e, vec![[8; 3], [4; 3], [2; 3], [1; 3]]);
        assert!(cfg.stage_extents([48, 32, 32]).is_err());
    }

    #[test]
    fn kernel_not_exceeding_stride_is_an_overlap_violation() {
        let mut reg = ParamRegistry::new();
        let err = PatchEmbed::new(&mut reg, "pe", 2, 4, 2, 2).unwrap_err();
        assert!(err.to_string().contains("overlap"));

        let mut errors = Vec::new();
        EncoderConfig {
            patch_kernels: vec![3, 3, 3, 3],
            ..Default::default()
        }
        .validate(&mut errors);
        assert_eq!(errors.len(), 1);
    }

    #[test]
    fn decreasing_channels_rejected() {
        let mut errors = Vec::new();
        EncoderConfig {
            stage_channels: vec![8, 4, 32, 64],
            ..Default::default()
        }
        .validate(&mut errors);
        assert!(errors[0].contains("non-decreasing"));
    }
}
