//! The standard finite-difference suite: every building block, each loss
//! and the assembled model, checked with respect to inputs and parameters.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{gradcheck_coords, GradcheckReport, DEFAULT_STEP};
use crate::attention::{
    channel_attention_core, efficient_attention_core, AttentionConfig, ChannelAttention, DualAttentionBlock,
    EfficientAttention, MixFfn,
};
use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::{DaeFormerBlock, FeatureExtract, GlobalExtract, LkaBlock, NestedAttentionFusion};
use crate::encoder::PatchEmbed;
use crate::error::Result;
use crate::kernels::conv::Conv3dSpec;
use crate::losses::{composite_loss, ncc_loss, smoothness_loss};
use crate::model::NestedMorph;
use crate::nn::{Bound, Conv3d, LayerNorm, ParamRegistry, ParamStore};
use crate::synth::synth_pair;
use crate::tensor::Tensor;

/// Maximum relative error accepted by [`run_suite`] callers.
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Coordinates sampled per checked tensor in block cases.
const BLOCK_COORDS: usize = 24;
/// Coordinates sampled per parameter tensor of the full model.
const MODEL_COORDS: usize = 3;
/// Std of the noise added to initial parameters of single blocks.
const BLOCK_NOISE: f64 = 0.1;
/// Same for the full model, whose features are otherwise too small for
/// well-conditioned differences.
const MODEL_NOISE: f64 = 0.3;

pub type CaseFn = Rc<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// A scalar function of one tensor, with the coordinates to probe.
#[derive(Clone)]
pub struct GradcheckCase {
    pub name: String,
    pub input: Tensor<f64>,
    pub coords: Vec<usize>,
    pub f: CaseFn,
}

impl GradcheckCase {
    /// Probes every coordinate of `input`.
    pub fn new(name: impl Into<String>, input: Tensor<f64>, f: CaseFn) -> Self {
        let coords = (0..input.numel()).collect();
        Self {
            name: name.into(),
            input,
            coords,
            f,
        }
    }

    pub fn with_coords(mut self, coords: Vec<usize>) -> Self {
        self.coords = coords;
        self
    }

    pub fn run(&self) -> Result<GradcheckReport> {
        let f = self.f.clone();
        gradcheck_coords(move |t, x| f(t, x), &self.input, DEFAULT_STEP, &self.coords)
    }
}

#[derive(Debug)]
pub struct CaseResult {
    pub name: String,
    pub outcome: Result<GradcheckReport>,
}

impl CaseResult {
    pub fn passes(&self, tol: f64) -> bool {
        matches!(&self.outcome, Ok(r) if r.passes(tol))
    }
}

#[derive(Debug)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub results: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passes(self.tolerance))
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.results.iter().filter(|r| !r.passes(self.tolerance))
    }

    /// Largest relative error over cases that evaluated.
    pub fn max_rel_error(&self) -> f64 {
        self.results
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok())
            .fold(0.0, |m, r| m.max(r.max_rel_error))
    }
}

pub fn run_suite(cases: &[GradcheckCase], tolerance: f64) -> SuiteReport {
    let results = cases
        .iter()
        .map(|c| {
            let outcome = c.run();
            match &outcome {
                Ok(r) => log::debug!("gradcheck {}: {:.3e}", c.name, r.max_rel_error),
                Err(e) => log::debug!("gradcheck {}: {e}", c.name),
            }
            CaseResult {
                name: c.name.clone(),
                outcome,
            }
        })
        .collect();
    SuiteReport { tolerance, results }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| std * rng.sample::<f64, _>(StandardNormal))
}

fn pick(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut idx = sample(rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// `Σ y ⊙ R` with a fixed pseudo-random `R`, so no output coordinate's
/// gradient cancels by symmetry.
fn project(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 ^ shape.iter().product::<usize>() as u64);
    let r = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

/// Initial parameters plus noise, so zero and constant initializers do not
/// hide terms.
fn perturbed(reg: &ParamRegistry, rng: &mut ChaCha8Rng, noise: f64) -> ParamStore<f64> {
    let mut p = reg.initialize::<f64>(rng.gen());
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

type ModuleFn = Rc<dyn Fn(&mut Tape<f64>, &Bound, Var) -> Result<Var>>;

/// One case for the input and one per parameter tensor.
fn module_cases(
    name: &str,
    reg: &ParamRegistry,
    input: Tensor<f64>,
    rng: &mut ChaCha8Rng,
    max_coords: usize,
    forward: ModuleFn,
) -> Vec<GradcheckCase> {
    let params = Rc::new(perturbed(reg, rng, BLOCK_NOISE));
    let mut cases = Vec::new();
    {
        let (params, forward) = (params.clone(), forward.clone());
        let f: CaseFn = Rc::new(move |t, x| {
            let b = params.bind_frozen(t);
            let y = forward(t, &b, x)?;
            project(t, y)
        });
        let coords = pick(rng, input.numel(), max_coords);
        cases.push(GradcheckCase::new(format!("{name}/input"), input.clone(), f).with_coords(coords));
    }
    for spec in reg.specs() {
        let value = params.get(&spec.name).expect("registered").clone();
        let (params, forward, input) = (params.clone(), forward.clone(), input.clone());
        let pname = spec.name.clone();
        let f: CaseFn = Rc::new(move |t, v| {
            let mut b = params.bind_frozen(t);
            b.set(&pname, v);
            let x = t.constant(input.clone());
            let y = forward(t, &b, x)?;
            project(t, y)
        });
        let coords = pick(rng, value.numel(), max_coords);
        cases.push(GradcheckCase::new(format!("{name}/{}", spec.name), value, f).with_coords(coords));
    }
    cases
}

fn qkv_cases(rng: &mut ChaCha8Rng) -> Vec<GradcheckCase> {
    let (n, d, heads) = (10, 4, 2);
    let q = normal(rng, &[n, d], 1.0);
    let k = normal(rng, &[n, d], 1.0);
    let v = normal(rng, &[n, d], 1.0);
    let log_tau = normal(rng, &[heads], 0.3);
    let mut cases = Vec::new();
    for (slot, label) in ["q", "k", "v"].iter().enumerate() {
        let input = [&q, &k, &v][slot].clone();
        let (q, k, v) = (q.clone(), k.clone(), v.clone());
        let f: CaseFn = Rc::new(move |t, x| {
            let mut vars = [q.clone(), k.clone(), v.clone()].map(|m| t.constant(m));
            vars[slot] = x;
            let y = efficient_attention_core(t, vars[0], vars[1], vars[2], heads)?;
            project(t, y)
        });
        cases.push(GradcheckCase::new(format!("efficient_attention_core/{label}"), input, f));
    }
    for (slot, label) in ["q", "k", "v", "log_tau"].iter().enumerate() {
        let input = [&q, &k, &v, &log_tau][slot].clone();
        let (q, k, v, lt) = (q.clone(), k.clone(), v.clone(), log_tau.clone());
        let f: CaseFn = Rc::new(move |t, x| {
            let mut vars = [q.clone(), k.clone(), v.clone(), lt.clone()].map(|m| t.constant(m));
            vars[slot] = x;
            let y = channel_attention_core(t, vars[0], vars[1], vars[2], vars[3], heads)?;
            project(t, y)
        });
        cases.push(GradcheckCase::new(format!("channel_attention_core/{label}"), input, f));
    }
    cases
}

fn block_cases(rng: &mut ChaCha8Rng) -> Result<Vec<GradcheckCase>> {
    let mut cases = Vec::new();
    let c = 4;
    let spatial = [3, 3, 2];
    let n: usize = spatial.iter().product();
    let tokens = normal(rng, &[n, c], 1.0);
    let volume = normal(rng, &[c, 4, 4, 3], 1.0);
    let attn = AttentionConfig {
        heads: 2,
        ..Default::default()
    };

    let conv_specs = [
        ("conv3d_strided", 3, Conv3dSpec::uniform(2, 1, 1, 1)),
        ("conv3d_dilated", 3, Conv3dSpec::same(3, 2, 1)),
        ("conv3d_grouped", 3, Conv3dSpec::same(3, 1, 2)),
        (
            "conv3d_asymmetric",
            2,
            Conv3dSpec {
                pad_lo: [0, 1, 0],
                pad_hi: [1, 0, 1],
                ..Default::default()
            },
        ),
    ];
    for (name, kernel, spec) in conv_specs {
        let mut reg = ParamRegistry::new();
        let conv = Conv3d::new(&mut reg, name, c, c, kernel, spec);
        let fw: ModuleFn = Rc::new(move |t, b, x| conv.forward(t, b, x));
        cases.extend(module_cases(name, &reg, volume.clone(), rng, BLOCK_COORDS, fw));
    }

    let mut reg = ParamRegistry::new();
    let ln = LayerNorm::new(&mut reg, "layernorm", c);
    let fw: ModuleFn = Rc::new(move |t, b, x| ln.forward(t, b, x));
    cases.extend(module_cases("layernorm", &reg, tokens.clone(), rng, BLOCK_COORDS, fw));

    let mut reg = ParamRegistry::new();
    let embed = PatchEmbed::new(&mut reg, "patch_embed", 2, c, 3, 2)?;
    let fw: ModuleFn = Rc::new(move |t, b, x| Ok(embed.forward(t, b, x)?.0));
    let two = normal(rng, &[2, 5, 4, 4], 1.0);
    cases.extend(module_cases("patch_embed", &reg, two, rng, BLOCK_COORDS, fw));

    let mut reg = ParamRegistry::new();
    let ea = EfficientAttention::new(&mut reg, "efficient_attention", c, attn.heads)?;
    let fw: ModuleFn = Rc::new(move |t, b, x| ea.forward(t, b, x));
    cases.extend(module_cases("efficient_attention", &reg, tokens.clone(), rng, BLOCK_COORDS, fw));

    let mut reg = ParamRegistry::new();
    let ca = ChannelAttention::new(&mut reg, "channel_attention", c, attn.heads)?;
    let fw: ModuleFn = Rc::new(move |t, b, x| ca.forward(t, b, x));
    cases.extend(module_cases("channel_attention", &reg, tokens.clone(), rng, BLOCK_COORDS, fw));

    let mut reg = ParamRegistry::new();
    let ffn = MixFfn::new(&mut reg, "mix_ffn", c, 3);
    let fw: ModuleFn = Rc::new(move |t, b, x| ffn.forward(t, b, x, spatial));
    cases.extend(module_cases("mix_ffn", &reg, tokens.clone(), rng, BLOCK_COORDS, fw));

    for (name, efficient, channel) in [
        ("dual_attention", true, true),
        ("dual_attention_ea_only", true, false),
        ("dual_attention_ca_only", false, true),
    ] {
        let cfg = AttentionConfig {
            efficient,
            channel,
            ..attn.clone()
        };
        let mut reg = ParamRegistry::new();
        let block = DualAttentionBlock::new(&mut reg, name, c, &cfg)?;
        let fw: ModuleFn = Rc::new(move |t, b, x| block.forward(t, b, x, spatial));
        cases.extend(module_cases(name, &reg, tokens.clone(), rng, BLOCK_COORDS, fw));
    }

    let mut reg = ParamRegistry::new();
    let dae = DaeFormerBlock::new(&mut reg, "dae_former", c, &attn)?;
    let fw: ModuleFn = Rc::new(move |t, b, x| dae.forward(t, b, x));
    cases.extend(module_cases("dae_former", &reg, volume.clone(), rng, BLOCK_COORDS, fw));

    let mut reg = ParamRegistry::new();
    let lka = LkaBlock::new(&mut reg, "lka", c);
    let fw: ModuleFn = Rc::new(move |t, b, x| lka.forward(t, b, x));
    cases.extend(module_cases("lka", &reg, volume.clone(), rng, BLOCK_COORDS, fw));

    let mut reg = ParamRegistry::new();
    let global = GlobalExtract::new(&mut reg, "global_extract", c);
    let fw: ModuleFn = Rc::new(move |t, b, x| global.forward(t, b, x));
    cases.extend(module_cases("global_extract", &reg, volume.clone(), rng, BLOCK_COORDS, fw));

    let mut reg = ParamRegistry::new();
    let local = FeatureExtract::new(&mut reg, "feature_extract", c, 3);
    let fw: ModuleFn = Rc::new(move |t, b, x| local.forward(t, b, x));
    cases.extend(module_cases("feature_extract", &reg, volume.clone(), rng, BLOCK_COORDS, fw));

    // Fusion, differentiated through each of its two inputs in turn.
    let other = normal(rng, volume.shape(), 1.0);
    for (name, first) in [("nested_fusion_x1", true), ("nested_fusion_x2", false)] {
        let mut reg = ParamRegistry::new();
        let fusion = NestedAttentionFusion::new(&mut reg, name, c, 3);
        let other = other.clone();
        let fw: ModuleFn = Rc::new(move |t, b, x| {
            let o = t.constant(other.clone());
            if first {
                fusion.forward(t, b, x, o)
            } else {
                fusion.forward(t, b, o, x)
            }
        });
        cases.extend(module_cases(name, &reg, volume.clone(), rng, BLOCK_COORDS, fw));
    }

    let f: CaseFn = Rc::new(|t, x| {
        let y = t.upsample_trilinear(x, 2)?;
        project(t, y)
    });
    cases.push(GradcheckCase::new("upsample_trilinear", normal(rng, &[2, 2, 3, 2], 1.0), f));
    Ok(cases)
}

fn warp_and_loss_cases(rng: &mut ChaCha8Rng) -> Vec<GradcheckCase> {
    let dims = [6, 5, 6];
    let img = Tensor::from_fn(vec![1, dims[0], dims[1], dims[2]], |_| rng.gen_range(0.0..1.0));
    let other = Tensor::from_fn(img.shape().to_vec(), |_| rng.gen_range(0.0..1.0));
    // Non-integer displacements keep samples away from the trilinear kinks.
    let field = Tensor::from_fn(vec![3, dims[0], dims[1], dims[2]], |_| {
        let v: f64 = rng.gen_range(-1.4..1.4);
        if (v - v.round()).abs() < 0.05 {
            v + 0.1
        } else {
            v
        }
    });
    let mut cases = Vec::new();

    let fld = field.clone();
    let f: CaseFn = Rc::new(move |t, x| {
        let u = t.constant(fld.clone());
        let y = t.warp(x, u)?;
        project(t, y)
    });
    cases.push(GradcheckCase::new("warp/image", img.clone(), f));

    let im = img.clone();
    let f: CaseFn = Rc::new(move |t, u| {
        let m = t.constant(im.clone());
        let y = t.warp(m, u)?;
        project(t, y)
    });
    cases.push(GradcheckCase::new("warp/field", field.clone(), f));

    let oth = other.clone();
    let f: CaseFn = Rc::new(move |t, w| {
        let fx = t.constant(oth.clone());
        ncc_loss(t, fx, w, 3, 1e-5)
    });
    cases.push(GradcheckCase::new("ncc_loss", img.clone(), f));

    let f: CaseFn = Rc::new(smoothness_loss);
    cases.push(GradcheckCase::new("smoothness_loss", field.clone(), f));

    let (fx, mv) = (other, img);
    let cfg = ModelConfig::tiny().loss;
    let f: CaseFn = Rc::new(move |t, u| {
        let a = t.constant(fx.clone());
        let b = t.constant(mv.clone());
        Ok(composite_loss(t, a, b, u, &cfg)?.total)
    });
    cases.push(GradcheckCase::new("composite_loss/field", field, f));
    cases
}

const STAGE0_MARGIN: f64 = 0.5;
/// Largest displacement the end-to-end case lets the model predict.
const MODEL_FIELD_PEAK: f64 = 0.3;

/// The tiny model at 8³, with respect to the moving image and a sample of
/// every parameter tensor. Two families: the network alone (field projected
/// to a scalar), and network plus composite loss. The loss family scales
/// the head so the field stays small and adds a half-voxel shift, keeping
/// trilinear samples away from grid lines where the warp has kinks.
fn model_cases(rng: &mut ChaCha8Rng) -> Result<Vec<GradcheckCase>> {
    let cfg = ModelConfig::tiny();
    let model = Rc::new(NestedMorph::new(&cfg)?);
    let fixed = synth_pair::<f64>(rng.gen(), [8, 8, 8], 1.0, 2.0)?.fixed;
    let moving = synth_pair::<f64>(rng.gen(), [8, 8, 8], 1.0, 2.0)?.moving;
    let mut params = perturbed(model.registry(), rng, MODEL_NOISE);
    separate_stage0_channels(&model, &mut params, &moving, &fixed)?;

    let fx = fixed.clone();
    let m = model.clone();
    let network: ModuleFn = Rc::new(move |t, b, moving| {
        let fixed = t.constant(fx.clone());
        let field = m.forward(t, b, moving, fixed)?;
        project(t, field)
    });

    let peak = model.predict(&params, &moving, &fixed)?.max_abs();
    let mut small = params.clone();
    if peak > MODEL_FIELD_PEAK {
        let k = MODEL_FIELD_PEAK / peak;
        for (name, t) in small.iter_mut() {
            if name.starts_with("decoder.head") {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    let loss = cfg.loss.clone();
    let shift = Tensor::full(vec![3, 8, 8, 8], 0.5);
    let end_to_end: ModuleFn = Rc::new(move |t, b, moving| {
        let fixed = t.constant(fixed.clone());
        let field = model.forward(t, b, moving, fixed)?;
        let s = t.constant(shift.clone());
        let field = t.add(field, s)?;
        Ok(composite_loss(t, fixed, moving, field, &loss)?.total)
    });

    let mut cases = Vec::new();
    for (family, params, forward) in [("model", params, network), ("model_loss", small, end_to_end)] {
        let params = Rc::new(params);
        {
            let (params, forward) = (params.clone(), forward.clone());
            let f: CaseFn = Rc::new(move |t, x| {
                let b = params.bind_frozen(t);
                forward(t, &b, x)
            });
            let coords = pick(rng, moving.numel(), BLOCK_COORDS);
            cases.push(GradcheckCase::new(format!("{family}/moving"), moving.clone(), f).with_coords(coords));
        }
        for (name, value) in params.iter() {
            let (params, forward, moving) = (params.clone(), forward.clone(), moving.clone());
            let pname = name.clone();
            let f: CaseFn = Rc::new(move |t, v| {
                let mut b = params.bind_frozen(t);
                b.set(&pname, v);
                let x = t.constant(moving.clone());
                forward(t, &b, x)
            });
            let coords = pick(rng, value.numel(), MODEL_COORDS);
            cases.push(GradcheckCase::new(format!("{family}/{name}"), value.clone(), f).with_coords(coords));
        }
    }
    Ok(cases)
}

/// Layer norm over exactly two channels is a smoothed sign of their
/// difference, with a transition a few `sqrt(eps)` wide where difference
/// quotients break down. Shifting the first patch-embedding bias moves every
/// voxel's channel difference at least [`STAGE0_MARGIN`] from zero.
fn separate_stage0_channels(
    model: &NestedMorph,
    params: &mut ParamStore<f64>,
    moving: &Tensor<f64>,
    fixed: &Tensor<f64>,
) -> Result<()> {
    let embed = &model.encoder().stages[0].embed.conv;
    if params.get(embed.weight_name()).map(|w| w.shape()[0]) != Some(2) {
        return Ok(());
    }
    let mut t = Tape::new();
    let b = params.bind_frozen(&mut t);
    let (m, f) = (t.constant(moving.clone()), t.constant(fixed.clone()));
    let x = t.concat(&[m, f], 0)?;
    let y = embed.forward(&mut t, &b, x)?;
    let y = t.value(y);
    let n = y.numel() / 2;
    let lowest = (0..n).map(|i| y.data()[i] - y.data()[n + i]).fold(f64::INFINITY, f64::min);
    let bias = params.get_mut(embed.bias_name()).expect("registered");
    bias.data_mut()[0] += STAGE0_MARGIN - lowest;
    Ok(())
}

/// Every block, the warp, the losses and the full tiny model.
pub fn standard_suite(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = qkv_cases(&mut rng);
    cases.extend(block_cases(&mut rng)?);
    cases.extend(warp_and_loss_cases(&mut rng));
    cases.extend(model_cases(&mut rng)?);
    Ok(cases)
}
