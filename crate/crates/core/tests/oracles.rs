mod common;

use common::compare::*;

fn check(name: &str, case: fn(u64) -> f64) {
    for seed in 0..INSTANCES {
        let err = case(seed);
        assert!(err < ORACLE_TOLERANCE, "{name} seed {seed}: {err:e}");
    }
}

#[test]
fn efficient_attention_matches_oracle() {
    check("efficient attention", efficient_attention_case);
}

#[test]
fn channel_attention_matches_oracle() {
    check("channel attention", channel_attention_case);
}

#[test]
fn nested_fusion_matches_oracle() {
    check("nested fusion", nested_fusion_case);
}

#[test]
fn conv3d_matches_oracle() {
    check("conv3d", conv3d_case);
}

#[test]
fn warp_matches_oracle() {
    check("warp", warp_case);
}

#[test]
fn ncc_matches_oracle() {
    check("ncc", ncc_case);
}

#[test]
fn ssim_matches_oracle() {
    check("ssim", ssim_case);
}

#[test]
fn sdlogj_matches_oracle() {
    check("sdlogj", sdlogj_case);
}

#[test]
fn hd95_matches_exhaustive_pairing_exactly() {
    for seed in 0..INSTANCES {
        let (got, expect) = hd95_case(seed);
        assert_eq!(got, expect, "seed {seed}");
    }
}
