// SPDX-License-Identifier: Apache-2.0

//! Parameter counts against a closed form written from the architecture
//! description, independent of the builder code.

use spkt_core::{Model, ModelConfig};

/// Learnable scalars of a convolution followed by an affine norm.
fn conv_bn(c_in: usize, c_out: usize, taps: usize) -> usize {
    c_out * c_in * taps + 2 * c_out
}

fn closed_form(cfg: &ModelConfig) -> usize {
    let w = cfg.stage_widths;
    let e = cfg.sepconv_expansion;
    let r = cfg.mlp_ratio;
    let mut n = conv_bn(1, w[0], cfg.stem_kernel[0] * cfg.stem_kernel[1]);
    for s in 0..4 {
        let c = w[s];
        if s > 0 {
            n += conv_bn(w[s - 1], c, 9);
        }
        if s < 2 {
            let sep = conv_bn(c, c * e, 1) + (c * e * 49 + 2 * c * e) + conv_bn(c * e, c, 1);
            let chan = 2 * conv_bn(c, c, 9);
            n += cfg.conv_blocks[s] * (sep + chan);
        } else {
            // Four RepConvs: 3x3 branch, 1x1 branch, identity norm.
            let attn = 4 * (conv_bn(c, c, 9) + conv_bn(c, c, 1) + 2 * c);
            let mlp = conv_bn(c, c * r, 1) + conv_bn(c * r, c, 1);
            n += cfg.transformer_blocks[s - 2] * (attn + mlp);
        }
    }
    n + w[3] * cfg.n_classes + cfg.n_classes
}

fn built(cfg: &ModelConfig) -> usize {
    Model::<f32>::build(cfg).unwrap().count_params()
}

#[test]
fn desk_count_matches_closed_form() {
    let cfg = ModelConfig::desk(32, 1280, 8);
    assert_eq!(built(&cfg), closed_form(&cfg));
    assert!(built(&cfg) <= 500_000, "desk model must stay small: {}", built(&cfg));
}

#[test]
fn ablation_count_matches_and_is_smaller() {
    let desk = ModelConfig::desk(32, 1280, 8);
    let abl = ModelConfig::ablation(32, 1280, 8);
    assert_eq!(built(&abl), closed_form(&abl));
    assert!(built(&abl) < built(&desk));
}

#[test]
fn minimal_count_matches_closed_form() {
    let cfg = ModelConfig::minimal(3);
    assert_eq!(built(&cfg), closed_form(&cfg));
}

#[test]
fn twenty_six_class_head_changes_only_the_classifier() {
    let a = ModelConfig::desk(32, 1280, 8);
    let b = ModelConfig::desk(32, 1280, 26);
    assert_eq!(built(&b) - built(&a), 18 * (64 + 1));
}

#[test]
fn paper_scale_is_near_four_million() {
    let cfg = ModelConfig::paper_scale(32, 1280, 26);
    let full = closed_form(&cfg);
    let abl = closed_form(&ModelConfig {
        conv_blocks: [cfg.conv_blocks[0], 0],
        ..cfg.clone()
    });
    assert!((3_700_000..4_100_000).contains(&full), "{full}");
    assert!(abl < full);
    assert_eq!(built(&cfg), full);
}

#[test]
fn folding_keeps_the_function_but_drops_branch_params() {
    let cfg = ModelConfig::minimal(3);
    let mut m = Model::<f32>::build(&cfg).unwrap();
    let before = m.count_params();
    m.fold().unwrap();
    let c = cfg.stage_widths;
    // Each RepConv: 10c^2 + 6c branch scalars become 9c^2 + c fused scalars.
    let saved: usize = (2..4).map(|s| cfg.transformer_blocks[s - 2] * 4 * (c[s] * c[s] + 5 * c[s])).sum();
    assert_eq!(m.count_params(), before - saved);
}
