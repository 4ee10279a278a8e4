// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;

fn worst(samples: &[GradSample]) -> &GradSample {
    samples.iter().max_by(|a, b| a.rel_error().total_cmp(&b.rel_error())).unwrap()
}

#[test]
fn smooth_model_gradients_match_central_differences() {
    let samples = gradient_check(40, 1e-3, 11);
    let w = worst(&samples);
    assert!(w.rel_error() < 1e-3, "{}: analytic {} numeric {} (rel {})", w.name, w.analytic, w.numeric, w.rel_error());
    assert!(samples.iter().any(|s| s.analytic.abs() > 1e-4), "all sampled gradients vanished");
}

#[test]
fn batch_statistics_backward_converges_at_second_order() {
    // Same samples at two step sizes: central-difference error must shrink
    // a hundredfold when h shrinks tenfold, and vanish at small h.
    let coarse = gradient_check_with(30, 1e-4, 5, 12, true);
    let fine = gradient_check_with(30, 1e-5, 5, 12, true);
    assert!(worst(&fine).rel_error() < 1e-4, "{}", worst(&fine).rel_error());
    for (c, f) in coarse.iter().zip(&fine) {
        assert_eq!(c.name, f.name);
        let (ec, ef) = ((c.analytic - c.numeric).abs(), (f.analytic - f.numeric).abs());
        if ec > 1e-9 {
            assert!(ef < ec / 50.0, "{}: error {ec:e} -> {ef:e}", c.name);
        }
    }
}
