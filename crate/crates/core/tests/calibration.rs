//! Scale-and-shift calibration of vision tokens.

mod common;

use common::TestRng;
use mir_core::gapstats::PrepareOptions;
use mir_core::matsqrt::SqrtConfig;
use mir_core::moca::{
    apply_calibration, calibration_gap_report, fit_gradient, fit_moment_matching, params_from_json, params_to_json,
    CalibrationError, CalibrationParams, DiagonalMomentLoss,
};
use mir_core::synth::{self, generate_layers, SynthSpec};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn layer(preset: &str, dim: usize, tokens: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let spec = SynthSpec::new(dim, (tokens, tokens), seed, synth::preset(preset, 1, dim).unwrap());
    let (layers, _) = generate_layers(&spec).unwrap();
    (layers[0].vision.to_matrix(), layers[0].text.to_matrix())
}

fn column_stats(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    m.column_iter()
        .map(|c| {
            let mu = c.sum() / n;
            (mu, c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        })
        .unzip()
}

#[test]
fn moment_matching_transfers_to_fresh_samples() {
    let d = 8;
    let (vision, text) = layer("diag-affine", d, 20_000, 1);
    let params = fit_moment_matching(&vision, &text, 1).unwrap();
    let (fresh_v, fresh_t) = layer("diag-affine", d, 200_000, 2);
    let calibrated = apply_calibration(&fresh_v, &params).unwrap();
    let (mc, vc) = column_stats(&calibrated);
    let (mt, vt) = column_stats(&fresh_t);
    let scale = vt.iter().sum::<f64>() / d as f64;
    for i in 0..d {
        assert!((mc[i] - mt[i]).abs() < 0.01 * scale.sqrt() * 3.0, "mean {i}: {} vs {}", mc[i], mt[i]);
        assert!((vc[i] - vt[i]).abs() / vt[i] < 0.03, "var {i}: {} vs {}", vc[i], vt[i]);
    }
}

#[test]
fn moment_matching_recovers_generating_gains() {
    let d = 6;
    let (vision, text) = layer("diag-affine", d, 100_000, 3);
    let params = fit_moment_matching(&vision, &text, 1).unwrap();
    for (i, u) in params.u.iter().enumerate() {
        let gain = 2.0 + (0.5 - 2.0) * i as f64 / (d - 1) as f64;
        assert!((u * gain - 1.0).abs() < 0.02, "dim {i}: u={u} gain={gain}");
    }
}

#[test]
fn gradient_fit_reaches_the_moment_solution() {
    let (vision, text) = layer("diag-affine", 8, 5_000, 4);
    let fit = fit_gradient(&vision, &text, 1, 500, 0.05).unwrap();
    assert!(fit.best_loss() < 1e-4 * fit.initial_loss(), "{} vs {}", fit.best_loss(), fit.initial_loss());
    assert_eq!(fit.losses.len(), 501);
}

#[test]
fn runaway_learning_rate_diverges() {
    let (vision, text) = layer("diag-affine", 4, 500, 5);
    assert!(matches!(
        fit_gradient(&vision, &text, 1, 100, 50.0),
        Err(CalibrationError::Divergence { .. })
    ));
}

#[test]
fn zero_gap_params_stay_near_identity() {
    let (vision, text) = layer("zero-gap", 6, 20_000, 6);
    let params = fit_moment_matching(&vision, &text, 1).unwrap();
    assert!(params.u.iter().all(|u| (u - 1.0).abs() < 0.05), "{:?}", params.u);
    assert!(params.v.iter().all(|v| v.abs() < 0.05), "{:?}", params.v);
    let (before, after) =
        calibration_gap_report(&vision, &text, &params, &PrepareOptions::default(), &SqrtConfig::exact()).unwrap();
    assert!(before < 5e-3 && after < 5e-3, "{before} {after}");
}

#[test]
fn diag_affine_gap_mostly_closes_rotation_does_not() {
    let prep = PrepareOptions::default();
    let (v, t) = layer("diag-affine", 8, 20_000, 7);
    let p = fit_moment_matching(&v, &t, 1).unwrap();
    let (before, after) = calibration_gap_report(&v, &t, &p, &prep, &SqrtConfig::exact()).unwrap();
    assert!(after < 0.01 * before, "{before} -> {after}");

    let (v, t) = layer("rotated", 8, 20_000, 7);
    let p = fit_moment_matching(&v, &t, 1).unwrap();
    let (before, after) = calibration_gap_report(&v, &t, &p, &prep, &SqrtConfig::exact()).unwrap();
    assert!(0.0 < after && after < before, "{before} -> {after}");
}

#[test]
fn params_json_round_trip_and_errors() {
    let p = vec![
        CalibrationParams {
            layer_index: 1,
            u: vec![0.5, 2.0],
            v: vec![-0.1, 0.3],
        },
        CalibrationParams::identity(2, 2),
    ];
    let text = params_to_json(&p);
    assert!(text.contains("\"layer\": 1") || text.contains("\"layer\":1"), "{text}");
    assert_eq!(params_from_json(&text).unwrap(), p);

    let x = DMatrix::from_element(3, 4, 1.0);
    let err = apply_calibration(&x, &p[0]).unwrap_err();
    assert!(matches!(err, CalibrationError::DimensionMismatch { expected: 2, found: 4 }), "{err}");
    let msg = err.to_string();
    assert!(msg.contains('2') && msg.contains('4'), "{msg}");

    assert!(params_from_json(r#"[{"layer": 1, "u": [1.0], "v": [0.0, 1.0]}]"#).is_err());
    assert!(params_from_json(r#"{"layer": 1}"#).is_err());
}

#[test]
fn identity_params_leave_tokens_bitwise_unchanged() {
    let mut rng = TestRng::new(3);
    let mut x = rng.matrix(50, 7);
    x[(0, 0)] = -0.0;
    let y = apply_calibration(&x, &CalibrationParams::identity(1, 7)).unwrap();
    assert!(x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

fn finite_difference_error(seed: u64) -> f64 {
    let d = 8;
    let mut rng = TestRng::new(seed);
    let vision = rng.matrix(64, d) * 1.5 + DMatrix::from_element(64, d, 0.3);
    let text = rng.matrix(80, d);
    let objective = DiagonalMomentLoss::new(&vision, &text).unwrap();
    let p = CalibrationParams {
        layer_index: 1,
        u: (0..d).map(|_| 0.5 + rng.uniform()).collect(),
        v: (0..d).map(|_| rng.normal() * 0.5).collect(),
    };
    let (du, dv) = objective.gradient(&p);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for i in 0..2 * d {
        let bump = |delta: f64| {
            let mut q = p.clone();
            if i < d {
                q.u[i] += delta;
            } else {
                q.v[i - d] += delta;
            }
            objective.loss(&q)
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let analytic = if i < d { du[i] } else { dv[i - d] };
        worst = worst.max((analytic - fd).abs() / fd.abs().max(1e-8));
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let worst = finite_difference_error(seed);
        prop_assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn moment_fit_is_exact_on_its_own_sample(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = TestRng::new(seed);
        let vision = rng.matrix(40, d) * 3.0;
        let text = rng.matrix(30, d) * 0.5 + DMatrix::from_element(30, d, 1.0);
        let p = fit_moment_matching(&vision, &text, 1).unwrap();
        let (mc, vc) = column_stats(&apply_calibration(&vision, &p).unwrap());
        let (mt, vt) = column_stats(&text);
        for i in 0..d {
            prop_assert!((mc[i] - mt[i]).abs() < 1e-9);
            prop_assert!((vc[i] - vt[i]).abs() < 1e-9 * vt[i].max(1.0));
        }
    }
}
