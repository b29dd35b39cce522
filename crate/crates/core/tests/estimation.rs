mod common;

use proptest::prelude::*;
use qndsim::estimation::{
    derive_estimators, fit_shot, fit_trace, segment_fluctuations, split_estimators, FitOptions,
    TraceBasis,
};
use qndsim::probe::{two_segment_mean, PumpingModel, ShotSynthesizer};
use qndsim::rng::{derive_seed, substream, Domain};
use rand::Rng;
use rand_distr::StandardNormal;

fn model_trace(m: &PumpingModel, phi4: f64, phi3: f64) -> Vec<f64> {
    let s = common::population_schedule();
    s.sample_times()
        .iter()
        .map(|&t| two_segment_mean(m, &s, phi4, phi3, t).unwrap().unwrap())
        .collect()
}

/// Gram matrix of the fit basis computed directly from the response model.
fn independent_gram(m: &PumpingModel) -> [[f64; 2]; 2] {
    let s = common::population_schedule();
    let mut g = [[0.0; 2]; 2];
    for t in s.sample_times() {
        let b1 = m.eval(t);
        let b2 = if t >= s.t_flip() - 1e-12 { m.eval(t - s.t_flip()) } else { 0.0 };
        g[0][0] += b1 * b1;
        g[0][1] += b1 * b2;
        g[1][1] += b2 * b2;
    }
    g[1][0] = g[0][1];
    g
}

#[test]
fn noiseless_trace_is_recovered_exactly() {
    let m = common::model();
    let y = model_trace(&m, 0.3, 0.5);
    let e = fit_trace(&y, &common::population_schedule(), &m, &FitOptions::default()).unwrap();
    assert!((e.phi4 - 0.3).abs() < 1e-12 && (e.phi3 - 0.5).abs() < 1e-12);
    assert!(e.fit_residual_rms < 1e-12);
    assert_eq!(e.phi_n, e.phi4 + e.phi3);
    assert_eq!(e.phi_delta, e.phi4 - e.phi3);
}

#[test]
fn estimator_covariance_matches_inverse_gram() {
    let m = common::model();
    let s = common::population_schedule();
    let sigma = 5e-3;
    let (p4, p3) = (0.7, 0.4);
    let clean = model_trace(&m, p4, p3);
    let basis = TraceBasis::new(&s, &m, &FitOptions::default()).unwrap();
    let n = 10_000;
    let mut rng = substream(12, Domain::Test, 0);
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let y: Vec<f64> =
            clean.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let e = basis.fit(&y).unwrap();
        a.push(e.phi4);
        b.push(e.phi3);
    }
    let g = independent_gram(&m);
    let det = g[0][0] * g[1][1] - g[0][1] * g[0][1];
    let expect = [
        sigma * sigma * g[1][1] / det,
        -sigma * sigma * g[0][1] / det,
        sigma * sigma * g[0][0] / det,
    ];
    let got = [common::variance(&a), common::covariance(&a, &b), common::variance(&b)];
    for (x, y) in got.iter().zip(&expect) {
        assert!((x / y - 1.0).abs() < 0.10, "{got:?} vs {expect:?}");
    }
    let c = basis.estimator_covariance(sigma);
    assert!((c[(0, 0)] / expect[0] - 1.0).abs() < 1e-9);
    assert!((c[(0, 1)] / expect[1] - 1.0).abs() < 1e-9);
    // unbiased
    assert!((common::mean(&a) - p4).abs() < 4.0 * (expect[0] / n as f64).sqrt());
    assert!((common::mean(&b) - p3).abs() < 4.0 * (expect[2] / n as f64).sqrt());
}

#[test]
fn empty_ensemble_estimates_are_consistent_with_zero() {
    let s = common::population_schedule();
    let sigma = 4e-3;
    let cfg = common::homogeneous(0.0, sigma);
    let synth = ShotSynthesizer::new(&cfg, &s, 0).unwrap();
    let basis = TraceBasis::new(&s, &cfg.pumping, &FitOptions::default()).unwrap();
    let c = basis.estimator_covariance(sigma);
    let (s4, s3) = (c[(0, 0)].sqrt(), c[(1, 1)].sqrt());
    let estimates: Vec<_> = (0..400u64)
        .map(|i| fit_shot(&synth.synthesize(i, derive_seed(4, Domain::Test, i)), &cfg.pumping).unwrap())
        .collect();
    // 3σ is exceeded in 0.27% of draws; about one of 400 is expected
    let outside = estimates.iter().filter(|e| e.phi4.abs() > 3.0 * s4 || e.phi3.abs() > 3.0 * s3).count();
    assert!(outside <= 8, "{outside} of 400 beyond 3σ");
}

#[test]
fn fluctuations_vanish_for_balanced_noiseless_shots_and_average_out() {
    let s = common::population_schedule();
    let cfg = common::homogeneous(600.0, 0.0);
    let synth = ShotSynthesizer::new(&cfg, &s, 0).unwrap();
    let rec = synth.synthesize(0, 1);
    let phi1 = cfg.coupling.peak_phase_per_atom;
    let mut balanced = rec.clone();
    balanced.trace = model_trace(&cfg.pumping, 300.0 * phi1, 300.0 * phi1);
    let d = segment_fluctuations(&balanced, &cfg.pumping, 600.0 * phi1).unwrap();
    assert_eq!(d.len(), s.segment1_samples());
    assert!(d.iter().all(|v| v.abs() < 1e-14));

    let noisy = common::homogeneous(600.0, 3e-3);
    let synth = ShotSynthesizer::new(&noisy, &s, 0).unwrap();
    let n = 5000;
    let series: Vec<Vec<f64>> = (0..n as u64)
        .map(|i| {
            let rec = synth.synthesize(i, derive_seed(5, Domain::Test, i));
            let e = fit_shot(&rec, &noisy.pumping).unwrap();
            segment_fluctuations(&rec, &noisy.pumping, e.phi_n).unwrap()
        })
        .collect();
    for k in 0..s.segment1_samples() {
        let col: Vec<f64> = series.iter().map(|d| d[k]).collect();
        let se = (common::variance(&col) / n as f64).sqrt();
        assert!(common::mean(&col).abs() < 5.0 * se, "sample {k}");
    }

    let empty = common::homogeneous(0.0, 3e-3);
    let rec = ShotSynthesizer::new(&empty, &s, 0).unwrap().synthesize(0, 9);
    let d = segment_fluctuations(&rec, &empty.pumping, 0.0).unwrap();
    assert_eq!(d[..], rec.trace[..s.segment1_samples()]);
}

#[test]
fn degenerate_bases_are_rejected_or_flagged() {
    let s = common::population_schedule();
    let flat = PumpingModel { beta: 1.0, tau_at: 10e-6, tau_loss: f64::INFINITY };
    let late = FitOptions { include_pre_flip: false, ..FitOptions::default() };
    assert!(TraceBasis::new(&s, &flat, &late).is_err());

    let slow = PumpingModel { beta: 1.0, tau_at: 10e-6, tau_loss: 1e3 };
    match TraceBasis::new(&s, &slow, &late) {
        Ok(b) => {
            assert!(b.condition() > 1e6);
            assert!(b.fit(&vec![0.0; s.len()]).unwrap().ill_conditioned);
        }
        Err(_) => {}
    }
    let normal = TraceBasis::new(&s, &common::model(), &FitOptions::default()).unwrap();
    assert!(!normal.fit(&vec![0.0; s.len()]).unwrap().ill_conditioned);

    let mut y = model_trace(&common::model(), 0.1, 0.1);
    y[3] = f64::NAN;
    assert!(normal.fit(&y).is_err());
}

#[test]
fn estimator_examples() {
    assert_eq!(derive_estimators(1.0, 1.0), (2.0, 0.0));
    assert_eq!(derive_estimators(1.0, 0.0), (1.0, 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fit_is_linear_and_exact(p4 in -2.0f64..2.0, p3 in -2.0f64..2.0, c in -10.0f64..10.0, seed in any::<u64>()) {
        let m = common::model();
        let s = common::population_schedule();
        let basis = TraceBasis::new(&s, &m, &FitOptions::default()).unwrap();
        let e = basis.fit(&model_trace(&m, p4, p3)).unwrap();
        prop_assert!((e.phi4 - p4).abs() < 1e-12 && (e.phi3 - p3).abs() < 1e-12);

        let mut rng = substream(seed, Domain::Test, 0);
        let y: Vec<f64> = (0..s.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let scaled: Vec<f64> = y.iter().map(|v| c * v).collect();
        let (a, b) = (basis.fit(&y).unwrap(), basis.fit(&scaled).unwrap());
        prop_assert!((b.phi4 - c * a.phi4).abs() < 1e-12 * (1.0 + c.abs()));
        prop_assert!((b.phi3 - c * a.phi3).abs() < 1e-12 * (1.0 + c.abs()));
    }

    #[test]
    fn estimators_round_trip(p4 in -1e3f64..1e3, p3 in -1e3f64..1e3) {
        let (n, d) = derive_estimators(p4, p3);
        let (a, b) = split_estimators(n, d);
        prop_assert!((a - p4).abs() <= 1e-12 * (1.0 + p4.abs()));
        prop_assert!((b - p3).abs() <= 1e-12 * (1.0 + p3.abs()));
    }
}
