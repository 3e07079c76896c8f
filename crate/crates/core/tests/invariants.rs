use std::sync::Arc;

use proptest::prelude::*;

use noda::assimilation::{correct_step, estimate_measurement, rollout, CorrectorParams};
use noda::autodiff::{Tape, Tensor};
use noda::dataset::{
    decode_trajectory, encode_trajectory, observe, sample_schedule, Equation, MeasurementOperator, Trajectory,
};
use noda::evaluation::relmse_frames;
use noda::grid::{dft_forward, dft_inverse, Grid1D};
use noda::operator::{decode_model, encode_model, FnoConfig, PredictorParams};
use noda::solvers::Domain;

fn field(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

fn pow2_field() -> impl Strategy<Value = Vec<f64>> {
    (3u32..9).prop_flat_map(|e| field(1 << e))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dft_round_trip_and_parseval(v in pow2_field()) {
        let n = v.len();
        let spec = dft_forward(&[n], &v).unwrap();
        let back = dft_inverse(&spec).unwrap();
        let scale = v.iter().map(|x| x.abs()).fold(1.0, f64::max);
        for (a, b) in back.iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
        let e: f64 = v.iter().map(|x| x * x).sum();
        let es: f64 = spec.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
        prop_assert!((e - es).abs() <= 1e-10 * e.max(1.0));
        // Real input gives conjugate-symmetric coefficients.
        for k in 1..n {
            let d = spec.coeffs[k] - spec.coeffs[n - k].conj();
            prop_assert!(d.norm() <= 1e-12 * spec.coeffs[k].norm().max(scale));
        }
    }

    #[test]
    fn dft_is_linear(u in field(32), v in field(32), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let w: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let (fu, fv, fw) = (dft_forward(&[32], &u).unwrap(), dft_forward(&[32], &v).unwrap(), dft_forward(&[32], &w).unwrap());
        for k in 0..32 {
            let d = fw.coeffs[k] - (fu.coeffs[k] * a + fv.coeffs[k] * b);
            prop_assert!(d.norm() <= 1e-12 * 320.0 * (a.abs() + b.abs() + 1.0));
        }
    }

    #[test]
    fn relmse_is_scale_invariant(est in field(16), truth in field(16), c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
        prop_assume!(truth.iter().any(|v| v.abs() > 1e-3));
        let r = relmse_frames(std::slice::from_ref(&est), std::slice::from_ref(&truth), &[0]).unwrap();
        let s = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
        let rs = relmse_frames(&[s(&est)], &[s(&truth)], &[0]).unwrap();
        prop_assert!(r >= 0.0);
        prop_assert!((r - rs).abs() <= 1e-12 * r.max(1.0));
    }

    #[test]
    fn correction_is_bounded_by_innovation(z in field(8), y in field(8), seed in 0u64..1000) {
        let c = CorrectorParams::init(8, 8, 12, false, seed);
        let e = estimate_measurement(&c, &z).unwrap();
        let out = correct_step(&c, &z, &y).unwrap();
        for i in 0..8 {
            prop_assert!((out[i] - z[i]).abs() <= (y[i] - e[i]).abs());
        }
    }

    #[test]
    fn trajectory_round_trip(frames in prop::collection::vec(field(16), 1..6), h in 0.01f64..5.0, seed: u64) {
        let t = Trajectory::new(Equation::Kdv, Domain::D1(Grid1D::new(16, 128.0).unwrap()), h, frames, seed).unwrap();
        let bytes = encode_trajectory(&t).unwrap();
        prop_assert_eq!(bytes.len(), 52 + 8 * 16 * t.n_frames());
        prop_assert_eq!(decode_trajectory(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_trajectory_is_rejected(frames in prop::collection::vec(field(8), 1..4), cut in 1usize..60) {
        let t = Trajectory::new(Equation::Ks, Domain::D1(Grid1D::new(8, 4.0).unwrap()), 0.25, frames, 0).unwrap();
        let bytes = encode_trajectory(&t).unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(decode_trajectory(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn model_round_trip(dims in prop::collection::vec(1usize..5, 0..4), name in "[a-z.]{1,20}", seed in 0u64..100) {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((i as u64 + seed) as f64).sin()).collect();
        let t = Tensor::new(dims.clone(), data).unwrap();
        let bytes = encode_model([(name.as_str(), &t)]).unwrap();
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0].0, &name);
        prop_assert_eq!(&back[0].1, &t);
    }

    #[test]
    fn schedule_stays_in_horizon(t_h in 0usize..20, extra in 1usize..50, alpha in 0.0f64..=1.0, seed: u64) {
        let t_f = t_h + extra;
        let s = sample_schedule(t_h, t_f, alpha, seed).unwrap();
        prop_assert!(s.assim_times.iter().all(|&k| k > t_h && k <= t_f));
        prop_assert!(s.assim_times.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(s.assim_times.len(), (alpha * extra as f64).round() as usize);
        prop_assert!((1..=t_h).all(|k| s.is_corrected(k)));
    }

    #[test]
    fn rfft_irfft_is_identity_on_tape(v in field(32)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 16], v.clone()).unwrap());
        let h = tape.rfft(x).unwrap();
        let y = tape.irfft(h, &[16]).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-12 * 10.0);
        }
    }
}

#[test]
fn rollout_is_deterministic() {
    let n = 32;
    let domain = Domain::D1(Grid1D::new(n, 32.0).unwrap());
    let frames: Vec<Vec<f64>> = (0..12).map(|k| (0..n).map(|j| ((j + k) as f64 * 0.2).sin()).collect()).collect();
    let truth = Trajectory::new(Equation::Ks, domain, 0.25, frames, 0).unwrap();
    let predictor = PredictorParams::init(&FnoConfig { width: 6, modes: 4, ..FnoConfig::default() }, 2).unwrap();
    let corrector = CorrectorParams::init(n, n, 16, false, 3);
    let obs = observe(&truth, Arc::new(MeasurementOperator::identity(n)), &(0..12).collect::<Vec<_>>(), 20.0, 4).unwrap();
    let schedule = sample_schedule(3, 11, 0.5, 5).unwrap();
    let a = rollout(&predictor, Some(&corrector), &truth.frames[0], &[n], &obs, &schedule).unwrap();
    let b = rollout(&predictor, Some(&corrector), &truth.frames[0], &[n], &obs, &schedule).unwrap();
    assert_eq!(a.estimates, b.estimates);
    assert_eq!(a.estimates.len(), 12);
}
