use nalgebra::{Matrix4, Vector2};
use proptest::prelude::*;
use tpmb_core::linalg::{KinematicVec, RngStream, SpdMatrix2};
use tpmb_core::models::{Model, ModelParams, ObjectState};

fn model() -> Model {
    Model::new(ModelParams::default()).unwrap()
}

fn state(kin: [f64; 4], e: SpdMatrix2) -> ObjectState {
    ObjectState::new(KinematicVec::from(kin), e)
}

fn q_matrix(p: &ModelParams) -> Matrix4<f64> {
    let (t, s2) = (p.ts, p.sigma_q * p.sigma_q);
    let mut q = Matrix4::zeros();
    for (a, b) in [(0, 1), (2, 3)] {
        q[(a, a)] = s2 * t.powi(3) / 3.0;
        q[(a, b)] = s2 * t * t / 2.0;
        q[(b, a)] = s2 * t * t / 2.0;
        q[(b, b)] = s2 * t;
    }
    q
}

#[test]
fn transition_mean_and_noiseless_limit() {
    let m = model();
    let e = KinematicVec::new(0.0, 10.0, 0.0, 0.0);
    assert_eq!(m.predict_kinematic(&e), KinematicVec::new(2.0, 10.0, 0.0, 0.0));
    let quiet = Model::new(ModelParams { sigma_q: 0.0, q: 0.0, ..Default::default() }).unwrap();
    let x = state([1.0, 2.0, 3.0, 4.0], SpdMatrix2::from_entries(5.0, 1.0, 3.0).unwrap());
    let mut rng = RngStream::new(1, 0).rng();
    let y = quiet.transition_sample(&x, &mut rng).unwrap();
    assert_eq!(y.kin, quiet.predict_kinematic(&x.kin));
    assert_eq!(y.extent, x.extent);
    assert_eq!(quiet.transition_logpdf_kinematic(&y.kin, &x.kin), 0.0);
    assert_eq!(quiet.transition_logpdf_kinematic(&(y.kin * 2.0), &x.kin), f64::NEG_INFINITY);
}

#[test]
fn transition_covariance_matches_q() {
    let m = model();
    let q = q_matrix(m.params());
    let x = state([0.0, 1.0, 0.0, -1.0], SpdMatrix2::scaled_identity(9.0).unwrap());
    let mean = m.predict_kinematic(&x.kin);
    let mut rng = RngStream::new(2, 0).rng();
    let n = 10_000;
    let mut cov = Matrix4::zeros();
    let mut ext = nalgebra::Matrix2::zeros();
    for _ in 0..n {
        let y = m.transition_sample(&x, &mut rng).unwrap();
        let d = y.kin - mean;
        cov += d * d.transpose();
        ext += y.extent.matrix();
    }
    cov /= n as f64;
    for i in 0..4 {
        for j in 0..4 {
            if q[(i, j)] != 0.0 {
                assert!((cov[(i, j)] - q[(i, j)]).abs() < 0.1 * q[(i, j)], "({i},{j}) {} vs {}", cov[(i, j)], q[(i, j)]);
            }
        }
    }
    // Wishart extent transition keeps the mean
    ext /= n as f64;
    assert!((ext[(0, 0)] - 9.0).abs() < 0.1 && ext[(0, 1)].abs() < 0.1);
}

#[test]
fn transition_logpdf_mode_and_translation() {
    let m = model();
    let q = q_matrix(m.params());
    let e = KinematicVec::new(1.0, 2.0, -3.0, 0.5);
    let mode = m.transition_logpdf_kinematic(&m.predict_kinematic(&e), &e);
    let expect = -0.5 * ((2.0 * std::f64::consts::PI).powi(4) * q.determinant()).ln();
    assert!((mode - expect).abs() < 1e-10, "{mode} vs {expect}");
    let d = KinematicVec::new(0.3, -0.2, 0.1, 0.4);
    let shift = KinematicVec::new(7.0, 0.0, -2.0, 0.0);
    let a = m.transition_logpdf_kinematic(&(m.predict_kinematic(&e) + d), &e);
    let b = m.transition_logpdf_kinematic(&(m.predict_kinematic(&(e + shift)) + d), &(e + shift));
    assert!((a - b).abs() < 1e-12);
    let direct = expect - 0.5 * (d.transpose() * q.try_inverse().unwrap() * d)[0];
    assert!((a - direct).abs() < 1e-9 * direct.abs());
}

#[test]
fn measurement_likelihoods() {
    let m = model();
    let x = state([1.0, 0.0, 2.0, 0.0], SpdMatrix2::scaled_identity(1.0).unwrap());
    let at = Vector2::new(1.0, 2.0);
    assert!((m.meas_logpdf(&at, &x) + (4.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    let point = Model::new(ModelParams { rho: 0.0, sigma_r: 2.0, ..Default::default() }).unwrap();
    let z = Vector2::new(2.0, 0.0);
    let expect = -(2.0 * std::f64::consts::PI * 4.0).ln() - 0.5 * (1.0 + 4.0) / 4.0;
    assert!((point.meas_logpdf(&z, &x) - expect).abs() < 1e-12);
    let g = m.params().gamma;
    assert_eq!(m.set_meas_loglik(&[], &x), -g);
    assert!((m.set_meas_loglik(&[z], &x) - (-g + g.ln() + m.meas_logpdf(&z, &x))).abs() < 1e-12);
    let w = [z, at, Vector2::new(-1.0, 0.5)];
    let parts: f64 = -g + w.iter().map(|z| g.ln() + m.meas_logpdf(z, &x)).sum::<f64>();
    assert!((m.set_meas_loglik(&w, &x) - parts).abs() < 1e-12);
}

#[test]
fn set_likelihood_normalizes() {
    let m = Model::new(ModelParams { gamma: 3.0, ..Default::default() }).unwrap();
    let x = state([0.0, 0.0, 0.0, 0.0], SpdMatrix2::from_entries(9.0, 2.0, 4.0).unwrap());
    // single-measurement integral by midpoint rule over a box covering the likelihood mass
    let (half, cells) = (25.0, 500);
    let h = 2.0 * half / cells as f64;
    let mut single = 0.0;
    for a in 0..cells {
        for b in 0..cells {
            let z = Vector2::new(-half + (a as f64 + 0.5) * h, -half + (b as f64 + 0.5) * h);
            single += m.meas_logpdf(&z, &x).exp() * h * h;
        }
    }
    // sum over cardinalities of (1/n!) times the n-fold integral of the set density
    let g: f64 = m.params().gamma;
    let mut total = 0.0;
    let mut term = (-g).exp();
    for k in 0..40 {
        if k > 0 {
            term *= g * single / k as f64;
        }
        total += term;
    }
    assert!((total - 1.0).abs() < 1e-6, "{total}");
}

#[test]
fn detection_and_clutter() {
    let x = state([0.0; 4], SpdMatrix2::scaled_identity(9.0).unwrap());
    let pd = |g: f64| Model::new(ModelParams { gamma: g, ..Default::default() }).unwrap().effective_pd(&x);
    assert!((pd(3.0) - 0.950).abs() < 5e-4);
    assert!((pd(7.0) - 0.999).abs() < 5e-4);
    assert_eq!(pd(0.0), 0.0);
    let m = model();
    assert!((m.clutter_logintensity(&Vector2::zeros()) - (10.0f64 / 90_000.0).ln()).abs() < 1e-14);
    assert_eq!(m.clutter_logintensity(&Vector2::new(151.0, 0.0)), f64::NEG_INFINITY);
    // midpoint quadrature of the intensity over the region
    let cells = 60;
    let h = 300.0 / cells as f64;
    let mut integral = 0.0;
    for i in 0..cells {
        for j in 0..cells {
            let z = Vector2::new(-150.0 + (i as f64 + 0.5) * h, -150.0 + (j as f64 + 0.5) * h);
            integral += m.clutter_logintensity(&z).exp() * h * h;
        }
    }
    assert!((integral - 10.0).abs() < 1e-9);
    let silent = Model::new(ModelParams { clutter_rate: 0.0, ..Default::default() }).unwrap();
    assert_eq!(silent.clutter_logintensity(&Vector2::zeros()), f64::NEG_INFINITY);
}

#[test]
fn birth_and_survival() {
    let m = model();
    let mut rng = RngStream::new(4, 0).rng();
    let n = 10_000;
    let draws: Vec<ObjectState> = (0..n).map(|_| m.birth_sample(&mut rng).unwrap()).collect();
    let mean = draws.iter().map(|d| d.position()).sum::<Vector2<f64>>() / n as f64;
    // uniform on [-150, 150]: sd 300 / sqrt 12
    let se = 300.0 / 12f64.sqrt() / (n as f64).sqrt();
    assert!(mean.x.abs() < 4.0 * se && mean.y.abs() < 4.0 * se, "{mean}");
    let ext = draws.iter().map(|d| *d.extent.matrix()).sum::<nalgebra::Matrix2<f64>>() / n as f64;
    assert!((ext[(0, 0)] - 9.0).abs() < 0.45 && (ext[(1, 1)] - 9.0).abs() < 0.45);
    let vel = draws.iter().map(|d| d.velocity().norm_squared()).sum::<f64>() / n as f64;
    assert!((vel - 200.0).abs() < 10.0);
    assert_eq!(m.survival(&draws[0]), 0.99);
}

#[test]
fn object_state_serializes_flat() {
    let x = state([1.0, 3.0, 2.0, 4.0], SpdMatrix2::from_entries(5.0, 6.0, 7.5).unwrap());
    let s = serde_json_like(&x);
    assert_eq!(s, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.5]);
    assert_eq!(ObjectState::try_from(s).unwrap(), x);
    assert!(ObjectState::try_from([0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]).is_err());
}

fn serde_json_like(x: &ObjectState) -> [f64; 7] {
    (*x).into()
}

proptest! {
    #[test]
    fn meas_cov_is_spd(a in 0.01f64..100.0, b in 0.01f64..100.0, angle in 0.0f64..3.2, rho in 0.0f64..5.0, sr in 0.01f64..5.0) {
        let (s, c) = angle.sin_cos();
        let r = nalgebra::Matrix2::new(c, -s, s, c);
        let e = SpdMatrix2::new(r * nalgebra::Matrix2::new(a, 0.0, 0.0, b) * r.transpose()).unwrap();
        let m = Model::new(ModelParams { rho, sigma_r: sr, ..Default::default() }).unwrap();
        let cov = m.meas_cov(&ObjectState::new(KinematicVec::zeros(), e));
        prop_assert!(SpdMatrix2::new(*cov.matrix()).is_ok());
        prop_assert!(cov.det() > 0.0);
    }

    #[test]
    fn effective_pd_increases_with_gamma(g1 in 0.0f64..20.0, dg in 1e-3f64..5.0) {
        let x = ObjectState::new(KinematicVec::zeros(), SpdMatrix2::scaled_identity(1.0).unwrap());
        let pd = |g: f64| Model::new(ModelParams { gamma: g, ..Default::default() }).unwrap().effective_pd(&x);
        prop_assert!(pd(g1 + dg) >= pd(g1));
        prop_assert!((0.0..=1.0).contains(&pd(g1)));
    }
}
