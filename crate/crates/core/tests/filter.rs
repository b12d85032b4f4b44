use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpmb_core::density::{BernoulliComponent, ComponentId, PmbDensity, TrajectoryParticle, Undetected};
use tpmb_core::filter::{
    end_time_pmf, estimate, make_filter, marginalize_past, predict_alive, predict_all, FilterOptions, StoredMarginals,
    TrajectoryFilter,
};
use tpmb_core::linalg::{sample_poisson, KinematicVec, RngStream, SpdMatrix2};
use tpmb_core::models::{Measurement, Model, ModelParams, ObjectState};

fn state(px: f64, py: f64) -> ObjectState {
    ObjectState::new(KinematicVec::new(px, 1.0, py, 0.0), SpdMatrix2::scaled_identity(9.0).unwrap())
}

fn one_component(r: f64, particles: Vec<TrajectoryParticle>, step: usize) -> PmbDensity {
    PmbDensity {
        step,
        undetected: Undetected::Scalar(0.0),
        components: vec![BernoulliComponent { id: ComponentId::new(1, 0), r, particles }],
    }
}

#[test]
fn alive_prediction_scales_existence() {
    let model = Model::new(ModelParams::default()).unwrap();
    let d = one_component(0.8, vec![TrajectoryParticle::new(1.0, 1, state(0.0, 0.0))], 1);
    let p = predict_alive(&d, &model, 10, &RngStream::new(3, 0)).unwrap();
    assert!((p.components[0].r - 0.792).abs() < 1e-12);
    assert_eq!(p.components[0].particles[0].len, 2);
    let Undetected::Scalar(m) = p.undetected else { panic!() };
    assert!((m - 0.01).abs() < 1e-15);
}

#[test]
fn all_prediction_splits_particles() {
    let model = Model::new(ModelParams::default()).unwrap();
    let d = one_component(0.8, vec![TrajectoryParticle::new(1.0, 1, state(0.0, 0.0))], 1);
    let p = predict_all(&d, &model, 10, &RngStream::new(3, 0)).unwrap();
    let c = &p.components[0];
    assert_eq!(c.r, 0.8);
    assert_eq!(c.particles.len(), 2);
    assert!((c.particles[0].weight - 0.99).abs() < 1e-15 && c.particles[0].is_alive_at(2));
    assert!((c.particles[1].weight - 0.01).abs() < 1e-15 && c.particles[1].dead && c.particles[1].end() == 1);
    assert!((c.total_weight() - 1.0).abs() < 1e-12);
    let pmf = end_time_pmf(c, 2);
    assert_eq!(pmf.len(), 2);
    assert!((pmf[0].1 - 0.01).abs() < 1e-12 && pmf[1].0 == 2);

    let no_death = Model::new(ModelParams { p_survival: 1.0, ..Default::default() }).unwrap();
    assert_eq!(predict_all(&d, &no_death, 10, &RngStream::new(3, 0)).unwrap().components[0].particles.len(), 1);
}

#[test]
fn marginalize_past_keeps_last_state() {
    let model = Model::new(ModelParams::default()).unwrap();
    let d = one_component(0.8, vec![TrajectoryParticle::new(1.0, 1, state(0.0, 0.0))], 1);
    let p = predict_alive(&d, &model, 10, &RngStream::new(3, 0)).unwrap();
    let m = marginalize_past(&p);
    let (a, b) = (&p.components[0].particles[0], &m.components[0].particles[0]);
    assert_eq!(b.len, 1);
    assert_eq!(b.start, 2);
    assert_eq!(a.last_state(), b.last_state());
    let again = marginalize_past(&m);
    assert_eq!(again.components[0].particles[0].last_state(), b.last_state());
}

#[test]
fn estimate_threshold_and_mean() {
    let mut stored = StoredMarginals::default();
    let id = ComponentId::new(1, 0);
    stored.insert(id, 1, tpmb_core::filter::StepMarginal { mean: state(1.0, 2.0), snapshot: None });
    let d = one_component(0.49, vec![TrajectoryParticle::new(1.0, 1, state(1.0, 2.0))], 1);
    assert!(estimate(&d, &stored).unwrap().is_empty());
    let d = one_component(0.5, vec![TrajectoryParticle::new(1.0, 1, state(1.0, 2.0))], 1);
    let e = estimate(&d, &stored).unwrap();
    assert_eq!(e.len(), 1);
    assert_eq!(e[0].states, vec![state(1.0, 2.0)]);
    let mean = tpmb_core::filter::mean_state([(0.5, &state(0.0, 0.0)), (0.5, &state(2.0, 4.0))]).unwrap();
    assert!((mean.position() - Vector2::new(1.0, 2.0)).norm() < 1e-15);
}

/// Straight-line object from the origin plus uniform clutter.
fn frames(model: &Model, steps: usize, seed: u64) -> Vec<Vec<Measurement>> {
    let p = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = state(-20.0, 5.0);
    x.kin[1] = 5.0;
    (1..=steps)
        .map(|_| {
            x.kin = model.predict_kinematic(&x.kin);
            let mut f = Vec::new();
            let n = sample_poisson(p.gamma, &mut rng).unwrap();
            let cov = model.meas_cov(&x);
            for _ in 0..n {
                let z = tpmb_core::linalg::sample_gaussian(
                    &nalgebra::DVector::from_column_slice(x.position().as_slice()),
                    &nalgebra::DMatrix::from_column_slice(2, 2, cov.matrix().as_slice()),
                    &mut rng,
                )
                .unwrap();
                f.push(Vector2::new(z[0], z[1]));
            }
            for _ in 0..sample_poisson(p.clutter_rate, &mut rng).unwrap() {
                f.push(p.region.sample(&mut rng));
            }
            f
        })
        .collect()
}

#[test]
fn single_object_is_confirmed() {
    let model = Model::new(ModelParams::default()).unwrap();
    let fr = frames(&model, 10, 5);
    for variant in ["tpmb-all", "tpmb-alive", "pmb"] {
        let opts = FilterOptions { scalar_ppp: true, ..Default::default() };
        let mut f = make_filter(variant, model.clone(), opts, RngStream::new(11, 0)).unwrap();
        for z in &fr {
            f.step(z).unwrap();
        }
        let confirmed = f.density().components.iter().filter(|c| c.r > 0.5).count();
        assert_eq!(confirmed, 1, "{variant}");
        let est = f.estimates().unwrap();
        assert_eq!(est.len(), 1, "{variant}");
        for e in &est {
            assert_eq!(e.states.len(), e.end() - e.start + 1);
        }
        for c in &f.density().components {
            assert!((0.0..=1.0).contains(&c.r));
            assert!((c.total_weight() - 1.0).abs() < 1e-9);
        }
    }
}

fn run(variant: &str, model: &Model, opts: &FilterOptions, fr: &[Vec<Measurement>]) -> Box<dyn TrajectoryFilter> {
    let mut f = make_filter(variant, model.clone(), opts.clone(), RngStream::new(21, 0)).unwrap();
    for z in fr {
        f.step(z).unwrap();
    }
    f
}

#[test]
fn marginalised_and_all_trajectory_filters_agree_on_current_states() {
    let model = Model::new(ModelParams::default()).unwrap();
    let fr = frames(&model, 20, 8);
    let opts = FilterOptions { scalar_ppp: true, prune_r: 0.0, end_time_prune: 0.0, ..Default::default() };
    let a = run("pmb", &model, &opts, &fr);
    let b = run("tpmb-all", &model, &opts, &fr);
    let (da, db) = (a.density(), b.density());
    assert_eq!(da.components.len(), db.components.len());
    let k = da.step;
    for (ca, cb) in da.components.iter().zip(&db.components) {
        assert_eq!(ca.id, cb.id);
        let alive = cb.alive_weight(k);
        assert!((ca.r - cb.r * alive).abs() < 1e-10, "{} vs {}", ca.r, cb.r * alive);
        let wb: Vec<&TrajectoryParticle> = cb.particles.iter().filter(|p| p.is_alive_at(k)).collect();
        assert_eq!(ca.particles.len(), wb.len());
        for (pa, pb) in ca.particles.iter().zip(wb) {
            assert_eq!(pa.last_state(), pb.last_state());
            assert!((pa.weight - pb.weight / alive).abs() < 1e-10);
        }
    }
}
