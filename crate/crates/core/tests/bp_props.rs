use nalgebra::Vector2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpmb_core::bp::*;
use tpmb_core::density::{BernoulliComponent, ComponentId, PmbDensity, TrajectoryParticle, Undetected};
use tpmb_core::linalg::{KinematicVec, RngStream, SpdMatrix2};
use tpmb_core::models::{Measurement, Model, ModelParams, ObjectState, Region};

/// Random instance; `s` scales every length (positions, extents, noise).
fn instance(seed: u64, n: usize, m: usize, s: f64) -> (PmbDensity, Vec<Measurement>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 4;
    let st = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
        let e = rng.random_range(1.0..8.0);
        ObjectState::new(KinematicVec::new(s * x, 0.0, s * y, 0.0), SpdMatrix2::scaled_identity(s * s * e).unwrap())
    };
    let components = (0..n)
        .map(|i| {
            let mut ps: Vec<TrajectoryParticle> = (0..10)
                .map(|l| {
                    let a = st(&mut rng);
                    let w = rng.random_range(0.1..1.0);
                    if l % 5 == 4 {
                        TrajectoryParticle::new(w, k - 1, a).killed(w)
                    } else {
                        TrajectoryParticle::from_states(w, k - 1, &[a, a]).unwrap()
                    }
                })
                .collect();
            let t: f64 = ps.iter().map(|p| p.weight).sum();
            ps.iter_mut().for_each(|p| p.weight /= t);
            BernoulliComponent { id: ComponentId::new(1, i), r: rng.random_range(0.05..0.99), particles: ps }
        })
        .collect();
    let ppp = (0..12).map(|_| TrajectoryParticle::new(0.004, k, st(&mut rng))).collect();
    let frame = (0..m).map(|_| Vector2::new(s * rng.random_range(-7.0..7.0), s * rng.random_range(-7.0..7.0))).collect();
    (PmbDensity { step: k, undetected: Undetected::Particles(ppp), components }, frame)
}

fn model_scaled(s: f64) -> Model {
    Model::new(ModelParams { sigma_r: s, region: Region::square(150.0 * s), ..Default::default() }).unwrap()
}

fn exact_opts() -> BpOptions {
    BpOptions { censor_threshold: 0.0, reorder: false, iterations: 6, ..Default::default() }
}

#[test]
fn xi_arithmetic() {
    let theta = PairTable { m: 1, rows: vec![vec![(0, 2.0)], vec![(0, 3.0)]] };
    let xi = bp_xi(&theta);
    assert_eq!(xi.get(0, 0), Some(4.0));
    assert_eq!(xi.get(1, 0), Some(3.0));
    let zero = PairTable { m: 2, rows: vec![vec![(0, 0.0), (1, 0.0)], vec![(1, 0.0)]] };
    assert!(bp_xi(&zero).rows.iter().flatten().all(|(_, v)| *v == 1.0));
    // random table against direct summation
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); 5];
    for row in rows.iter_mut() {
        for j in 0..4 {
            if rng.random_bool(0.7) {
                row.push((j, rng.random_range(0.0..5.0)));
            }
        }
    }
    let theta = PairTable { m: 4, rows };
    let xi = bp_xi(&theta);
    for (i, row) in theta.rows.iter().enumerate() {
        for &(j, _) in row {
            let direct = 1.0 + (0..5).filter(|&o| o != i).filter_map(|o| theta.get(o, j)).sum::<f64>();
            assert!((xi.get(i, j).unwrap() - direct).abs() < 1e-12);
        }
    }
}

#[test]
fn initial_messages() {
    let (d, frame) = instance(2, 2, 2, 1.0);
    let quiet = Model::new(ModelParams { gamma: 0.0, ..Default::default() }).unwrap();
    let g = bp_init(&d, &frame, &quiet, &exact_opts(), &PppCopy, RngStream::new(1, 0)).unwrap();
    for i in 0..2 {
        let w: Vec<f64> = d.components[i].particles.iter().map(|p| p.weight).collect();
        for (a, b) in g.init_weights(i).iter().zip(&w) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((g.init_message(i).total - 1.0).abs() < 1e-12);
    }
    // three-particle prior by hand: alive weights scaled by exp(-gamma), dead ones kept
    let model = Model::new(ModelParams::default()).unwrap();
    let x = ObjectState::new(KinematicVec::zeros(), SpdMatrix2::scaled_identity(4.0).unwrap());
    let ps = vec![
        TrajectoryParticle::from_states(0.5, 3, &[x, x]).unwrap(),
        TrajectoryParticle::from_states(0.3, 3, &[x, x]).unwrap(),
        TrajectoryParticle::new(0.2, 3, x).killed(0.2),
    ];
    let d = PmbDensity {
        step: 4,
        undetected: Undetected::Particles(vec![TrajectoryParticle::new(0.0, 4, x)]),
        components: vec![BernoulliComponent { id: ComponentId::new(1, 0), r: 0.6, particles: ps }],
    };
    let z = [Vector2::new(0.5, 0.0)];
    let g = bp_init(&d, &z, &model, &exact_opts(), &PppCopy, RngStream::new(1, 0)).unwrap();
    let e = (-5.0f64).exp();
    let w = g.init_weights(0);
    assert!((w[0] - 0.5 * e).abs() < 1e-15 && (w[1] - 0.3 * e).abs() < 1e-15 && (w[2] - 0.2).abs() < 1e-15);
    assert!((g.init_message(0).total - (0.6 * (0.8 * e + 0.2) + 0.4)).abs() < 1e-15);
    // empty undetected intensity: new component message is 1 and its belief is 0
    assert!((g.init_message(1).total - 1.0).abs() < 1e-15);
    let out = bp_update_with(&d, &z, &model, &exact_opts(), &PppCopy, RngStream::new(1, 0)).unwrap();
    assert_eq!(out.density.components[1].r, 0.0);
}

#[test]
fn measurement_evaluation_by_hand() {
    let model = Model::new(ModelParams::default()).unwrap();
    let x = ObjectState::new(KinematicVec::new(1.0, 0.0, 2.0, 0.0), SpdMatrix2::scaled_identity(4.0).unwrap());
    let z = Vector2::new(1.0, 2.0);
    let r = 0.7;
    let mk = |particles| PmbDensity {
        step: 4,
        undetected: Undetected::Particles(vec![TrajectoryParticle::new(0.01, 4, x)]),
        components: vec![BernoulliComponent { id: ComponentId::new(1, 0), r, particles }],
    };
    let d = mk(vec![TrajectoryParticle::from_states(1.0, 3, &[x, x]).unwrap()]);
    let g = bp_init(&d, &[z], &model, &exact_opts(), &PppCopy, RngStream::new(1, 0)).unwrap();
    let theta = bp_measurement_evaluation(&g, None);
    let (gamma, e) = (5.0, (-5.0f64).exp());
    let peak = model.meas_logpdf(&z, &x).exp();
    let lc = 10.0 / 90_000.0;
    let eps = r * e + 1.0 - r;
    let expect = r * e * gamma * peak / (lc * eps);
    assert!((theta.get(0, 0).unwrap() - expect).abs() < 1e-12 * expect);
    // a single measurement has no other factors: the extrinsic message is the initial one
    let xi = bp_xi(&theta);
    let ext = bp_extrinsic(&g, &xi);
    let (j, msg) = &ext[0][0];
    assert_eq!(*j, 0);
    let init = g.init_message(0);
    assert!((msg.total - init.total).abs() < 1e-15);
    assert_eq!(msg.particle_weights, init.particle_weights);
    // dead-only component never explains a measurement
    let dead = mk(vec![TrajectoryParticle::new(1.0, 3, x).killed(1.0)]);
    let g = bp_init(&dead, &[z, z], &model, &exact_opts(), &PppCopy, RngStream::new(1, 0)).unwrap();
    let theta = bp_measurement_evaluation(&g, None);
    assert!(theta.rows[0].iter().all(|(_, v)| *v == 0.0));
    // far particle gives a vanishing ratio
    let far = ObjectState::new(KinematicVec::new(100.0, 0.0, 100.0, 0.0), x.extent);
    let d = mk(vec![TrajectoryParticle::from_states(1.0, 3, &[far, far]).unwrap()]);
    let g = bp_init(&d, &[z], &model, &exact_opts(), &PppCopy, RngStream::new(1, 0)).unwrap();
    assert!(bp_measurement_evaluation(&g, None).get(0, 0).unwrap_or(0.0) < 1e-100);
}

#[test]
fn silent_sensor_keeps_prediction() {
    let (d, frame) = instance(3, 3, 3, 1.0);
    let quiet = Model::new(ModelParams { gamma: 0.0, ..Default::default() }).unwrap();
    let out = bp_update_with(&d, &frame, &quiet, &exact_opts(), &PppCopy, RngStream::new(1, 0)).unwrap();
    for (a, b) in d.components.iter().zip(&out.density.components) {
        assert!((a.r - b.r).abs() < 1e-12);
        for (pa, pb) in a.particles.iter().zip(&b.particles) {
            assert!((pa.weight - pb.weight).abs() < 1e-12);
        }
    }
}

#[test]
fn length_scaling_leaves_beliefs_unchanged() {
    for seed in 0..10 {
        let (d1, f1) = instance(seed, 2, 3, 1.0);
        let (d2, f2) = instance(seed, 2, 3, 2.0);
        let a = bp_update_with(&d1, &f1, &model_scaled(1.0), &exact_opts(), &PppCopy, RngStream::new(1, 0)).unwrap();
        let b = bp_update_with(&d2, &f2, &model_scaled(2.0), &exact_opts(), &PppCopy, RngStream::new(1, 0)).unwrap();
        for (ca, cb) in a.density.components.iter().zip(&b.density.components) {
            assert!((ca.r - cb.r).abs() < 1e-10, "seed {seed}: {} vs {}", ca.r, cb.r);
            for (pa, pb) in ca.particles.iter().zip(&cb.particles) {
                assert!((pa.weight - pb.weight).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn registries_resolve_by_name() {
    let inits = init_registry();
    assert!(inits.resolve("ppp-copy").is_ok() && inits.resolve("measurement-driven").is_ok());
    assert!(inits.resolve("nope").is_err());
    let (d, f) = instance(4, 1, 2, 1.0);
    let opts = BpOptions { new_component_init: "nope".into(), ..Default::default() };
    assert!(bp_update(&d, &f, &Model::new(ModelParams::default()).unwrap(), &opts, RngStream::new(1, 0)).is_err());
    assert!(BpOptions { iterations: 0, ..Default::default() }.validate().is_err());
    assert!(BpOptions { damping: 1.0, ..Default::default() }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn message_and_belief_invariants(
        seed in 0u64..100_000, n in 0usize..4, m in 0usize..5, driven in any::<bool>(), flooding in any::<bool>(),
    ) {
        let (d, frame) = instance(seed, n, m, 1.0);
        let model = Model::new(ModelParams::default()).unwrap();
        let opts = BpOptions {
            new_component_init: if driven { "measurement-driven".into() } else { "ppp-copy".into() },
            schedule: if flooding { Schedule::Flooding } else { Schedule::Serial },
            birth_particles: 200,
            ..Default::default()
        };
        let out = bp_update(&d, &frame, &model, &opts, RngStream::new(seed, 0)).unwrap();
        prop_assert_eq!(out.density.components.len(), n + m);
        prop_assert!(out.xi.rows.iter().flatten().all(|(_, v)| *v >= 1.0));
        prop_assert!(out.theta.rows.iter().flatten().all(|(_, v)| *v >= 0.0 && v.is_finite()));
        for c in &out.density.components {
            prop_assert!((0.0..=1.0).contains(&c.r));
            let s: f64 = c.particles.iter().map(|p| p.weight).sum();
            prop_assert!((s - 1.0).abs() < 1e-12 || c.particles.is_empty(), "sum {}", s);
        }
        let mut sorted = out.order.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..m).collect::<Vec<_>>());
    }

    #[test]
    fn new_components_only_see_earlier_measurements(seed in 0u64..100_000, n in 0usize..3, m in 1usize..6) {
        let (d, frame) = instance(seed, n, m, 1.0);
        let model = Model::new(ModelParams::default()).unwrap();
        let opts = BpOptions { censor_threshold: 0.0, ..Default::default() };
        let g = bp_init(&d, &frame, &model, &opts, &PppCopy, RngStream::new(seed, 0)).unwrap();
        for o in 0..m {
            let i = n + o;
            prop_assert_eq!(g.node_kind(i), NodeKind::New { own: o });
            let links = g.node_links(i);
            prop_assert!(links.contains(&o));
            prop_assert!(links.iter().all(|&j| j <= o), "node {} links {:?}", i, links);
        }
        let theta = bp_measurement_evaluation(&g, None);
        for o in 0..m {
            prop_assert!(theta.rows[n + o].iter().all(|(j, _)| *j <= o));
        }
    }
}
