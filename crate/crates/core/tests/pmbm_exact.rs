use nalgebra::Vector2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpmb_core::density::{BernoulliComponent, ComponentId, PmbDensity, TrajectoryParticle, Undetected};
use tpmb_core::linalg::{KinematicVec, SpdMatrix2};
use tpmb_core::models::{Measurement, Model, ModelParams, ObjectState};
use tpmb_core::pmbm_exact::{enumerate_globals, marginal_assoc_probs, pmb_project, update_exact, ExactCaps};

fn st(x: f64, y: f64) -> ObjectState {
    ObjectState::new(KinematicVec::new(x, 0.0, y, 0.0), SpdMatrix2::scaled_identity(4.0).unwrap())
}

fn ppp(rng: &mut ChaCha8Rng, n: usize) -> Vec<TrajectoryParticle> {
    (0..n).map(|_| TrajectoryParticle::new(0.01, 2, st(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))).collect()
}

fn density(rng: &mut ChaCha8Rng, n: usize) -> PmbDensity {
    let components = (0..n)
        .map(|i| {
            let mut particles: Vec<TrajectoryParticle> = (0..6)
                .map(|l| {
                    let p = TrajectoryParticle::from_states(1.0, 1, &[st(0.0, 0.0), st(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0))]).unwrap();
                    if l == 5 { TrajectoryParticle::new(1.0, 1, st(0.0, 0.0)).killed(1.0) } else { p }
                })
                .collect();
            let s = particles.len() as f64;
            particles.iter_mut().for_each(|p| p.weight /= s);
            BernoulliComponent { id: ComponentId::new(1, i), r: rng.random_range(0.2..0.95), particles }
        })
        .collect();
    PmbDensity { step: 2, undetected: Undetected::Particles(ppp(rng, 8)), components }
}

fn frame(rng: &mut ChaCha8Rng, m: usize) -> Vec<Measurement> {
    (0..m).map(|_| Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect()
}

fn bell(m: usize) -> usize {
    // Bell triangle
    let mut row = vec![1usize];
    for _ in 0..m {
        let mut next = vec![*row.last().unwrap()];
        for v in &row {
            let x = next.last().unwrap() + v;
            next.push(x);
        }
        row = next;
    }
    row[0]
}

#[test]
fn three_measurements_make_three_components() {
    let model = Model::new(ModelParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = PmbDensity { step: 2, undetected: Undetected::Particles(ppp(&mut rng, 5)), components: vec![] };
    let out = update_exact(&d, &frame(&mut rng, 3), &model, ExactCaps::default()).unwrap();
    let counts: Vec<usize> = out.components.iter().map(|c| c.hypotheses.len()).collect();
    assert_eq!(counts, vec![2, 3, 5]);
    assert_eq!(out.globals.len(), 5);
    for m in 0..=6 {
        let d = PmbDensity { step: 2, undetected: Undetected::Particles(ppp(&mut rng, 3)), components: vec![] };
        let out = update_exact(&d, &frame(&mut rng, m), &model, ExactCaps::default()).unwrap();
        assert_eq!(out.globals.len(), bell(m), "m={m}");
    }
}

#[test]
fn empty_frame_only_misdetects() {
    let model = Model::new(ModelParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = density(&mut rng, 2);
    let out = update_exact(&d, &[], &model, ExactCaps::default()).unwrap();
    assert_eq!(out.globals.len(), 1);
    assert!(out.components.iter().all(|c| c.hypotheses.len() == 1));
    let g = (-model.params().gamma).exp();
    let Undetected::Particles(before) = &d.undetected else { unreachable!() };
    for (a, b) in before.iter().zip(&out.undetected) {
        assert!((b.weight - a.weight * g).abs() < 1e-15);
    }
    let proj = pmb_project(&out);
    for (c, p) in d.components.iter().zip(&proj.components) {
        // five alive particles of weight 1/6, one dead
        let l0 = 5.0 / 6.0 * g + 1.0 / 6.0;
        let expect = c.r * l0 / (1.0 - c.r + c.r * l0);
        assert!((p.r - expect).abs() < 1e-12);
    }
}

#[test]
fn one_component_one_measurement_by_hand() {
    let model = Model::new(ModelParams::default()).unwrap();
    let x = st(1.0, 1.0);
    let u = st(-2.0, 0.5);
    let z = Vector2::new(0.5, 1.5);
    let r = 0.8;
    let d = PmbDensity {
        step: 1,
        undetected: Undetected::Particles(vec![TrajectoryParticle::new(0.05, 1, u)]),
        components: vec![BernoulliComponent { id: ComponentId::new(0, 0), r, particles: vec![TrajectoryParticle::new(1.0, 1, x)] }],
    };
    let out = update_exact(&d, &[z], &model, ExactCaps::default()).unwrap();
    let g = model.params().gamma;
    let lik = |s: &ObjectState| g * (-g).exp() * model.meas_logpdf(&z, s).exp();
    let clutter = 10.0 / 90_000.0;
    let miss = 1.0 - r + r * (-g).exp();
    let detect = r * lik(&x);
    let new_exists = clutter + 0.05 * lik(&u);
    // global hypotheses: prior misses and the new component takes z, or the prior takes z
    let total = miss * new_exists + detect;
    let w_miss = miss * new_exists / total;
    let mut ws: Vec<f64> = out.globals.iter().map(|h| h.weight).collect();
    ws.sort_by(f64::total_cmp);
    let mut expect = vec![w_miss, 1.0 - w_miss];
    expect.sort_by(f64::total_cmp);
    for (a, b) in ws.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let proj = pmb_project(&out);
    let r_prior = w_miss * (r * (-g).exp() / miss) + (1.0 - w_miss);
    let r_new = w_miss * (0.05 * lik(&u) / new_exists);
    assert!((proj.components[0].r - r_prior).abs() < 1e-12);
    assert!((proj.components[1].r - r_new).abs() < 1e-12);
}

#[test]
fn caps_are_enforced() {
    let model = Model::new(ModelParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = density(&mut rng, 2);
    assert!(update_exact(&d, &frame(&mut rng, 7), &model, ExactCaps::default()).is_err());
    let d5 = density(&mut rng, 5);
    assert!(update_exact(&d5, &frame(&mut rng, 1), &model, ExactCaps::default()).is_err());
    let scalar = PmbDensity { step: 2, undetected: Undetected::Scalar(1.0), components: vec![] };
    assert!(update_exact(&scalar, &[], &model, ExactCaps::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_update_invariants(seed in 0u64..10_000, n in 0usize..=3, m in 0usize..=4) {
        let model = Model::new(ModelParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = density(&mut rng, n);
        let f = frame(&mut rng, m);
        let out = update_exact(&d, &f, &model, ExactCaps::default()).unwrap();
        let total: f64 = out.globals.iter().map(|g| g.weight).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        // new component j never holds a measurement with a larger index
        for (j, c) in out.components[n..].iter().enumerate() {
            for h in &c.hypotheses {
                prop_assert!(h.mask >> (j + 1) == 0);
                prop_assert!(h.mask == 0 || h.mask >> j & 1 == 1);
            }
        }
        // each global hypothesis partitions the frame
        for g in &out.globals {
            let mut used = 0u64;
            for (i, &a) in g.choice.iter().enumerate() {
                let mask = out.components[i].hypotheses[a].mask;
                prop_assert_eq!(used & mask, 0);
                used |= mask;
            }
            prop_assert_eq!(used, if m == 0 { 0 } else { (1u64 << m) - 1 });
        }
        prop_assert_eq!(enumerate_globals(&out, m).len(), out.globals.len());
        // projection keeps the expected number of detected objects
        let marg = marginal_assoc_probs(&out);
        let mixture: f64 = out.components.iter().zip(&marg)
            .map(|(c, w)| c.hypotheses.iter().zip(w).map(|(h, w)| w * h.existence).sum::<f64>())
            .sum();
        let proj = pmb_project(&out);
        let projected: f64 = proj.components.iter().map(|c| c.r).sum();
        prop_assert!((mixture - projected).abs() < 1e-12);
        for c in &proj.components {
            prop_assert!((0.0..=1.0).contains(&c.r));
            let s: f64 = c.particles.iter().map(|p| p.weight).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
