//! Crossing-objects ground truth and measurement synthesis.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;
use tpmb_core::linalg::{sample_inverse_wishart, sample_poisson, KinematicVec, RngStream};
use tpmb_core::metrics::TrajectoryRecord;
use tpmb_core::models::{Measurement, Model, ObjectState};

use crate::config::ScenarioConfig;
use crate::HarnessError;

/// One record per object, in object order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub trajectories: Vec<TrajectoryRecord>,
    pub horizon: usize,
}

impl GroundTruth {
    pub fn present_at(&self, k: usize) -> impl Iterator<Item = &ObjectState> {
        self.trajectories.iter().filter_map(move |t| t.at(k))
    }

    /// Truth restricted to steps `<= k`, dropping trajectories not yet born.
    pub fn up_to(&self, k: usize) -> Vec<TrajectoryRecord> {
        self.trajectories.iter().filter(|t| t.start <= k).map(|t| t.truncated(k)).collect()
    }
}

/// Objects start at step 0 evenly spaced on the circle, heading to its
/// centre. Object `i` is reported from its pair's appear step to its
/// disappear step inclusive.
pub fn generate_scenario(cfg: &ScenarioConfig, model: &Model, rng: &RngStream) -> Result<GroundTruth, HarnessError> {
    cfg.validate()?;
    let params = model.params();
    let n = cfg.n_objects;
    let mut trajectories = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.derive(&[i as u64]).rng();
        let angle = TAU * i as f64 / n as f64;
        let (s, c) = angle.sin_cos();
        let centre = params.region.center();
        let kin = KinematicVec::new(
            centre.x + cfg.circle_radius * c,
            -cfg.initial_speed * c,
            centre.y + cfg.circle_radius * s,
            -cfg.initial_speed * s,
        );
        let extent = sample_inverse_wishart(&params.birth_extent_mean, params.birth_extent_dof, &mut r)?;
        let pair = cfg.pair_of(i);
        let (appear, disappear) = (cfg.appear_steps[pair], cfg.disappear_steps[pair]);
        let mut x = ObjectState::new(kin, extent);
        let mut states = Vec::with_capacity(disappear + 1 - appear);
        for k in 1..=disappear {
            x = if cfg.noisy_truth {
                let mut next = model.transition_sample(&x, &mut r)?;
                next.extent = extent;
                next
            } else {
                ObjectState::new(model.predict_kinematic(&x.kin), extent)
            };
            if k >= appear {
                states.push(x);
            }
        }
        trajectories.push(TrajectoryRecord { start: appear, states });
    }
    Ok(GroundTruth { trajectories, horizon: cfg.horizon })
}

/// Frame `k - 1` holds the measurements of step `k`, shuffled. Points
/// outside the surveillance region are dropped.
pub fn generate_measurements(truth: &GroundTruth, model: &Model, rng: &RngStream) -> Result<Vec<Vec<Measurement>>, HarnessError> {
    let params = model.params();
    let mut frames = Vec::with_capacity(truth.horizon);
    for k in 1..=truth.horizon {
        let mut r = rng.derive(&[k as u64]).rng();
        let mut frame = Vec::new();
        for x in truth.present_at(k) {
            let n = sample_poisson(model.gamma(x), &mut r)?;
            let l = model.meas_cov(x).cholesky();
            for _ in 0..n {
                let w = Vector2::new(r.sample(StandardNormal), r.sample(StandardNormal));
                frame.push(x.position() + l * w);
            }
        }
        let n_clutter = sample_poisson(params.clutter_rate, &mut r)?;
        for _ in 0..n_clutter {
            frame.push(params.region.sample(&mut r));
        }
        frame.retain(|z| params.region.contains(z));
        frame.shuffle(&mut r);
        frames.push(frame);
    }
    Ok(frames)
}
