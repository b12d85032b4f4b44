//! Random-matrix extended object model: nearly constant velocity kinematics,
//! Wishart extent evolution, Poisson measurement rate, uniform clutter and a
//! uniform-position birth density.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    gaussian_logpdf2, sample_inverse_wishart, sample_wishart, KinematicVec, LinalgError, SpdMatrix2, PX, PY, VX,
    VY,
};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Measurement = Vector2<f64>;

/// Axis-aligned rectangle in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn square(half_width: f64) -> Self {
        Self { x_min: -half_width, x_max: half_width, y_min: -half_width, y_max: half_width }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn contains(&self, z: &Vector2<f64>) -> bool {
        z[0] >= self.x_min && z[0] <= self.x_max && z[1] >= self.y_min && z[1] <= self.y_max
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector2<f64> {
        Vector2::new(
            self.x_min + (self.x_max - self.x_min) * rng.random::<f64>(),
            self.y_min + (self.y_max - self.y_min) * rng.random::<f64>(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub ts: f64,
    pub sigma_q: f64,
    /// Wishart degrees of freedom of the extent transition; `0` disables extent noise.
    pub q: f64,
    pub rho: f64,
    pub sigma_r: f64,
    pub gamma: f64,
    pub p_survival: f64,
    pub birth_rate: f64,
    pub birth_velocity_cov: f64,
    pub birth_extent_mean: SpdMatrix2,
    pub birth_extent_dof: f64,
    pub clutter_rate: f64,
    pub region: Region,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            ts: 0.2,
            sigma_q: 1.0,
            q: 1000.0,
            rho: 1.0,
            sigma_r: 1.0,
            gamma: 5.0,
            p_survival: 0.99,
            birth_rate: 0.01,
            birth_velocity_cov: 100.0,
            birth_extent_mean: SpdMatrix2::new_unchecked(9.0, 0.0, 9.0),
            birth_extent_dof: 1000.0,
            clutter_rate: 10.0,
            region: Region::square(150.0),
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::InvalidParams(what.to_string()));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return bad("ts must be positive");
        }
        for (name, v) in [
            ("sigma_q", self.sigma_q),
            ("rho", self.rho),
            ("sigma_r", self.sigma_r),
            ("gamma", self.gamma),
            ("birth_rate", self.birth_rate),
            ("birth_velocity_cov", self.birth_velocity_cov),
            ("clutter_rate", self.clutter_rate),
        ] {
            if !finite_nonneg(v) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_survival) {
            return bad("p_survival must lie in [0, 1]");
        }
        if self.q != 0.0 && !(self.q >= 2.0 && self.q.is_finite()) {
            return bad("q must be 0 (no extent noise) or at least 2");
        }
        if !(self.birth_extent_dof > 3.0 && self.birth_extent_dof.is_finite()) {
            return bad("birth_extent_dof must exceed 3");
        }
        if self.rho == 0.0 && self.sigma_r == 0.0 {
            return bad("rho and sigma_r cannot both be zero");
        }
        let r = &self.region;
        if !(r.x_max > r.x_min && r.y_max > r.y_min) || !r.area().is_finite() {
            return bad("region is degenerate");
        }
        Ok(())
    }
}

/// Single object state: kinematics plus elliptic extent. Serialised flat as
/// `[px, py, vx, vy, E11, E12, E22]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 7]", into = "[f64; 7]")]
pub struct ObjectState {
    pub kin: KinematicVec,
    pub extent: SpdMatrix2,
}

impl ObjectState {
    pub fn new(kin: KinematicVec, extent: SpdMatrix2) -> Self {
        Self { kin, extent }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.kin[PX], self.kin[PY])
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.kin[VX], self.kin[VY])
    }
}

impl From<ObjectState> for [f64; 7] {
    fn from(x: ObjectState) -> Self {
        let [a, b, c] = x.extent.entries();
        [x.kin[PX], x.kin[PY], x.kin[VX], x.kin[VY], a, b, c]
    }
}

impl TryFrom<[f64; 7]> for ObjectState {
    type Error = LinalgError;

    fn try_from(v: [f64; 7]) -> Result<Self, LinalgError> {
        if v[..4].iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::InvalidParameter("non-finite kinematic state".into()));
        }
        Ok(Self { kin: KinematicVec::new(v[0], v[2], v[1], v[3]), extent: SpdMatrix2::from_entries(v[4], v[5], v[6])? })
    }
}

/// Per-axis 2x2 block of the process noise covariance.
#[derive(Clone, Copy, Debug)]
struct AxisNoise {
    l11: f64,
    l21: f64,
    l22: f64,
    inv: Matrix2<f64>,
    logdet: f64,
}

/// Validated parameters plus cached factorisations.
#[derive(Clone, Debug)]
pub struct Model {
    params: ModelParams,
    noise: Option<AxisNoise>,
    log_clutter: f64,
}

impl Model {
    pub fn new(params: ModelParams) -> Result<Self, ModelError> {
        params.validate()?;
        let noise = if params.sigma_q > 0.0 {
            let s2 = params.sigma_q * params.sigma_q;
            let t = params.ts;
            let (a, b, c) = (s2 * t.powi(3) / 3.0, s2 * t * t / 2.0, s2 * t);
            let l11 = a.sqrt();
            let l21 = b / l11;
            let l22 = (c - l21 * l21).sqrt();
            let det = a * c - b * b;
            Some(AxisNoise {
                l11,
                l21,
                l22,
                inv: Matrix2::new(c / det, -b / det, -b / det, a / det),
                logdet: det.ln(),
            })
        } else {
            None
        };
        let log_clutter = if params.clutter_rate > 0.0 {
            (params.clutter_rate / params.region.area()).ln()
        } else {
            f64::NEG_INFINITY
        };
        Ok(Self { params, noise, log_clutter })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Expected number of measurements per step for an object in state `x`.
    pub fn gamma(&self, _x: &ObjectState) -> f64 {
        self.params.gamma
    }

    pub fn survival(&self, _x: &ObjectState) -> f64 {
        self.params.p_survival
    }

    /// Whether `gamma` and `survival` ignore the state.
    pub fn is_state_independent(&self) -> bool {
        true
    }

    pub fn effective_pd(&self, x: &ObjectState) -> f64 {
        1.0 - (-self.gamma(x)).exp()
    }

    pub fn predict_kinematic(&self, e: &KinematicVec) -> KinematicVec {
        let t = self.params.ts;
        KinematicVec::new(e[PX] + t * e[VX], e[VX], e[PY] + t * e[VY], e[VY])
    }

    pub fn transition_sample<R: Rng + ?Sized>(&self, x: &ObjectState, rng: &mut R) -> Result<ObjectState, ModelError> {
        let mut kin = self.predict_kinematic(&x.kin);
        if let Some(n) = &self.noise {
            for (p, v) in [(PX, VX), (PY, VY)] {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                kin[p] += n.l11 * a;
                kin[v] += n.l21 * a + n.l22 * b;
            }
        }
        let extent = if self.params.q > 0.0 {
            sample_wishart(&x.extent.scale(1.0 / self.params.q)?, self.params.q, rng)?
        } else {
            x.extent
        };
        Ok(ObjectState { kin, extent })
    }

    /// `log N(e_next; F e, Q)`; with `sigma_q = 0` this is 0 on the mode and
    /// `-inf` elsewhere.
    pub fn transition_logpdf_kinematic(&self, e_next: &KinematicVec, e: &KinematicVec) -> f64 {
        let d = e_next - self.predict_kinematic(e);
        match &self.noise {
            Some(n) => {
                let mut q = 0.0;
                for (p, v) in [(PX, VX), (PY, VY)] {
                    let dv = Vector2::new(d[p], d[v]);
                    q += dv.dot(&(n.inv * dv));
                }
                -0.5 * (4.0 * LN_2PI + 2.0 * n.logdet + q)
            }
            None => {
                if d.iter().all(|v| *v == 0.0) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Covariance `rho E + sigma_r^2 I` of a single measurement.
    pub fn meas_cov(&self, x: &ObjectState) -> SpdMatrix2 {
        let [a, b, c] = x.extent.entries();
        let (rho, r2) = (self.params.rho, self.params.sigma_r * self.params.sigma_r);
        SpdMatrix2::new_unchecked(rho * a + r2, rho * b, rho * c + r2)
    }

    pub fn meas_logpdf(&self, z: &Measurement, x: &ObjectState) -> f64 {
        gaussian_logpdf2(z, &x.position(), &self.meas_cov(x))
    }

    /// Poisson set likelihood of a measurement subset.
    pub fn set_meas_loglik(&self, w: &[Measurement], x: &ObjectState) -> f64 {
        let g = self.gamma(x);
        if w.is_empty() {
            return -g;
        }
        let lg = g.ln();
        -g + w.iter().map(|z| lg + self.meas_logpdf(z, x)).sum::<f64>()
    }

    pub fn clutter_logintensity(&self, z: &Measurement) -> f64 {
        if self.params.region.contains(z) {
            self.log_clutter
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn birth_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ObjectState, ModelError> {
        let pos = self.params.region.sample(rng);
        self.birth_sample_at(pos, rng)
    }

    /// Birth draw conditioned on position: velocity and extent from the prior.
    pub fn birth_sample_at<R: Rng + ?Sized>(&self, pos: Vector2<f64>, rng: &mut R) -> Result<ObjectState, ModelError> {
        let sv = self.params.birth_velocity_cov.sqrt();
        let vx: f64 = rng.sample::<f64, _>(StandardNormal) * sv;
        let vy: f64 = rng.sample::<f64, _>(StandardNormal) * sv;
        let extent = sample_inverse_wishart(&self.params.birth_extent_mean, self.params.birth_extent_dof, rng)?;
        Ok(ObjectState { kin: KinematicVec::new(pos[0], vx, pos[1], vy), extent })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let m = Model::new(ModelParams::default()).unwrap();
        assert!((m.clutter_logintensity(&Vector2::zeros()) - (10.0f64 / 90000.0).ln()).abs() < 1e-15);
        assert_eq!(m.clutter_logintensity(&Vector2::new(151.0, 0.0)), f64::NEG_INFINITY);
    }

    #[test]
    fn bad_params_rejected() {
        let mut p = ModelParams { p_survival: 1.5, ..Default::default() };
        assert!(Model::new(p.clone()).is_err());
        p.p_survival = 0.9;
        p.ts = 0.0;
        assert!(Model::new(p).is_err());
    }
}
