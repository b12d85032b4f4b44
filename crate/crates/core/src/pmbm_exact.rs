//! Exact PMBM update of a particle PMB density by exhaustive enumeration of
//! local and global association hypotheses, plus the KLD-minimising PMB
//! projection. Exponential in the frame size; intended as a test oracle.

use thiserror::Error;

use crate::density::{BernoulliComponent, ComponentId, PmbDensity, TrajectoryParticle, Undetected};
use crate::linalg::log_sum_exp;
use crate::models::{Measurement, Model};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExactError {
    #[error("frame has {got} measurements, cap is {cap}")]
    TooManyMeasurements { got: usize, cap: usize },
    #[error("density has {got} components, cap is {cap}")]
    TooManyComponents { got: usize, cap: usize },
    #[error("the exact update needs a particle undetected intensity")]
    ScalarUndetected,
}

#[derive(Clone, Copy, Debug)]
pub struct ExactCaps {
    pub max_measurements: usize,
    pub max_components: usize,
}

impl Default for ExactCaps {
    fn default() -> Self {
        Self { max_measurements: 6, max_components: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct LocalHypothesis {
    pub log_weight: f64,
    pub existence: f64,
    /// Normalised weights over the component's particle support.
    pub particle_weights: Vec<f64>,
    /// Bit `j` set when measurement `j` of the current frame is assigned.
    pub mask: u64,
    /// `(step, measurement index)` pairs assigned at the current step.
    pub meas_pairs: Vec<(usize, usize)>,
}

impl LocalHypothesis {
    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

/// All local hypotheses of one Bernoulli component. Every hypothesis lives on
/// the same particle support, which keeps the projection on that support.
#[derive(Clone, Debug)]
pub struct ExactComponent {
    pub id: ComponentId,
    pub support: Vec<TrajectoryParticle>,
    pub hypotheses: Vec<LocalHypothesis>,
}

impl ExactComponent {
    /// Materialise the particle list of one local hypothesis.
    pub fn hypothesis_particles(&self, a: usize) -> Vec<TrajectoryParticle> {
        self.support
            .iter()
            .zip(&self.hypotheses[a].particle_weights)
            .map(|(p, w)| p.with_weight(*w))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalHypothesis {
    pub choice: Vec<usize>,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct PmbmDensity {
    pub step: usize,
    pub undetected: Vec<TrajectoryParticle>,
    pub components: Vec<ExactComponent>,
    pub globals: Vec<GlobalHypothesis>,
}

fn normalized(lw: &[f64]) -> Vec<f64> {
    let total = log_sum_exp(lw);
    if total == f64::NEG_INFINITY {
        let n = lw.len().max(1) as f64;
        return vec![1.0 / n; lw.len()];
    }
    lw.iter().map(|v| (v - total).exp()).collect()
}

fn mask_pairs(mask: u64, step: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m).filter(|j| mask >> j & 1 == 1).map(|j| (step, j)).collect()
}

/// Exact update of a predicted particle PMB density with one frame.
pub fn update_exact(
    predicted: &PmbDensity,
    frame: &[Measurement],
    model: &Model,
    caps: ExactCaps,
) -> Result<PmbmDensity, ExactError> {
    let m = frame.len();
    let n = predicted.components.len();
    if m > caps.max_measurements {
        return Err(ExactError::TooManyMeasurements { got: m, cap: caps.max_measurements });
    }
    if n > caps.max_components {
        return Err(ExactError::TooManyComponents { got: n, cap: caps.max_components });
    }
    let ppp = match &predicted.undetected {
        Undetected::Particles(ps) => ps,
        Undetected::Scalar(_) => return Err(ExactError::ScalarUndetected),
    };
    let k = predicted.step;
    let log_clutter: Vec<f64> = frame.iter().map(|z| model.clutter_logintensity(z)).collect();
    let subset = |mask: u64| -> Vec<Measurement> { (0..m).filter(|j| mask >> j & 1 == 1).map(|j| frame[j]).collect() };

    let mut components = Vec::with_capacity(n + m);
    for c in &predicted.components {
        let mut hyps = Vec::with_capacity(1 << m);
        // misdetection
        let lw: Vec<f64> = c
            .particles
            .iter()
            .map(|p| {
                let alive = p.is_alive_at(k);
                p.weight.ln() + if alive { -model.gamma(p.last_state()) } else { 0.0 }
            })
            .collect();
        let l0 = log_sum_exp(&lw).exp();
        let w = 1.0 - c.r + c.r * l0;
        hyps.push(LocalHypothesis {
            log_weight: w.ln(),
            existence: if w > 0.0 { c.r * l0 / w } else { 0.0 },
            particle_weights: normalized(&lw),
            mask: 0,
            meas_pairs: Vec::new(),
        });
        for mask in 1u64..(1u64 << m) {
            let ws = subset(mask);
            let lw: Vec<f64> = c
                .particles
                .iter()
                .map(|p| {
                    if p.is_alive_at(k) {
                        p.weight.ln() + model.set_meas_loglik(&ws, p.last_state())
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            hyps.push(LocalHypothesis {
                log_weight: c.r.ln() + log_sum_exp(&lw),
                existence: 1.0,
                particle_weights: normalized(&lw),
                mask,
                meas_pairs: mask_pairs(mask, k, m),
            });
        }
        components.push(ExactComponent { id: c.id, support: c.particles.clone(), hypotheses: hyps });
    }

    let ppp_norm: Vec<f64> = normalized(&ppp.iter().map(|p| p.weight.ln()).collect::<Vec<_>>());
    for j in 0..m {
        let mut hyps = vec![LocalHypothesis {
            log_weight: 0.0,
            existence: 0.0,
            particle_weights: ppp_norm.clone(),
            mask: 0,
            meas_pairs: Vec::new(),
        }];
        for lower in 0u64..(1u64 << j) {
            let mask = lower | (1u64 << j);
            let ws = subset(mask);
            let lw: Vec<f64> =
                ppp.iter().map(|p| p.weight.ln() + model.set_meas_loglik(&ws, p.last_state())).collect();
            let lw_total = log_sum_exp(&lw);
            let lweight = if lower == 0 { log_sum_exp(&[log_clutter[j], lw_total]) } else { lw_total };
            hyps.push(LocalHypothesis {
                log_weight: lweight,
                existence: if lweight == f64::NEG_INFINITY { 0.0 } else { (lw_total - lweight).exp() },
                particle_weights: normalized(&lw),
                mask,
                meas_pairs: mask_pairs(mask, k, m),
            });
        }
        components.push(ExactComponent { id: ComponentId::new(k, j), support: ppp.clone(), hypotheses: hyps });
    }

    let undetected = ppp
        .iter()
        .map(|p| p.with_weight(p.weight * (-model.gamma(p.last_state())).exp()))
        .collect();
    let mut out = PmbmDensity { step: k, undetected, components, globals: Vec::new() };
    out.globals = enumerate_globals(&out, m);
    Ok(out)
}

/// All assignments whose selected measurement sets partition the frame,
/// with normalised weights.
pub fn enumerate_globals(density: &PmbmDensity, m: usize) -> Vec<GlobalHypothesis> {
    let full = if m == 0 { 0 } else { (1u64 << m) - 1 };
    let mut found: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut choice = Vec::with_capacity(density.components.len());
    fn rec(
        comps: &[ExactComponent],
        i: usize,
        used: u64,
        lw: f64,
        full: u64,
        choice: &mut Vec<usize>,
        found: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if i == comps.len() {
            if used == full {
                found.push((choice.clone(), lw));
            }
            return;
        }
        for (a, h) in comps[i].hypotheses.iter().enumerate() {
            if h.mask & used != 0 {
                continue;
            }
            choice.push(a);
            rec(comps, i + 1, used | h.mask, lw + h.log_weight, full, choice, found);
            choice.pop();
        }
    }
    rec(&density.components, 0, 0, 0.0, full, &mut choice, &mut found);
    let lws: Vec<f64> = found.iter().map(|(_, l)| *l).collect();
    let ws = normalized(&lws);
    found.into_iter().zip(ws).map(|((choice, _), weight)| GlobalHypothesis { choice, weight }).collect()
}

/// Marginal probability of each local hypothesis.
pub fn marginal_assoc_probs(density: &PmbmDensity) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = density.components.iter().map(|c| vec![0.0; c.hypotheses.len()]).collect();
    for g in &density.globals {
        for (i, &a) in g.choice.iter().enumerate() {
            out[i][a] += g.weight;
        }
    }
    out
}

/// KLD-minimising PMB approximation of the PMBM.
pub fn pmb_project(density: &PmbmDensity) -> PmbDensity {
    let marg = marginal_assoc_probs(density);
    let components = density
        .components
        .iter()
        .zip(&marg)
        .map(|(c, wbar)| {
            let r: f64 = c.hypotheses.iter().zip(wbar).map(|(h, w)| w * h.existence).sum();
            let mut weights = vec![0.0; c.support.len()];
            for (h, w) in c.hypotheses.iter().zip(wbar) {
                let f = w * h.existence;
                if f > 0.0 {
                    for (acc, pw) in weights.iter_mut().zip(&h.particle_weights) {
                        *acc += f * pw;
                    }
                }
            }
            let s: f64 = weights.iter().sum();
            let particles = c
                .support
                .iter()
                .zip(weights.iter().zip(&c.hypotheses[0].particle_weights))
                .map(|(p, (w, w0))| p.with_weight(if s > 0.0 { w / s } else { *w0 }))
                .collect();
            BernoulliComponent { id: c.id, r: r.clamp(0.0, 1.0), particles }
        })
        .collect();
    PmbDensity { step: density.step, undetected: Undetected::Particles(density.undetected.clone()), components }
}
