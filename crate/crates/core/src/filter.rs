//! Recursive trajectory PMB filters.
//!
//! Three formulations share one engine:
//! - `tpmb-all`: all trajectories, dead branches kept with their end time;
//! - `tpmb-alive`: alive trajectories only, estimates accumulated per id;
//! - `pmb`: alive formulation with the past marginalised after prediction.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bp::{bp_update_with, init_registry, BpError, BpOptions, NewComponentInit};
use crate::density::{BernoulliComponent, ComponentId, PmbDensity, TrajectoryParticle, Undetected};
use crate::linalg::{systematic_resample, KinematicVec, LinalgError, RngStream, SpdMatrix2};
use crate::models::{Measurement, Model, ModelError, ObjectState};
use crate::registry::{Registry, UnknownName};

const TAG_PREDICT_PPP: u64 = 1;
const TAG_PREDICT: u64 = 2;
const TAG_BP: u64 = 3;
const TAG_RESAMPLE: u64 = 4;
const TAG_RESAMPLE_PPP: u64 = 5;
const TAG_RESAMPLE_DEAD: u64 = 6;
const TAG_SNAPSHOT: u64 = 7;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter options: {0}")]
    Options(String),
    #[error("no stored marginal for component {id} at step {step}")]
    MissingSnapshot { id: ComponentId, step: usize },
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Unknown(#[from] UnknownName),
}

pub type Result<T> = std::result::Result<T, FilterError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterOptions {
    pub bp: BpOptions,
    /// Birth particles added to the undetected intensity per step.
    pub ppp_birth_particles: usize,
    /// Undetected particles are resampled (mass preserved) above this count.
    pub ppp_cap: usize,
    /// Propagate the undetected intensity as a scalar mass.
    pub scalar_ppp: bool,
    pub prune_r: f64,
    /// All-trajectory formulation: drop end-time buckets below this mass.
    pub end_time_prune: f64,
    /// All-trajectory formulation: particles kept per dead end-time bucket.
    pub dead_bucket_cap: usize,
    /// Alive particles per component are resampled down to this count.
    pub particle_cap: usize,
    /// Resample the alive subset when its ESS falls below this fraction.
    pub ess_fraction: f64,
    /// Drop components whose probability of being alive is below this (0 = off).
    pub alive_gate: f64,
    /// Keep weighted particle snapshots for backward simulation.
    pub store_snapshots: bool,
    /// Particles kept per snapshot.
    pub snapshot_particles: usize,
    /// Only the most recent `n` snapshot steps are retained when set.
    pub snapshot_window: Option<usize>,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            bp: BpOptions::default(),
            ppp_birth_particles: 2000,
            ppp_cap: 10_000,
            scalar_ppp: false,
            prune_r: 1e-3,
            end_time_prune: 1e-4,
            dead_bucket_cap: 200,
            particle_cap: 2000,
            ess_fraction: 0.5,
            alive_gate: 0.0,
            store_snapshots: false,
            snapshot_particles: 500,
            snapshot_window: None,
        }
    }
}

impl FilterOptions {
    pub fn validate(&self) -> Result<()> {
        self.bp.validate()?;
        let bad = |s: &str| Err(FilterError::Options(s.into()));
        if self.ppp_birth_particles == 0 || self.ppp_cap == 0 {
            return bad("ppp particle counts must be positive");
        }
        if self.particle_cap == 0 || self.dead_bucket_cap == 0 || self.snapshot_particles == 0 {
            return bad("particle caps must be positive");
        }
        for (name, v) in [("prune_r", self.prune_r), ("end_time_prune", self.end_time_prune), ("alive_gate", self.alive_gate)] {
            if !(0.0..1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.ess_fraction) {
            return bad("ess_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// prediction

fn predict_undetected(
    undetected: &Undetected,
    model: &Model,
    k: usize,
    l_birth: usize,
    rng: &RngStream,
) -> Result<Undetected> {
    let params = model.params();
    Ok(match undetected {
        Undetected::Scalar(m) => Undetected::Scalar(m * params.p_survival + params.birth_rate),
        Undetected::Particles(ps) => {
            let mut r = rng.rng();
            let mut out = Vec::with_capacity(ps.len() + l_birth);
            for p in ps {
                let x = p.last_state();
                out.push(p.extended(model.transition_sample(x, &mut r)?, p.weight * model.survival(x)));
            }
            let w = params.birth_rate / l_birth as f64;
            for _ in 0..l_birth {
                out.push(TrajectoryParticle::new(w, k, model.birth_sample(&mut r)?));
            }
            Undetected::Particles(out)
        }
    })
}

fn component_stream(rng: &RngStream, tag: u64, k: usize, id: ComponentId) -> RngStream {
    rng.derive(&[tag, k as u64, id.birth_step as u64, id.meas_index as u64])
}

/// Alive-trajectory prediction. Every particle must be alive at `state.step`.
pub fn predict_alive(state: &PmbDensity, model: &Model, l_birth: usize, rng: &RngStream) -> Result<PmbDensity> {
    let k = state.step + 1;
    let undetected = predict_undetected(&state.undetected, model, k, l_birth, &rng.derive(&[TAG_PREDICT_PPP, k as u64]))?;
    let mut components = Vec::with_capacity(state.components.len());
    for c in &state.components {
        let mut r = component_stream(rng, TAG_PREDICT, k, c.id).rng();
        let mut particles = Vec::with_capacity(c.particles.len());
        let mut surv = 0.0;
        for p in c.particles.iter().filter(|p| p.is_alive_at(state.step)) {
            let x = p.last_state();
            let w = p.weight * model.survival(x);
            surv += w;
            particles.push(p.extended(model.transition_sample(x, &mut r)?, w));
        }
        let total = c.total_weight();
        let mut nc = BernoulliComponent { id: c.id, r: if total > 0.0 { c.r * surv / total } else { 0.0 }, particles };
        nc.normalize();
        components.push(nc);
    }
    Ok(PmbDensity { step: k, undetected, components })
}

/// All-trajectory prediction: each alive particle splits into an ended copy
/// and an extended copy. Alive particles stay first, in their previous order.
pub fn predict_all(state: &PmbDensity, model: &Model, l_birth: usize, rng: &RngStream) -> Result<PmbDensity> {
    let k = state.step + 1;
    let undetected = predict_undetected(&state.undetected, model, k, l_birth, &rng.derive(&[TAG_PREDICT_PPP, k as u64]))?;
    let mut components = Vec::with_capacity(state.components.len());
    for c in &state.components {
        let mut r = component_stream(rng, TAG_PREDICT, k, c.id).rng();
        let mut alive = Vec::new();
        let mut ended = Vec::new();
        for p in c.particles.iter().filter(|p| p.is_alive_at(state.step)) {
            let x = p.last_state();
            let ps = model.survival(x);
            alive.push(p.extended(model.transition_sample(x, &mut r)?, p.weight * ps));
            if ps < 1.0 {
                ended.push(p.killed(p.weight * (1.0 - ps)));
            }
        }
        let old_dead = c.particles.iter().filter(|p| !p.is_alive_at(state.step)).cloned();
        alive.extend(old_dead);
        alive.extend(ended);
        components.push(BernoulliComponent { id: c.id, r: c.r, particles: alive });
    }
    Ok(PmbDensity { step: k, undetected, components })
}

/// Keep only the last state of every particle.
pub fn marginalize_past(state: &PmbDensity) -> PmbDensity {
    let k = state.step;
    let undetected = match &state.undetected {
        Undetected::Particles(ps) => Undetected::Particles(ps.iter().map(|p| p.truncated(k)).collect()),
        Undetected::Scalar(m) => Undetected::Scalar(*m),
    };
    let components = state
        .components
        .iter()
        .map(|c| BernoulliComponent {
            id: c.id,
            r: c.r,
            particles: c.particles.iter().map(|p| if p.len == 1 && p.start == k { p.clone() } else { p.truncated(k) }).collect(),
        })
        .collect();
    PmbDensity { step: k, undetected, components }
}

// ---------------------------------------------------------------------------
// time marginals

fn time_pmf(c: &BernoulliComponent, f: impl Fn(&TrajectoryParticle) -> usize) -> Vec<(usize, f64)> {
    let mut m: BTreeMap<usize, f64> = BTreeMap::new();
    for p in &c.particles {
        *m.entry(f(p)).or_insert(0.0) += p.weight;
    }
    let s: f64 = m.values().sum();
    m.into_iter().map(|(t, w)| (t, if s > 0.0 { w / s } else { 0.0 })).collect()
}

/// Distribution of the trajectory end time, ascending in time.
pub fn end_time_pmf(c: &BernoulliComponent, k: usize) -> Vec<(usize, f64)> {
    time_pmf(c, |p| if p.dead { p.end() } else { p.end().min(k) })
}

pub fn start_time_pmf(c: &BernoulliComponent) -> Vec<(usize, f64)> {
    time_pmf(c, |p| p.start)
}

/// Most probable time, earliest on ties.
fn map_time(pmf: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(t, w) in pmf {
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((t, w));
        }
    }
    best.map(|(t, _)| t)
}

/// Weighted mean state; the extent is averaged entrywise.
pub fn mean_state<'a>(items: impl IntoIterator<Item = (f64, &'a ObjectState)>) -> Option<ObjectState> {
    let mut kin = KinematicVec::zeros();
    let mut e = [0.0; 3];
    let mut s = 0.0;
    for (w, x) in items {
        if w <= 0.0 {
            continue;
        }
        kin += w * x.kin;
        for (acc, v) in e.iter_mut().zip(x.extent.entries()) {
            *acc += w * v;
        }
        s += w;
    }
    if s <= 0.0 {
        return None;
    }
    let extent = SpdMatrix2::from_entries(e[0] / s, e[1] / s, e[2] / s).ok()?;
    Some(ObjectState::new(kin / s, extent))
}

// ---------------------------------------------------------------------------
// stored marginals

#[derive(Clone, Debug)]
pub struct StepMarginal {
    pub mean: ObjectState,
    /// Normalised weighted states, kept when smoothing is requested.
    pub snapshot: Option<Arc<Vec<(f64, ObjectState)>>>,
}

/// Per component and step: filtering mean and optional particle snapshot.
#[derive(Clone, Debug, Default)]
pub struct StoredMarginals {
    entries: BTreeMap<ComponentId, BTreeMap<usize, StepMarginal>>,
}

impl StoredMarginals {
    pub fn get(&self, id: ComponentId, step: usize) -> Option<&StepMarginal> {
        self.entries.get(&id)?.get(&step)
    }

    pub fn mean(&self, id: ComponentId, step: usize) -> Result<ObjectState> {
        self.get(id, step).map(|m| m.mean).ok_or(FilterError::MissingSnapshot { id, step })
    }

    pub fn snapshot(&self, id: ComponentId, step: usize) -> Option<&[(f64, ObjectState)]> {
        self.get(id, step)?.snapshot.as_deref().map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: ComponentId, step: usize, m: StepMarginal) {
        self.entries.entry(id).or_default().insert(step, m);
    }

    pub fn steps(&self, id: ComponentId) -> Vec<usize> {
        self.entries.get(&id).map(|m| m.keys().copied().collect()).unwrap_or_default()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ComponentId> {
        self.entries.keys()
    }

    fn retain_ids(&mut self, keep: impl Fn(&ComponentId) -> bool) {
        self.entries.retain(|id, _| keep(id));
    }

    fn drop_snapshots_before(&mut self, step: usize) {
        for m in self.entries.values_mut() {
            for (_, sm) in m.range_mut(..step) {
                sm.snapshot = None;
            }
        }
    }
}

fn snapshot_of(
    weighted: &[(f64, ObjectState)],
    cap: usize,
    rng: &RngStream,
) -> Result<Vec<(f64, ObjectState)>> {
    let s: f64 = weighted.iter().map(|(w, _)| w).sum();
    if weighted.len() <= cap {
        return Ok(weighted.iter().map(|(w, x)| (w / s, *x)).collect());
    }
    let ws: Vec<f64> = weighted.iter().map(|(w, _)| *w).collect();
    let idx = systematic_resample(&ws, cap, &mut rng.rng())?;
    Ok(idx.into_iter().map(|i| (1.0 / cap as f64, weighted[i].1)).collect())
}

// ---------------------------------------------------------------------------
// estimates

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEstimate {
    pub id: ComponentId,
    pub start: usize,
    pub states: Vec<ObjectState>,
}

impl TrajectoryEstimate {
    pub fn end(&self) -> usize {
        self.start + self.states.len() - 1
    }

    pub fn state_at(&self, t: usize) -> Option<&ObjectState> {
        t.checked_sub(self.start).and_then(|i| self.states.get(i))
    }
}

/// MAP trajectory estimates of the components with `r >= 0.5`.
pub fn estimate(state: &PmbDensity, stored: &StoredMarginals) -> Result<Vec<TrajectoryEstimate>> {
    let k = state.step;
    let mut out = Vec::new();
    for c in state.components.iter().filter(|c| c.r >= 0.5) {
        let (Some(start), Some(end)) = (map_time(&start_time_pmf(c)), map_time(&end_time_pmf(c, k))) else {
            continue;
        };
        if start > end {
            continue;
        }
        let states = (start..=end).map(|t| stored.mean(c.id, t)).collect::<Result<Vec<_>>>()?;
        out.push(TrajectoryEstimate { id: c.id, start, states });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedEstimate {
    pub estimate: TrajectoryEstimate,
    /// Steps where every backward weight vanished and the filtering mean was used.
    pub fallback_steps: Vec<usize>,
    /// False when snapshots were unavailable and the estimate is the filtering one.
    pub smoothed: bool,
}

/// Backward-simulation smoother over `[t_s, t_e]` of one component.
/// Kinematics are averaged over `draws` sampled paths; extents are copied from
/// the filtering estimate.
pub fn backward_simulate(
    stored: &StoredMarginals,
    id: ComponentId,
    t_s: usize,
    t_e: usize,
    draws: usize,
    model: &Model,
    rng: &RngStream,
) -> Result<SmoothedEstimate> {
    let n = t_e - t_s + 1;
    let mut snaps = Vec::with_capacity(n);
    let mut means = Vec::with_capacity(n);
    for t in t_s..=t_e {
        let m = stored.get(id, t).ok_or(FilterError::MissingSnapshot { id, step: t })?;
        snaps.push(m.snapshot.clone().ok_or(FilterError::MissingSnapshot { id, step: t })?);
        means.push(m.mean);
    }
    let mut r = rng.rng();
    let mut acc = vec![KinematicVec::zeros(); n];
    let mut fallback = vec![false; n];
    let draws = draws.max(1);
    for _ in 0..draws {
        let last = &snaps[n - 1];
        let ws: Vec<f64> = last.iter().map(|(w, _)| *w).collect();
        let mut cur = match categorical(&ws, &mut r) {
            Some(i) => last[i].1.kin,
            None => {
                fallback[n - 1] = true;
                means[n - 1].kin
            }
        };
        acc[n - 1] += cur;
        for i in (0..n - 1).rev() {
            let snap = &snaps[i];
            let lw: Vec<f64> = snap
                .iter()
                .map(|(w, x)| if *w > 0.0 { w.ln() + model.transition_logpdf_kinematic(&cur, &x.kin) } else { f64::NEG_INFINITY })
                .collect();
            let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            cur = if mx == f64::NEG_INFINITY || !mx.is_finite() {
                fallback[i] = true;
                means[i].kin
            } else {
                let ws: Vec<f64> = lw.iter().map(|v| (v - mx).exp()).collect();
                match categorical(&ws, &mut r) {
                    Some(j) => snap[j].1.kin,
                    None => {
                        fallback[i] = true;
                        means[i].kin
                    }
                }
            };
            acc[i] += cur;
        }
    }
    let states = acc.iter().zip(&means).map(|(a, m)| ObjectState::new(a / draws as f64, m.extent)).collect();
    let fallback_steps = fallback.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| t_s + i).collect();
    Ok(SmoothedEstimate { estimate: TrajectoryEstimate { id, start: t_s, states }, fallback_steps, smoothed: true })
}

fn categorical<R: Rng>(ws: &[f64], rng: &mut R) -> Option<usize> {
    let s: f64 = ws.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return None;
    }
    let u = rng.random::<f64>() * s;
    let mut c = 0.0;
    for (i, w) in ws.iter().enumerate() {
        c += w;
        if u < c {
            return Some(i);
        }
    }
    ws.iter().rposition(|w| *w > 0.0)
}

// ---------------------------------------------------------------------------
// formulations

/// Per-formulation record of past estimates.
#[derive(Clone, Debug, Default)]
pub struct EstimateLog {
    latest: BTreeMap<ComponentId, TrajectoryEstimate>,
    per_step: BTreeMap<ComponentId, Vec<(usize, ObjectState)>>,
}

pub trait Formulation: Send + Sync + 'static {
    fn name(&self) -> &'static str;
    fn predict(&self, state: &PmbDensity, model: &Model, opts: &FilterOptions, rng: &RngStream) -> Result<PmbDensity>;
    fn keeps_dead(&self) -> bool {
        false
    }
    fn record(&self, _log: &mut EstimateLog, _state: &PmbDensity, _stored: &StoredMarginals) -> Result<()> {
        Ok(())
    }
    fn estimates(&self, log: &EstimateLog, state: &PmbDensity, stored: &StoredMarginals) -> Result<Vec<TrajectoryEstimate>>;
}

pub struct AllTrajectories;
pub struct AliveTrajectories;
pub struct CurrentStates;

impl Formulation for AllTrajectories {
    fn name(&self) -> &'static str {
        "tpmb-all"
    }

    fn predict(&self, state: &PmbDensity, model: &Model, opts: &FilterOptions, rng: &RngStream) -> Result<PmbDensity> {
        predict_all(state, model, opts.ppp_birth_particles, rng)
    }

    fn keeps_dead(&self) -> bool {
        true
    }

    fn estimates(&self, _log: &EstimateLog, state: &PmbDensity, stored: &StoredMarginals) -> Result<Vec<TrajectoryEstimate>> {
        estimate(state, stored)
    }
}

impl Formulation for AliveTrajectories {
    fn name(&self) -> &'static str {
        "tpmb-alive"
    }

    fn predict(&self, state: &PmbDensity, model: &Model, opts: &FilterOptions, rng: &RngStream) -> Result<PmbDensity> {
        predict_alive(state, model, opts.ppp_birth_particles, rng)
    }

    fn record(&self, log: &mut EstimateLog, state: &PmbDensity, stored: &StoredMarginals) -> Result<()> {
        for e in estimate(state, stored)? {
            log.latest.insert(e.id, e);
        }
        Ok(())
    }

    fn estimates(&self, log: &EstimateLog, _state: &PmbDensity, _stored: &StoredMarginals) -> Result<Vec<TrajectoryEstimate>> {
        Ok(log.latest.values().cloned().collect())
    }
}

impl Formulation for CurrentStates {
    fn name(&self) -> &'static str {
        "pmb"
    }

    fn predict(&self, state: &PmbDensity, model: &Model, opts: &FilterOptions, rng: &RngStream) -> Result<PmbDensity> {
        Ok(marginalize_past(&predict_alive(state, model, opts.ppp_birth_particles, rng)?))
    }

    fn record(&self, log: &mut EstimateLog, state: &PmbDensity, stored: &StoredMarginals) -> Result<()> {
        for c in state.components.iter().filter(|c| c.r >= 0.5) {
            let x = stored.mean(c.id, state.step)?;
            log.per_step.entry(c.id).or_default().push((state.step, x));
        }
        Ok(())
    }

    /// Per-step estimates joined by id; a gap starts a new segment with the same id.
    fn estimates(&self, log: &EstimateLog, _state: &PmbDensity, _stored: &StoredMarginals) -> Result<Vec<TrajectoryEstimate>> {
        let mut out = Vec::new();
        for (id, seq) in &log.per_step {
            let mut cur: Option<TrajectoryEstimate> = None;
            for &(t, x) in seq {
                match &mut cur {
                    Some(e) if e.end() + 1 == t => e.states.push(x),
                    _ => {
                        if let Some(e) = cur.take() {
                            out.push(e);
                        }
                        cur = Some(TrajectoryEstimate { id: *id, start: t, states: vec![x] });
                    }
                }
            }
            out.extend(cur);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// engine

pub trait TrajectoryFilter: Send {
    fn name(&self) -> &'static str;
    /// Process the frame of the next step.
    fn step(&mut self, frame: &[Measurement]) -> Result<()>;
    fn density(&self) -> &PmbDensity;
    fn stored(&self) -> &StoredMarginals;
    fn estimates(&self) -> Result<Vec<TrajectoryEstimate>>;
    /// Backward-simulated estimates; entries without snapshots are returned unsmoothed.
    fn smoothed_estimates(&self, draws: usize, rng: &RngStream) -> Result<Vec<SmoothedEstimate>>;
}

pub struct Engine<F: Formulation> {
    formulation: F,
    model: Model,
    opts: FilterOptions,
    init: Arc<dyn NewComponentInit>,
    rng: RngStream,
    state: PmbDensity,
    stored: StoredMarginals,
    log: EstimateLog,
}

impl<F: Formulation> Engine<F> {
    pub fn new(formulation: F, model: Model, opts: FilterOptions, rng: RngStream) -> Result<Self> {
        opts.validate()?;
        let init = init_registry().resolve(&opts.bp.new_component_init)?.clone();
        let state = PmbDensity::empty(opts.scalar_ppp);
        Ok(Self { formulation, model, opts, init, rng, state, stored: StoredMarginals::default(), log: EstimateLog::default() })
    }

    pub fn options(&self) -> &FilterOptions {
        &self.opts
    }

    fn resample_alive(&self, c: &mut BernoulliComponent, k: usize) -> Result<()> {
        let alive: Vec<usize> = (0..c.particles.len()).filter(|&i| c.particles[i].is_alive_at(k)).collect();
        let n = alive.len();
        if n == 0 {
            return Ok(());
        }
        let ws: Vec<f64> = alive.iter().map(|&i| c.particles[i].weight).collect();
        let mass: f64 = ws.iter().sum();
        if mass <= 0.0 {
            return Ok(());
        }
        let ess = mass * mass / ws.iter().map(|w| w * w).sum::<f64>();
        if n <= self.opts.particle_cap && ess >= self.opts.ess_fraction * n as f64 {
            return Ok(());
        }
        let target = n.min(self.opts.particle_cap);
        let idx = systematic_resample(&ws, target, &mut component_stream(&self.rng, TAG_RESAMPLE, k, c.id).rng())?;
        let w = mass / target as f64;
        let mut out: Vec<TrajectoryParticle> = idx.into_iter().map(|j| c.particles[alive[j]].with_weight(w)).collect();
        out.extend(c.particles.iter().filter(|p| !p.is_alive_at(k)).cloned());
        c.particles = out;
        Ok(())
    }

    /// End-time pruning and per-bucket compression of ended particles.
    fn tidy_dead(&self, c: &mut BernoulliComponent, k: usize) -> Result<()> {
        let pmf = end_time_pmf(c, k);
        let keep: BTreeMap<usize, f64> =
            pmf.into_iter().filter(|(_, w)| *w >= self.opts.end_time_prune && *w > 0.0).collect();
        let mut alive = Vec::new();
        let mut buckets: BTreeMap<usize, Vec<TrajectoryParticle>> = BTreeMap::new();
        for p in c.particles.drain(..) {
            let t = if p.dead { p.end() } else { p.end().min(k) };
            if !keep.contains_key(&t) {
                continue;
            }
            if p.is_alive_at(k) {
                alive.push(p);
            } else {
                buckets.entry(t).or_default().push(p);
            }
        }
        for (t, ps) in buckets {
            if ps.len() <= self.opts.dead_bucket_cap {
                alive.extend(ps);
                continue;
            }
            let ws: Vec<f64> = ps.iter().map(|p| p.weight).collect();
            let mass: f64 = ws.iter().sum();
            let cap = self.opts.dead_bucket_cap;
            let mut r = self.rng.derive(&[TAG_RESAMPLE_DEAD, k as u64, c.id.birth_step as u64, c.id.meas_index as u64, t as u64]).rng();
            let idx = systematic_resample(&ws, cap, &mut r)?;
            alive.extend(idx.into_iter().map(|i| ps[i].with_weight(mass / cap as f64)));
        }
        c.particles = alive;
        c.normalize();
        Ok(())
    }

    fn resample_ppp(&self, k: usize) -> Result<Option<Undetected>> {
        let Undetected::Particles(ps) = &self.state.undetected else { return Ok(None) };
        if ps.len() <= self.opts.ppp_cap {
            return Ok(None);
        }
        let ws: Vec<f64> = ps.iter().map(|p| p.weight).collect();
        let mass: f64 = ws.iter().sum();
        if mass <= 0.0 {
            return Ok(Some(Undetected::Particles(Vec::new())));
        }
        let cap = self.opts.ppp_cap;
        let idx = systematic_resample(&ws, cap, &mut self.rng.derive(&[TAG_RESAMPLE_PPP, k as u64]).rng())?;
        Ok(Some(Undetected::Particles(idx.into_iter().map(|i| ps[i].with_weight(mass / cap as f64)).collect())))
    }

    fn record_marginals(&mut self) -> Result<()> {
        let k = self.state.step;
        let ids: Vec<ComponentId> = self.state.components.iter().map(|c| c.id).collect();
        self.stored.retain_ids(|id| ids.binary_search(id).is_ok());
        let mut fresh = Vec::new();
        for c in &self.state.components {
            let known = self.stored.entries.contains_key(&c.id);
            let weighted: Vec<(f64, ObjectState)> =
                c.particles.iter().filter(|p| p.is_alive_at(k) && p.weight > 0.0).map(|p| (p.weight, *p.last_state())).collect();
            if !known {
                // histories of copied undetected particles reach back before creation
                let first = c.particles.iter().map(|p| p.start).min().unwrap_or(k);
                for t in first..k {
                    let w: Vec<(f64, ObjectState)> =
                        c.particles.iter().filter_map(|p| p.state_at(t).map(|x| (p.weight, *x))).collect();
                    if let Some(mean) = mean_state(w.iter().map(|(w, x)| (*w, x))) {
                        let snapshot = if self.opts.store_snapshots {
                            Some(Arc::new(snapshot_of(&w, self.opts.snapshot_particles, &component_stream(&self.rng, TAG_SNAPSHOT, t, c.id))?))
                        } else {
                            None
                        };
                        fresh.push((c.id, t, StepMarginal { mean, snapshot }));
                    }
                }
            }
            if let Some(mean) = mean_state(weighted.iter().map(|(w, x)| (*w, x))) {
                let snapshot = if self.opts.store_snapshots {
                    Some(Arc::new(snapshot_of(&weighted, self.opts.snapshot_particles, &component_stream(&self.rng, TAG_SNAPSHOT, k, c.id))?))
                } else {
                    None
                };
                fresh.push((c.id, k, StepMarginal { mean, snapshot }));
            }
        }
        for (id, t, m) in fresh {
            self.stored.insert(id, t, m);
        }
        if let Some(w) = self.opts.snapshot_window {
            self.stored.drop_snapshots_before((k + 1).saturating_sub(w));
        }
        Ok(())
    }
}

impl<F: Formulation> TrajectoryFilter for Engine<F> {
    fn name(&self) -> &'static str {
        self.formulation.name()
    }

    fn step(&mut self, frame: &[Measurement]) -> Result<()> {
        let predicted = self.formulation.predict(&self.state, &self.model, &self.opts, &self.rng)?;
        let k = predicted.step;
        let out = bp_update_with(&predicted, frame, &self.model, &self.opts.bp, self.init.as_ref(), self.rng.derive(&[TAG_BP]))?;
        let mut state = out.density;
        state.components.retain(|c| c.r > 0.0 && c.r >= self.opts.prune_r);
        if self.opts.alive_gate > 0.0 {
            state.components.retain(|c| c.r * c.alive_weight(k) >= self.opts.alive_gate);
        }
        self.state = state;
        let mut comps = std::mem::take(&mut self.state.components);
        for c in &mut comps {
            if self.formulation.keeps_dead() {
                self.tidy_dead(c, k)?;
            }
            self.resample_alive(c, k)?;
        }
        comps.sort_by_key(|c| c.id);
        self.state.components = comps;
        if let Some(u) = self.resample_ppp(k)? {
            self.state.undetected = u;
        }
        self.record_marginals()?;
        self.formulation.record(&mut self.log, &self.state, &self.stored)?;
        Ok(())
    }

    fn density(&self) -> &PmbDensity {
        &self.state
    }

    fn stored(&self) -> &StoredMarginals {
        &self.stored
    }

    fn estimates(&self) -> Result<Vec<TrajectoryEstimate>> {
        self.formulation.estimates(&self.log, &self.state, &self.stored)
    }

    fn smoothed_estimates(&self, draws: usize, rng: &RngStream) -> Result<Vec<SmoothedEstimate>> {
        let mut out = Vec::new();
        for e in self.estimates()? {
            let have = (e.start..=e.end()).all(|t| self.stored.snapshot(e.id, t).is_some());
            if !have {
                out.push(SmoothedEstimate { estimate: e, fallback_steps: Vec::new(), smoothed: false });
                continue;
            }
            let r = rng.derive(&[e.id.birth_step as u64, e.id.meas_index as u64, e.start as u64]);
            let mut s = backward_simulate(&self.stored, e.id, e.start, e.end(), draws, &self.model, &r)?;
            for (sx, fx) in s.estimate.states.iter_mut().zip(&e.states) {
                sx.extent = fx.extent;
            }
            out.push(s);
        }
        Ok(out)
    }
}

pub type FilterCtor = fn(Model, FilterOptions, RngStream) -> Result<Box<dyn TrajectoryFilter>>;

pub fn filter_registry() -> Registry<FilterCtor> {
    let mut r: Registry<FilterCtor> = Registry::new("filter variant");
    r.register("tpmb-all", |m, o, g| Ok(Box::new(Engine::new(AllTrajectories, m, o, g)?)));
    r.register("tpmb-alive", |m, o, g| Ok(Box::new(Engine::new(AliveTrajectories, m, o, g)?)));
    r.register("pmb", |m, o, g| Ok(Box::new(Engine::new(CurrentStates, m, o, g)?)));
    r
}

/// Construct a filter variant by name.
pub fn make_filter(name: &str, model: Model, opts: FilterOptions, rng: RngStream) -> Result<Box<dyn TrajectoryFilter>> {
    let ctor = *filter_registry().resolve(name)?;
    ctor(model, opts, rng)
}
