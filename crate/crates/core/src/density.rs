//! Particle representation of trajectory densities: weighted trajectory
//! particles, Bernoulli components and the PMB density that the filters
//! propagate.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::models::ObjectState;

/// One node of a shared state history. Particles that descend from the same
/// ancestor share the tail of the list.
#[derive(Debug)]
pub struct StateNode {
    pub state: ObjectState,
    pub parent: Option<Arc<StateNode>>,
}

impl Drop for StateNode {
    fn drop(&mut self) {
        // unlink iteratively so long histories cannot blow the stack
        let mut next = self.parent.take();
        while let Some(node) = next {
            match Arc::try_unwrap(node) {
                Ok(mut n) => next = n.parent.take(),
                Err(_) => break,
            }
        }
    }
}

/// Weighted Dirac trajectory hypothesis `(start, x^{1:len})`.
#[derive(Clone, Debug)]
pub struct TrajectoryParticle {
    pub weight: f64,
    pub start: usize,
    pub len: usize,
    /// Set once the trajectory has ended before the current step.
    pub dead: bool,
    head: Arc<StateNode>,
}

impl TrajectoryParticle {
    pub fn new(weight: f64, start: usize, state: ObjectState) -> Self {
        Self { weight, start, len: 1, dead: false, head: Arc::new(StateNode { state, parent: None }) }
    }

    /// Build from an explicit state sequence.
    pub fn from_states(weight: f64, start: usize, states: &[ObjectState]) -> Option<Self> {
        let (first, rest) = states.split_first()?;
        let mut p = Self::new(weight, start, *first);
        for s in rest {
            p = p.extended(*s, weight);
        }
        Some(p)
    }

    pub fn last_state(&self) -> &ObjectState {
        &self.head.state
    }

    pub fn end(&self) -> usize {
        self.start + self.len - 1
    }

    pub fn is_alive_at(&self, k: usize) -> bool {
        !self.dead && self.end() == k
    }

    /// Append one state.
    pub fn extended(&self, state: ObjectState, weight: f64) -> Self {
        Self {
            weight,
            start: self.start,
            len: self.len + 1,
            dead: false,
            head: Arc::new(StateNode { state, parent: Some(self.head.clone()) }),
        }
    }

    /// Same history, marked as ended.
    pub fn killed(&self, weight: f64) -> Self {
        Self { weight, start: self.start, len: self.len, dead: true, head: self.head.clone() }
    }

    pub fn with_weight(&self, weight: f64) -> Self {
        Self { weight, ..self.clone() }
    }

    /// Keep only the last state, rebased to `step`.
    pub fn truncated(&self, step: usize) -> Self {
        Self {
            weight: self.weight,
            start: step,
            len: 1,
            dead: self.dead,
            head: Arc::new(StateNode { state: self.head.state, parent: None }),
        }
    }

    pub fn state_at(&self, t: usize) -> Option<&ObjectState> {
        if t < self.start || t > self.end() {
            return None;
        }
        let mut node = &self.head;
        for _ in 0..(self.end() - t) {
            node = node.parent.as_ref()?;
        }
        Some(&node.state)
    }

    /// States in time order.
    pub fn states(&self) -> Vec<ObjectState> {
        let mut out = Vec::with_capacity(self.len);
        let mut node = Some(&self.head);
        while let Some(n) = node {
            if out.len() == self.len {
                break;
            }
            out.push(n.state);
            node = n.parent.as_ref();
        }
        out.reverse();
        out
    }
}

/// Stable component identity: birth step and measurement index within that frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub birth_step: usize,
    pub meas_index: usize,
}

impl ComponentId {
    pub fn new(birth_step: usize, meas_index: usize) -> Self {
        Self { birth_step, meas_index }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.birth_step, self.meas_index)
    }
}

#[derive(Clone, Debug)]
pub struct BernoulliComponent {
    pub id: ComponentId,
    pub r: f64,
    pub particles: Vec<TrajectoryParticle>,
}

impl BernoulliComponent {
    pub fn total_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    pub fn alive_weight(&self, k: usize) -> f64 {
        self.particles.iter().filter(|p| p.is_alive_at(k)).map(|p| p.weight).sum()
    }

    pub fn normalize(&mut self) {
        let s = self.total_weight();
        if s > 0.0 {
            for p in &mut self.particles {
                p.weight /= s;
            }
        }
    }
}

/// Undetected-trajectory Poisson intensity.
#[derive(Clone, Debug)]
pub enum Undetected {
    /// Weights sum to the expected number of undetected trajectories.
    Particles(Vec<TrajectoryParticle>),
    /// Expected count only; the spatial shape is the birth density.
    Scalar(f64),
}

impl Undetected {
    pub fn mass(&self) -> f64 {
        match self {
            Undetected::Particles(ps) => ps.iter().map(|p| p.weight).sum(),
            Undetected::Scalar(m) => *m,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PmbDensity {
    pub step: usize,
    pub undetected: Undetected,
    pub components: Vec<BernoulliComponent>,
}

impl PmbDensity {
    pub fn empty(scalar_undetected: bool) -> Self {
        Self {
            step: 0,
            undetected: if scalar_undetected { Undetected::Scalar(0.0) } else { Undetected::Particles(Vec::new()) },
            components: Vec::new(),
        }
    }

    pub fn expected_count(&self) -> f64 {
        self.components.iter().map(|c| c.r).sum()
    }
}
