//! Particle belief propagation for the PMB update.
//!
//! Variable nodes are the `n` predicted Bernoulli components plus one
//! potential new component per measurement; factor nodes couple each
//! measurement's association variable to the components that may have
//! produced it. A new component created for the `o`-th processed measurement
//! can only explain measurements `0..=o`.
//!
//! Messages are kept in log form per particle. The extrinsic messages of
//! iteration `p + 1` are a function of `xi` at iteration `p` only, so the
//! evaluation step recomputes them from `xi` directly instead of storing one
//! weight vector per (component, measurement) pair.

use std::sync::Arc;

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{BernoulliComponent, ComponentId, PmbDensity, TrajectoryParticle, Undetected};
use crate::linalg::{gaussian_logpdf2, LinalgError, RngStream, SpdMatrix2};
use crate::models::{Measurement, Model, ModelError, ObjectState};
use crate::registry::{Registry, UnknownName};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error)]
pub enum BpError {
    #[error("invalid bp options: {0}")]
    Options(String),
    #[error("measurement {index} lies outside the clutter region")]
    OutsideRegion { index: usize },
    #[error("new components need undetected particles to copy, but there are none")]
    NoUndetectedParticles,
    #[error(transparent)]
    UnknownInit(#[from] UnknownName),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpOptions {
    pub iterations: usize,
    /// `theta` entries below this are zeroed; pairs censored in the first
    /// iteration are dropped from the graph. `0` disables censoring and gating.
    pub censor_threshold: f64,
    pub reorder: bool,
    pub proposal_kernel_cov: SpdMatrix2,
    /// Name of the new-component initialisation strategy.
    pub new_component_init: String,
    /// Particles drawn per new component when they are sampled.
    pub birth_particles: usize,
    /// Weight of the previous iteration's `theta` in each update (0 = undamped).
    pub damping: f64,
    pub schedule: Schedule,
}

/// Message schedule for iterations after the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Every node reads the previous iteration's `xi`.
    Flooding,
    /// Nodes update one at a time against the latest `theta`: prior
    /// components first, then new components from the last processed
    /// measurement backwards.
    Serial,
}

impl Default for BpOptions {
    fn default() -> Self {
        Self {
            iterations: 3,
            censor_threshold: 1e-9,
            reorder: true,
            proposal_kernel_cov: SpdMatrix2::new_unchecked(20.0, 0.0, 20.0),
            new_component_init: "measurement-driven".into(),
            birth_particles: 2000,
            damping: 0.0,
            schedule: Schedule::Serial,
        }
    }
}

impl BpOptions {
    pub fn validate(&self) -> Result<(), BpError> {
        if self.iterations == 0 {
            return Err(BpError::Options("iterations must be at least 1".into()));
        }
        if !(self.censor_threshold >= 0.0) || !self.censor_threshold.is_finite() {
            return Err(BpError::Options("censor_threshold must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(BpError::Options("damping must lie in [0, 1)".into()));
        }
        if self.birth_particles == 0 {
            return Err(BpError::Options("birth_particles must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// new component initialisation strategies

pub struct InitContext<'a> {
    pub undetected: &'a Undetected,
    pub z: &'a Measurement,
    pub step: usize,
    pub model: &'a Model,
    pub options: &'a BpOptions,
    pub rng: RngStream,
}

/// Produces the particles of a potential new component together with their
/// first-iteration message weights `w0 * exp(-gamma)`.
pub trait NewComponentInit: Send + Sync {
    fn name(&self) -> &'static str;
    fn init(&self, ctx: &InitContext<'_>) -> Result<Vec<TrajectoryParticle>, BpError>;
}

/// Reuse the undetected intensity's particles (birth prior draws in scalar mode).
pub struct PppCopy;

impl NewComponentInit for PppCopy {
    fn name(&self) -> &'static str {
        "ppp-copy"
    }

    fn init(&self, ctx: &InitContext<'_>) -> Result<Vec<TrajectoryParticle>, BpError> {
        match ctx.undetected {
            Undetected::Particles(ps) => {
                if ps.is_empty() {
                    return Err(BpError::NoUndetectedParticles);
                }
                Ok(ps.iter().map(|p| p.with_weight(p.weight * (-ctx.model.gamma(p.last_state())).exp())).collect())
            }
            Undetected::Scalar(mass) => {
                let n = ctx.options.birth_particles;
                let mut rng = ctx.rng.rng();
                (0..n)
                    .map(|_| {
                        let x = ctx.model.birth_sample(&mut rng)?;
                        let w = mass * (-ctx.model.gamma(&x)).exp() / n as f64;
                        Ok(TrajectoryParticle::new(w, ctx.step, x))
                    })
                    .collect()
            }
        }
    }
}

/// Importance sampling around the measurement: position from
/// `N(z, kernel)`, velocity and extent from the birth prior. Weights are the
/// unnormalised importance weights of the undetected intensity, so their sum
/// estimates the intensity mass near `z` rather than the total mass.
pub struct MeasurementDriven;

impl NewComponentInit for MeasurementDriven {
    fn name(&self) -> &'static str {
        "measurement-driven"
    }

    fn init(&self, ctx: &InitContext<'_>) -> Result<Vec<TrajectoryParticle>, BpError> {
        let n = ctx.options.birth_particles;
        let kernel = ctx.options.proposal_kernel_cov;
        let chol = kernel.cholesky();
        let params = ctx.model.params();
        let mut rng = ctx.rng.rng();
        let near: Vec<(Vector2<f64>, f64)> = match ctx.undetected {
            Undetected::Particles(ps) => {
                // proposals land within ~6 sigma of z, kernels reach ~6 sigma further
                let reach = 6.0 * kernel.trace().sqrt();
                ps.iter()
                    .filter(|p| p.weight > 0.0)
                    .map(|p| (p.last_state().position(), p.weight * (-ctx.model.gamma(p.last_state())).exp()))
                    .filter(|(pos, _)| (pos - ctx.z).norm() <= 2.0 * reach)
                    .collect()
            }
            Undetected::Scalar(_) => Vec::new(),
        };
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let e = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal));
            let pos = ctx.z + chol * e;
            let x = ctx.model.birth_sample_at(pos, &mut rng)?;
            let log_q = gaussian_logpdf2(&pos, ctx.z, &kernel);
            let w = match ctx.undetected {
                Undetected::Scalar(mass) => {
                    if params.region.contains(&pos) && *mass > 0.0 {
                        (mass.ln() - ctx.model.gamma(&x) - params.region.area().ln() - log_q).exp() / n as f64
                    } else {
                        0.0
                    }
                }
                Undetected::Particles(_) => {
                    let dens: f64 =
                        near.iter().map(|(c, w)| w * gaussian_logpdf2(&pos, c, &kernel).exp()).sum();
                    if dens > 0.0 {
                        (dens.ln() - log_q).exp() / n as f64
                    } else {
                        0.0
                    }
                }
            };
            out.push(TrajectoryParticle::new(w, ctx.step, x));
        }
        Ok(out)
    }
}

pub fn init_registry() -> Registry<Arc<dyn NewComponentInit>> {
    let mut r: Registry<Arc<dyn NewComponentInit>> = Registry::new("new-component init");
    r.register("ppp-copy", Arc::new(PppCopy));
    r.register("measurement-driven", Arc::new(MeasurementDriven));
    r
}

// ---------------------------------------------------------------------------
// graph

#[derive(Clone, Copy, Debug)]
struct LikPre {
    px: f64,
    py: f64,
    i11: f64,
    i12: f64,
    i22: f64,
    lognorm: f64,
}

impl LikPre {
    fn new(model: &Model, x: &ObjectState) -> Self {
        let s = model.meas_cov(x);
        let inv = s.inverse();
        let [i11, i12, i22] = inv.entries();
        let pos = x.position();
        Self { px: pos[0], py: pos[1], i11, i12, i22, lognorm: model.gamma(x).ln() - LN_2PI - 0.5 * s.det().ln() }
    }

    /// `ln(gamma * l(z|x))`
    fn log_gl(&self, z: &Measurement) -> f64 {
        let dx = z[0] - self.px;
        let dy = z[1] - self.py;
        self.lognorm - 0.5 * (self.i11 * dx * dx + 2.0 * self.i12 * dx * dy + self.i22 * dy * dy)
    }
}

/// Cheap bound used to skip pairs whose every `g` is far below the censor threshold.
#[derive(Clone, Copy, Debug)]
struct NodeBound {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    lam_max: f64,
    lognorm_max: f64,
}

impl NodeBound {
    fn from(pre: &[Option<LikPre>], model: &Model, particles: &[TrajectoryParticle]) -> Option<Self> {
        let mut b = NodeBound {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
            lam_max: 0.0,
            lognorm_max: f64::NEG_INFINITY,
        };
        let mut any = false;
        for (p, q) in pre.iter().zip(particles) {
            if let Some(p) = p {
                any = true;
                b.x_min = b.x_min.min(p.px);
                b.x_max = b.x_max.max(p.px);
                b.y_min = b.y_min.min(p.py);
                b.y_max = b.y_max.max(p.py);
                let s = model.meas_cov(q.last_state());
                let (t, d) = (s.trace(), s.det());
                b.lam_max = b.lam_max.max(0.5 * (t + (t * t - 4.0 * d).max(0.0).sqrt()));
                b.lognorm_max = b.lognorm_max.max(p.lognorm);
            }
        }
        any.then_some(b)
    }

    /// Upper bound of `ln g` over the node's particles.
    fn log_g_bound(&self, z: &Measurement, log_clutter: f64) -> f64 {
        let dx = (self.x_min - z[0]).max(z[0] - self.x_max).max(0.0);
        let dy = (self.y_min - z[1]).max(z[1] - self.y_max).max(0.0);
        self.lognorm_max - log_clutter - 0.5 * (dx * dx + dy * dy) / self.lam_max
    }
}

#[derive(Clone, Debug)]
struct Link {
    /// processed measurement index
    j: usize,
    /// `gamma * l(z_j | x_l) / lambda_c(z_j)` per particle, zero for dead particles
    g: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NodeKind {
    Prior { r: f64 },
    New { own: usize },
}

#[derive(Clone, Debug)]
struct Node {
    id: ComponentId,
    kind: NodeKind,
    particles: Vec<TrajectoryParticle>,
    /// ln of the first-iteration message weights
    lw1: Vec<f64>,
    links: Vec<Link>,
}

impl Node {
    fn own_link(&self) -> Option<usize> {
        match self.kind {
            NodeKind::New { own } => self.links.iter().position(|l| l.j == own),
            NodeKind::Prior { .. } => None,
        }
    }
}

/// Factor graph of one update, after initialisation and (optional) reordering.
#[derive(Clone, Debug)]
pub struct BpGraph {
    pub step: usize,
    /// `order[o]` is the original index of the `o`-th processed measurement.
    pub order: Vec<usize>,
    pub n_prior: usize,
    censor: f64,
    nodes: Vec<Node>,
}

/// Sparse per-node table over processed measurement indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTable {
    pub m: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

pub type ThetaTable = PairTable;
pub type XiTable = PairTable;

impl PairTable {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows[i].iter().find(|(jj, _)| *jj == j).map(|(_, v)| *v)
    }
}

/// Unnormalised Bernoulli message: scalar total plus particle weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonMessage {
    pub total: f64,
    pub particle_weights: Vec<f64>,
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// `c * exp(-m)` without `0 * inf`.
fn scaled(c: f64, m: f64) -> f64 {
    if c <= 0.0 {
        0.0
    } else {
        (c.ln() - m).exp()
    }
}

fn ln_or_neg_inf(w: f64) -> f64 {
    if w > 0.0 {
        w.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl BpGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn m(&self) -> usize {
        self.order.len()
    }

    pub fn node_kind(&self, i: usize) -> NodeKind {
        self.nodes[i].kind
    }

    pub fn node_id(&self, i: usize) -> ComponentId {
        self.nodes[i].id
    }

    pub fn node_particles(&self, i: usize) -> &[TrajectoryParticle] {
        &self.nodes[i].particles
    }

    /// Processed measurement indices linked to node `i`.
    pub fn node_links(&self, i: usize) -> Vec<usize> {
        self.nodes[i].links.iter().map(|l| l.j).collect()
    }

    /// First-iteration message weights of node `i`.
    pub fn init_weights(&self, i: usize) -> Vec<f64> {
        self.nodes[i].lw1.iter().map(|v| v.exp()).collect()
    }

    /// First-iteration message (identical for every linked measurement).
    pub fn init_message(&self, i: usize) -> EpsilonMessage {
        let w = self.init_weights(i);
        let s: f64 = w.iter().sum();
        let total = match self.nodes[i].kind {
            NodeKind::Prior { r } => r * s + 1.0 - r,
            NodeKind::New { .. } => s + 1.0,
        };
        EpsilonMessage { total, particle_weights: w }
    }
}

/// Build the factor graph: first-iteration messages, likelihood tables,
/// gating/censoring of weak pairs and the measurement processing order.
pub fn bp_init(
    predicted: &PmbDensity,
    frame: &[Measurement],
    model: &Model,
    options: &BpOptions,
    init: &dyn NewComponentInit,
    rng: RngStream,
) -> Result<BpGraph, BpError> {
    options.validate()?;
    let k = predicted.step;
    let m = frame.len();
    let log_clutter: Vec<f64> = frame.iter().map(|z| model.clutter_logintensity(z)).collect();
    if let Some(index) = log_clutter.iter().position(|l| *l == f64::NEG_INFINITY) {
        return Err(BpError::OutsideRegion { index });
    }
    let censor = options.censor_threshold;
    let gate_log = if censor > 0.0 { censor.ln() - 10.0 } else { f64::NEG_INFINITY };

    let make_link = |pre: &[Option<LikPre>], j_orig: usize, j_proc: usize| -> Link {
        let z = &frame[j_orig];
        let lc = log_clutter[j_orig];
        let g = pre.iter().map(|p| p.map_or(0.0, |p| (p.log_gl(z) - lc).exp())).collect();
        Link { j: j_proc, g }
    };

    // prior components, links keyed by original measurement index for now
    let mut nodes = Vec::with_capacity(predicted.components.len() + m);
    let mut theta1 = vec![0.0f64; m];
    for c in &predicted.components {
        let pre: Vec<Option<LikPre>> = c
            .particles
            .iter()
            .map(|p| p.is_alive_at(k).then(|| LikPre::new(model, p.last_state())))
            .collect();
        let lw1: Vec<f64> = c
            .particles
            .iter()
            .zip(&pre)
            .map(|(p, q)| ln_or_neg_inf(p.weight) - if q.is_some() { model.gamma(p.last_state()) } else { 0.0 })
            .collect();
        let bound = NodeBound::from(&pre, model, &c.particles);
        let mut node = Node { id: c.id, kind: NodeKind::Prior { r: c.r }, particles: c.particles.clone(), lw1, links: vec![] };
        if let Some(bound) = bound {
            for j in 0..m {
                if bound.log_g_bound(&frame[j], log_clutter[j]) < gate_log {
                    continue;
                }
                let link = make_link(&pre, j, j);
                let th = theta_first_prior(&node, &link.g, c.r);
                if censor > 0.0 && th < censor {
                    continue;
                }
                theta1[j] = theta1[j].max(th);
                node.links.push(link);
            }
        }
        nodes.push(node);
    }

    let mut order: Vec<usize> = (0..m).collect();
    if options.reorder {
        order.sort_by(|a, b| theta1[*b].partial_cmp(&theta1[*a]).unwrap_or(std::cmp::Ordering::Equal));
    }
    let mut proc_of = vec![0; m];
    for (o, &j) in order.iter().enumerate() {
        proc_of[j] = o;
    }
    for n in &mut nodes {
        for l in &mut n.links {
            l.j = proc_of[l.j];
        }
        n.links.sort_by_key(|l| l.j);
    }

    let birth_rng = rng.derive(&[k as u64]);
    for (o, &j_orig) in order.iter().enumerate() {
        let ctx = InitContext {
            undetected: &predicted.undetected,
            z: &frame[j_orig],
            step: k,
            model,
            options,
            rng: birth_rng.derive(&[j_orig as u64]),
        };
        let particles = init.init(&ctx)?;
        let pre: Vec<Option<LikPre>> =
            particles.iter().map(|p| p.is_alive_at(k).then(|| LikPre::new(model, p.last_state()))).collect();
        let lw1: Vec<f64> = particles.iter().map(|p| ln_or_neg_inf(p.weight)).collect();
        let bound = NodeBound::from(&pre, model, &particles);
        let mut node = Node { id: ComponentId::new(k, j_orig), kind: NodeKind::New { own: o }, particles, lw1, links: vec![] };
        if let Some(bound) = bound {
            for (jp, &jo) in order.iter().enumerate().take(o) {
                if bound.log_g_bound(&frame[jo], log_clutter[jo]) < gate_log {
                    continue;
                }
                let link = make_link(&pre, jo, jp);
                let th = theta_first_new_off(&node, &link.g);
                if censor > 0.0 && th < censor {
                    continue;
                }
                node.links.push(link);
            }
        }
        node.links.push(make_link(&pre, j_orig, o));
        nodes.push(node);
    }
    Ok(BpGraph { step: k, order, n_prior: predicted.components.len(), censor, nodes })
}

fn theta_first_prior(node: &Node, g: &[f64], r: f64) -> f64 {
    let mx = max_of(&node.lw1);
    if mx == f64::NEG_INFINITY {
        return 0.0;
    }
    let (mut s0, mut s1) = (0.0, 0.0);
    for (lw, gl) in node.lw1.iter().zip(g) {
        let w = (lw - mx).exp();
        s0 += w;
        s1 += w * gl;
    }
    r * s1 / (r * s0 + scaled(1.0 - r, mx))
}

fn theta_first_new_off(node: &Node, g: &[f64]) -> f64 {
    let mx = max_of(&node.lw1);
    if mx == f64::NEG_INFINITY {
        return 0.0;
    }
    let (mut s0, mut s1) = (0.0, 0.0);
    for (lw, gl) in node.lw1.iter().zip(g) {
        let w = (lw - mx).exp();
        s0 += w;
        s1 += w * gl;
    }
    s1 / (s0 + scaled(1.0, mx))
}

/// Per-particle log of `w1 * prod over non-own links (1 + g / xi)`, and the
/// own-measurement factor `ln(g_own / xi_own)` for new components.
fn log_products(node: &Node, xi: &[(usize, f64)]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let own = node.own_link();
    let mut logp = node.lw1.clone();
    let mut a = Vec::with_capacity(node.links.len());
    for (li, link) in node.links.iter().enumerate() {
        let x = xi.iter().find(|(j, _)| *j == link.j).map(|(_, v)| *v).unwrap_or(1.0);
        let av: Vec<f64> = link.g.iter().map(|g| g / x).collect();
        if Some(li) != own {
            for (lp, ai) in logp.iter_mut().zip(&av) {
                if *ai > 0.0 {
                    *lp += ai.ln_1p();
                }
            }
        }
        a.push(av);
    }
    (logp, a)
}

/// Measurement evaluation for one iteration. `xi = None` evaluates the
/// first-iteration messages; otherwise the messages are the extrinsic ones
/// implied by the previous iteration's `xi`.
pub fn bp_measurement_evaluation(graph: &BpGraph, xi: Option<&XiTable>) -> ThetaTable {
    let rows = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let mut row = evaluate_node(node, xi.map(|x| x.rows[i].as_slice()));
            for (_, v) in &mut row {
                if *v < graph.censor {
                    *v = 0.0;
                }
            }
            row
        })
        .collect();
    PairTable { m: graph.m(), rows }
}

fn evaluate_node(node: &Node, xi: Option<&[(usize, f64)]>) -> Vec<(usize, f64)> {
    let own = node.own_link();
    let Some(xi) = xi else {
        return node
            .links
            .iter()
            .enumerate()
            .map(|(li, link)| {
                let th = match node.kind {
                    NodeKind::Prior { r } => theta_first_prior(node, &link.g, r),
                    NodeKind::New { .. } if Some(li) != own => theta_first_new_off(node, &link.g),
                    NodeKind::New { .. } => {
                        let mx = max_of(&node.lw1);
                        if mx == f64::NEG_INFINITY {
                            0.0
                        } else {
                            let s: f64 = node.lw1.iter().zip(&link.g).map(|(lw, g)| (lw - mx).exp() * g).sum();
                            scaled(s, -mx)
                        }
                    }
                };
                (link.j, th)
            })
            .collect();
    };
    let (logp, a) = log_products(node, xi);
    match node.kind {
        NodeKind::Prior { r } => {
            let mx = max_of(&logp);
            let w: Vec<f64> = logp.iter().map(|v| (v - mx).exp()).collect();
            let rest = scaled(1.0 - r, mx);
            node.links
                .iter()
                .zip(&a)
                .map(|(link, al)| {
                    if mx == f64::NEG_INFINITY {
                        return (link.j, 0.0);
                    }
                    let (mut num, mut den) = (0.0, 0.0);
                    for ((wl, gl), ai) in w.iter().zip(&link.g).zip(al) {
                        let v = wl / (1.0 + ai);
                        den += v;
                        num += v * gl;
                    }
                    (link.j, r * num / (r * den + rest))
                })
                .collect()
        }
        NodeKind::New { .. } => {
            let oi = own.expect("new component always links its own measurement");
            let own_link = &node.links[oi];
            let mh = max_of(&logp);
            let diag = if mh == f64::NEG_INFINITY {
                0.0
            } else {
                let s: f64 = logp.iter().zip(&own_link.g).map(|(lp, g)| (lp - mh).exp() * g).sum();
                scaled(s, -mh)
            };
            // G_l = H_l * g_own / xi_own
            let lg: Vec<f64> = logp.iter().zip(&a[oi]).map(|(lp, ao)| lp + ln_or_neg_inf(*ao)).collect();
            let mg = max_of(&lg);
            let gw: Vec<f64> = lg.iter().map(|v| (v - mg).exp()).collect();
            let rest = scaled(1.0, mg);
            node.links
                .iter()
                .zip(&a)
                .enumerate()
                .map(|(li, (link, al))| {
                    if li == oi {
                        return (link.j, diag);
                    }
                    if mg == f64::NEG_INFINITY {
                        return (link.j, 0.0);
                    }
                    let (mut num, mut den) = (0.0, 0.0);
                    for ((wl, gl), ai) in gw.iter().zip(&link.g).zip(al) {
                        let v = wl / (1.0 + ai);
                        den += v;
                        num += v * gl;
                    }
                    (link.j, num / (den + rest))
                })
                .collect()
        }
    }
}

/// `xi_{i,j} = 1 + sum over other nodes of theta_{i',j}`.
pub fn bp_xi(theta: &ThetaTable) -> XiTable {
    let mut by_meas: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); theta.m];
    for (i, row) in theta.rows.iter().enumerate() {
        for (slot, &(j, v)) in row.iter().enumerate() {
            by_meas[j].push((i, slot, v));
        }
    }
    let mut rows: Vec<Vec<(usize, f64)>> = theta.rows.iter().map(|r| r.iter().map(|(j, _)| (*j, 1.0)).collect()).collect();
    for (j, list) in by_meas.iter().enumerate() {
        let n = list.len();
        let mut prefix = vec![0.0; n + 1];
        for (t, e) in list.iter().enumerate() {
            prefix[t + 1] = prefix[t] + e.2;
        }
        let mut suffix = vec![0.0; n + 1];
        for t in (0..n).rev() {
            suffix[t] = suffix[t + 1] + list[t].2;
        }
        for (t, &(i, slot, _)) in list.iter().enumerate() {
            rows[i][slot] = (j, 1.0 + prefix[t] + suffix[t + 1]);
        }
    }
    PairTable { m: theta.m, rows }
}

/// Materialise the extrinsic messages implied by `xi`, one per linked pair.
/// Used for inspection and tests; the update itself never stores them.
pub fn bp_extrinsic(graph: &BpGraph, xi: &XiTable) -> Vec<Vec<(usize, EpsilonMessage)>> {
    graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let xrow = &xi.rows[i];
            let own = node.own_link();
            let a: Vec<Vec<f64>> = node
                .links
                .iter()
                .map(|l| {
                    let x = xrow.iter().find(|(j, _)| *j == l.j).map(|(_, v)| *v).unwrap_or(1.0);
                    l.g.iter().map(|g| g / x).collect()
                })
                .collect();
            node.links
                .iter()
                .enumerate()
                .map(|(li, link)| {
                    let w: Vec<f64> = (0..node.particles.len())
                        .map(|l| {
                            let mut v = node.lw1[l].exp();
                            for (lj, al) in a.iter().enumerate() {
                                if lj == li {
                                    continue;
                                }
                                if Some(lj) == own {
                                    v *= al[l];
                                } else {
                                    v *= 1.0 + al[l];
                                }
                            }
                            v
                        })
                        .collect();
                    let s: f64 = w.iter().sum();
                    let total = match node.kind {
                        NodeKind::Prior { r } => r * s + 1.0 - r,
                        NodeKind::New { .. } => s + 1.0,
                    };
                    (link.j, EpsilonMessage { total, particle_weights: w })
                })
                .collect()
        })
        .collect()
}

/// Evaluate `theta` from explicit messages (reference path for tests).
pub fn theta_from_messages(graph: &BpGraph, messages: &[Vec<(usize, EpsilonMessage)>]) -> ThetaTable {
    let rows = graph
        .nodes
        .iter()
        .zip(messages)
        .map(|(node, msgs)| {
            node.links
                .iter()
                .zip(msgs)
                .map(|(link, (j, msg))| {
                    let num: f64 = msg.particle_weights.iter().zip(&link.g).map(|(w, g)| w * g).sum();
                    let v = match node.kind {
                        NodeKind::Prior { r } => r * num / msg.total,
                        NodeKind::New { own } if own == link.j => num,
                        NodeKind::New { .. } => num / msg.total,
                    };
                    (*j, if v < graph.censor { 0.0 } else { v })
                })
                .collect()
        })
        .collect();
    PairTable { m: graph.m(), rows }
}

/// Posterior existence probability and normalised particle weights per node.
pub fn bp_beliefs(graph: &BpGraph, xi: &XiTable) -> Vec<(f64, Vec<f64>)> {
    graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let (mut logb, a) = log_products(node, &xi.rows[i]);
            let mut r_prior = None;
            match node.kind {
                NodeKind::Prior { r } => r_prior = Some(r),
                NodeKind::New { .. } => {
                    let oi = node.own_link().expect("own link");
                    for (lb, ao) in logb.iter_mut().zip(&a[oi]) {
                        *lb += ln_or_neg_inf(*ao);
                    }
                }
            }
            let mx = max_of(&logb);
            if mx == f64::NEG_INFINITY {
                let n = node.particles.len().max(1) as f64;
                return (0.0, vec![1.0 / n; node.particles.len()]);
            }
            let w: Vec<f64> = logb.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = w.iter().sum();
            let r = match r_prior {
                Some(r) => r * s / (r * s + scaled(1.0 - r, mx)),
                None => s / (s + scaled(1.0, mx)),
            };
            (r.clamp(0.0, 1.0), w.into_iter().map(|v| v / s).collect())
        })
        .collect()
}

/// One serial sweep: each node's `xi` is rebuilt from the current column sums
/// right before it is evaluated, and its new `theta` is visible to the rest.
pub fn bp_serial_sweep(graph: &BpGraph, theta: &mut ThetaTable, damping: f64) {
    let mut col = vec![0.0; theta.m];
    for row in &theta.rows {
        for &(j, v) in row {
            col[j] += v;
        }
    }
    let n = graph.nodes.len();
    let sequence = (0..graph.n_prior).chain((graph.n_prior..n).rev());
    for i in sequence {
        let xi_row: Vec<(usize, f64)> = theta.rows[i].iter().map(|&(j, v)| (j, (1.0 + col[j] - v).max(1.0))).collect();
        let mut row = evaluate_node(&graph.nodes[i], Some(&xi_row));
        for ((_, new), (j, old)) in row.iter_mut().zip(&theta.rows[i]) {
            if *new < graph.censor {
                *new = 0.0;
            }
            if damping > 0.0 {
                *new = (1.0 - damping) * *new + damping * old;
            }
            col[*j] += *new - old;
        }
        theta.rows[i] = row;
    }
}

fn damp(next: &mut ThetaTable, prev: &ThetaTable, a: f64) {
    for (rn, rp) in next.rows.iter_mut().zip(&prev.rows) {
        for ((_, vn), (_, vp)) in rn.iter_mut().zip(rp) {
            *vn = (1.0 - a) * *vn + a * vp;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BpOutput {
    pub density: PmbDensity,
    pub theta: ThetaTable,
    pub xi: XiTable,
    pub order: Vec<usize>,
}

/// Full update: init, `iterations` rounds of evaluation and `xi`, beliefs.
/// The output has the predicted components first, then one new component
/// per measurement in processing order.
pub fn bp_update(
    predicted: &PmbDensity,
    frame: &[Measurement],
    model: &Model,
    options: &BpOptions,
    rng: RngStream,
) -> Result<BpOutput, BpError> {
    let registry = init_registry();
    let init = registry.resolve(&options.new_component_init)?.clone();
    bp_update_with(predicted, frame, model, options, init.as_ref(), rng)
}

pub fn bp_update_with(
    predicted: &PmbDensity,
    frame: &[Measurement],
    model: &Model,
    options: &BpOptions,
    init: &dyn NewComponentInit,
    rng: RngStream,
) -> Result<BpOutput, BpError> {
    let graph = bp_init(predicted, frame, model, options, init, rng)?;
    let mut theta = bp_measurement_evaluation(&graph, None);
    let mut xi = bp_xi(&theta);
    for _ in 1..options.iterations {
        match options.schedule {
            Schedule::Flooding => {
                let mut next = bp_measurement_evaluation(&graph, Some(&xi));
                if options.damping > 0.0 {
                    damp(&mut next, &theta, options.damping);
                }
                theta = next;
            }
            Schedule::Serial => bp_serial_sweep(&graph, &mut theta, options.damping),
        }
        xi = bp_xi(&theta);
    }
    let beliefs = bp_beliefs(&graph, &xi);
    let components = graph
        .nodes
        .iter()
        .zip(beliefs)
        .map(|(node, (r, w))| BernoulliComponent {
            id: node.id,
            r,
            particles: node.particles.iter().zip(w).map(|(p, w)| p.with_weight(w)).collect(),
        })
        .collect();
    let undetected = match &predicted.undetected {
        Undetected::Particles(ps) => {
            Undetected::Particles(ps.iter().map(|p| p.with_weight(p.weight * (-model.gamma(p.last_state())).exp())).collect())
        }
        Undetected::Scalar(mass) => Undetected::Scalar(mass * (-model.params().gamma).exp()),
    };
    Ok(BpOutput {
        density: PmbDensity { step: predicted.step, undetected, components },
        theta,
        xi,
        order: graph.order,
    })
}
