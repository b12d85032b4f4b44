//! Gaussian Wasserstein distance between elliptic objects and the LP
//! trajectory metric with its localisation / miss / false / switch split.
//!
//! The LP is reduced before solving. With the dummy assignments eliminated,
//! a pair `(i, j)` costs `min(c, d)^p - c^p` when both trajectories are
//! present and nothing otherwise, on top of the constant `c^p / 2` per
//! present state. Pairs that are never within the cutoff stay unassigned at
//! an optimum, consecutive times whose pair costs coincide share one
//! assignment (triangle inequality on the switch term), and pairs that share
//! no trajectory, directly or transitively, form independent programs.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::TrajectoryEstimate;
use crate::lp::{solver_registry, LpError, LpProblem, LpSolver};
use crate::models::ObjectState;
use crate::registry::UnknownName;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("invalid metric parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Unknown(#[from] UnknownName),
}

/// Gaussian Wasserstein distance: position part plus the Bures term of the extents.
pub fn gwd(a: &ObjectState, b: &ObjectState) -> f64 {
    let dp = (a.position() - b.position()).norm_squared();
    if a.extent == b.extent {
        return dp.sqrt();
    }
    let (ea, eb) = (a.extent.matrix(), b.extent.matrix());
    // tr sqrt(A^1/2 B A^1/2) = sqrt(tr(AB) + 2 sqrt(det A det B)) for 2x2 SPD
    let tr_ab = (ea * eb).trace();
    let cross = (tr_ab + 2.0 * (a.extent.det() * b.extent.det()).sqrt()).max(0.0).sqrt();
    let scale = a.extent.trace() + b.extent.trace();
    let mut ext = scale - 2.0 * cross;
    if ext < 1e-14 * scale {
        ext = 0.0;
    }
    (dp + ext).sqrt()
}

/// A trajectory present on the contiguous steps `start..start + states.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub start: usize,
    pub states: Vec<ObjectState>,
}

impl TrajectoryRecord {
    pub fn at(&self, t: usize) -> Option<&ObjectState> {
        t.checked_sub(self.start).and_then(|i| self.states.get(i))
    }

    /// Restriction to steps `<= k`.
    pub fn truncated(&self, k: usize) -> Self {
        let keep = (k + 1).saturating_sub(self.start).min(self.states.len());
        Self { start: self.start, states: self.states[..keep].to_vec() }
    }
}

impl From<&TrajectoryEstimate> for TrajectoryRecord {
    fn from(e: &TrajectoryEstimate) -> Self {
        Self { start: e.start, states: e.states.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    pub cutoff: f64,
    pub p: f64,
    pub switch_cost: f64,
    /// LP backend name.
    pub solver: String,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self { cutoff: 20.0, p: 1.0, switch_cost: 2.0, solver: "minilp".into() }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(MetricError::Params("cutoff must be positive".into()));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(MetricError::Params("p must be at least 1".into()));
        }
        if !(self.switch_cost >= 0.0 && self.switch_cost.is_finite()) {
            return Err(MetricError::Params("switch_cost must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerStep {
    pub localization: Vec<f64>,
    pub miss: Vec<f64>,
    pub false_: Vec<f64>,
    /// Switch cost between step `k - 1` and `k`, booked at `k`.
    pub switch: Vec<f64>,
}

/// Parts are in units of `total^p`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricDecomposition {
    pub total: f64,
    pub localization: f64,
    pub miss: f64,
    pub false_: f64,
    pub switch: f64,
    pub per_step: PerStep,
}

impl MetricDecomposition {
    pub fn parts_sum(&self) -> f64 {
        self.localization + self.miss + self.false_ + self.switch
    }
}

#[derive(Clone, Debug)]
pub struct LpMetricResult {
    pub decomposition: MetricDecomposition,
    /// Per step, `(|X| + 1) x (|Y| + 1)` assignment with the dummy last.
    pub assignments: Vec<DMatrix<f64>>,
}

/// Cost tables of one `(X, Y)` pair over `[1, horizon]`.
struct Costs {
    nx: usize,
    ny: usize,
    horizon: usize,
    /// `present[t-1]`: presence flags of X then Y
    px: Vec<Vec<bool>>,
    py: Vec<Vec<bool>>,
    /// base distance for both-present pairs, row-major `i * ny + j`
    dist: Vec<Vec<f64>>,
}

impl Costs {
    fn new(x: &[TrajectoryRecord], y: &[TrajectoryRecord], horizon: usize) -> Self {
        let (nx, ny) = (x.len(), y.len());
        let mut px = Vec::with_capacity(horizon);
        let mut py = Vec::with_capacity(horizon);
        let mut dist = Vec::with_capacity(horizon);
        for t in 1..=horizon {
            let sx: Vec<Option<&ObjectState>> = x.iter().map(|r| r.at(t)).collect();
            let sy: Vec<Option<&ObjectState>> = y.iter().map(|r| r.at(t)).collect();
            let mut d = vec![f64::INFINITY; nx * ny];
            for (i, a) in sx.iter().enumerate() {
                for (j, b) in sy.iter().enumerate() {
                    if let (Some(a), Some(b)) = (a, b) {
                        d[i * ny + j] = gwd(a, b);
                    }
                }
            }
            px.push(sx.iter().map(Option::is_some).collect());
            py.push(sy.iter().map(Option::is_some).collect());
            dist.push(d);
        }
        Self { nx, ny, horizon, px, py, dist }
    }

    /// Reduced pair cost at step index `t0` (0-based).
    fn reduced(&self, t0: usize, i: usize, j: usize, c: f64, p: f64) -> f64 {
        let d = self.dist[t0][i * self.ny + j];
        if d.is_finite() && d < c {
            d.powf(p) - c.powf(p)
        } else {
            0.0
        }
    }
}

fn find(parent: &mut [usize], a: usize) -> usize {
    let mut r = a;
    while parent[r] != r {
        r = parent[r];
    }
    let mut a = a;
    while parent[a] != r {
        let next = parent[a];
        parent[a] = r;
        a = next;
    }
    r
}

fn solve_prefix(costs: &Costs, k: usize, params: &MetricParams, solver: &dyn LpSolver) -> Result<LpMetricResult, MetricError> {
    let (nx, ny) = (costs.nx, costs.ny);
    let (c, p) = (params.cutoff, params.p);
    let cp = c.powf(p);
    let sw = params.switch_cost.powf(p) / 2.0;

    // pairs that are ever within the cutoff
    let mut pairs = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            if (0..k).any(|t| costs.reduced(t, i, j, c, p) < 0.0) {
                pairs.push((i, j));
            }
        }
    }
    // components over shared rows / columns
    let mut parent: Vec<usize> = (0..nx + ny).collect();
    for &(i, j) in &pairs {
        let (a, b) = (find(&mut parent, i), find(&mut parent, nx + j));
        if a != b {
            parent[a] = b;
        }
    }
    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for &(i, j) in &pairs {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push((i, j));
    }

    // w[t][pair index in `pairs`]
    let index: BTreeMap<(usize, usize), usize> = pairs.iter().enumerate().map(|(q, pr)| (*pr, q)).collect();
    let mut w = vec![vec![0.0; pairs.len()]; k];
    for group in groups.values() {
        let cost_at = |t: usize| -> Vec<f64> { group.iter().map(|&(i, j)| costs.reduced(t, i, j, c, p)).collect() };
        // blocks of consecutive steps with identical costs
        let mut blocks: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for t in 0..k {
            let ct = cost_at(t);
            match blocks.last_mut() {
                Some((_, end, cb)) if *cb == ct => *end = t,
                _ => blocks.push((t, t, ct)),
            }
        }
        let nb = blocks.len();
        let mult: Vec<f64> = blocks.iter().map(|(s, e, _)| (e - s + 1) as f64).collect();
        let block_w: Vec<Vec<f64>> = if group.len() == 1 {
            // two-state chain, solved exactly by dynamic programming
            let mut best = [0.0f64, blocks[0].2[0] * mult[0]];
            let mut back = vec![[0usize; 2]; nb];
            for b in 1..nb {
                let lin = blocks[b].2[0] * mult[b];
                let mut next = [0.0; 2];
                for s in 0..2 {
                    let stay = best[s];
                    let flip = best[1 - s] + sw;
                    let (v, from) = if stay <= flip { (stay, s) } else { (flip, 1 - s) };
                    next[s] = v + if s == 1 { lin } else { 0.0 };
                    back[b][s] = from;
                }
                best = next;
            }
            let mut s = if best[1] < best[0] { 1 } else { 0 };
            let mut out = vec![vec![0.0]; nb];
            for b in (0..nb).rev() {
                out[b][0] = s as f64;
                if b > 0 {
                    s = back[b][s];
                }
            }
            out
        } else {
            let nq = group.len();
            let nw = nb * nq;
            let ns = if sw > 0.0 { (nb - 1) * nq } else { 0 };
            let mut cost = Vec::with_capacity(nw + ns);
            for (b, blk) in blocks.iter().enumerate() {
                cost.extend(blk.2.iter().map(|v| v * mult[b]));
            }
            cost.extend(std::iter::repeat_n(sw, ns));
            let mut lp = LpProblem::new(cost);
            let rows: BTreeMap<usize, Vec<usize>> = group.iter().enumerate().fold(BTreeMap::new(), |mut m, (q, (i, _))| {
                m.entry(*i).or_insert_with(Vec::new).push(q);
                m
            });
            let cols: BTreeMap<usize, Vec<usize>> = group.iter().enumerate().fold(BTreeMap::new(), |mut m, (q, (_, j))| {
                m.entry(*j).or_insert_with(Vec::new).push(q);
                m
            });
            for b in 0..nb {
                for qs in rows.values().chain(cols.values()) {
                    lp.add_le(qs.iter().map(|q| (b * nq + q, 1.0)).collect(), 1.0);
                }
            }
            if ns > 0 {
                for b in 0..nb - 1 {
                    for q in 0..nq {
                        let (a, n, s) = (b * nq + q, (b + 1) * nq + q, nw + b * nq + q);
                        lp.add_le(vec![(a, 1.0), (n, -1.0), (s, -1.0)], 0.0);
                        lp.add_le(vec![(n, 1.0), (a, -1.0), (s, -1.0)], 0.0);
                    }
                }
            }
            let sol = solver.solve(&lp)?;
            (0..nb).map(|b| (0..nq).map(|q| sol.x[b * nq + q].clamp(0.0, 1.0)).collect()).collect()
        };
        for (b, (s, e, _)) in blocks.iter().enumerate() {
            for wt in &mut w[*s..=*e] {
                for (q, pr) in group.iter().enumerate() {
                    wt[index[pr]] = block_w[b][q];
                }
            }
        }
    }

    // assemble and decompose
    let half = cp / 2.0;
    let mut per = PerStep {
        localization: vec![0.0; k],
        miss: vec![0.0; k],
        false_: vec![0.0; k],
        switch: vec![0.0; k],
    };
    let mut assignments = Vec::with_capacity(k);
    for t in 0..k {
        let mut m = DMatrix::zeros(nx + 1, ny + 1);
        for (q, &(i, j)) in pairs.iter().enumerate() {
            m[(i, j)] = w[t][q];
        }
        for i in 0..nx {
            let s: f64 = (0..ny).map(|j| m[(i, j)]).sum();
            m[(i, ny)] = (1.0 - s).max(0.0);
        }
        for j in 0..ny {
            let s: f64 = (0..nx).map(|i| m[(i, j)]).sum();
            m[(nx, j)] = (1.0 - s).max(0.0);
        }
        let (fx, fy) = (&costs.px[t], &costs.py[t]);
        for &(i, j) in &pairs {
            let v = m[(i, j)];
            if v == 0.0 {
                continue;
            }
            let d = costs.dist[t][i * ny + j];
            if d.is_finite() && d < c {
                per.localization[t] += v * d.powf(p);
            } else if fx[i] && fy[j] {
                per.miss[t] += v * half;
                per.false_[t] += v * half;
            } else if fx[i] {
                per.miss[t] += v * half;
            } else if fy[j] {
                per.false_[t] += v * half;
            }
        }
        for i in 0..nx {
            if fx[i] {
                per.miss[t] += m[(i, ny)] * half;
            }
        }
        for j in 0..ny {
            if fy[j] {
                per.false_[t] += m[(nx, j)] * half;
            }
        }
        if t > 0 && sw > 0.0 {
            per.switch[t] = sw * (0..pairs.len()).map(|q| (w[t][q] - w[t - 1][q]).abs()).sum::<f64>();
        }
        assignments.push(m);
    }
    let sum = |v: &[f64]| v.iter().sum::<f64>();
    let mut d = MetricDecomposition {
        total: 0.0,
        localization: sum(&per.localization),
        miss: sum(&per.miss),
        false_: sum(&per.false_),
        switch: sum(&per.switch),
        per_step: per,
    };
    d.total = d.parts_sum().max(0.0).powf(1.0 / p);
    Ok(LpMetricResult { decomposition: d, assignments })
}

fn resolve_solver(params: &MetricParams) -> Result<Arc<dyn LpSolver>, MetricError> {
    params.validate()?;
    Ok(solver_registry().resolve(&params.solver)?.clone())
}

/// LP trajectory metric between `X` and `Y` over steps `1..=horizon`.
pub fn lp_metric(
    x: &[TrajectoryRecord],
    y: &[TrajectoryRecord],
    horizon: usize,
    params: &MetricParams,
) -> Result<LpMetricResult, MetricError> {
    let solver = resolve_solver(params)?;
    lp_metric_with(x, y, horizon, params, solver.as_ref())
}

pub fn lp_metric_with(
    x: &[TrajectoryRecord],
    y: &[TrajectoryRecord],
    horizon: usize,
    params: &MetricParams,
    solver: &dyn LpSolver,
) -> Result<LpMetricResult, MetricError> {
    params.validate()?;
    solve_prefix(&Costs::new(x, y, horizon), horizon, params, solver)
}

/// Metric of every prefix `[1, k]`, each divided by `k` (parts included).
pub fn normalized_decompositions(
    x: &[TrajectoryRecord],
    y: &[TrajectoryRecord],
    horizon: usize,
    params: &MetricParams,
) -> Result<Vec<MetricDecomposition>, MetricError> {
    let solver = resolve_solver(params)?;
    let costs = Costs::new(x, y, horizon);
    (1..=costs.horizon)
        .map(|k| {
            let mut d = solve_prefix(&costs, k, params, solver.as_ref())?.decomposition;
            let kf = k as f64;
            d.total /= kf;
            d.localization /= kf;
            d.miss /= kf;
            d.false_ /= kf;
            d.switch /= kf;
            d.per_step = PerStep::default();
            Ok(d)
        })
        .collect()
}

/// Entry `k - 1` is the metric on `[1, k]` divided by `k`.
pub fn normalized_series(
    x: &[TrajectoryRecord],
    y: &[TrajectoryRecord],
    horizon: usize,
    params: &MetricParams,
) -> Result<Vec<f64>, MetricError> {
    Ok(normalized_decompositions(x, y, horizon, params)?.into_iter().map(|d| d.total).collect())
}
