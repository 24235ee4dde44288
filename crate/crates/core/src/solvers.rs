//! Centralised gradient descent and decentralised ADMM.
//!
//! The decentralised scheme keeps one worker per node. Each outer iteration a
//! node refines its local image `u_m`, relaxes its own segment of the consensus
//! image towards `u_m + λ_m/ρ`, encodes that segment and exchanges it with every
//! other node. All nodes decode the same frames, so their consensus copies stay
//! identical, and then update their multipliers locally.

use std::ops::Range;
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::comm::{allgather_segments, AnglePartition, CommStats, SegmentPartition, Transport};
use crate::error::{Error, Result};
use crate::projector::{ImageGrid, Sinogram, SparseProjector};
use crate::quantizers::{decode, CodecError, QuantizerSpec};

/// Iterates whose L2 norm exceeds this are treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diverged(v: &[f64]) -> Option<f64> {
    let n = norm(v);
    (n.is_nan() || n > DIVERGENCE_NORM).then_some(n)
}

/// Relative L2 change `‖new − old‖ / ‖new‖`; zero when both vanish.
pub fn relative_change(old: &[f64], new: &[f64]) -> f64 {
    let diff = old
        .iter()
        .zip(new)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(new);
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Stop once the relative update norm falls below this.
    pub stop_tol: f64,
}

impl CtrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "ctr learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("ctr iterations must be at least 1".into()));
        }
        if self.stop_tol.is_nan() || self.stop_tol < 0.0 {
            return Err(Error::Config("ctr stop tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CtrResult {
    pub image: ImageGrid,
    pub iterations: usize,
    pub converged: bool,
}

/// Gradient descent on `½‖Pu − d‖²` from the zero image.
pub fn ctr_solve(p: &SparseProjector, d: &Sinogram, cfg: &CtrConfig) -> Result<CtrResult> {
    ctr_solve_observed(p, d, cfg, |_, _| {})
}

/// [`ctr_solve`] calling `observe(iteration, u)` after every step.
pub fn ctr_solve_observed(
    p: &SparseProjector,
    d: &Sinogram,
    cfg: &CtrConfig,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<CtrResult> {
    cfg.validate()?;
    if d.len() != p.n_rows() {
        return Err(Error::dim("ctr sinogram", p.n_rows(), d.len()));
    }
    let side = (p.n_cols() as f64).sqrt().round() as usize;
    let mut u = vec![0.0; p.n_cols()];
    let mut residual = vec![0.0; p.n_rows()];
    let mut grad = vec![0.0; p.n_cols()];
    let mut converged = false;
    let mut done = 0;

    for it in 1..=cfg.iterations {
        p.apply(&u, &mut residual);
        for (r, &dj) in residual.iter_mut().zip(d.values()) {
            *r -= dj;
        }
        p.apply_transpose(&residual, &mut grad);
        for (ui, gi) in u.iter_mut().zip(&grad) {
            *ui -= cfg.learning_rate * gi;
        }
        done = it;
        if let Some(n) = diverged(&u) {
            return Err(Error::Diverged {
                iteration: it,
                norm: n,
            });
        }
        observe(it, &u);
        let step = cfg.learning_rate * norm(&grad);
        let size = norm(&u);
        if step == 0.0 || (size > 0.0 && step / size < cfg.stop_tol) {
            converged = true;
            break;
        }
    }

    Ok(CtrResult {
        image: ImageGrid::new(side, p.n_cols() / side.max(1), u)?,
        iterations: done,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    /// Penalty weight of the consensus term.
    pub rho: f64,
    /// Step of the local image update.
    pub eta1: f64,
    /// Step of the segment update.
    pub eta2: f64,
    /// Gradient steps per local image update.
    pub inner_u: usize,
    /// Gradient steps per segment update.
    pub inner_x: usize,
    pub outer: usize,
    /// Stop once the relative change of the consensus image falls below this.
    pub stop_tol: f64,
    pub quantizer: QuantizerSpec,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 1.0,
            eta1: 1e-6,
            eta2: 0.2,
            inner_u: 10,
            inner_x: 10,
            outer: 1000,
            stop_tol: 1e-6,
            quantizer: QuantizerSpec::default(),
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("admm.{name} must be positive, got {v}")))
            }
        };
        positive("rho", self.rho)?;
        positive("eta1", self.eta1)?;
        positive("eta2", self.eta2)?;
        if self.eta2 * self.rho >= 2.0 {
            return Err(Error::Config(format!(
                "admm.eta2 * admm.rho = {} must be below 2",
                self.eta2 * self.rho
            )));
        }
        for (name, v) in [
            ("inner_u", self.inner_u),
            ("inner_x", self.inner_x),
            ("outer", self.outer),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("admm.{name} must be at least 1")));
            }
        }
        if self.stop_tol.is_nan() || self.stop_tol < 0.0 {
            return Err(Error::Config("admm.stop_tol must be non-negative".into()));
        }
        self.quantizer
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// State owned by one node worker.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: usize,
    pub projector: SparseProjector,
    /// This node's sinogram rows, flattened.
    pub data: Vec<f64>,
    pub u: Vec<f64>,
    pub lambda: Vec<f64>,
    /// This node's copy of the consensus image.
    pub x: Vec<f64>,
    pub segment: Range<usize>,
    /// `(rows, cols)` of the owned segment.
    pub block_shape: (usize, usize),
    residual: Vec<f64>,
    grad: Vec<f64>,
}

impl NodeState {
    pub fn new(
        id: usize,
        projector: SparseProjector,
        data: Vec<f64>,
        segment: Range<usize>,
        block_shape: (usize, usize),
    ) -> Result<Self> {
        let n = projector.n_cols();
        if data.len() != projector.n_rows() {
            return Err(Error::dim("node data", projector.n_rows(), data.len()));
        }
        if segment.end > n || segment.start > segment.end {
            return Err(Error::Config(format!(
                "segment {segment:?} outside image of {n} pixels"
            )));
        }
        if block_shape.0 * block_shape.1 != segment.len() {
            return Err(Error::dim("segment block", segment.len(), block_shape.0 * block_shape.1));
        }
        Ok(NodeState {
            id,
            data,
            u: vec![0.0; n],
            lambda: vec![0.0; n],
            x: vec![0.0; n],
            segment,
            block_shape,
            residual: vec![0.0; projector.n_rows()],
            grad: vec![0.0; n],
            projector,
        })
    }

    pub fn n(&self) -> usize {
        self.u.len()
    }

    /// `½‖P_m v − d_m‖²`.
    pub fn data_misfit(&self, v: &[f64]) -> f64 {
        let mut r = vec![0.0; self.projector.n_rows()];
        self.projector.apply(v, &mut r);
        0.5 * r
            .iter()
            .zip(&self.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    }
}

/// Splits a global problem into node states following the two partitions.
pub fn build_nodes(
    p: &SparseProjector,
    d: &Sinogram,
    angles: &AnglePartition,
    segments: &SegmentPartition,
) -> Result<Vec<NodeState>> {
    if angles.nodes() != segments.nodes() {
        return Err(Error::Config(format!(
            "{} angle groups for {} image segments",
            angles.nodes(),
            segments.nodes()
        )));
    }
    if d.len() != p.n_rows() {
        return Err(Error::dim("sinogram", p.n_rows(), d.len()));
    }
    angles
        .assignment
        .iter()
        .enumerate()
        .map(|(m, list)| {
            NodeState::new(
                m,
                p.select_angles(list),
                d.select_angles(list).values().to_vec(),
                segments.ranges[m].clone(),
                segments.block_shape(m),
            )
        })
        .collect()
}

/// Local step `1 / (L + ρ)` with `L` the largest power-iteration estimate of
/// `‖P_m‖²` over all nodes.
pub fn stable_local_step(nodes: &[NodeState], rho: f64) -> f64 {
    let l = nodes
        .iter()
        .map(|n| n.projector.gram_norm_estimate(100))
        .fold(0.0, f64::max);
    1.0 / (l + rho)
}

/// `E₁` warm-started gradient steps on
/// `½‖P_m u − d_m‖² + ρ/2 ‖u − x + λ_m/ρ‖²`.
pub fn local_u_update(node: &mut NodeState, cfg: &AdmmConfig) -> Result<()> {
    let NodeState {
        projector,
        data,
        u,
        lambda,
        x,
        residual,
        grad,
        ..
    } = node;
    for _ in 0..cfg.inner_u {
        projector.apply(u, residual);
        for (r, &dj) in residual.iter_mut().zip(data.iter()) {
            *r -= dj;
        }
        projector.apply_transpose(residual, grad);
        for i in 0..u.len() {
            let g = grad[i] + cfg.rho * (u[i] - x[i]) + lambda[i];
            u[i] -= cfg.eta1 * g;
        }
    }
    match diverged(u) {
        Some(n) => Err(Error::Diverged {
            iteration: 0,
            norm: n,
        }),
        None => Ok(()),
    }
}

/// `E₂` gradient steps of `x[m] ← x[m] − η₂ρ(x[m] − u_m − λ_m/ρ)` over the
/// owned segment, starting from the node's current consensus copy.
pub fn local_x_segment_update(node: &NodeState, cfg: &AdmmConfig) -> Vec<f64> {
    let seg = node.segment.clone();
    let mut xs = node.x[seg.clone()].to_vec();
    let target: Vec<f64> = node.u[seg.clone()]
        .iter()
        .zip(&node.lambda[seg])
        .map(|(u, l)| u + l / cfg.rho)
        .collect();
    let step = cfg.eta2 * cfg.rho;
    for _ in 0..cfg.inner_x {
        for (xi, ti) in xs.iter_mut().zip(&target) {
            *xi -= step * (*xi - ti);
        }
    }
    xs
}

/// `λ_m ← λ_m + ρ(u_m − x)`.
pub fn dual_update(node: &mut NodeState, x_global: &[f64], rho: f64) -> Result<()> {
    if x_global.len() != node.lambda.len() {
        return Err(Error::dim("dual update", node.lambda.len(), x_global.len()));
    }
    for ((l, u), x) in node.lambda.iter_mut().zip(&node.u).zip(x_global) {
        *l += rho * (u - x);
    }
    Ok(())
}

/// Consensus image after one outer iteration, as seen by node 0.
#[derive(Clone, Debug)]
pub struct IterationSnapshot {
    /// 1-based outer iteration.
    pub iteration: usize,
    pub x: Vec<f64>,
    pub relative_change: f64,
}

#[derive(Clone, Debug)]
pub struct AdmmOutcome {
    pub image: ImageGrid,
    pub iterations: usize,
    pub converged: bool,
    pub comm: CommStats,
}

struct WorkerResult {
    x: Vec<f64>,
    iterations: usize,
    converged: bool,
    comm: CommStats,
}

/// Runs decentralised ADMM with one thread per node.
///
/// `on_iteration` is invoked on the calling thread with node 0's consensus
/// image after every outer iteration.
pub fn dadmm_run(
    nodes: Vec<NodeState>,
    segments: &SegmentPartition,
    cfg: &AdmmConfig,
    transport: &dyn Transport,
    mut on_iteration: impl FnMut(&IterationSnapshot),
) -> Result<AdmmOutcome> {
    cfg.validate()?;
    let m = nodes.len();
    if m == 0 || m != segments.nodes() || m != transport.nodes() {
        return Err(Error::Config(format!(
            "{m} nodes, {} segments, transport of {}",
            segments.nodes(),
            transport.nodes()
        )));
    }
    let n = nodes[0].n();
    for (i, node) in nodes.iter().enumerate() {
        if node.id != i || node.n() != n || node.segment != segments.ranges[i] {
            return Err(Error::Config(format!(
                "node {i} is inconsistent with the segment partition"
            )));
        }
    }
    if segments.ranges.last().map(|r| r.end) != Some(n) {
        return Err(Error::dim("segment partition", n, segments.ranges.last().map_or(0, |r| r.end)));
    }

    let (tx, rx) = mpsc::channel::<IterationSnapshot>();
    let results: Vec<thread::Result<Result<WorkerResult>>> = thread::scope(|scope| {
        let handles: Vec<_> = nodes
            .into_iter()
            .map(|node| {
                let tx = (node.id == 0).then(|| tx.clone());
                scope.spawn(move || {
                    let id = node.id;
                    let r = node_worker(node, segments, cfg, transport, tx);
                    if let Err(e) = &r {
                        transport.abort(id, &e.to_string());
                    }
                    r
                })
            })
            .collect();
        drop(tx);
        for snap in rx {
            on_iteration(&snap);
        }
        handles.into_iter().map(|h| h.join()).collect()
    });

    let mut outcomes = Vec::with_capacity(m);
    let mut errors = Vec::new();
    for (id, r) in results.into_iter().enumerate() {
        match r {
            Ok(Ok(w)) => outcomes.push(w),
            Ok(Err(e)) => errors.push(e),
            Err(_) => errors.push(Error::WorkerPanic(id)),
        }
    }
    if !errors.is_empty() {
        // Prefer the root cause over the aborts it triggered on other nodes.
        let root = errors.iter().position(|e| {
            !matches!(
                e,
                Error::Comm {
                    source: crate::comm::CommError::Aborted { .. },
                    ..
                }
            )
        });
        return Err(errors.swap_remove(root.unwrap_or(0)));
    }

    let first = &outcomes[0];
    let height = n / segments.width;
    Ok(AdmmOutcome {
        image: ImageGrid::new(segments.width, height, first.x.clone())?,
        iterations: first.iterations,
        converged: first.converged,
        comm: CommStats::merge(outcomes.into_iter().map(|w| w.comm)),
    })
}

fn node_worker(
    mut node: NodeState,
    segments: &SegmentPartition,
    cfg: &AdmmConfig,
    transport: &dyn Transport,
    trace: Option<mpsc::Sender<IterationSnapshot>>,
) -> Result<WorkerResult> {
    let id = node.id;
    let mut comm = CommStats::default();
    let mut converged = false;
    let mut done = 0;
    let codec_err = |iteration, source| Error::Codec {
        iteration,
        node: id,
        source,
    };

    for k in 1..=cfg.outer {
        local_u_update(&mut node, cfg).map_err(|e| match e {
            Error::Diverged { norm, .. } => Error::Diverged { iteration: k, norm },
            other => other,
        })?;
        let segment = local_x_segment_update(&node, cfg);
        let msg = cfg
            .quantizer
            .encode(&segment, node.block_shape, id as u16)
            .map_err(|e| codec_err(k, e))?;
        let (gathered, entry) = allgather_segments(transport, id, k, &msg).map_err(|source| {
            Error::Comm {
                iteration: k,
                node: id,
                source,
            }
        })?;
        comm.push(entry);

        let mut x_new = vec![0.0; node.n()];
        for (m, msg) in gathered.iter().enumerate() {
            let range = segments.ranges[m].clone();
            let values = decode(msg).map_err(|e| codec_err(k, e))?;
            if values.len() != range.len() {
                return Err(codec_err(
                    k,
                    CodecError::Malformed(format!(
                        "segment {m} decoded to {} values, expected {}",
                        values.len(),
                        range.len()
                    )),
                ));
            }
            x_new[range].copy_from_slice(&values);
        }
        if let Some(norm) = diverged(&x_new) {
            return Err(Error::Diverged { iteration: k, norm });
        }

        let change = relative_change(&node.x, &x_new);
        node.x = x_new;
        let x = std::mem::take(&mut node.x);
        dual_update(&mut node, &x, cfg.rho)?;
        node.x = x;
        done = k;

        if let Some(tx) = &trace {
            // The receiver only disappears if the caller's callback panicked.
            let _ = tx.send(IterationSnapshot {
                iteration: k,
                x: node.x.clone(),
                relative_change: change,
            });
        }
        if change < cfg.stop_tol {
            converged = true;
            break;
        }
    }

    Ok(WorkerResult {
        x: node.x,
        iterations: done,
        converged,
        comm,
    })
}
