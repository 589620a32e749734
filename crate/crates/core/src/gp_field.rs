//! Gaussian process prior on the log-intensity field of a partitioned network.
//!
//! The field is built in flow order. Source anchors are standard normal.
//! Every other anchor (intersection or sink) is drawn from its upstream
//! neighbours with
//!
//! ```text
//! mean = n^{-1/2} Σ k_i u_i,   sd = sqrt(1 - n^{-1} Σ k_i²),   k_i = exp(-d_i² / 2ω²)
//! ```
//!
//! where `u_i` is the standardized value of upstream anchor `i` and `d_i` the
//! along-segment distance to it. Cell values of each segment are then drawn
//! from the exponentiated-quadratic GP conditioned on the anchors lying on it.
//!
//! The sampler works with iid standard-normal innovations; [`GpStructure::push`]
//! maps them to a [`LatentField`]. Each anchor value is stored once, so every
//! segment meeting at an intersection sees the same scalar.

use nalgebra::{Cholesky, DMatrix, DVector};
use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{CanalNetwork, EndpointKind, GeometryError, PartitionedNetwork, SegmentPosition};

/// First jitter tried, relative to α².
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter accepted, relative to α².
pub const JITTER_CAP: f64 = 1e-4;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("length-scale must be positive and finite, got {0}")]
    BadLengthscale(f64),
    #[error("marginal sd must be positive and finite, got {0}")]
    BadMarginalSd(f64),
    #[error("cell nugget must be non-negative and finite, got {0}")]
    BadNugget(f64),
    #[error("covariance not positive definite with jitter up to {jitter:e} (length-scale {omega})")]
    Cholesky { omega: f64, jitter: f64 },
    #[error("covariance matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("network has intersections or endpoints but no source to orient flow")]
    NoSources,
    #[error("anchor `{0}` is not reachable from any source")]
    Unreachable(String),
    #[error("anchors `{a}` and `{b}` are equally far from the sources; flow direction is ambiguous")]
    AmbiguousFlow { a: String, b: String },
    #[error("{what}: expected {expected} values, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("anchor `{0}` has zero conditional sd; the field density is degenerate")]
    DegenerateAnchor(String),
    #[error("partition has {got} segments, network has {expected}")]
    PartitionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Kernel hyperparameters: length-scale ω (km), marginal sd α, and a cell
/// nugget (white-noise variance relative to α², zero unless requested).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpHyperparams {
    pub omega: f64,
    pub alpha: f64,
    pub nugget: f64,
}

impl GpHyperparams {
    pub fn new(omega: f64, alpha: f64) -> Result<Self, GpError> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(GpError::BadLengthscale(omega));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(GpError::BadMarginalSd(alpha));
        }
        Ok(Self {
            omega,
            alpha,
            nugget: 0.0,
        })
    }

    /// Adds white noise of variance `nugget·α²` to every cell.
    pub fn with_nugget(self, nugget: f64) -> Result<Self, GpError> {
        if !(nugget >= 0.0 && nugget.is_finite()) {
            return Err(GpError::BadNugget(nugget));
        }
        Ok(Self { nugget, ..self })
    }

    /// Unit marginal sd, the identified convention.
    pub fn with_lengthscale(omega: f64) -> Result<Self, GpError> {
        Self::new(omega, 1.0)
    }
}

/// Exponentiated quadratic covariance α² exp(−d²/(2ω²)).
pub fn sqexp_cov(d: f64, omega: f64, alpha: f64) -> f64 {
    alpha * alpha * (-(d * d) / (2.0 * omega * omega)).exp()
}

/// ∂/∂ω of [`sqexp_cov`].
fn sqexp_cov_domega(d: f64, omega: f64, alpha: f64) -> f64 {
    sqexp_cov(d, omega, alpha) * d * d / (omega * omega * omega)
}

/// Length-scale rescaled by a grid-width ratio: ω·Δ_target/Δ_reference.
pub fn scaled_lengthscale(omega: f64, delta_target: f64, delta_reference: f64) -> f64 {
    omega * delta_target / delta_reference
}

/// Covariance of cell values at the given arc positions of one segment.
pub fn segment_cov_matrix(arcs: &[f64], hyper: GpHyperparams) -> DMatrix<f64> {
    cross_cov(arcs, arcs, hyper)
}

fn cross_cov(rows: &[f64], cols: &[f64], hyper: GpHyperparams) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        sqexp_cov(rows[i] - cols[j], hyper.omega, hyper.alpha)
    })
}

fn cross_cov_domega(rows: &[f64], cols: &[f64], hyper: GpHyperparams) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        sqexp_cov_domega(rows[i] - cols[j], hyper.omega, hyper.alpha)
    })
}

/// Lower Cholesky factor of `m + jitter·I`, trying jitter from
/// `JITTER_START·scale` and doubling up to `JITTER_CAP·scale`.
///
/// Returns the factor and the jitter used.
pub fn jittered_cholesky(m: &DMatrix<f64>, scale: f64, omega: f64) -> Result<(DMatrix<f64>, f64), GpError> {
    let n = m.nrows();
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > 1e-12 * scale.max(1.0) {
        return Err(GpError::Asymmetric(asym));
    }
    let mut jitter = JITTER_START * scale;
    while jitter <= JITTER_CAP * scale {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok((chol.unpack(), jitter));
        }
        jitter *= 2.0;
    }
    Err(GpError::Cholesky {
        omega,
        jitter: JITTER_CAP * scale,
    })
}

/// Conditional law of a downstream anchor given standardized upstream values
/// `(u_i, d_i)`: returns (mean, sd) on the standardized scale.
pub fn anchor_conditional(upstream: &[(f64, f64)], omega: f64) -> (f64, f64) {
    let n = upstream.len() as f64;
    if upstream.is_empty() {
        return (0.0, 1.0);
    }
    let mut mean = 0.0;
    let mut sq = 0.0;
    for &(u, d) in upstream {
        let k = sqexp_cov(d, omega, 1.0);
        mean += k * u;
        sq += k * k;
    }
    let var = 1.0 - sq / n;
    assert!(var >= -1e-15, "negative conditional variance {var}");
    (mean / n.sqrt(), var.max(0.0).sqrt())
}

/// Two-parent case of [`anchor_conditional`].
pub fn intersection_value_dist(z1: f64, z2: f64, d1: f64, d2: f64, omega: f64) -> (f64, f64) {
    anchor_conditional(&[(z1, d1), (z2, d2)], omega)
}

/// Gaussian law of a segment's cell values given one conditioning point `p`
/// with value `value`, whose own law has mean `mean` and sd `sd`:
///
/// mean σ⁻²·k·(Z − μ), covariance Σ − σ⁻²·k·k′, with k the cross-covariance
/// between the cells and `p`.
///
/// With `sd == 0` the point is treated as exactly known and ordinary GP
/// conditioning (mean k·Z/α², covariance Σ − k·k′/α²) is used instead.
/// The covariance is checked to factor with bounded jitter.
pub fn conditional_segment_dist(
    arcs: &[f64],
    point_arc: f64,
    value: f64,
    mean: f64,
    sd: f64,
    hyper: GpHyperparams,
) -> Result<(DVector<f64>, DMatrix<f64>), GpError> {
    let sigma = segment_cov_matrix(arcs, hyper);
    let k = DVector::from_iterator(
        arcs.len(),
        arcs.iter()
            .map(|&a| sqexp_cov(a - point_arc, hyper.omega, hyper.alpha)),
    );
    let (scale, centred) = if sd > 0.0 {
        (1.0 / (sd * sd), value - mean)
    } else {
        let a2 = hyper.alpha * hyper.alpha;
        (1.0 / a2, value)
    };
    let m = &k * (scale * centred);
    let mut cov = sigma - (&k * k.transpose()) * scale;
    cov = (&cov + cov.transpose()) * 0.5;
    jittered_cholesky(&cov, hyper.alpha * hyper.alpha, hyper.omega)?;
    Ok((m, cov))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorKind {
    Source,
    Intersection,
    Sink,
}

/// A point whose field value is shared by every segment passing through it.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub label: String,
    pub kind: AnchorKind,
    /// Network positions identified with this anchor.
    pub members: Vec<SegmentPosition>,
    /// Upstream anchors (index, along-segment distance km).
    pub parents: Vec<(usize, f64)>,
    /// Along-network distance from the nearest source (km).
    pub potential: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct SegmentLayout {
    /// Anchors on this segment: (anchor index, arc).
    anchors: Vec<(usize, f64)>,
    arcs: Vec<f64>,
    offset: usize,
}

/// Anchors, flow order and cell layout of the constrained field.
#[derive(Debug, Clone, PartialEq)]
pub struct GpStructure {
    anchors: Vec<Anchor>,
    segments: Vec<SegmentLayout>,
    n_cells: usize,
}

/// Field values: one per anchor plus one per cell (flattened in partition order).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    pub anchors: Vec<f64>,
    pub cells: Vec<f64>,
}

#[derive(Debug, Clone)]
struct AnchorFactor {
    /// k_i/√n per parent.
    coef: Vec<f64>,
    sd: f64,
    dcoef: Vec<f64>,
    dsd: f64,
}

#[derive(Debug, Clone)]
struct SegmentFactor {
    /// M × A interpolation weights.
    w: DMatrix<f64>,
    /// M × M lower Cholesky factor of the conditional covariance.
    l: DMatrix<f64>,
    dw: Option<DMatrix<f64>>,
    dl: Option<DMatrix<f64>>,
}

/// Hyperparameter-dependent factors of the construction.
#[derive(Debug, Clone)]
pub struct GpFactors {
    hyper: GpHyperparams,
    anchors: Vec<AnchorFactor>,
    segments: Vec<SegmentFactor>,
    log_det: f64,
}

impl GpFactors {
    pub fn hyper(&self) -> GpHyperparams {
        self.hyper
    }

    /// log |∂field/∂innovations|.
    pub fn log_abs_det_jacobian(&self) -> f64 {
        self.log_det
    }

    pub fn has_tangent(&self) -> bool {
        self.segments.iter().all(|s| s.dl.is_some())
    }
}

fn union_find_root(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = i;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

impl GpStructure {
    /// Derives anchors and flow order from the network's intersections and
    /// endpoint annotations.
    pub fn new(network: &CanalNetwork, partition: &PartitionedNetwork) -> Result<Self, GpError> {
        let nseg = network.segments().len();
        if partition.segments().len() != nseg {
            return Err(GpError::PartitionMismatch {
                expected: nseg,
                got: partition.segments().len(),
            });
        }

        // Candidate positions: intersection members then endpoints.
        #[derive(Clone, Copy)]
        enum Origin {
            Intersection,
            Endpoint(EndpointKind),
        }
        let mut positions: Vec<(SegmentPosition, Origin)> = Vec::new();
        let mut parent: Vec<usize> = Vec::new();
        for ix in network.intersections() {
            let i = positions.len();
            positions.push((ix.a, Origin::Intersection));
            positions.push((ix.b, Origin::Intersection));
            parent.extend([i, i]);
        }
        for e in network.endpoints() {
            positions.push((e.position, Origin::Endpoint(e.kind)));
            parent.push(positions.len() - 1);
        }
        for i in 0..positions.len() {
            for j in 0..i {
                let (p, q) = (positions[i].0, positions[j].0);
                if p.segment == q.segment && (p.arc - q.arc).abs() <= 1e-12 {
                    let (ri, rj) = (union_find_root(&mut parent, i), union_find_root(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                }
            }
        }

        // Equivalence classes in order of first appearance.
        let mut class_of = vec![usize::MAX; positions.len()];
        let mut classes: Vec<Vec<usize>> = Vec::new();
        let mut root_class: Vec<Option<usize>> = vec![None; positions.len()];
        for i in 0..positions.len() {
            let r = union_find_root(&mut parent, i);
            let c = *root_class[r].get_or_insert_with(|| {
                classes.push(Vec::new());
                classes.len() - 1
            });
            classes[c].push(i);
            class_of[i] = c;
        }
        if classes.is_empty() {
            return Ok(Self::unanchored(partition));
        }

        let label_of = |c: usize| {
            let p = positions[classes[c][0]].0;
            format!("{}@{}", network.segments()[p.segment].id(), p.arc)
        };
        let kinds: Vec<AnchorKind> = classes
            .iter()
            .map(|members| {
                let origins: Vec<Origin> = members.iter().map(|&i| positions[i].1).collect();
                if origins
                    .iter()
                    .any(|o| matches!(o, Origin::Endpoint(EndpointKind::Source)))
                {
                    AnchorKind::Source
                } else if origins.iter().any(|o| matches!(o, Origin::Intersection)) {
                    AnchorKind::Intersection
                } else {
                    AnchorKind::Sink
                }
            })
            .collect();
        if !kinds.contains(&AnchorKind::Source) {
            return Err(GpError::NoSources);
        }

        // Anchors along each segment, sorted by arc, without duplicates.
        let mut on_segment: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nseg];
        for (i, (p, _)) in positions.iter().enumerate() {
            let entry = (class_of[i], p.arc);
            let list = &mut on_segment[p.segment];
            if !list
                .iter()
                .any(|&(c, a)| c == entry.0 && (a - entry.1).abs() <= 1e-12)
            {
                list.push(entry);
            }
        }
        for list in &mut on_segment {
            list.sort_by(|x, y| x.1.total_cmp(&y.1));
        }

        // Potentials: multi-source shortest path over the anchor graph.
        let mut graph: UnGraph<(), f64> = UnGraph::new_undirected();
        let nodes: Vec<NodeIndex> = (0..classes.len()).map(|_| graph.add_node(())).collect();
        let root = graph.add_node(());
        let mut adjacent: Vec<(usize, usize, f64)> = Vec::new();
        for list in &on_segment {
            for pair in list.windows(2) {
                let (a, b, w) = (pair[0].0, pair[1].0, pair[1].1 - pair[0].1);
                if a != b {
                    graph.add_edge(nodes[a], nodes[b], w);
                    adjacent.push((a, b, w));
                }
            }
        }
        for (c, &k) in kinds.iter().enumerate() {
            if k == AnchorKind::Source {
                graph.add_edge(root, nodes[c], 0.0);
            }
        }
        let dist = dijkstra(&graph, root, None, |e| *e.weight());
        let mut potential = Vec::with_capacity(classes.len());
        for (c, node) in nodes.iter().enumerate() {
            match dist.get(node) {
                Some(&d) => potential.push(d),
                None => return Err(GpError::Unreachable(label_of(c))),
            }
        }

        // Upstream neighbours (closest copy of each).
        let mut parents: Vec<Vec<(usize, f64)>> = vec![Vec::new(); classes.len()];
        for &(a, b, w) in &adjacent {
            let (up, down) = if potential[a] < potential[b] {
                (a, b)
            } else if potential[b] < potential[a] {
                (b, a)
            } else {
                return Err(GpError::AmbiguousFlow {
                    a: label_of(a),
                    b: label_of(b),
                });
            };
            if kinds[down] == AnchorKind::Source {
                continue;
            }
            match parents[down].iter_mut().find(|(p, _)| *p == up) {
                Some(existing) => existing.1 = existing.1.min(w),
                None => parents[down].push((up, w)),
            }
        }

        // Topological order by potential.
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.sort_by(|&x, &y| potential[x].total_cmp(&potential[y]).then(x.cmp(&y)));
        let mut rank = vec![0; classes.len()];
        for (r, &c) in order.iter().enumerate() {
            rank[c] = r;
        }
        let anchors = order
            .iter()
            .map(|&c| {
                let mut ps: Vec<(usize, f64)> = parents[c].iter().map(|&(p, d)| (rank[p], d)).collect();
                ps.sort_by(|x, y| x.0.cmp(&y.0));
                Anchor {
                    label: label_of(c),
                    kind: kinds[c],
                    members: classes[c].iter().map(|&i| positions[i].0).collect(),
                    parents: ps,
                    potential: potential[c],
                }
            })
            .collect();

        let mut layout = Self::unanchored(partition);
        layout.anchors = anchors;
        for (k, list) in on_segment.into_iter().enumerate() {
            layout.segments[k].anchors = list.into_iter().map(|(c, a)| (rank[c], a)).collect();
        }
        Ok(layout)
    }

    fn unanchored(partition: &PartitionedNetwork) -> Self {
        let segments = partition
            .segments()
            .iter()
            .enumerate()
            .map(|(k, s)| SegmentLayout {
                anchors: Vec::new(),
                arcs: s.cells.iter().map(|c| c.centroid_arc).collect(),
                offset: partition.range(k).start,
            })
            .collect();
        Self {
            anchors: Vec::new(),
            segments,
            n_cells: partition.total_cells(),
        }
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Innovation count: one per anchor plus one per cell.
    pub fn n_innovations(&self) -> usize {
        self.anchors.len() + self.n_cells
    }

    /// Anchor index at a network position, if it is an anchor.
    pub fn anchor_at(&self, position: SegmentPosition) -> Option<usize> {
        self.segments
            .get(position.segment)?
            .anchors
            .iter()
            .find(|&&(_, a)| (a - position.arc).abs() <= 1e-12)
            .map(|&(c, _)| c)
    }

    /// Field value a segment attributes to one of its anchor points.
    pub fn value_at(&self, field: &LatentField, position: SegmentPosition) -> Option<f64> {
        self.anchor_at(position).map(|c| field.anchors[c])
    }

    /// Computes the hyperparameter-dependent factors. With `tangent`, also
    /// their derivatives with respect to ω.
    pub fn factors(&self, hyper: GpHyperparams, tangent: bool) -> Result<GpFactors, GpError> {
        let omega = hyper.omega;
        let mut log_det = 0.0;
        let anchors: Vec<AnchorFactor> = self
            .anchors
            .iter()
            .map(|a| {
                if a.kind == AnchorKind::Source || a.parents.is_empty() {
                    return AnchorFactor {
                        coef: Vec::new(),
                        sd: 1.0,
                        dcoef: Vec::new(),
                        dsd: 0.0,
                    };
                }
                let n = a.parents.len() as f64;
                let k: Vec<f64> = a.parents.iter().map(|&(_, d)| sqexp_cov(d, omega, 1.0)).collect();
                let dk: Vec<f64> = a
                    .parents
                    .iter()
                    .map(|&(_, d)| sqexp_cov_domega(d, omega, 1.0))
                    .collect();
                let sq: f64 = k.iter().map(|v| v * v).sum();
                let sd = (1.0 - sq / n).max(0.0).sqrt();
                let dsd = if sd > 0.0 {
                    -k.iter().zip(&dk).map(|(a, b)| a * b).sum::<f64>() / (n * sd)
                } else {
                    0.0
                };
                AnchorFactor {
                    coef: k.iter().map(|v| v / n.sqrt()).collect(),
                    sd,
                    dcoef: dk.iter().map(|v| v / n.sqrt()).collect(),
                    dsd,
                }
            })
            .collect();
        for a in &anchors {
            log_det += (hyper.alpha * a.sd).ln();
        }

        let segments: Vec<SegmentFactor> = self
            .segments
            .par_iter()
            .map(|s| segment_factor(s, hyper, tangent))
            .collect::<Result<_, _>>()?;
        for s in &segments {
            log_det += s.l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        }
        Ok(GpFactors {
            hyper,
            anchors,
            segments,
            log_det,
        })
    }

    fn check_innovations(&self, innov: &[f64]) -> Result<(), GpError> {
        if innov.len() != self.n_innovations() {
            return Err(GpError::Dimension {
                what: "innovations",
                expected: self.n_innovations(),
                got: innov.len(),
            });
        }
        Ok(())
    }

    /// Maps innovations `[anchor innovations, cell innovations]` to the field.
    pub fn push(&self, f: &GpFactors, innov: &[f64]) -> Result<LatentField, GpError> {
        self.check_innovations(innov)?;
        let na = self.anchors.len();
        let (s, eps) = innov.split_at(na);
        let alpha = f.hyper.alpha;
        let anchors: Vec<f64> = (0..na)
            .map(|i| {
                let af = &f.anchors[i];
                let mean: f64 = self.anchors[i]
                    .parents
                    .iter()
                    .zip(&af.coef)
                    .map(|(&(p, _), c)| c * s[p])
                    .sum();
                alpha * (mean + af.sd * s[i])
            })
            .collect();
        let mut cells = vec![0.0; self.n_cells];
        for (layout, sf) in self.segments.iter().zip(&f.segments) {
            let m = layout.arcs.len();
            let za = DVector::from_iterator(
                layout.anchors.len(),
                layout.anchors.iter().map(|&(c, _)| anchors[c]),
            );
            let e = DVector::from_column_slice(&eps[layout.offset..layout.offset + m]);
            let z = &sf.w * za + &sf.l * e;
            cells[layout.offset..layout.offset + m].copy_from_slice(z.as_slice());
        }
        Ok(LatentField { anchors, cells })
    }

    /// The pushed field and its derivative with respect to ω at fixed
    /// innovations. Needs factors computed with `tangent = true`.
    pub fn push_with_tangent(
        &self,
        f: &GpFactors,
        innov: &[f64],
    ) -> Result<(LatentField, LatentField), GpError> {
        self.check_innovations(innov)?;
        let field = self.push(f, innov)?;
        let na = self.anchors.len();
        let (s, eps) = innov.split_at(na);
        let alpha = f.hyper.alpha;
        let danchors: Vec<f64> = (0..na)
            .map(|i| {
                let af = &f.anchors[i];
                let dmean: f64 = self.anchors[i]
                    .parents
                    .iter()
                    .zip(&af.dcoef)
                    .map(|(&(p, _), c)| c * s[p])
                    .sum();
                alpha * (dmean + af.dsd * s[i])
            })
            .collect();
        let mut dcells = vec![0.0; self.n_cells];
        for (layout, sf) in self.segments.iter().zip(&f.segments) {
            let (dw, dl) = match (&sf.dw, &sf.dl) {
                (Some(dw), Some(dl)) => (dw, dl),
                _ => panic!("factors computed without tangent"),
            };
            let m = layout.arcs.len();
            let za = DVector::from_iterator(
                layout.anchors.len(),
                layout.anchors.iter().map(|&(c, _)| field.anchors[c]),
            );
            let dza = DVector::from_iterator(
                layout.anchors.len(),
                layout.anchors.iter().map(|&(c, _)| danchors[c]),
            );
            let e = DVector::from_column_slice(&eps[layout.offset..layout.offset + m]);
            let dz = dw * za + &sf.w * dza + dl * e;
            dcells[layout.offset..layout.offset + m].copy_from_slice(dz.as_slice());
        }
        Ok((
            field,
            LatentField {
                anchors: danchors,
                cells: dcells,
            },
        ))
    }

    /// Pulls a gradient with respect to field values back to the innovations
    /// (the transpose of [`push`](Self::push)).
    pub fn pull_back(
        &self,
        f: &GpFactors,
        anchors_bar: &[f64],
        cells_bar: &[f64],
    ) -> Result<Vec<f64>, GpError> {
        if anchors_bar.len() != self.anchors.len() || cells_bar.len() != self.n_cells {
            return Err(GpError::Dimension {
                what: "field gradient",
                expected: self.n_innovations(),
                got: anchors_bar.len() + cells_bar.len(),
            });
        }
        let na = self.anchors.len();
        let mut zbar = anchors_bar.to_vec();
        let mut out = vec![0.0; self.n_innovations()];
        for (layout, sf) in self.segments.iter().zip(&f.segments) {
            let m = layout.arcs.len();
            let cb = DVector::from_column_slice(&cells_bar[layout.offset..layout.offset + m]);
            let eb = sf.l.tr_mul(&cb);
            out[na + layout.offset..na + layout.offset + m].copy_from_slice(eb.as_slice());
            let ab = sf.w.tr_mul(&cb);
            for (&(c, _), v) in layout.anchors.iter().zip(ab.iter()) {
                zbar[c] += v;
            }
        }
        let alpha = f.hyper.alpha;
        for i in 0..na {
            let af = &f.anchors[i];
            out[i] += alpha * af.sd * zbar[i];
            for (&(p, _), c) in self.anchors[i].parents.iter().zip(&af.coef) {
                out[p] += alpha * c * zbar[i];
            }
        }
        Ok(out)
    }

    /// Inverse of [`push`](Self::push): innovations that produce `field`.
    pub fn innovations(&self, f: &GpFactors, field: &LatentField) -> Result<Vec<f64>, GpError> {
        self.check_field(field)?;
        let na = self.anchors.len();
        let alpha = f.hyper.alpha;
        let mut out = vec![0.0; self.n_innovations()];
        for i in 0..na {
            let af = &f.anchors[i];
            if af.sd == 0.0 {
                return Err(GpError::DegenerateAnchor(self.anchors[i].label.clone()));
            }
            let mean: f64 = self.anchors[i]
                .parents
                .iter()
                .zip(&af.coef)
                .map(|(&(p, _), c)| c * out[p])
                .sum();
            out[i] = (field.anchors[i] / alpha - mean) / af.sd;
        }
        for (layout, sf) in self.segments.iter().zip(&f.segments) {
            let m = layout.arcs.len();
            let za = DVector::from_iterator(
                layout.anchors.len(),
                layout.anchors.iter().map(|&(c, _)| field.anchors[c]),
            );
            let z = DVector::from_column_slice(&field.cells[layout.offset..layout.offset + m]);
            let r = z - &sf.w * za;
            let e =
                sf.l.solve_lower_triangular(&r)
                    .expect("Cholesky factor has positive diagonal");
            out[na + layout.offset..na + layout.offset + m].copy_from_slice(e.as_slice());
        }
        Ok(out)
    }

    fn check_field(&self, field: &LatentField) -> Result<(), GpError> {
        if field.anchors.len() != self.anchors.len() {
            return Err(GpError::Dimension {
                what: "anchor values",
                expected: self.anchors.len(),
                got: field.anchors.len(),
            });
        }
        if field.cells.len() != self.n_cells {
            return Err(GpError::Dimension {
                what: "cell values",
                expected: self.n_cells,
                got: field.cells.len(),
            });
        }
        Ok(())
    }

    /// Log density of a field under the construction, with its gradient
    /// with respect to every anchor and cell value.
    pub fn log_density(&self, f: &GpFactors, field: &LatentField) -> Result<(f64, LatentField), GpError> {
        let innov = self.innovations(f, field)?;
        let na = self.anchors.len();
        let alpha = f.hyper.alpha;
        let lp = innov.iter().map(|u| -0.5 * u * u - LN_SQRT_2PI).sum::<f64>() - f.log_det;

        let mut cells_bar = vec![0.0; self.n_cells];
        let mut anchors_bar = vec![0.0; na];
        for (layout, sf) in self.segments.iter().zip(&f.segments) {
            let m = layout.arcs.len();
            let ge = DVector::from_iterator(
                m,
                innov[na + layout.offset..na + layout.offset + m]
                    .iter()
                    .map(|e| -e),
            );
            let r =
                sf.l.tr_solve_lower_triangular(&ge)
                    .expect("Cholesky factor has positive diagonal");
            cells_bar[layout.offset..layout.offset + m].copy_from_slice(r.as_slice());
            let ab = sf.w.tr_mul(&r);
            for (&(c, _), v) in layout.anchors.iter().zip(ab.iter()) {
                anchors_bar[c] -= v;
            }
        }
        // s_a = (Z_a/α − Σ c_i s_{p_i}) / σ_a, processed downstream first.
        let mut sbar: Vec<f64> = innov[..na].iter().map(|s| -s).collect();
        for i in (0..na).rev() {
            let af = &f.anchors[i];
            anchors_bar[i] += sbar[i] / (alpha * af.sd);
            for (&(p, _), c) in self.anchors[i].parents.iter().zip(&af.coef) {
                sbar[p] -= sbar[i] * c / af.sd;
            }
        }
        Ok((
            lp,
            LatentField {
                anchors: anchors_bar,
                cells: cells_bar,
            },
        ))
    }

    /// Draws innovations iid N(0,1) and pushes them through the construction.
    pub fn sample<R: Rng + ?Sized>(&self, f: &GpFactors, rng: &mut R) -> LatentField {
        let innov: Vec<f64> = (0..self.n_innovations())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.push(f, &innov).expect("innovation length matches structure")
    }

    /// Marginal variance of every cell value implied by the construction.
    pub fn cell_marginal_variances(&self, f: &GpFactors) -> Vec<f64> {
        let n = self.n_innovations();
        let mut var = vec![0.0; self.n_cells];
        let mut e = vec![0.0; n];
        for i in 0..n {
            e[i] = 1.0;
            let field = self.push(f, &e).expect("dimension matches");
            for (v, z) in var.iter_mut().zip(&field.cells) {
                *v += z * z;
            }
            e[i] = 0.0;
        }
        var
    }
}

fn segment_factor(
    layout: &SegmentLayout,
    hyper: GpHyperparams,
    tangent: bool,
) -> Result<SegmentFactor, GpError> {
    let a2 = hyper.alpha * hyper.alpha;
    let arcs = &layout.arcs;
    let aarcs: Vec<f64> = layout.anchors.iter().map(|&(_, a)| a).collect();
    let sigma = segment_cov_matrix(arcs, hyper);
    let m = arcs.len();
    let nugget = DMatrix::from_diagonal_element(m, m, hyper.nugget * a2);
    if aarcs.is_empty() {
        let (l, _) = jittered_cholesky(&(&sigma + &nugget), a2, hyper.omega)?;
        let dl = tangent.then(|| chol_tangent(&l, &cross_cov_domega(arcs, arcs, hyper)));
        return Ok(SegmentFactor {
            w: DMatrix::zeros(m, 0),
            l,
            dw: tangent.then(|| DMatrix::zeros(m, 0)),
            dl,
        });
    }
    let kaa = segment_cov_matrix(&aarcs, hyper);
    let (la, _) = jittered_cholesky(&kaa, a2, hyper.omega)?;
    let kaz = cross_cov(&aarcs, arcs, hyper);
    let wt = chol_solve(&la, &kaz);
    let w = wt.transpose();
    let mut c = &sigma - &w * &kaz;
    c = (&c + c.transpose()) * 0.5 + nugget;
    let (l, _) = jittered_cholesky(&c, a2, hyper.omega)?;
    let (dw, dl) = if tangent {
        let dkaa = cross_cov_domega(&aarcs, &aarcs, hyper);
        let dkaz = cross_cov_domega(&aarcs, arcs, hyper);
        let dsigma = cross_cov_domega(arcs, arcs, hyper);
        let dwt = chol_solve(&la, &(&dkaz - &dkaa * &wt));
        let dkza_wt = dkaz.transpose() * &wt;
        let mut dc = &dsigma - &dkza_wt - dkza_wt.transpose() + &w * &dkaa * &wt;
        dc = (&dc + dc.transpose()) * 0.5;
        (Some(dwt.transpose()), Some(chol_tangent(&l, &dc)))
    } else {
        (None, None)
    };
    Ok(SegmentFactor { w, l, dw, dl })
}

/// Solves (L L′) X = B for X.
fn chol_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has positive diagonal");
    l.tr_solve_lower_triangular(&y)
        .expect("Cholesky factor has positive diagonal")
}

/// Derivative of the Cholesky factor: dL = L·Φ(L⁻¹·dC·L⁻′), where Φ keeps the
/// lower triangle and halves the diagonal.
fn chol_tangent(l: &DMatrix<f64>, dc: &DMatrix<f64>) -> DMatrix<f64> {
    let x = l
        .solve_lower_triangular(dc)
        .expect("Cholesky factor has positive diagonal");
    let mut p = l
        .solve_lower_triangular(&x.transpose())
        .expect("Cholesky factor has positive diagonal");
    let n = p.nrows();
    for i in 0..n {
        p[(i, i)] *= 0.5;
        for j in i + 1..n {
            p[(i, j)] = 0.0;
        }
    }
    l * p
}
