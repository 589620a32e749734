//! Distance kernels, discretized exposure, quadrature exposure and the
//! discretization error bound.

use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{CanalNetwork, CanalSegment, PartitionedNetwork, Point};
use crate::quadrature::{integrate_with_breaks, QuadResult, QuadratureError, QuadratureOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExposureError {
    #[error("kernel bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
    #[error("unknown kernel kind `{0}` (expected exponential or gaussian)")]
    UnknownKernel(String),
    #[error("{what}: expected {expected} values, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("household index {index} out of range ({count} households)")]
    NoSuchHousehold { index: usize, count: usize },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelKind {
    #[default]
    Exponential,
    Gaussian,
}

impl KernelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Exponential => "exponential",
            KernelKind::Gaussian => "gaussian",
        }
    }
}

impl FromStr for KernelKind {
    type Err = ExposureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "exponential" => Ok(KernelKind::Exponential),
            "gaussian" => Ok(KernelKind::Gaussian),
            other => Err(ExposureError::UnknownKernel(other.to_string())),
        }
    }
}

/// Decreasing distance kernel K(d/ρ) with K(0) = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceKernel {
    pub kind: KernelKind,
    pub rho: f64,
}

impl DistanceKernel {
    pub fn new(kind: KernelKind, rho: f64) -> Result<Self, ExposureError> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(ExposureError::BadBandwidth(rho));
        }
        Ok(Self { kind, rho })
    }

    pub fn eval(&self, d: f64) -> f64 {
        kernel_shape(self.kind, d / self.rho)
    }

    /// ∂ log K / ∂ log ρ at distance `d`.
    pub fn dlog_dlogrho(&self, d: f64) -> f64 {
        let x = d / self.rho;
        match self.kind {
            KernelKind::Exponential => x,
            KernelKind::Gaussian => 2.0 * x * x,
        }
    }
}

/// K(x) for the given kind.
pub fn kernel_shape(kind: KernelKind, x: f64) -> f64 {
    match kind {
        KernelKind::Exponential => (-x).exp(),
        KernelKind::Gaussian => (-x * x).exp(),
    }
}

pub fn kernel_eval(kernel: &DistanceKernel, d: f64) -> f64 {
    kernel.eval(d)
}

/// Household-to-centroid distances and cell widths for one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureTables {
    n_households: usize,
    n_cells: usize,
    /// Row-major, household × cell (km).
    distances: Vec<f64>,
    widths: Vec<f64>,
}

impl ExposureTables {
    pub fn new(partition: &PartitionedNetwork, households: &[Point]) -> Self {
        let centroids = partition.centroids();
        let n_cells = centroids.len();
        let distances: Vec<f64> = households
            .par_iter()
            .flat_map_iter(|&s| centroids.iter().map(move |&c| c.distance(s)))
            .collect();
        Self {
            n_households: households.len(),
            n_cells,
            distances,
            widths: partition.widths(),
        }
    }

    pub fn n_households(&self) -> usize {
        self.n_households
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn distances(&self, j: usize) -> &[f64] {
        &self.distances[j * self.n_cells..(j + 1) * self.n_cells]
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }
}

/// θ_j = Σ_m K(d_jm/ρ)·exp(z_m)·Δ_m over every cell of the partition.
pub fn discretized_exposure(
    cells: &[f64],
    kernel: &DistanceKernel,
    tables: &ExposureTables,
    j: usize,
) -> Result<f64, ExposureError> {
    if cells.len() != tables.n_cells {
        return Err(ExposureError::Dimension {
            what: "field cells",
            expected: tables.n_cells,
            got: cells.len(),
        });
    }
    if j >= tables.n_households {
        return Err(ExposureError::NoSuchHousehold {
            index: j,
            count: tables.n_households,
        });
    }
    Ok(exposure_sum(cells, kernel, tables.distances(j), &tables.widths))
}

fn exposure_sum(cells: &[f64], kernel: &DistanceKernel, d: &[f64], w: &[f64]) -> f64 {
    cells
        .iter()
        .zip(d)
        .zip(w)
        .map(|((z, d), w)| kernel.eval(*d) * z.exp() * w)
        .sum()
}

/// θ_j for every household, in household order.
pub fn all_exposures(
    cells: &[f64],
    kernel: &DistanceKernel,
    tables: &ExposureTables,
) -> Result<Vec<f64>, ExposureError> {
    if cells.len() != tables.n_cells {
        return Err(ExposureError::Dimension {
            what: "field cells",
            expected: tables.n_cells,
            got: cells.len(),
        });
    }
    Ok((0..tables.n_households)
        .into_par_iter()
        .map(|j| exposure_sum(cells, kernel, tables.distances(j), &tables.widths))
        .collect())
}

/// ∫ K(‖ℓ(c) − s‖/ρ)·Λ(c) dc over one segment by adaptive Gauss–Kronrod.
///
/// The segment is pre-split at its vertices and at the household's
/// perpendicular foot on each leg, where the integrand can have kinks.
pub fn quadrature_exposure<F: Fn(f64) -> f64>(
    intensity: F,
    kernel: &DistanceKernel,
    segment: &CanalSegment,
    household: Point,
    opts: QuadratureOptions,
) -> Result<QuadResult, ExposureError> {
    let cum = segment.cumulative_arclength();
    let mut breaks: Vec<f64> = cum.to_vec();
    for leg in 0..cum.len() - 1 {
        let foot = segment.project_within(household, cum[leg], cum[leg + 1]).arc;
        breaks.push(foot);
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let integrand = |c: f64| {
        let p = segment
            .point_at(c)
            .expect("quadrature nodes lie inside the segment");
        kernel.eval(p.distance(household)) * intensity(c)
    };
    Ok(integrate_with_breaks(integrand, &breaks, opts)?)
}

/// Intensity function of arc length for one segment.
pub type Intensity<'a> = &'a (dyn Fn(f64) -> f64 + Sync);

/// Exact exposure 𝓔_j: sum of [`quadrature_exposure`] over all segments.
///
/// `intensities` is aligned with `network.segments()`.
pub fn true_total_exposure(
    network: &CanalNetwork,
    intensities: &[Intensity<'_>],
    kernel: &DistanceKernel,
    household: Point,
    opts: QuadratureOptions,
) -> Result<f64, ExposureError> {
    if intensities.len() != network.segments().len() {
        return Err(ExposureError::Dimension {
            what: "segment intensities",
            expected: network.segments().len(),
            got: intensities.len(),
        });
    }
    let mut total = 0.0;
    for (seg, lambda) in network.segments().iter().zip(intensities) {
        total += quadrature_exposure(lambda, kernel, seg, household, opts)?.value;
    }
    Ok(total)
}

/// Per-cell contributions to the discretization error bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellBound {
    /// Field-variation term K(d̄)·Δ·e^z·(e^δ − 1).
    pub field: f64,
    /// Kernel term (K(inf d) − K(sup d))·Δ·e^{z+δ}.
    pub kernel: f64,
}

impl CellBound {
    pub fn total(&self) -> f64 {
        self.field + self.kernel
    }
}

/// Upper bound on |θ_j − 𝓔_j| for a field known at cell centroids.
///
/// Within each cell the log-intensity is taken to stay within δ of the
/// centroid value, where δ is the largest jump to a neighbouring centroid on
/// the same segment. The cell's distance range combines the exact polyline
/// extremes with `subsamples` evenly spaced arc positions.
pub fn discretization_error_bound(
    cells: &[f64],
    kernel: &DistanceKernel,
    network: &CanalNetwork,
    partition: &PartitionedNetwork,
    household: Point,
    subsamples: usize,
) -> Result<f64, ExposureError> {
    Ok(
        cell_error_bounds(cells, kernel, network, partition, household, subsamples)?
            .iter()
            .map(CellBound::total)
            .sum(),
    )
}

/// The per-cell terms of [`discretization_error_bound`], in partition order.
pub fn cell_error_bounds(
    cells: &[f64],
    kernel: &DistanceKernel,
    network: &CanalNetwork,
    partition: &PartitionedNetwork,
    household: Point,
    subsamples: usize,
) -> Result<Vec<CellBound>, ExposureError> {
    if cells.len() != partition.total_cells() {
        return Err(ExposureError::Dimension {
            what: "field cells",
            expected: partition.total_cells(),
            got: cells.len(),
        });
    }
    let subsamples = subsamples.max(2);
    let mut out = Vec::with_capacity(cells.len());
    for (k, sp) in partition.segments().iter().enumerate() {
        let seg = &network.segments()[sp.segment];
        let range = partition.range(k);
        let z = &cells[range];
        for (m, cell) in sp.cells.iter().enumerate() {
            let mut delta = 0.0_f64;
            if m > 0 {
                delta = delta.max((z[m] - z[m - 1]).abs());
            }
            if m + 1 < z.len() {
                delta = delta.max((z[m + 1] - z[m]).abs());
            }
            let (mut lo, mut hi) = seg.distance_range(household, cell.start, cell.end);
            for i in 0..subsamples {
                let arc = cell.start + (cell.end - cell.start) * i as f64 / (subsamples - 1) as f64;
                let d = seg
                    .point_at(arc.min(seg.length()))
                    .expect("cell lies on segment")
                    .distance(household);
                lo = lo.min(d);
                hi = hi.max(d);
            }
            let kc = kernel.eval(cell.centroid.distance(household));
            out.push(CellBound {
                field: kc * cell.width * z[m].exp() * delta.exp_m1(),
                kernel: (kernel.eval(lo) - kernel.eval(hi)) * cell.width * (z[m] + delta).exp(),
            });
        }
    }
    Ok(out)
}
