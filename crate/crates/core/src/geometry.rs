//! Polyline hazard networks with arc-length coordinates.
//!
//! A [`CanalNetwork`] is a set of planar polylines (km) joined at declared
//! intersections. Each segment carries its own arc-length coordinate, starting
//! at 0 at the first vertex. Partitions into equal-width cells are built per
//! segment with [`build_partition`].

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use thiserror::Error;

/// Intersection anchors must coincide to within this distance (km).
pub const INTERSECTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("segment `{0}` needs at least two vertices")]
    TooFewVertices(String),
    #[error("segment `{segment}` repeats vertex {index}")]
    RepeatedVertex { segment: String, index: usize },
    #[error("vertex coordinates of segment `{0}` are not finite")]
    NonFinite(String),
    #[error("duplicate segment id `{0}`")]
    DuplicateSegment(String),
    #[error("unknown segment `{0}`")]
    UnknownSegment(String),
    #[error("arc {arc} km is outside segment `{segment}` of length {length} km")]
    ArcOutOfRange { segment: String, arc: f64, length: f64 },
    #[error("intersection {a}@{arc_a} / {b}@{arc_b} anchors are {gap} km apart")]
    IntersectionMismatch {
        a: String,
        arc_a: f64,
        b: String,
        arc_b: f64,
        gap: f64,
    },
    #[error("segment `{0}` has no cell count")]
    MissingCellCount(String),
    #[error("segment `{0}` needs at least one cell")]
    ZeroCells(String),
    #[error("cannot split segment `{segment}` at arc {arc}: not strictly inside")]
    BadSplit { segment: String, arc: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        euclid_distance(self, other)
    }

    fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(self.x + t * (other.x - self.x), self.y + t * (other.y - self.y))
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Euclidean distance between two planar points (km).
pub fn euclid_distance(a: Point, b: Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Closest point on a segment to a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub distance: f64,
    pub arc: f64,
}

/// One polyline of the hazard, parameterized by arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct CanalSegment {
    id: String,
    vertices: Vec<Point>,
    cumulative: Vec<f64>,
}

impl CanalSegment {
    pub fn new(id: impl Into<String>, vertices: Vec<Point>) -> Result<Self, GeometryError> {
        let id = id.into();
        if vertices.len() < 2 {
            return Err(GeometryError::TooFewVertices(id));
        }
        if vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(GeometryError::NonFinite(id));
        }
        let mut cumulative = Vec::with_capacity(vertices.len());
        cumulative.push(0.0);
        for (index, pair) in vertices.windows(2).enumerate() {
            let leg = euclid_distance(pair[0], pair[1]);
            if leg <= 0.0 {
                return Err(GeometryError::RepeatedVertex {
                    segment: id,
                    index: index + 1,
                });
            }
            cumulative.push(cumulative[index] + leg);
        }
        Ok(Self {
            id,
            vertices,
            cumulative,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn cumulative_arclength(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("at least two vertices")
    }

    fn check_arc(&self, arc: f64) -> Result<f64, GeometryError> {
        let length = self.length();
        let slack = 1e-12 * length.max(1.0);
        if !(arc >= -slack && arc <= length + slack) {
            return Err(GeometryError::ArcOutOfRange {
                segment: self.id.clone(),
                arc,
                length,
            });
        }
        Ok(arc.clamp(0.0, length))
    }

    /// Index of the leg containing `arc` (clamped to valid legs).
    fn leg_index(&self, arc: f64) -> usize {
        let legs = self.vertices.len() - 1;
        self.cumulative
            .partition_point(|&c| c <= arc)
            .saturating_sub(1)
            .min(legs - 1)
    }

    /// Planar location at arc length `arc` (linear interpolation along the polyline).
    pub fn point_at(&self, arc: f64) -> Result<Point, GeometryError> {
        let arc = self.check_arc(arc)?;
        let leg = self.leg_index(arc);
        let (a, b) = (self.cumulative[leg], self.cumulative[leg + 1]);
        Ok(self.vertices[leg].lerp(self.vertices[leg + 1], (arc - a) / (b - a)))
    }

    /// Unit tangent of the leg containing `arc`.
    pub fn tangent_at(&self, arc: f64) -> Result<Point, GeometryError> {
        let arc = self.check_arc(arc)?;
        let leg = self.leg_index(arc);
        let (p, q) = (self.vertices[leg], self.vertices[leg + 1]);
        let len = euclid_distance(p, q);
        Ok(Point::new((q.x - p.x) / len, (q.y - p.y) / len))
    }

    /// Exact closest point on the polyline, by per-leg projection.
    pub fn project(&self, point: Point) -> Projection {
        self.project_within(point, 0.0, self.length())
    }

    /// Closest point restricted to the arc interval `[start, end]`.
    pub fn project_within(&self, point: Point, start: f64, end: f64) -> Projection {
        let mut best = Projection {
            distance: f64::INFINITY,
            arc: start,
        };
        for leg in 0..self.vertices.len() - 1 {
            let (c0, c1) = (self.cumulative[leg], self.cumulative[leg + 1]);
            let lo = c0.max(start);
            let hi = c1.min(end);
            if lo > hi {
                continue;
            }
            let (p, q) = (self.vertices[leg], self.vertices[leg + 1]);
            let len = c1 - c0;
            let (dx, dy) = ((q.x - p.x) / len, (q.y - p.y) / len);
            let along = (point.x - p.x) * dx + (point.y - p.y) * dy;
            let arc = (c0 + along).clamp(lo, hi);
            let foot = p.lerp(q, (arc - c0) / len);
            let distance = euclid_distance(foot, point);
            if distance < best.distance {
                best = Projection { distance, arc };
            }
        }
        best
    }

    /// Exact (min, max) distance from `point` to the sub-polyline over `[start, end]`.
    ///
    /// Distance to a fixed point is convex along each straight leg, so the
    /// maximum is attained at a leg end or an interval end.
    pub fn distance_range(&self, point: Point, start: f64, end: f64) -> (f64, f64) {
        let inf = self.project_within(point, start, end).distance;
        let mut sup = 0.0_f64;
        let mut visit = |arc: f64| {
            if let Ok(p) = self.point_at(arc) {
                sup = sup.max(euclid_distance(p, point));
            }
        };
        visit(start);
        visit(end);
        for &c in &self.cumulative {
            if c > start && c < end {
                visit(c);
            }
        }
        (inf, sup)
    }
}

/// A location on the network: segment index plus arc length (km).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentPosition {
    pub segment: usize,
    pub arc: f64,
}

impl SegmentPosition {
    pub const fn new(segment: usize, arc: f64) -> Self {
        Self { segment, arc }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intersection {
    pub a: SegmentPosition,
    pub b: SegmentPosition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EndpointKind {
    Source,
    Sink,
}

impl EndpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EndpointKind::Source => "source",
            EndpointKind::Sink => "sink",
        }
    }
}

impl std::str::FromStr for EndpointKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "source" => Ok(EndpointKind::Source),
            "sink" => Ok(EndpointKind::Sink),
            other => Err(format!("unknown endpoint kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Endpoint {
    pub position: SegmentPosition,
    pub kind: EndpointKind,
}

/// The hazard: segments, declared intersections, and flow sources/sinks.
///
/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CanalNetwork {
    segments: Vec<CanalSegment>,
    intersections: Vec<Intersection>,
    endpoints: Vec<Endpoint>,
}

impl CanalNetwork {
    pub fn new(
        segments: Vec<CanalSegment>,
        intersections: Vec<Intersection>,
        endpoints: Vec<Endpoint>,
    ) -> Result<Self, GeometryError> {
        for (i, s) in segments.iter().enumerate() {
            if segments[..i].iter().any(|t| t.id == s.id) {
                return Err(GeometryError::DuplicateSegment(s.id.clone()));
            }
        }
        let network = Self {
            segments,
            intersections,
            endpoints,
        };
        for ix in &network.intersections {
            let pa = network.point(ix.a)?;
            let pb = network.point(ix.b)?;
            let gap = euclid_distance(pa, pb);
            if gap > INTERSECTION_TOLERANCE {
                return Err(GeometryError::IntersectionMismatch {
                    a: network.segments[ix.a.segment].id.clone(),
                    arc_a: ix.a.arc,
                    b: network.segments[ix.b.segment].id.clone(),
                    arc_b: ix.b.arc,
                    gap,
                });
            }
        }
        for e in &network.endpoints {
            network.point(e.position)?;
        }
        Ok(network)
    }

    /// Builds a network from id-keyed intersection and endpoint tables.
    pub fn from_named(
        segments: Vec<CanalSegment>,
        intersections: &[(&str, f64, &str, f64)],
        endpoints: &[(&str, f64, EndpointKind)],
    ) -> Result<Self, GeometryError> {
        let index = |id: &str| {
            segments
                .iter()
                .position(|s| s.id == id)
                .ok_or_else(|| GeometryError::UnknownSegment(id.to_string()))
        };
        let intersections = intersections
            .iter()
            .map(|&(a, arc_a, b, arc_b)| {
                Ok(Intersection {
                    a: SegmentPosition::new(index(a)?, arc_a),
                    b: SegmentPosition::new(index(b)?, arc_b),
                })
            })
            .collect::<Result<Vec<_>, GeometryError>>()?;
        let endpoints = endpoints
            .iter()
            .map(|&(s, arc, kind)| {
                Ok(Endpoint {
                    position: SegmentPosition::new(index(s)?, arc),
                    kind,
                })
            })
            .collect::<Result<Vec<_>, GeometryError>>()?;
        Self::new(segments, intersections, endpoints)
    }

    pub fn segments(&self) -> &[CanalSegment] {
        &self.segments
    }

    pub fn intersections(&self) -> &[Intersection] {
        &self.intersections
    }

    pub fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }

    pub fn segment(&self, id: &str) -> Option<&CanalSegment> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn segment_index(&self, id: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.id == id)
    }

    pub fn position(&self, id: &str, arc: f64) -> Result<SegmentPosition, GeometryError> {
        let segment = self
            .segment_index(id)
            .ok_or_else(|| GeometryError::UnknownSegment(id.to_string()))?;
        self.segments[segment].check_arc(arc)?;
        Ok(SegmentPosition { segment, arc })
    }

    pub fn point(&self, position: SegmentPosition) -> Result<Point, GeometryError> {
        self.segments
            .get(position.segment)
            .ok_or_else(|| GeometryError::UnknownSegment(format!("#{}", position.segment)))?
            .point_at(position.arc)
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(CanalSegment::length).sum()
    }

    /// Exact minimum Euclidean distance from `point` to any segment.
    pub fn min_distance(&self, point: Point) -> f64 {
        self.nearest(point).1
    }

    /// Closest network position to `point` and its distance.
    pub fn nearest(&self, point: Point) -> (SegmentPosition, f64) {
        let mut best = (SegmentPosition::new(0, 0.0), f64::INFINITY);
        for (i, s) in self.segments.iter().enumerate() {
            let p = s.project(point);
            if p.distance < best.1 {
                best = (SegmentPosition::new(i, p.arc), p.distance);
            }
        }
        best
    }

    /// Shortest along-network path length between two network positions,
    /// transferring between segments only at declared intersections.
    /// `None` when the positions are not connected.
    pub fn network_distance(&self, from: SegmentPosition, to: SegmentPosition) -> Option<f64> {
        if from.segment == to.segment {
            // Still route through the graph: a detour can never be shorter
            // along a simple polyline, but loops between segments could be.
            let direct = (from.arc - to.arc).abs();
            return Some(self.graph_distance(from, to).map_or(direct, |d| d.min(direct)));
        }
        self.graph_distance(from, to)
    }

    fn graph_distance(&self, from: SegmentPosition, to: SegmentPosition) -> Option<f64> {
        let mut stops: Vec<Vec<(f64, NodeIndex)>> = vec![Vec::new(); self.segments.len()];
        let mut graph: UnGraph<(), f64> = UnGraph::new_undirected();
        let mut add = |graph: &mut UnGraph<(), f64>, pos: SegmentPosition| {
            let node = graph.add_node(());
            stops[pos.segment].push((pos.arc, node));
            node
        };
        let source = add(&mut graph, from);
        let target = add(&mut graph, to);
        for ix in &self.intersections {
            let na = add(&mut graph, ix.a);
            let nb = add(&mut graph, ix.b);
            graph.add_edge(na, nb, 0.0);
        }
        for list in &mut stops {
            list.sort_by(|x, y| x.0.total_cmp(&y.0));
            for pair in list.windows(2) {
                graph.add_edge(pair[0].1, pair[1].1, pair[1].0 - pair[0].0);
            }
        }
        dijkstra(&graph, source, Some(target), |e| *e.weight())
            .get(&target)
            .copied()
    }

    /// Splits segment `id` at an interior arc into two segments, re-anchoring
    /// intersections and endpoints and joining the halves with a new intersection.
    pub fn split_segment(
        &self,
        id: &str,
        arc: f64,
        left_id: &str,
        right_id: &str,
    ) -> Result<CanalNetwork, GeometryError> {
        let index = self
            .segment_index(id)
            .ok_or_else(|| GeometryError::UnknownSegment(id.to_string()))?;
        let seg = &self.segments[index];
        if !(arc > 0.0 && arc < seg.length()) {
            return Err(GeometryError::BadSplit {
                segment: id.to_string(),
                arc,
            });
        }
        let cut = seg.point_at(arc)?;
        let leg = seg.leg_index(arc);
        let mut left: Vec<Point> = seg.vertices[..=leg].to_vec();
        let mut right: Vec<Point> = vec![cut];
        if seg.cumulative[leg + 1] - arc > 1e-12 {
            right.extend_from_slice(&seg.vertices[leg + 1..]);
        } else {
            right.extend_from_slice(&seg.vertices[leg + 2..]);
        }
        if arc - seg.cumulative[leg] > 1e-12 {
            left.push(cut);
        }

        let left_index = index;
        let right_index = self.segments.len();
        let mut segments = self.segments.clone();
        segments[left_index] = CanalSegment::new(left_id, left)?;
        segments.push(CanalSegment::new(right_id, right)?);

        let remap = |pos: SegmentPosition| -> SegmentPosition {
            if pos.segment != index {
                pos
            } else if pos.arc <= arc {
                SegmentPosition::new(left_index, pos.arc)
            } else {
                SegmentPosition::new(right_index, pos.arc - arc)
            }
        };
        let mut intersections: Vec<Intersection> = Vec::new();
        for ix in &self.intersections {
            let (a, b) = (remap(ix.a), remap(ix.b));
            intersections.push(Intersection { a, b });
            // An anchor sitting exactly on the cut belongs to both halves.
            for (orig, mapped, other) in [(ix.a, a, b), (ix.b, b, a)] {
                if orig.segment == index && (orig.arc - arc).abs() <= 1e-12 {
                    let _ = mapped;
                    intersections.push(Intersection {
                        a: SegmentPosition::new(right_index, 0.0),
                        b: other,
                    });
                }
            }
        }
        intersections.push(Intersection {
            a: SegmentPosition::new(left_index, arc),
            b: SegmentPosition::new(right_index, 0.0),
        });
        let endpoints = self
            .endpoints
            .iter()
            .map(|e| Endpoint {
                position: remap(e.position),
                kind: e.kind,
            })
            .collect();
        CanalNetwork::new(segments, intersections, endpoints)
    }
}

/// One cell of a segment partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub start: f64,
    pub end: f64,
    pub centroid_arc: f64,
    pub width: f64,
    pub centroid: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPartition {
    pub segment: usize,
    pub cells: Vec<Cell>,
}

/// Equal-width cells for every segment of a network, flattened in segment order.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedNetwork {
    segments: Vec<SegmentPartition>,
    offsets: Vec<usize>,
}

impl PartitionedNetwork {
    pub fn segments(&self) -> &[SegmentPartition] {
        &self.segments
    }

    pub fn total_cells(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Flat index range of the cells of partition segment `k`.
    pub fn range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.segments.iter().flat_map(|s| s.cells.iter())
    }

    pub fn widths(&self) -> Vec<f64> {
        self.cells().map(|c| c.width).collect()
    }

    pub fn centroids(&self) -> Vec<Point> {
        self.cells().map(|c| c.centroid).collect()
    }
}

/// Per-segment cell counts keyed by segment id.
pub type CellCounts = BTreeMap<String, usize>;

/// Partitions each segment into equal-width cells.
pub fn build_partition(
    network: &CanalNetwork,
    counts: &CellCounts,
) -> Result<PartitionedNetwork, GeometryError> {
    let mut segments = Vec::with_capacity(network.segments.len());
    let mut offsets = vec![0];
    for (index, seg) in network.segments.iter().enumerate() {
        let m = *counts
            .get(&seg.id)
            .ok_or_else(|| GeometryError::MissingCellCount(seg.id.clone()))?;
        if m == 0 {
            return Err(GeometryError::ZeroCells(seg.id.clone()));
        }
        let length = seg.length();
        let cells = (1..=m)
            .map(|n| {
                let start = length * (n - 1) as f64 / m as f64;
                let end = if n == m {
                    length
                } else {
                    length * n as f64 / m as f64
                };
                let centroid_arc = 0.5 * (start + end);
                Ok(Cell {
                    start,
                    end,
                    centroid_arc,
                    width: end - start,
                    centroid: seg.point_at(centroid_arc)?,
                })
            })
            .collect::<Result<Vec<_>, GeometryError>>()?;
        offsets.push(offsets.last().unwrap() + m);
        segments.push(SegmentPartition {
            segment: index,
            cells,
        });
    }
    Ok(PartitionedNetwork { segments, offsets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(id: &str, a: (f64, f64), b: (f64, f64)) -> CanalSegment {
        CanalSegment::new(id, vec![Point::new(a.0, a.1), Point::new(b.0, b.1)]).unwrap()
    }

    fn three_segment() -> CanalNetwork {
        CanalNetwork::from_named(
            vec![
                straight("x1", (0.0, 0.0), (10.0, 0.0)),
                straight("y", (5.0, 0.0), (5.0, 4.0)),
                straight("x2", (0.0, 8.0 / 3.0), (10.0, 8.0 / 3.0)),
            ],
            &[("x1", 5.0, "y", 0.0), ("x2", 5.0, "y", 8.0 / 3.0)],
            &[],
        )
        .unwrap()
    }

    #[test]
    fn point_at_interpolates() {
        let s = straight("s", (0.0, 0.0), (10.0, 0.0));
        assert_eq!(s.point_at(5.0).unwrap(), Point::new(5.0, 0.0));
        assert_eq!(s.point_at(0.0).unwrap(), Point::new(0.0, 0.0));
        let bent = CanalSegment::new(
            "b",
            vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(1.0, 1.0)],
        )
        .unwrap();
        let p = bent.point_at(1.5).unwrap();
        assert!((p.x - 1.0).abs() < 1e-15 && (p.y - 0.5).abs() < 1e-15);
        assert_eq!(bent.cumulative_arclength(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn point_at_rejects_out_of_range() {
        let s = straight("s", (0.0, 0.0), (10.0, 0.0));
        assert!(matches!(
            s.point_at(10.5),
            Err(GeometryError::ArcOutOfRange { .. })
        ));
        assert!(s.point_at(-0.1).is_err());
    }

    #[test]
    fn segment_validation() {
        assert!(matches!(
            CanalSegment::new("a", vec![Point::new(0.0, 0.0)]),
            Err(GeometryError::TooFewVertices(_))
        ));
        assert!(matches!(
            CanalSegment::new("a", vec![Point::new(0.0, 0.0), Point::new(0.0, 0.0)]),
            Err(GeometryError::RepeatedVertex { .. })
        ));
    }

    #[test]
    fn network_rejects_bad_intersections_and_duplicates() {
        let err = CanalNetwork::from_named(
            vec![
                straight("a", (0.0, 0.0), (10.0, 0.0)),
                straight("b", (5.0, 0.0), (5.0, 4.0)),
            ],
            &[("a", 5.1, "b", 0.0)],
            &[],
        );
        assert!(matches!(err, Err(GeometryError::IntersectionMismatch { .. })));
        let dup = CanalNetwork::new(
            vec![
                straight("a", (0.0, 0.0), (1.0, 0.0)),
                straight("a", (0.0, 1.0), (1.0, 1.0)),
            ],
            vec![],
            vec![],
        );
        assert!(matches!(dup, Err(GeometryError::DuplicateSegment(_))));
    }

    #[test]
    fn partition_matches_closed_form() {
        let net = three_segment();
        let counts: CellCounts = [("x1", 40), ("y", 1), ("x2", 3)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let part = build_partition(&net, &counts).unwrap();
        let x1 = &part.segments()[0].cells;
        assert!((x1[0].centroid_arc - 0.125).abs() < 1e-15);
        assert!((x1[0].width - 0.25).abs() < 1e-15);
        for (n, c) in x1.iter().enumerate() {
            let n = (n + 1) as f64;
            assert!((c.start - 10.0 * (n - 1.0) / 40.0).abs() < 1e-13);
            assert!((c.end - 10.0 * n / 40.0).abs() < 1e-13);
            assert!((c.centroid_arc - 10.0 * (2.0 * n - 1.0) / 80.0).abs() < 1e-13);
            assert!((c.width - 0.25).abs() < 1e-13);
        }
        let y = &part.segments()[1].cells;
        assert_eq!(y.len(), 1);
        assert!((y[0].centroid_arc - 2.0).abs() < 1e-15 && (y[0].width - 4.0).abs() < 1e-15);
        assert_eq!(part.total_cells(), 44);
        assert_eq!(part.range(2), 41..44);
    }

    #[test]
    fn partition_requires_counts() {
        let net = three_segment();
        let mut counts = CellCounts::new();
        counts.insert("x1".into(), 4);
        assert!(matches!(
            build_partition(&net, &counts),
            Err(GeometryError::MissingCellCount(_))
        ));
        counts.insert("y".into(), 0);
        counts.insert("x2".into(), 1);
        assert!(matches!(
            build_partition(&net, &counts),
            Err(GeometryError::ZeroCells(_))
        ));
    }

    #[test]
    fn split_grid_reproduces_nonuniform_y_partition() {
        // y split at the x2 crossing: lower part M/2 cells of 16/(3M), upper M/2 of 8/(3M).
        let net = three_segment()
            .split_segment("y", 8.0 / 3.0, "y_lo", "y_up")
            .unwrap();
        for m in [20usize, 40, 160] {
            let counts: CellCounts = [("x1", m), ("x2", m), ("y_lo", m / 2), ("y_up", m / 2)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
            let part = build_partition(&net, &counts).unwrap();
            let lo = &part.segments()[net.segment_index("y_lo").unwrap()].cells;
            let up = &part.segments()[net.segment_index("y_up").unwrap()].cells;
            let mf = m as f64;
            for (i, c) in lo.iter().enumerate() {
                let n = (i + 1) as f64;
                assert!((c.width - 16.0 / (3.0 * mf)).abs() < 1e-13);
                assert!((c.centroid_arc - 8.0 / 3.0 * (2.0 * n - 1.0) / mf).abs() < 1e-13);
            }
            for (i, c) in up.iter().enumerate() {
                let n = (m / 2 + i + 1) as f64;
                assert!((c.width - 8.0 / (3.0 * mf)).abs() < 1e-13);
                // centroid in y_up coordinates, shifted back onto y
                let expected = 4.0 / 3.0 * (2.0 * (n - mf / 2.0) - 1.0) / mf + 8.0 / 3.0;
                assert!((c.centroid_arc + 8.0 / 3.0 - expected).abs() < 1e-13);
                assert!((c.centroid.y - expected).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn split_rewires_intersections() {
        let net = three_segment()
            .split_segment("y", 8.0 / 3.0, "y_lo", "y_up")
            .unwrap();
        let lo = net.segment_index("y_lo").unwrap();
        let up = net.segment_index("y_up").unwrap();
        let x2 = net.segment_index("x2").unwrap();
        // x2 meets both halves at the cut
        let touches = |s: usize, arc: f64| {
            net.intersections().iter().any(|ix| {
                let hit = |p: SegmentPosition| p.segment == s && (p.arc - arc).abs() < 1e-12;
                (hit(ix.a) && ix.b.segment == x2) || (hit(ix.b) && ix.a.segment == x2)
            })
        };
        assert!(touches(lo, 8.0 / 3.0));
        assert!(touches(up, 0.0));
        assert!((net.segments()[up].length() - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn euclid_examples() {
        assert_eq!(euclid_distance(Point::new(0.0, 0.0), Point::new(3.0, 4.0)), 5.0);
        assert_eq!(euclid_distance(Point::new(2.0, 7.0), Point::new(2.0, 7.0)), 0.0);
        assert_eq!(euclid_distance(Point::new(1.0, 1.0), Point::new(1.0, 2.0)), 1.0);
    }

    #[test]
    fn network_distance_examples() {
        let net = three_segment();
        let x1 = net.segment_index("x1").unwrap();
        let y = net.segment_index("y").unwrap();
        let d = |a, b| net.network_distance(a, b).unwrap();
        assert_eq!(
            d(SegmentPosition::new(x1, 2.0), SegmentPosition::new(x1, 5.0)),
            3.0
        );
        assert_eq!(
            d(SegmentPosition::new(x1, 0.0), SegmentPosition::new(x1, 5.0)),
            5.0
        );
        assert!((d(SegmentPosition::new(x1, 5.0), SegmentPosition::new(y, 1.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn network_distance_matches_path_enumeration() {
        // Brute force: the only transfer points are the two intersections, so any
        // path is a sequence of same-segment moves between them.
        let net = three_segment();
        let (x1, y, x2) = (0, 1, 2);
        let p1 = (SegmentPosition::new(x1, 5.0), SegmentPosition::new(y, 0.0));
        let p2 = (SegmentPosition::new(x2, 5.0), SegmentPosition::new(y, 8.0 / 3.0));
        let from = SegmentPosition::new(x1, 1.0);
        let to = SegmentPosition::new(x2, 9.0);
        let legs = (from.arc - p1.0.arc).abs() + (p1.1.arc - p2.1.arc).abs() + (p2.0.arc - to.arc).abs();
        assert!((net.network_distance(from, to).unwrap() - legs).abs() < 1e-12);
    }

    #[test]
    fn disconnected_is_unreachable() {
        let net = CanalNetwork::new(
            vec![
                straight("a", (0.0, 0.0), (1.0, 0.0)),
                straight("b", (0.0, 5.0), (1.0, 5.0)),
            ],
            vec![],
            vec![],
        )
        .unwrap();
        assert_eq!(
            net.network_distance(SegmentPosition::new(0, 0.5), SegmentPosition::new(1, 0.5)),
            None
        );
    }

    #[test]
    fn min_distance_examples() {
        let net = CanalNetwork::new(vec![straight("a", (0.0, 0.0), (10.0, 0.0))], vec![], vec![]).unwrap();
        assert_eq!(net.min_distance(Point::new(5.0, 1.0)), 1.0);
        assert_eq!(net.min_distance(Point::new(-1.0, 0.0)), 1.0);
    }

    #[test]
    fn min_distance_agrees_with_dense_sampling() {
        let net = three_segment();
        let p = Point::new(5.0, 1.0);
        let mut best = f64::INFINITY;
        for s in net.segments() {
            let n = 100_000;
            for i in 0..=n {
                let arc = s.length() * i as f64 / n as f64;
                best = best.min(s.point_at(arc).unwrap().distance(p));
            }
        }
        let exact = net.min_distance(p);
        assert!(exact <= best + 1e-12);
        assert!(best - exact < 1e-4);
    }

    #[test]
    fn distance_range_on_bent_leg() {
        let s = CanalSegment::new(
            "b",
            vec![Point::new(0.0, 0.0), Point::new(2.0, 0.0), Point::new(2.0, 2.0)],
        )
        .unwrap();
        let p = Point::new(1.0, 1.0);
        let (lo, hi) = s.distance_range(p, 0.5, 3.0);
        assert!((lo - 1.0).abs() < 1e-12);
        // farthest point is the bend at (2, 0)
        let far = Point::new(2.0, 0.0).distance(p);
        assert!((hi - far).abs() < 1e-12);
    }
}
