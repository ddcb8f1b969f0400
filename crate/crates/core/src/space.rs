//! Finite metric measure spaces.
//!
//! A space is a finite set of atoms with a distance oracle and nonnegative
//! weights. Every atom carries a distance-sorted neighbor list with running
//! masses, so ball and annulus masses are binary searches and ball
//! enumeration is a slice.
//!
//! Grid geometries compute distances as `integer offset / n`, which keeps
//! boundary cases such as `d = 0.2` on a five-cell grid bit-exact against
//! decimal literals.

use std::cmp::Ordering;

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BbmError, Result};

/// Relative offset used to step just below a breakpoint radius.
pub const CRITICAL_EPS: f64 = 1e-9;

/// Atoms up to this count get an exhaustive triangle-inequality check.
const EXHAUSTIVE_TRIANGLE_LIMIT: usize = 200;
const SAMPLED_TRIANGLES: usize = 2_000_000;

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    /// Cell midpoints `(i + 1/2) / n` of the unit interval.
    IntervalCells { n: usize },
    /// Equispaced nodes `i / (n - 1)`, both endpoints included.
    IntervalNodes { n: usize },
    /// Cell midpoints of the unit square, row-major.
    SquareCells { side: usize },
    /// Equispaced points on a circle of circumference one, arc-length distance.
    Circle { n: usize },
    /// Row-major distance matrix.
    Dense { n: usize, dist: Vec<f64> },
}

impl Geometry {
    pub fn len(&self) -> usize {
        match self {
            Geometry::IntervalCells { n }
            | Geometry::IntervalNodes { n }
            | Geometry::Circle { n }
            | Geometry::Dense { n, .. } => *n,
            Geometry::SquareCells { side } => side * side,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        match self {
            Geometry::IntervalCells { n } => i.abs_diff(j) as f64 / *n as f64,
            Geometry::IntervalNodes { n } => i.abs_diff(j) as f64 / (*n - 1) as f64,
            Geometry::SquareCells { side } => {
                let di = (i / side).abs_diff(j / side);
                let dj = (i % side).abs_diff(j % side);
                ((di * di + dj * dj) as f64).sqrt() / *side as f64
            }
            Geometry::Circle { n } => {
                let k = i.abs_diff(j);
                k.min(n - k) as f64 / *n as f64
            }
            Geometry::Dense { n, dist } => dist[i * n + j],
        }
    }

    /// Embedding coordinates used by field expressions. Abstract geometries
    /// report the atom index as `x`.
    pub fn coords(&self, i: usize) -> [f64; 2] {
        match self {
            Geometry::IntervalCells { n } => [(i as f64 + 0.5) / *n as f64, 0.0],
            Geometry::IntervalNodes { n } => [i as f64 / (*n - 1) as f64, 0.0],
            Geometry::SquareCells { side } => [
                ((i % side) as f64 + 0.5) / *side as f64,
                ((i / side) as f64 + 0.5) / *side as f64,
            ],
            Geometry::Circle { n } => [i as f64 / *n as f64, 0.0],
            Geometry::Dense { .. } => [i as f64, 0.0],
        }
    }
}

/// Interval of the half line with explicit endpoint flags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    /// `(lo, hi]`
    pub fn half_open(lo: f64, hi: f64) -> Self {
        Interval { lo, hi, lo_closed: false, hi_closed: true }
    }

    pub fn closed(lo: f64, hi: f64) -> Self {
        Interval { lo, hi, lo_closed: true, hi_closed: true }
    }

    pub fn open(lo: f64, hi: f64) -> Self {
        Interval { lo, hi, lo_closed: false, hi_closed: false }
    }

    /// `(lo, +inf)`
    pub fn above(lo: f64) -> Self {
        Interval { lo, hi: f64::INFINITY, lo_closed: false, hi_closed: false }
    }

    #[inline]
    pub fn contains(&self, t: f64) -> bool {
        let above = if self.lo_closed { t >= self.lo } else { t > self.lo };
        let below = if self.hi_closed { t <= self.hi } else { t < self.hi };
        above && below
    }

    pub fn is_empty(&self) -> bool {
        match self.lo.partial_cmp(&self.hi) {
            Some(Ordering::Less) => false,
            Some(Ordering::Equal) => !(self.lo_closed && self.hi_closed),
            _ => true,
        }
    }

    /// Whether two intervals share a point.
    pub fn intersects(&self, other: &Interval) -> bool {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        let lo_closed = if self.lo > other.lo {
            self.lo_closed
        } else if other.lo > self.lo {
            other.lo_closed
        } else {
            self.lo_closed && other.lo_closed
        };
        let hi_closed = if self.hi < other.hi {
            self.hi_closed
        } else if other.hi < self.hi {
            other.hi_closed
        } else {
            self.hi_closed && other.hi_closed
        };
        !Interval { lo, hi, lo_closed, hi_closed }.is_empty()
    }
}

impl std::fmt::Display for Interval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}{}, {}{}",
            if self.lo_closed { '[' } else { '(' },
            self.lo,
            self.hi,
            if self.hi_closed { ']' } else { ')' }
        )
    }
}

/// Sorted, deduplicated set of atom ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetRef {
    ids: Vec<usize>,
}

impl SubsetRef {
    pub fn new(space: &MetricMeasureSpace, ids: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut ids: Vec<usize> = ids.into_iter().collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= space.len()) {
            return Err(BbmError::InvalidArgument(format!(
                "atom id {bad} out of range for a space of {} atoms",
                space.len()
            )));
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(SubsetRef { ids })
    }

    pub(crate) fn from_sorted(ids: Vec<usize>) -> Self {
        debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        SubsetRef { ids }
    }

    pub fn all(space: &MetricMeasureSpace) -> Self {
        SubsetRef { ids: (0..space.len()).collect() }
    }

    pub fn empty() -> Self {
        SubsetRef { ids: Vec::new() }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().copied()
    }

    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.ids {
            m[i] = true;
        }
        m
    }

    pub fn is_subset_of(&self, other: &SubsetRef) -> bool {
        self.ids.iter().all(|&i| other.contains(i))
    }

    pub fn intersection(&self, other: &SubsetRef) -> SubsetRef {
        SubsetRef::from_sorted(self.iter().filter(|&i| other.contains(i)).collect())
    }

    /// Atoms of positive weight.
    pub fn positive_part(&self, space: &MetricMeasureSpace) -> SubsetRef {
        SubsetRef::from_sorted(self.iter().filter(|&i| space.weight(i) > 0.0).collect())
    }
}

/// How to build a space. Mirrors the JSON space description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceGenerator {
    /// Cell midpoints of [0,1], equal weights summing to one.
    IntervalGrid { n: usize },
    /// Nodes i/(n-1) of [0,1], equal weights 1/n.
    IntervalNodes { n: usize },
    /// n x n cell midpoints of the unit square, equal weights summing to one.
    SquareGrid { n: usize },
    /// n points on the circumference-one circle, equal weights summing to one.
    CircleGrid { n: usize },
    /// Interval cell midpoints with the given per-atom weights.
    WeightedInterval { n: usize, weights: Vec<f64> },
    /// Shortest-path metric of an undirected weighted graph.
    MetricGraph {
        #[serde(default)]
        n: Option<usize>,
        edges: Vec<(usize, usize, f64)>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    /// Explicit symmetric distance matrix.
    Explicit {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
}

/// Distance-sorted neighbor lists, one row of `n` entries per atom.
#[derive(Debug)]
struct NeighborIndex {
    n: usize,
    ids: Vec<u32>,
    dists: Vec<f64>,
    cum_mass: Vec<f64>,
}

/// Borrowed view of one atom's neighbor row, nearest first (the atom itself
/// is entry 0).
#[derive(Clone, Copy, Debug)]
pub struct NeighborRow<'a> {
    pub ids: &'a [u32],
    pub dists: &'a [f64],
    pub cum_mass: &'a [f64],
}

impl NeighborRow<'_> {
    /// Number of entries with distance `<= r`.
    #[inline]
    pub fn count_within(&self, r: f64) -> usize {
        self.dists.partition_point(|&d| d <= r)
    }

    /// Number of entries with distance `< r`.
    #[inline]
    pub fn count_below(&self, r: f64) -> usize {
        self.dists.partition_point(|&d| d < r)
    }

    #[inline]
    pub fn mass_of_first(&self, count: usize) -> f64 {
        if count == 0 {
            0.0
        } else {
            self.cum_mass[count - 1]
        }
    }

    /// Index range of the entries whose distance lies in `tau`.
    #[inline]
    pub fn range_of(&self, tau: &Interval) -> std::ops::Range<usize> {
        let hi = if tau.hi_closed { self.count_within(tau.hi) } else { self.count_below(tau.hi) };
        let lo = if tau.lo_closed { self.count_below(tau.lo) } else { self.count_within(tau.lo) };
        lo.min(hi)..hi
    }
}

#[derive(Debug)]
pub struct MetricMeasureSpace {
    geometry: Geometry,
    weights: Vec<f64>,
    h_min: f64,
    diameter: f64,
    index: NeighborIndex,
}

impl MetricMeasureSpace {
    pub fn build(gen: &SpaceGenerator) -> Result<Self> {
        match gen {
            SpaceGenerator::IntervalGrid { n } => {
                require_atoms(*n, 2)?;
                Self::from_geometry(Geometry::IntervalCells { n: *n }, vec![1.0 / *n as f64; *n])
            }
            SpaceGenerator::IntervalNodes { n } => {
                require_atoms(*n, 2)?;
                Self::from_geometry(Geometry::IntervalNodes { n: *n }, vec![1.0 / *n as f64; *n])
            }
            SpaceGenerator::SquareGrid { n } => {
                require_atoms(*n, 2)?;
                let count = n * n;
                Self::from_geometry(Geometry::SquareCells { side: *n }, vec![1.0 / count as f64; count])
            }
            SpaceGenerator::CircleGrid { n } => {
                require_atoms(*n, 2)?;
                Self::from_geometry(Geometry::Circle { n: *n }, vec![1.0 / *n as f64; *n])
            }
            SpaceGenerator::WeightedInterval { n, weights } => {
                require_atoms(*n, 2)?;
                if weights.len() != *n {
                    return Err(BbmError::InvalidSpace(format!(
                        "weighted_interval expects {n} weights, got {}",
                        weights.len()
                    )));
                }
                Self::from_geometry(Geometry::IntervalCells { n: *n }, weights.clone())
            }
            SpaceGenerator::MetricGraph { n, edges, weights } => {
                let count = n.unwrap_or_else(|| {
                    edges.iter().map(|&(a, b, _)| a.max(b) + 1).max().unwrap_or(0)
                });
                require_atoms(count, 1)?;
                let dist = graph_distances(count, edges)?;
                let weights = weights.clone().unwrap_or_else(|| vec![1.0 / count as f64; count]);
                Self::from_dense(count, dist, weights)
            }
            SpaceGenerator::Explicit { matrix, weights } => {
                let count = matrix.len();
                require_atoms(count, 1)?;
                if let Some(row) = matrix.iter().position(|r| r.len() != count) {
                    return Err(BbmError::InvalidSpace(format!(
                        "matrix row {row} has {} entries, expected {count}",
                        matrix[row].len()
                    )));
                }
                let dist: Vec<f64> = matrix.iter().flatten().copied().collect();
                let weights = weights.clone().unwrap_or_else(|| vec![1.0 / count as f64; count]);
                Self::from_dense(count, dist, weights)
            }
        }
    }

    /// Validates a dense matrix against the metric axioms and builds the space.
    pub fn from_dense(n: usize, dist: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dist.len() != n * n {
            return Err(BbmError::InvalidSpace(format!("expected {} distances, got {}", n * n, dist.len())));
        }
        validate_metric(n, &dist)?;
        Self::from_geometry(Geometry::Dense { n, dist }, weights)
    }

    pub fn from_geometry(geometry: Geometry, weights: Vec<f64>) -> Result<Self> {
        let n = geometry.len();
        if weights.len() != n {
            return Err(BbmError::InvalidSpace(format!("{} weights for {n} atoms", weights.len())));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(BbmError::InvalidSpace(format!("weight of atom {i} is {}", weights[i])));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(BbmError::InvalidSpace("total mass must be positive".into()));
        }
        let index = NeighborIndex::build(&geometry, &weights);
        let mut h_min = f64::INFINITY;
        let mut diameter: f64 = 0.0;
        for x in 0..n {
            let row = index.row(x);
            if n > 1 {
                h_min = h_min.min(row.dists[1]);
            }
            diameter = diameter.max(row.dists[n - 1]);
        }
        if n > 1 && diameter <= 0.0 {
            return Err(BbmError::InvalidSpace("diameter must be positive".into()));
        }
        // a single atom has no positive distances; resolution floors collapse to zero
        if n == 1 {
            h_min = 0.0;
        }
        Ok(MetricMeasureSpace { geometry, weights, h_min, diameter, index })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.geometry.dist(i, j)
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn h_min(&self) -> f64 {
        self.h_min
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn coords(&self, i: usize) -> [f64; 2] {
        self.geometry.coords(i)
    }

    #[inline]
    pub fn row(&self, x: usize) -> NeighborRow<'_> {
        self.index.row(x)
    }

    /// Same space with every weight multiplied by `c`.
    pub fn rescaled(&self, c: f64) -> Result<Self> {
        Self::from_geometry(self.geometry.clone(), self.weights.iter().map(|w| w * c).collect())
    }

    /// `m(B(x, r))`, closed ball.
    #[inline]
    pub fn ball_mass(&self, x: usize, r: f64) -> f64 {
        let row = self.row(x);
        row.mass_of_first(row.count_within(r))
    }

    /// `m(A(x, tau))`
    #[inline]
    pub fn annulus_mass(&self, x: usize, tau: &Interval) -> f64 {
        let row = self.row(x);
        let range = row.range_of(tau);
        if range.is_empty() {
            0.0
        } else {
            row.mass_of_first(range.end) - row.mass_of_first(range.start)
        }
    }

    /// Closed ball `{x' : d(x,x') <= r}`.
    pub fn ball(&self, x: usize, r: f64) -> SubsetRef {
        let row = self.row(x);
        let mut ids: Vec<usize> = row.ids[..row.count_within(r)].iter().map(|&i| i as usize).collect();
        ids.sort_unstable();
        SubsetRef::from_sorted(ids)
    }

    /// `{x' : d(x,x') in tau}`
    pub fn annulus(&self, x: usize, tau: &Interval) -> SubsetRef {
        let row = self.row(x);
        let mut ids: Vec<usize> = row.ids[row.range_of(tau)].iter().map(|&i| i as usize).collect();
        ids.sort_unstable();
        SubsetRef::from_sorted(ids)
    }

    /// `B(S, r)`: atoms within distance `r` of `S`.
    pub fn enlarge(&self, s: &SubsetRef, r: f64) -> SubsetRef {
        let mut mark = vec![false; self.len()];
        for c in s.iter() {
            let row = self.row(c);
            for &j in &row.ids[..row.count_within(r)] {
                mark[j as usize] = true;
            }
        }
        SubsetRef::from_sorted(mark.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect())
    }

    /// Distance from every atom to `s` (`+inf` when `s` is empty).
    pub fn distance_to_set(&self, s: &SubsetRef) -> Vec<f64> {
        let mask = s.mask(self.len());
        (0..self.len())
            .map(|x| {
                let row = self.row(x);
                row.ids
                    .iter()
                    .zip(row.dists)
                    .find(|(&j, _)| mask[j as usize])
                    .map_or(f64::INFINITY, |(_, &d)| d)
            })
            .collect()
    }

    /// `dist(S1, S2)`, `+inf` when either set is empty.
    pub fn set_distance(&self, s1: &SubsetRef, s2: &SubsetRef) -> f64 {
        if s1.is_empty() || s2.is_empty() {
            return f64::INFINITY;
        }
        let mask = s2.mask(self.len());
        s1.iter()
            .map(|x| {
                let row = self.row(x);
                row.ids
                    .iter()
                    .zip(row.dists)
                    .find(|(&j, _)| mask[j as usize])
                    .map_or(f64::INFINITY, |(_, &d)| d)
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn measure(&self, s: &SubsetRef) -> f64 {
        s.iter().map(|i| self.weights[i]).sum()
    }

    /// `<u>_S`, zero when `m(S) = 0`.
    pub fn average(&self, s: &SubsetRef, u: &[f64]) -> f64 {
        let m = self.measure(s);
        if m > 0.0 {
            s.iter().map(|i| u[i] * self.weights[i]).sum::<f64>() / m
        } else {
            0.0
        }
    }

    /// Minimum of `u` over positive-weight atoms of `S`; `+inf` on null sets.
    pub fn ess_inf(&self, s: &SubsetRef, u: &[f64]) -> f64 {
        s.iter().filter(|&i| self.weights[i] > 0.0).map(|i| u[i]).fold(f64::INFINITY, f64::min)
    }

    /// Maximum of `u` over positive-weight atoms of `S`; `-inf` on null sets.
    pub fn ess_sup(&self, s: &SubsetRef, u: &[f64]) -> f64 {
        s.iter().filter(|&i| self.weights[i] > 0.0).map(|i| u[i]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Every radius in `(floor, big_r]` at which some ball `B(x, a r)` with
    /// `a` in `scales` changes, together with the radii just below and above
    /// each change, plus `big_r` itself. Covers every distinct configuration
    /// of those balls around `x` for `r` in `(floor, big_r]`.
    pub fn critical_radii(&self, x: usize, big_r: f64, scales: &[f64], floor: f64) -> Vec<f64> {
        let max_scale = scales.iter().copied().fold(0.0, f64::max);
        let row = self.row(x);
        let reach = row.count_within(big_r * max_scale);
        let mut out = Vec::with_capacity(reach * scales.len() * 3 + 1);
        for &d in &row.dists[1..reach.max(1)] {
            for &a in scales {
                let base = d / a;
                for r in [base * (1.0 - CRITICAL_EPS), base, base * (1.0 + CRITICAL_EPS)] {
                    if r > floor && r <= big_r {
                        out.push(r);
                    }
                }
            }
        }
        if big_r > floor {
            out.push(big_r);
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }
}

impl NeighborIndex {
    fn build(geometry: &Geometry, weights: &[f64]) -> Self {
        let n = geometry.len();
        let mut ids = Vec::with_capacity(n * n);
        let mut dists = Vec::with_capacity(n * n);
        let mut cum_mass = Vec::with_capacity(n * n);
        let mut row: Vec<(f64, u32)> = Vec::with_capacity(n);
        for x in 0..n {
            row.clear();
            row.extend((0..n).map(|j| (geometry.dist(x, j), j as u32)));
            row.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            // the atom itself leads its row even when a pseudo-duplicate sits at 0
            if let Some(pos) = row.iter().position(|&(_, j)| j as usize == x) {
                row[..=pos].rotate_right(1);
            }
            let mut acc = 0.0;
            for &(d, j) in &row {
                acc += weights[j as usize];
                ids.push(j);
                dists.push(d);
                cum_mass.push(acc);
            }
        }
        NeighborIndex { n, ids, dists, cum_mass }
    }

    #[inline]
    fn row(&self, x: usize) -> NeighborRow<'_> {
        let span = x * self.n..(x + 1) * self.n;
        NeighborRow {
            ids: &self.ids[span.clone()],
            dists: &self.dists[span.clone()],
            cum_mass: &self.cum_mass[span],
        }
    }
}

fn require_atoms(n: usize, min: usize) -> Result<()> {
    if n < min {
        Err(BbmError::InvalidSpace(format!("need at least {min} atoms, got {n}")))
    } else {
        Ok(())
    }
}

fn validate_metric(n: usize, dist: &[f64]) -> Result<()> {
    let d = |i: usize, j: usize| dist[i * n + j];
    let scale = dist.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max).max(1.0);
    let slack = 1e-12 * scale;
    for i in 0..n {
        if d(i, i) != 0.0 {
            return Err(BbmError::InvalidSpace(format!("nonzero diagonal at atom {i}")));
        }
        for j in i + 1..n {
            let (a, b) = (d(i, j), d(j, i));
            if !a.is_finite() || a < 0.0 {
                return Err(BbmError::InvalidSpace(format!("distance ({i},{j}) is {a}")));
            }
            if (a - b).abs() > slack {
                return Err(BbmError::Asymmetric { i, j, dij: a, dji: b });
            }
            if a == 0.0 {
                return Err(BbmError::InvalidSpace(format!("distinct atoms ({i},{j}) at distance 0")));
            }
        }
    }
    let check = |i: usize, j: usize, k: usize| -> Result<()> {
        let via = d(i, j) + d(j, k);
        if d(i, k) > via + slack {
            Err(BbmError::TriangleViolation { i, j, k, dik: d(i, k), via })
        } else {
            Ok(())
        }
    };
    if n <= EXHAUSTIVE_TRIANGLE_LIMIT {
        for i in 0..n {
            for k in i + 1..n {
                for j in 0..n {
                    if j != i && j != k {
                        check(i, j, k)?;
                    }
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..SAMPLED_TRIANGLES {
            let (i, j, k) = (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n));
            check(i, j, k)?;
        }
    }
    Ok(())
}

fn graph_distances(n: usize, edges: &[(usize, usize, f64)]) -> Result<Vec<f64>> {
    let mut graph = UnGraph::<(), f64>::with_capacity(n, edges.len());
    let nodes: Vec<NodeIndex> = (0..n).map(|_| graph.add_node(())).collect();
    for &(a, b, len) in edges {
        if a >= n || b >= n {
            return Err(BbmError::InvalidSpace(format!("edge ({a},{b}) references a missing node")));
        }
        if !(len.is_finite() && len > 0.0) {
            return Err(BbmError::InvalidSpace(format!("edge ({a},{b}) has length {len}")));
        }
        graph.add_edge(nodes[a], nodes[b], len);
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        let reach = dijkstra(&graph, nodes[i], None, |e| *e.weight());
        for j in 0..n {
            match reach.get(&nodes[j]) {
                Some(&d) => dist[i * n + j] = d,
                None => {
                    return Err(BbmError::InvalidSpace(format!("graph is disconnected: no path {i} -> {j}")))
                }
            }
        }
    }
    // symmetrize exactly; both directions are shortest paths in an undirected graph
    for i in 0..n {
        for j in i + 1..n {
            let v = dist[i * n + j].min(dist[j * n + i]);
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    Ok(dist)
}
