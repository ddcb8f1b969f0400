//! Mollifier families, dyadic admissibility sums and step envelopes.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BbmError, Result};
use crate::expr::Expr;
use crate::regularity::ser_extended;
use crate::space::{Interval, MetricMeasureSpace, SubsetRef};

/// Bin values per δ for a radial table family.
pub type RadialBins = Vec<(f64, Vec<f64>)>;

/// Kernel evaluator `(delta, space, x, x', d(x,x')) -> rho`.
pub type CustomKernel = Arc<dyn Fn(f64, &MetricMeasureSpace, usize, usize, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum MollifierFamily {
    /// The five closed-form families, `kappa` in `1..=5`.
    Builtin { kappa: u8, p: f64 },
    /// `rho = value_k / m(B(x,d))` on dyadic bins `(base/2^{k+1}, base/2^k]`,
    /// using the table of the listed δ nearest to the requested one.
    RadialTable { base: f64, tables: RadialBins },
    /// Expression in `d`, `delta`, `p`, `mb = m(B(x,δ))`, `mb4 = m(B(x,4d))`,
    /// `mbd = m(B(x,d))`; zero beyond `support`.
    Expr { expr: Expr, p: f64, support: f64 },
    Custom { name: String, kernel: CustomKernel, support: f64 },
    Zero,
}

impl fmt::Debug for MollifierFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MollifierFamily({})", self.name())
    }
}

/// JSON description of a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifierSpec {
    pub family: FamilyTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<f64>,
    /// δ (as a decimal string) to bin values, nearest bin first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<BTreeMap<String, Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FamilyTag {
    Builtin(u8),
    Named(String),
}

impl MollifierSpec {
    pub fn builtin(kappa: u8, p: f64) -> Self {
        MollifierSpec { family: FamilyTag::Builtin(kappa), p: Some(p), base: None, bins: None, expr: None, support: None }
    }

    /// Builds the family; `default_p` fills in a missing exponent.
    pub fn build(&self, default_p: f64) -> Result<MollifierFamily> {
        let p = self.p.unwrap_or(default_p);
        match &self.family {
            FamilyTag::Builtin(k) => MollifierFamily::builtin(*k, p),
            FamilyTag::Named(name) => match name.as_str() {
                "zero" => Ok(MollifierFamily::Zero),
                "table" => {
                    let base = self.base.ok_or_else(|| BbmError::InvalidArgument("table family needs base".into()))?;
                    let bins = self.bins.as_ref().ok_or_else(|| BbmError::InvalidArgument("table family needs bins".into()))?;
                    let mut tables = Vec::with_capacity(bins.len());
                    for (key, values) in bins {
                        let delta: f64 = key
                            .parse()
                            .map_err(|_| BbmError::InvalidArgument(format!("table key {key:?} is not a number")))?;
                        tables.push((delta, values.clone()));
                    }
                    MollifierFamily::radial_table(base, tables)
                }
                "expr" => {
                    let src = self.expr.as_deref().ok_or_else(|| BbmError::InvalidArgument("expr family needs expr".into()))?;
                    MollifierFamily::expr(src, p, self.support.unwrap_or(f64::INFINITY))
                }
                other => Err(BbmError::InvalidArgument(format!("unknown mollifier family {other:?}"))),
            },
        }
    }
}

const EXPR_VARS: [&str; 6] = ["d", "delta", "p", "mb", "mb4", "mbd"];

impl MollifierFamily {
    pub fn builtin(kappa: u8, p: f64) -> Result<Self> {
        if !(1..=5).contains(&kappa) {
            return Err(BbmError::InvalidArgument(format!("builtin family must be 1..5, got {kappa}")));
        }
        if !(p >= 1.0) {
            return Err(BbmError::InvalidArgument(format!("p must be >= 1, got {p}")));
        }
        Ok(MollifierFamily::Builtin { kappa, p })
    }

    pub fn radial_table(base: f64, mut tables: RadialBins) -> Result<Self> {
        if !(base > 0.0) || tables.is_empty() {
            return Err(BbmError::InvalidArgument("table family needs base > 0 and at least one table".into()));
        }
        for (delta, values) in &tables {
            if !(*delta > 0.0 && *delta < 1.0) || values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(BbmError::InvalidArgument(format!("bad table for delta {delta}")));
            }
        }
        tables.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(MollifierFamily::RadialTable { base, tables })
    }

    pub fn expr(src: &str, p: f64, support: f64) -> Result<Self> {
        Ok(MollifierFamily::Expr { expr: Expr::compile(src, &EXPR_VARS)?, p, support })
    }

    pub fn custom(
        name: &str,
        support: f64,
        kernel: impl Fn(f64, &MetricMeasureSpace, usize, usize, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        MollifierFamily::Custom { name: name.to_string(), kernel: Arc::new(kernel), support }
    }

    pub fn name(&self) -> String {
        match self {
            MollifierFamily::Builtin { kappa, p } => format!("rho{kappa}(p={p})"),
            MollifierFamily::RadialTable { base, .. } => format!("table(base={base})"),
            MollifierFamily::Expr { expr, .. } => format!("expr({})", expr.source()),
            MollifierFamily::Custom { name, .. } => format!("custom({name})"),
            MollifierFamily::Zero => "zero".into(),
        }
    }

    /// Distance beyond which the kernel vanishes for this δ.
    pub fn support(&self, delta: f64) -> f64 {
        match self {
            MollifierFamily::Builtin { kappa, .. } => match kappa {
                2..=4 => delta,
                _ => 1.0,
            },
            MollifierFamily::RadialTable { base, .. } => *base,
            MollifierFamily::Expr { support, .. } | MollifierFamily::Custom { support, .. } => *support,
            MollifierFamily::Zero => 0.0,
        }
    }

    /// `rho_δ(x, x')` for `x != x'`.
    #[inline]
    pub fn eval(&self, delta: f64, space: &MetricMeasureSpace, x: usize, y: usize) -> f64 {
        self.eval_at(delta, space, x, y, space.dist(x, y))
    }

    /// Same as [`eval`](Self::eval) with `d = d(x, y)` supplied by the caller.
    #[inline]
    pub fn eval_at(&self, delta: f64, space: &MetricMeasureSpace, x: usize, y: usize, d: f64) -> f64 {
        match self {
            MollifierFamily::Builtin { kappa, p } => match kappa {
                1 => {
                    if d <= 1.0 {
                        delta * d.powf(p * delta) / space.ball_mass(x, 4.0 * d)
                    } else {
                        0.0
                    }
                }
                2 => {
                    if d <= delta {
                        (d / delta).powf(*p) / space.ball_mass(x, delta)
                    } else {
                        0.0
                    }
                }
                3 => {
                    if d <= delta {
                        1.0 / space.ball_mass(x, delta)
                    } else {
                        0.0
                    }
                }
                4 => {
                    if d <= delta {
                        (d / delta).powf(*p) / space.ball_mass(x, d)
                    } else {
                        0.0
                    }
                }
                _ => {
                    if d > delta && d <= 1.0 {
                        1.0 / (delta.ln().abs() * space.ball_mass(x, 4.0 * d))
                    } else {
                        0.0
                    }
                }
            },
            MollifierFamily::RadialTable { base, tables } => {
                let values = &tables
                    .iter()
                    .min_by(|a, b| (a.0 - delta).abs().total_cmp(&(b.0 - delta).abs()))
                    .expect("nonempty tables")
                    .1;
                match bin_below(*base, d) {
                    Some(k) if k < values.len() => values[k] / space.ball_mass(x, d),
                    _ => 0.0,
                }
            }
            MollifierFamily::Expr { expr, p, support } => {
                if d > *support {
                    return 0.0;
                }
                let vars = [d, delta, *p, space.ball_mass(x, delta), space.ball_mass(x, 4.0 * d), space.ball_mass(x, d)];
                expr.eval(&vars).unwrap_or(f64::NAN)
            }
            MollifierFamily::Custom { kernel, support, .. } => {
                if d > *support {
                    0.0
                } else {
                    kernel(delta, space, x, y, d)
                }
            }
            MollifierFamily::Zero => 0.0,
        }
    }
}

/// `k` with `base/2^{k+1} < d <= base/2^k`, for `0 < d <= base`.
pub fn bin_below(base: f64, d: f64) -> Option<usize> {
    if !(d > 0.0) || d > base {
        return None;
    }
    let mut k = (base / d).log2().floor().max(0.0) as i32;
    // powers of two scale exactly, so the bounds below are exact
    while k > 0 && d > base * 0.5f64.powi(k) {
        k -= 1;
    }
    while d <= base * 0.5f64.powi(k + 1) {
        k += 1;
    }
    Some(k as usize)
}

/// `k` with `2^k base < d <= 2^{k+1} base`, for `d > base`.
pub fn bin_above(base: f64, d: f64) -> Option<usize> {
    if !(d > base) {
        return None;
    }
    let mut k = (d / base).log2().ceil().max(1.0) as i32 - 1;
    while k > 0 && d <= base * 2f64.powi(k) {
        k -= 1;
    }
    while d > base * 2f64.powi(k + 1) {
        k += 1;
    }
    Some(k as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionKind {
    L,
    U,
}

/// Sequence of subintervals of `(0, r]`. With `tail_ratio = Some(q)` the
/// sequence continues below its smallest left endpoint `a` with
/// `(a/q^{i+1}, a/q^i]`, `i >= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalPartition {
    pub scale: f64,
    pub intervals: Vec<Interval>,
    #[serde(default)]
    pub tail_ratio: Option<f64>,
}

impl IntervalPartition {
    /// `(r/2^{k+1}, r/2^k]`, `k >= 0`.
    pub fn dyadic(r: f64) -> Self {
        IntervalPartition { scale: r, intervals: vec![Interval::half_open(r / 2.0, r)], tail_ratio: Some(2.0) }
    }

    /// Explicit intervals followed by the tail, down to the first interval
    /// whose right end is below `floor`. Intervals entirely below the
    /// smallest positive distance of a space have empty annuli everywhere.
    pub fn materialize(&self, floor: f64) -> Vec<Interval> {
        let mut out = self.intervals.clone();
        if let (Some(q), Some(lo)) = (self.tail_ratio, self.intervals.iter().map(|t| t.lo).reduce(f64::min)) {
            if q > 1.0 && floor > 0.0 {
                let mut hi = lo;
                while hi >= floor && hi > 0.0 {
                    out.push(Interval::half_open(hi / q, hi));
                    hi /= q;
                }
            }
        }
        out
    }
}

/// Checks the `P^L` or `P^U` clauses and names every violation.
pub fn validate_partition(tau: &IntervalPartition, kind: PartitionKind) -> (bool, Vec<String>) {
    let r = tau.scale;
    let mut diags = Vec::new();
    for (k, t) in tau.intervals.iter().enumerate() {
        if t.is_empty() {
            diags.push(format!("interval {k} {t} is empty"));
            continue;
        }
        if t.lo < 0.0 || (t.lo == 0.0 && t.lo_closed) || t.hi > r {
            diags.push(format!("interval {k} {t} is not inside (0, {r}]"));
        }
        match kind {
            PartitionKind::L if 2.0 * t.lo > t.hi => diags.push(format!("interval {k}: 2 inf > sup")),
            PartitionKind::U if t.hi > 2.0 * t.lo => diags.push(format!("interval {k}: sup > 2 inf")),
            _ => {}
        }
    }
    if let Some(q) = tau.tail_ratio {
        if !(q > 1.0) {
            diags.push(format!("tail ratio {q} must exceed 1"));
        } else if kind == PartitionKind::L && q < 2.0 {
            diags.push(format!("tail ratio {q}: 2 inf > sup"));
        } else if kind == PartitionKind::U && q > 2.0 {
            diags.push(format!("tail ratio {q}: sup > 2 inf"));
        }
    }
    match kind {
        PartitionKind::L => {
            for i in 0..tau.intervals.len() {
                for j in i + 1..tau.intervals.len() {
                    if tau.intervals[i].intersects(&tau.intervals[j]) {
                        diags.push(format!("intervals {i} and {j} overlap"));
                    }
                }
            }
            if tau.tail_ratio.is_some() {
                let lo = tau.intervals.iter().map(|t| t.lo).fold(f64::INFINITY, f64::min);
                for (k, t) in tau.intervals.iter().enumerate() {
                    if t.lo < lo || (t.lo == lo && t.lo_closed) {
                        diags.push(format!("interval {k} overlaps the tail"));
                    }
                }
            }
        }
        PartitionKind::U => {
            if let Some(gap) = coverage_gap(tau) {
                diags.push(format!("union misses (0, {r}] near {gap}"));
            }
        }
    }
    (diags.is_empty(), diags)
}

/// First point of `(0, r]` not covered, if any.
fn coverage_gap(tau: &IntervalPartition) -> Option<f64> {
    let mut ivs: Vec<Interval> = tau.intervals.iter().copied().filter(|t| !t.is_empty()).collect();
    ivs.sort_by(|a, b| a.lo.total_cmp(&b.lo).then(b.lo_closed.cmp(&a.lo_closed)));
    // covered so far: (0, reach] when reach_closed, (0, reach) otherwise
    let (mut reach, mut reach_closed) = match tau.tail_ratio {
        Some(q) if q > 1.0 => (ivs.first().map_or(0.0, |t| t.lo), true),
        _ => (0.0, true),
    };
    for t in &ivs {
        let joins = t.lo < reach || (t.lo == reach && (reach_closed || t.lo_closed));
        if !joins {
            return Some(reach);
        }
        if t.hi > reach || (t.hi == reach && t.hi_closed) {
            reach = t.hi;
            reach_closed = t.hi_closed;
        }
    }
    if reach > tau.scale || (reach == tau.scale && reach_closed) {
        None
    } else {
        Some(reach)
    }
}

/// Kernel values along one neighbor row, both orientations.
struct RowKernel {
    len: usize,
    fwd: Vec<f64>,
    sym: Vec<f64>,
}

fn row_kernel(space: &MetricMeasureSpace, family: &MollifierFamily, delta: f64, x: usize, reach: f64, sym: bool) -> RowKernel {
    let row = space.row(x);
    let len = row.count_within(reach);
    let mut fwd = vec![0.0; len];
    let mut both = if sym { vec![0.0; len] } else { Vec::new() };
    for i in 1..len {
        let y = row.ids[i] as usize;
        let d = row.dists[i];
        fwd[i] = family.eval_at(delta, space, x, y, d);
        if sym {
            both[i] = fwd[i] + family.eval_at(delta, space, y, x, d);
        }
    }
    RowKernel { len, fwd, sym: both }
}

/// `m(A(x,τ)) * ess-inf_{A(x,τ)} rho(x,·)`, 0 on a null annulus.
fn lower_term(space: &MetricMeasureSpace, x: usize, k: &RowKernel, tau: &Interval) -> f64 {
    let row = space.row(x);
    let range = row.range_of(tau);
    let range = range.start..range.end.min(k.len);
    if range.is_empty() {
        return 0.0;
    }
    let mass = row.mass_of_first(range.end) - row.mass_of_first(range.start);
    if mass <= 0.0 {
        return 0.0;
    }
    let mut inf = f64::INFINITY;
    for i in range {
        if space.weight(row.ids[i] as usize) > 0.0 {
            inf = inf.min(k.fwd[i]);
        }
    }
    mass * inf
}

/// `sum_{A(x,τ)} (rho(x,·) + rho(·,x)) w`
fn upper_term(space: &MetricMeasureSpace, x: usize, k: &RowKernel, tau: &Interval) -> f64 {
    let row = space.row(x);
    let range = row.range_of(tau);
    let range = range.start..range.end.min(k.len);
    range.map(|i| k.sym[i] * space.weight(row.ids[i] as usize)).sum()
}

fn require_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(BbmError::InvalidArgument(format!("delta must lie in (0,1), got {delta}")))
    }
}

fn require_valid(tau: &IntervalPartition, kind: PartitionKind) -> Result<()> {
    let (ok, diags) = validate_partition(tau, kind);
    if ok {
        Ok(())
    } else {
        Err(BbmError::InvalidArgument(format!("partition is not {kind:?}-valid: {}", diags.join("; "))))
    }
}

/// Per-interval minima over `E` of the lower terms, summed.
fn lower_for_partitions(
    space: &MetricMeasureSpace,
    e: &SubsetRef,
    family: &MollifierFamily,
    delta: f64,
    parts: &[Vec<Interval>],
) -> Vec<f64> {
    let reach = parts.iter().flatten().map(|t| t.hi).fold(0.0, f64::max);
    let offsets = offsets_of(parts);
    let total = *offsets.last().unwrap();
    // min is exact and order-free, so the parallel fold is deterministic
    let mins = e
        .ids()
        .par_iter()
        .fold(
            || vec![f64::INFINITY; total],
            |mut acc, &x| {
                let k = row_kernel(space, family, delta, x, reach, false);
                for (c, part) in parts.iter().enumerate() {
                    for (j, tau) in part.iter().enumerate() {
                        let v = lower_term(space, x, &k, tau);
                        let slot = &mut acc[offsets[c] + j];
                        *slot = slot.min(v);
                    }
                }
                acc
            },
        )
        .reduce(|| vec![f64::INFINITY; total], |a, b| a.iter().zip(&b).map(|(u, v)| u.min(*v)).collect());
    sum_by_partition(&mins, &offsets, |v| if v.is_finite() { v } else { 0.0 })
}

/// Per-interval maxima over positive-weight `x in B(S, sup τ)`, summed.
fn upper_for_partitions(
    space: &MetricMeasureSpace,
    s: &SubsetRef,
    family: &MollifierFamily,
    delta: f64,
    parts: &[Vec<Interval>],
) -> Vec<f64> {
    let reach = parts.iter().flatten().map(|t| t.hi).fold(0.0, f64::max);
    let offsets = offsets_of(parts);
    let total = *offsets.last().unwrap();
    let to_s = space.distance_to_set(s);
    let xs: Vec<usize> = (0..space.len()).filter(|&x| space.weight(x) > 0.0 && to_s[x] <= reach).collect();
    let maxes = xs
        .par_iter()
        .fold(
            || vec![0.0f64; total],
            |mut acc, &x| {
                let k = row_kernel(space, family, delta, x, reach, true);
                for (c, part) in parts.iter().enumerate() {
                    for (j, tau) in part.iter().enumerate() {
                        if to_s[x] <= tau.hi {
                            let v = upper_term(space, x, &k, tau);
                            let slot = &mut acc[offsets[c] + j];
                            *slot = slot.max(v);
                        }
                    }
                }
                acc
            },
        )
        .reduce(|| vec![0.0; total], |a, b| a.iter().zip(&b).map(|(u, v)| u.max(*v)).collect());
    sum_by_partition(&maxes, &offsets, |v| v)
}

fn offsets_of(parts: &[Vec<Interval>]) -> Vec<usize> {
    let mut offsets = vec![0];
    for p in parts {
        offsets.push(offsets.last().unwrap() + p.len());
    }
    offsets
}

fn sum_by_partition(values: &[f64], offsets: &[usize], f: impl Fn(f64) -> f64) -> Vec<f64> {
    offsets.windows(2).map(|w| values[w[0]..w[1]].iter().map(|&v| f(v)).sum()).collect()
}

fn floor_of(space: &MetricMeasureSpace) -> f64 {
    space.h_min()
}

/// `sum_k min_{x in E} m(A(x,τ_k)) ess-inf_{A(x,τ_k)} rho_δ(x,·)`
pub fn lower_sum(
    space: &MetricMeasureSpace,
    e: &SubsetRef,
    family: &MollifierFamily,
    delta: f64,
    tau: &IntervalPartition,
) -> Result<f64> {
    require_delta(delta)?;
    require_valid(tau, PartitionKind::L)?;
    if e.is_empty() {
        return Ok(0.0);
    }
    Ok(lower_for_partitions(space, e, family, delta, &[tau.materialize(floor_of(space))])[0])
}

/// `sum_k max_{x in B(S, sup τ_k), w(x) > 0} sum_{A(x,τ_k)} (rho(x,·) + rho(·,x)) w`
pub fn upper_sum(
    space: &MetricMeasureSpace,
    s: &SubsetRef,
    family: &MollifierFamily,
    delta: f64,
    tau: &IntervalPartition,
) -> Result<f64> {
    require_delta(delta)?;
    require_valid(tau, PartitionKind::U)?;
    Ok(upper_for_partitions(space, s, family, delta, &[tau.materialize(floor_of(space))])[0])
}

fn scale_offsets(r: f64, budget: usize) -> Vec<f64> {
    (0..=budget).map(|j| r * 0.5f64.powf(j as f64 / 2.0)).collect()
}

/// Finite `P^L` candidates at scale `r`: for each offset scale
/// `s = r 2^{-j/2}` (`j <= budget`), chains with ratio 2, 4 and 8 below `s`
/// and the dyadic chain thinned to every other interval.
pub fn lower_candidates(r: f64, budget: usize, floor: f64) -> Vec<IntervalPartition> {
    let mut out = Vec::new();
    for s in scale_offsets(r, budget) {
        for m in 1..=3 {
            let q = 2f64.powi(m);
            out.push(IntervalPartition {
                scale: r,
                intervals: vec![Interval::half_open(s / q, s)],
                tail_ratio: Some(q),
            });
        }
        let chain = IntervalPartition::dyadic(s).materialize(floor);
        out.push(IntervalPartition {
            scale: r,
            intervals: chain.into_iter().step_by(2).collect(),
            tail_ratio: None,
        });
    }
    out
}

/// Finite `P^U` candidates at scale `r`: a dyadic chain below each offset
/// scale `s`, with `(s, r]` covered by doubling intervals.
pub fn upper_candidates(r: f64, budget: usize) -> Vec<IntervalPartition> {
    scale_offsets(r, budget)
        .into_iter()
        .map(|s| {
            let mut intervals = Vec::new();
            let mut a = s;
            while a < r {
                let b = (2.0 * a).min(r);
                intervals.push(Interval::half_open(a, b));
                a = b;
            }
            intervals.push(Interval::half_open(s / 2.0, s));
            IntervalPartition { scale: r, intervals, tail_ratio: Some(2.0) }
        })
        .collect()
}

/// Best `lower_sum` over [`lower_candidates`]; a lower bound for the
/// supremum over all `P^L` partitions.
pub fn lower_sum_opt(
    space: &MetricMeasureSpace,
    e: &SubsetRef,
    family: &MollifierFamily,
    delta: f64,
    r: f64,
    budget: usize,
) -> Result<f64> {
    require_delta(delta)?;
    if e.is_empty() {
        return Ok(0.0);
    }
    let floor = floor_of(space);
    let parts: Vec<Vec<Interval>> = lower_candidates(r, budget, floor).iter().map(|t| t.materialize(floor)).collect();
    Ok(lower_for_partitions(space, e, family, delta, &parts).into_iter().fold(0.0, f64::max))
}

/// Least `upper_sum` over [`upper_candidates`]; an upper bound for the
/// infimum over all `P^U` partitions.
pub fn upper_sum_opt(
    space: &MetricMeasureSpace,
    s: &SubsetRef,
    family: &MollifierFamily,
    delta: f64,
    r: f64,
    budget: usize,
) -> Result<f64> {
    require_delta(delta)?;
    let floor = floor_of(space);
    let parts: Vec<Vec<Interval>> = upper_candidates(r, budget).iter().map(|t| t.materialize(floor)).collect();
    Ok(upper_for_partitions(space, s, family, delta, &parts).into_iter().fold(f64::INFINITY, f64::min))
}

/// Piecewise constant function on dyadic bins around `base`:
/// `below[k]` on `(base/2^{k+1}, base/2^k]`, `above[k]` on
/// `(2^k base, 2^{k+1} base]`, and `tail` on every bin below the listed ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEnvelope {
    pub base: f64,
    pub below: Vec<f64>,
    #[serde(default)]
    pub above: Vec<f64>,
    #[serde(default)]
    pub tail: f64,
}

impl StepEnvelope {
    pub fn zero(base: f64) -> Self {
        StepEnvelope { base, below: Vec::new(), above: Vec::new(), tail: 0.0 }
    }

    /// `(interval, value)` for every listed bin, smallest first.
    fn bins(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for (k, &v) in self.below.iter().enumerate().rev() {
            let hi = self.base * 0.5f64.powi(k as i32);
            out.push((hi / 2.0, hi, v));
        }
        for (k, &v) in self.above.iter().enumerate() {
            let lo = self.base * 2f64.powi(k as i32);
            out.push((lo, 2.0 * lo, v));
        }
        out
    }

    fn below_lowest(&self) -> f64 {
        self.base * 0.5f64.powi(self.below.len() as i32)
    }
}

/// `∫_{(0, r]} env(t) / t dt`; `+inf` when a positive tail reaches zero.
pub fn envelope_lower_integral(env: &StepEnvelope, r: f64) -> f64 {
    if env.tail > 0.0 && env.below_lowest() < r {
        return f64::INFINITY;
    }
    env.bins()
        .into_iter()
        .filter(|&(lo, _, v)| lo < r && v != 0.0)
        .map(|(lo, hi, v)| v * (hi.min(r) / lo).ln())
        .sum()
}

/// `∫_{(0, r]} env(t) / t dt`, the upper-envelope version.
pub fn envelope_upper_integral(env: &StepEnvelope, r: f64) -> f64 {
    envelope_lower_integral(env, r)
}

/// `∫_{(r, ∞)} env(t) / t^{p+1} dt`
pub fn envelope_decay_integral(env: &StepEnvelope, r: f64, p: f64) -> f64 {
    let mut total = 0.0;
    if env.tail > 0.0 {
        let top = env.below_lowest();
        if r < top {
            total += env.tail * (r.powf(-p) - top.powf(-p)) / p;
        }
    }
    for (lo, hi, v) in env.bins() {
        if hi > r && v != 0.0 {
            let a = lo.max(r);
            total += v * (a.powf(-p) - hi.powf(-p)) / p;
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Envelopes {
    pub lower: StepEnvelope,
    pub upper: StepEnvelope,
    /// Per bin maximum of `rho · m(B(x,4d))`, on bins below and above `base`.
    pub decay: StepEnvelope,
    /// Bins (as `below:k` / `above:k`) with no pair.
    pub empty_bins: Vec<String>,
}

/// Per dyadic bin extrema of `rho_δ(x,x') m(B(x,d))` over pairs with
/// `x in region`, plus the decay envelope `rho_δ(x,x') m(B(x,4d))`.
pub fn envelope_extract(
    space: &MetricMeasureSpace,
    family: &MollifierFamily,
    delta: f64,
    base: f64,
    region: &SubsetRef,
) -> Result<Envelopes> {
    require_delta(delta)?;
    if !(base > 0.0) {
        return Err(BbmError::InvalidArgument(format!("envelope base must be positive, got {base}")));
    }
    let n_below = if space.h_min() > 0.0 && space.h_min() <= base {
        bin_below(base, space.h_min()).unwrap() + 1
    } else {
        0
    };
    let n_above = if space.diameter() > base { bin_above(base, space.diameter()).unwrap() + 1 } else { 0 };
    let reach = family.support(delta).min(space.diameter());
    struct Acc {
        lo_b: Vec<f64>,
        hi_b: Vec<f64>,
        dec_b: Vec<f64>,
        dec_a: Vec<f64>,
        occupied: Vec<bool>,
    }
    let init = || Acc {
        lo_b: vec![f64::INFINITY; n_below],
        hi_b: vec![0.0; n_below],
        dec_b: vec![0.0; n_below],
        dec_a: vec![0.0; n_above],
        occupied: vec![false; n_below],
    };
    // min/max reductions are exact, so the parallel fold is deterministic
    let acc = region
        .ids()
        .par_iter()
        .fold(init, |mut acc, &x| {
            let row = space.row(x);
            let len = row.count_within(reach);
            for i in 1..len {
                let y = row.ids[i] as usize;
                let d = row.dists[i];
                let rho = family.eval_at(delta, space, x, y, d);
                let dec = rho * row.mass_of_first(row.count_within(4.0 * d));
                if let Some(k) = bin_below(base, d) {
                    let v = rho * row.mass_of_first(row.count_within(d));
                    acc.lo_b[k] = acc.lo_b[k].min(v);
                    acc.hi_b[k] = acc.hi_b[k].max(v);
                    acc.dec_b[k] = acc.dec_b[k].max(dec);
                } else if let Some(k) = bin_above(base, d) {
                    acc.dec_a[k] = acc.dec_a[k].max(dec);
                }
            }
            // walk the row bin by bin; pairs beyond the support carry rho = 0
            let mut i = 1;
            while i < row.dists.len() {
                let Some(k) = bin_below(base, row.dists[i]) else { break };
                let end = row.count_within(base * 0.5f64.powi(k as i32));
                if k < n_below {
                    acc.occupied[k] = true;
                    if end > len {
                        acc.lo_b[k] = acc.lo_b[k].min(0.0);
                    }
                }
                i = end;
            }
            acc
        })
        .reduce(init, |mut a, b| {
            for k in 0..n_below {
                a.lo_b[k] = a.lo_b[k].min(b.lo_b[k]);
                a.hi_b[k] = a.hi_b[k].max(b.hi_b[k]);
                a.dec_b[k] = a.dec_b[k].max(b.dec_b[k]);
                a.occupied[k] |= b.occupied[k];
            }
            for k in 0..n_above {
                a.dec_a[k] = a.dec_a[k].max(b.dec_a[k]);
            }
            a
        });
    let mut empty_bins = Vec::new();
    let mut lower = acc.lo_b;
    for (k, v) in lower.iter_mut().enumerate().take(n_below) {
        if !acc.occupied[k] {
            empty_bins.push(format!("below:{k}"));
            *v = 0.0;
        }
    }
    Ok(Envelopes {
        lower: StepEnvelope { base, below: lower, above: Vec::new(), tail: 0.0 },
        upper: StepEnvelope { base, below: acc.hi_b, above: Vec::new(), tail: 0.0 },
        decay: StepEnvelope { base, below: acc.dec_b, above: acc.dec_a, tail: 0.0 },
        empty_bins,
    })
}

/// Inputs of [`limit_admissibility`] besides the space and family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityArgs {
    pub delta_schedule: Vec<f64>,
    pub radius_schedule: Vec<f64>,
    /// `E = B(V, margin)` for every listed margin (0 means `E = V`).
    pub margins: Vec<f64>,
    pub budget: usize,
    pub window: usize,
    /// Lower verdict threshold.
    pub floor: f64,
    /// Upper verdict threshold.
    pub cap: f64,
}

impl AdmissibilityArgs {
    pub fn new(delta_schedule: Vec<f64>, radius_schedule: Vec<f64>) -> Self {
        AdmissibilityArgs { delta_schedule, radius_schedule, margins: vec![0.0], budget: 4, window: 3, floor: 1e-6, cap: 1e6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdmissibilityRow {
    pub delta: f64,
    pub r: f64,
    /// `lower_sum_opt` per margin.
    pub lower: Vec<f64>,
    #[serde(serialize_with = "ser_extended")]
    pub upper: f64,
    #[serde(serialize_with = "ser_extended")]
    pub c_minus: f64,
    #[serde(serialize_with = "ser_extended")]
    pub c_plus: f64,
    #[serde(serialize_with = "ser_extended")]
    pub decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub family: String,
    pub p: f64,
    pub window: usize,
    pub budget: usize,
    pub rows: Vec<AdmissibilityRow>,
    pub i_lower: f64,
    #[serde(serialize_with = "ser_extended")]
    pub i_upper: f64,
    #[serde(serialize_with = "ser_extended")]
    pub c_minus: f64,
    #[serde(serialize_with = "ser_extended")]
    pub c_plus: f64,
    /// Windowed maximum over δ of the decay integral, per radius.
    pub decay_by_radius: Vec<f64>,
    pub lower_admissible: bool,
    pub upper_admissible: bool,
    pub flags: Vec<String>,
    pub label: String,
}

impl AdmissibilityReport {
    /// Decay integral along the δ schedule at the `i`-th radius.
    pub fn decay_along_delta(&self, i: usize) -> Vec<f64> {
        let r = self.rows.iter().map(|row| row.r).collect::<Vec<_>>();
        let target = {
            let mut rs = r.clone();
            rs.dedup();
            rs[i]
        };
        self.rows.iter().filter(|row| row.r == target).map(|row| row.decay).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["delta", "r", "I_L", "I_U", "decay"])?;
        for row in &self.rows {
            let il = row.lower.iter().copied().fold(0.0, f64::max);
            w.write_record([fmt_num(row.delta), fmt_num(row.r), fmt_num(il), fmt_num(row.upper), fmt_num(row.decay)])?;
        }
        let bytes = w.into_inner().map_err(|e| BbmError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Shortest round-trip decimal, `inf`/`-inf`/`nan` for non-finite values.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

fn tail<T: Copy>(v: &[T], w: usize) -> &[T] {
    &v[v.len().saturating_sub(w)..]
}

pub(crate) fn window_min(v: &[f64], w: usize) -> f64 {
    tail(v, w).iter().copied().fold(f64::INFINITY, f64::min)
}

pub(crate) fn window_max(v: &[f64], w: usize) -> f64 {
    tail(v, w).iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn check_schedule(name: &str, s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(BbmError::Config(vec![format!("{name} schedule is empty")]));
    }
    if s.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(BbmError::Config(vec![format!("{name} schedule not decreasing")]));
    }
    Ok(())
}

/// Windowed estimates of `I^L_V`, `I^U_V`, `C^-`, `C^+` and the decay
/// integrals over finite δ and r schedules.
pub fn limit_admissibility(
    space: &MetricMeasureSpace,
    family: &MollifierFamily,
    v: &SubsetRef,
    args: &AdmissibilityArgs,
) -> Result<AdmissibilityReport> {
    check_schedule("delta", &args.delta_schedule)?;
    check_schedule("radius", &args.radius_schedule)?;
    let guard = 4.0 * space.h_min();
    for (name, s) in [("delta", &args.delta_schedule), ("radius", &args.radius_schedule)] {
        let last = *s.last().unwrap();
        if last < guard {
            return Err(BbmError::Resolution { what: format!("{name} schedule floor"), value: last, floor: guard });
        }
    }
    for &d in &args.delta_schedule {
        require_delta(d)?;
    }
    if args.window == 0 || args.margins.is_empty() {
        return Err(BbmError::InvalidArgument("window and margin list must be nonempty".into()));
    }
    let p = match family {
        MollifierFamily::Builtin { p, .. } | MollifierFamily::Expr { p, .. } => *p,
        _ => 1.0,
    };
    let floor = floor_of(space);
    let es: Vec<SubsetRef> = args.margins.iter().map(|&m| if m > 0.0 { space.enlarge(v, m) } else { v.clone() }).collect();
    let base = args.radius_schedule[0];
    let envelopes: Vec<Envelopes> = args
        .delta_schedule
        .iter()
        .map(|&delta| envelope_extract(space, family, delta, base, v))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for &r in &args.radius_schedule {
        let lparts: Vec<Vec<Interval>> =
            lower_candidates(r, args.budget, floor).iter().map(|t| t.materialize(floor)).collect();
        let uparts: Vec<Vec<Interval>> = upper_candidates(r, args.budget).iter().map(|t| t.materialize(floor)).collect();
        for (&delta, env) in args.delta_schedule.iter().zip(&envelopes) {
            let lower: Vec<f64> = es
                .iter()
                .map(|e| lower_for_partitions(space, e, family, delta, &lparts).into_iter().fold(0.0, f64::max))
                .collect();
            let upper = upper_for_partitions(space, v, family, delta, &uparts).into_iter().fold(f64::INFINITY, f64::min);
            rows.push(AdmissibilityRow {
                delta,
                r,
                lower,
                upper,
                c_minus: envelope_lower_integral(&env.lower, r),
                c_plus: envelope_upper_integral(&env.upper, r),
                decay: envelope_decay_integral(&env.decay, r, p),
            });
        }
    }
    let nd = args.delta_schedule.len();
    let w = args.window;
    let per_r = |f: &dyn Fn(&AdmissibilityRow) -> f64, inner_min: bool| -> Vec<f64> {
        rows.chunks(nd)
            .map(|chunk| {
                let vals: Vec<f64> = chunk.iter().map(f).collect();
                if inner_min { window_min(&vals, w) } else { window_max(&vals, w) }
            })
            .collect()
    };
    let i_lower = (0..es.len())
        .map(|m| window_max(&per_r(&|row: &AdmissibilityRow| row.lower[m], true), w))
        .fold(0.0, f64::max);
    let i_upper = window_min(&per_r(&|row: &AdmissibilityRow| row.upper, false), w);
    let c_minus = window_max(&per_r(&|row: &AdmissibilityRow| row.c_minus, true), w);
    let c_plus = window_min(&per_r(&|row: &AdmissibilityRow| row.c_plus, false), w);
    let decay_by_radius = per_r(&|row: &AdmissibilityRow| row.decay, false);
    if !i_upper.is_finite() {
        flags.push("I^U estimate is not finite".into());
    }
    if !c_plus.is_finite() {
        flags.push("C+ diverges at the schedule floor".into());
    }
    Ok(AdmissibilityReport {
        family: family.name(),
        p,
        window: w,
        budget: args.budget,
        rows,
        i_lower,
        i_upper,
        c_minus,
        c_plus,
        decay_by_radius,
        lower_admissible: i_lower >= args.floor && args.floor > 0.0,
        upper_admissible: i_upper.is_finite() && i_upper <= args.cap,
        flags,
        label: "I^L is a lower bound over finitely many P^L candidates; I^U an upper bound over finitely many P^U candidates".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::SpaceGenerator;
    use proptest::prelude::*;

    fn grid(n: usize) -> MetricMeasureSpace {
        MetricMeasureSpace::build(&SpaceGenerator::IntervalGrid { n }).unwrap()
    }

    fn rho3() -> MollifierFamily {
        MollifierFamily::builtin(3, 1.0).unwrap()
    }

    /// Oracle lower sum by direct enumeration of annuli.
    fn brute_lower(s: &MetricMeasureSpace, e: &[usize], f: &MollifierFamily, delta: f64, taus: &[Interval]) -> f64 {
        taus.iter()
            .map(|tau| {
                e.iter()
                    .map(|&x| {
                        let ann: Vec<usize> = (0..s.len()).filter(|&y| tau.contains(s.dist(x, y))).collect();
                        let m: f64 = ann.iter().map(|&y| s.weight(y)).sum();
                        if m == 0.0 {
                            0.0
                        } else {
                            m * ann.iter().map(|&y| f.eval(delta, s, x, y)).fold(f64::INFINITY, f64::min)
                        }
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    }

    /// Oracle upper sum by direct enumeration of annuli.
    fn brute_upper(s: &MetricMeasureSpace, set: &[usize], f: &MollifierFamily, delta: f64, taus: &[Interval]) -> f64 {
        taus.iter()
            .map(|tau| {
                (0..s.len())
                    .filter(|&x| set.iter().any(|&c| s.dist(x, c) <= tau.hi))
                    .map(|x| {
                        (0..s.len())
                            .filter(|&y| tau.contains(s.dist(x, y)))
                            .map(|y| (f.eval(delta, s, x, y) + f.eval(delta, s, y, x)) * s.weight(y))
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max)
            })
            .sum()
    }

    fn dyadic_list(r: f64, depth: usize) -> Vec<Interval> {
        (0..depth).map(|k| Interval::half_open(r / 2f64.powi(k as i32 + 1), r / 2f64.powi(k as i32))).collect()
    }

    #[test]
    fn builtin_examples() {
        let s = grid(5);
        assert!((rho3().eval(0.2, &s, 2, 3) - 1.0 / 0.6).abs() < 1e-12);
        let r5 = MollifierFamily::builtin(5, 1.0).unwrap();
        assert!((r5.eval(0.1, &s, 2, 3) - 1.0 / 10f64.ln()).abs() < 1e-12);
        assert_eq!(rho3().eval(0.2, &s, 2, 4), 0.0);
    }

    #[test]
    fn builtin_closed_forms() {
        let s = grid(5);
        let (x, y, d) = (1, 3, 0.4f64);
        let r1 = MollifierFamily::builtin(1, 2.0).unwrap().eval(0.3, &s, x, y);
        assert!((r1 - 0.3 * d.powf(0.6) / s.ball_mass(x, 1.6)).abs() < 1e-12);
        let r2 = MollifierFamily::builtin(2, 2.0).unwrap().eval(0.5, &s, x, y);
        assert!((r2 - (0.4f64 / 0.5).powi(2) / s.ball_mass(x, 0.5)).abs() < 1e-12);
        let r4 = MollifierFamily::builtin(4, 2.0).unwrap().eval(0.5, &s, x, y);
        assert!((r4 - (0.4f64 / 0.5).powi(2) / s.ball_mass(x, 0.4)).abs() < 1e-12);
    }

    #[test]
    fn spec_json_forms() {
        let b: MollifierSpec = serde_json::from_str(r#"{"family": 3, "p": 1}"#).unwrap();
        assert!(matches!(b.build(1.0).unwrap(), MollifierFamily::Builtin { kappa: 3, .. }));
        let t: MollifierSpec =
            serde_json::from_str(r#"{"family": "table", "base": 0.4, "bins": {"0.1": [1.0, 0.5]}}"#).unwrap();
        let fam = t.build(1.0).unwrap();
        let s = grid(5);
        // d = 0.4 sits in bin 0, d = 0.2 in bin 1
        assert!((fam.eval(0.1, &s, 0, 2) - 1.0 / s.ball_mass(0, 0.4)).abs() < 1e-12);
        assert!((fam.eval(0.1, &s, 0, 1) - 0.5 / s.ball_mass(0, 0.2)).abs() < 1e-12);
        let e: MollifierSpec = serde_json::from_str(r#"{"family": "expr", "expr": "1 / mb", "support": 0.2}"#).unwrap();
        let fam = e.build(1.0).unwrap();
        assert!((fam.eval(0.2, &s, 2, 3) - rho3().eval(0.2, &s, 2, 3)).abs() < 1e-12);
        assert!(serde_json::from_str::<MollifierSpec>(r#"{"family": 3, "q": 1}"#).is_err());
        assert!(MollifierSpec::builtin(6, 1.0).build(1.0).is_err());
    }

    #[test]
    fn bins_are_half_open() {
        assert_eq!(bin_below(1.0, 1.0), Some(0));
        assert_eq!(bin_below(1.0, 0.5), Some(1));
        assert_eq!(bin_below(1.0, 0.5000001), Some(0));
        assert_eq!(bin_below(0.2, 0.1), Some(1));
        assert_eq!(bin_below(1.0, 1.1), None);
        assert_eq!(bin_above(1.0, 2.0), Some(0));
        assert_eq!(bin_above(1.0, 2.1), Some(1));
        assert_eq!(bin_above(0.2, 0.8), Some(1));
    }

    #[test]
    fn partition_validation() {
        let r = 0.2;
        assert!(validate_partition(&IntervalPartition::dyadic(r), PartitionKind::L).0);
        assert!(validate_partition(&IntervalPartition::dyadic(r), PartitionKind::U).0);
        let bad = IntervalPartition { scale: r, intervals: vec![Interval::half_open(0.3 * r, 0.5 * r)], tail_ratio: None };
        let (ok, diags) = validate_partition(&bad, PartitionKind::L);
        assert!(!ok);
        assert!(diags[0].contains("2 inf > sup"), "{diags:?}");
        let gap = IntervalPartition {
            scale: r,
            intervals: vec![Interval::half_open(0.15, 0.2), Interval::half_open(0.05, 0.1)],
            tail_ratio: Some(2.0),
        };
        let (ok, diags) = validate_partition(&gap, PartitionKind::U);
        assert!(!ok && diags.iter().any(|d| d.contains("misses")), "{diags:?}");
        let overlap = IntervalPartition {
            scale: r,
            intervals: vec![Interval::half_open(0.05, 0.2), Interval::half_open(0.02, 0.06)],
            tail_ratio: None,
        };
        assert!(!validate_partition(&overlap, PartitionKind::L).0);
        for t in lower_candidates(r, 4, 0.01) {
            assert!(validate_partition(&t, PartitionKind::L).0, "{t:?}");
        }
        for t in upper_candidates(r, 4) {
            assert!(validate_partition(&t, PartitionKind::U).0, "{t:?}");
        }
    }

    #[test]
    fn line5_lower_sum_examples() {
        let s = grid(5);
        let all = SubsetRef::all(&s);
        let tau = IntervalPartition::dyadic(0.2);
        let v = lower_sum(&s, &all, &rho3(), 0.2, &tau).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert!((v - brute_lower(&s, &[0, 1, 2, 3, 4], &rho3(), 0.2, &dyadic_list(0.2, 8))).abs() < 1e-12);
        assert_eq!(lower_sum(&s, &all, &MollifierFamily::Zero, 0.2, &tau).unwrap(), 0.0);
        let mid = SubsetRef::new(&s, [2]).unwrap();
        assert!((lower_sum(&s, &mid, &rho3(), 0.2, &tau).unwrap() - 0.4 / 0.6).abs() < 1e-12);
    }

    #[test]
    fn line5_upper_sum_examples() {
        let s = grid(5);
        let all = SubsetRef::all(&s);
        let tau = IntervalPartition::dyadic(0.2);
        let v = upper_sum(&s, &all, &rho3(), 0.2, &tau).unwrap();
        assert!((v - 1.5).abs() < 1e-12, "{v}");
        assert!((v - brute_upper(&s, &[0, 1, 2, 3, 4], &rho3(), 0.2, &dyadic_list(0.2, 8))).abs() < 1e-12);
        assert_eq!(upper_sum(&s, &all, &MollifierFamily::Zero, 0.2, &tau).unwrap(), 0.0);
        let mid = SubsetRef::new(&s, [2]).unwrap();
        assert!((upper_sum(&s, &mid, &rho3(), 0.2, &tau).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_partition_rejected_by_sums() {
        let s = grid(5);
        let bad = IntervalPartition { scale: 0.2, intervals: vec![Interval::half_open(0.06, 0.1)], tail_ratio: None };
        assert!(lower_sum(&s, &SubsetRef::all(&s), &rho3(), 0.2, &bad).is_err());
    }

    #[test]
    fn optimized_sum_examples() {
        let s = grid(5);
        let all = SubsetRef::all(&s);
        assert!(lower_sum_opt(&s, &all, &rho3(), 0.2, 0.2, 4).unwrap() >= 0.5 - 1e-12);
        assert_eq!(lower_sum_opt(&s, &all, &MollifierFamily::Zero, 0.2, 0.2, 4).unwrap(), 0.0);
        assert_eq!(lower_sum_opt(&s, &all, &rho3(), 0.2, 0.05, 4).unwrap(), 0.0);
        assert!(upper_sum_opt(&s, &all, &rho3(), 0.2, 0.2, 4).unwrap() <= 1.5 + 1e-12);
        assert_eq!(upper_sum_opt(&s, &all, &MollifierFamily::Zero, 0.2, 0.2, 4).unwrap(), 0.0);
        let one = MetricMeasureSpace::build(&SpaceGenerator::Explicit { matrix: vec![vec![0.0]], weights: None }).unwrap();
        assert_eq!(upper_sum_opt(&one, &SubsetRef::all(&one), &rho3(), 0.5, 0.5, 4).unwrap(), 0.0);
    }

    #[test]
    fn line5_envelope_matches_oracle() {
        let s = grid(5);
        let env = envelope_extract(&s, &rho3(), 0.2, 0.2, &SubsetRef::all(&s)).unwrap();
        // bin (0.1, 0.2] holds the neighbor pairs; rho3 * m(B(x,0.2)) ranges over m(B(x,0.2))/m(B(x,0.2)) = 1
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for x in 0..5 {
            for y in 0..5 {
                let d = s.dist(x, y);
                if d > 0.1 && d <= 0.2 {
                    let v = rho3().eval(0.2, &s, x, y) * s.ball_mass(x, d);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        assert!((env.lower.below[0] - lo).abs() < 1e-12);
        assert!((env.upper.below[0] - hi).abs() < 1e-12);
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        let zero = envelope_extract(&s, &MollifierFamily::Zero, 0.2, 0.2, &SubsetRef::all(&s)).unwrap();
        assert!(zero.upper.below.iter().chain(&zero.decay.above).all(|&v| v == 0.0));
    }

    #[test]
    fn circle_rho5_envelope_bounds() {
        let s = MetricMeasureSpace::build(&SpaceGenerator::CircleGrid { n: 4000 }).unwrap();
        let delta: f64 = 0.01;
        let r5 = MollifierFamily::builtin(5, 1.0).unwrap();
        let env = envelope_extract(&s, &r5, delta, 1.0, &SubsetRef::new(&s, [0, 1000]).unwrap()).unwrap();
        let l = delta.ln().abs();
        for k in 0..env.upper.below.len() {
            let lo = 0.5f64.powi(k as i32 + 1);
            if lo >= delta && lo < 0.5 {
                assert!(env.lower.below[k] >= 1.0 / (8.0 * l) - 1e-12, "bin {k}");
                assert!(env.upper.below[k] <= 1.0 / l + 1e-12, "bin {k}");
            }
        }
    }

    #[test]
    fn envelope_integral_examples() {
        let env = StepEnvelope { base: 1.0, below: vec![1.0, 1.0, 0.0], above: vec![], tail: 0.0 };
        assert!((envelope_lower_integral(&env, 1.0) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(envelope_lower_integral(&StepEnvelope::zero(1.0), 1.0), 0.0);
        let every = StepEnvelope { base: 1.0, below: vec![2.0; 4], above: vec![], tail: 2.0 };
        assert_eq!(envelope_lower_integral(&every, 1.0), f64::INFINITY);
        let top = StepEnvelope { base: 1.0, below: vec![1.0], above: vec![], tail: 0.0 };
        assert!((envelope_upper_integral(&top, 1.0) - 2f64.ln()).abs() < 1e-12);
        let harmonic = StepEnvelope { base: 1.0, below: (1..=6).map(|k| 1.0 / k as f64).collect(), above: vec![], tail: 0.0 };
        let expected: f64 = (1..=6).map(|k| 2f64.ln() / k as f64).sum();
        assert!((envelope_upper_integral(&harmonic, 1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn decay_integral_examples() {
        let unit = StepEnvelope { base: 1.0, below: vec![1.0; 30], above: vec![], tail: 1.0 };
        assert!((envelope_decay_integral(&unit, 0.5, 1.0) - 1.0).abs() < 1e-12);
        assert_eq!(envelope_decay_integral(&StepEnvelope::zero(1.0), 0.5, 1.0), 0.0);
        let bump = StepEnvelope { base: 1.0, below: vec![], above: vec![1.0], tail: 0.0 };
        assert_eq!(envelope_decay_integral(&bump, 2.0, 1.0), 0.0);
        assert!((envelope_decay_integral(&bump, 1.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_family_not_lower_admissible() {
        let s = grid(101);
        let args = AdmissibilityArgs::new(vec![0.2, 0.1, 0.05], vec![0.2, 0.1, 0.05]);
        let rep = limit_admissibility(&s, &MollifierFamily::Zero, &SubsetRef::all(&s), &args).unwrap();
        assert_eq!((rep.i_lower, rep.i_upper), (0.0, 0.0));
        assert!(!rep.lower_admissible);
    }

    #[test]
    fn resolution_guard() {
        let s = grid(101);
        let args = AdmissibilityArgs::new(vec![0.1, 0.02], vec![0.1, 0.05]);
        let err = limit_admissibility(&s, &rho3(), &SubsetRef::all(&s), &args).unwrap_err();
        assert!(matches!(err, BbmError::Resolution { .. }));
        let args = AdmissibilityArgs::new(vec![0.1, 0.2], vec![0.1, 0.05]);
        assert!(limit_admissibility(&s, &rho3(), &SubsetRef::all(&s), &args).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn sums_match_brute_force(
            weights in prop::collection::vec(0.1f64..2.0, 3..9),
            kappa in 1u8..=5,
            delta in 0.05f64..0.9,
            r in 0.1f64..0.9,
        ) {
            let n = weights.len();
            let s = MetricMeasureSpace::build(&SpaceGenerator::WeightedInterval { n, weights }).unwrap();
            let f = MollifierFamily::builtin(kappa, 1.5).unwrap();
            let all: Vec<usize> = (0..n).collect();
            let tau = IntervalPartition::dyadic(r);
            let list = dyadic_list(r, 12);
            let l = lower_sum(&s, &SubsetRef::all(&s), &f, delta, &tau).unwrap();
            prop_assert!((l - brute_lower(&s, &all, &f, delta, &list)).abs() <= 1e-12 * l.max(1.0));
            let u = upper_sum(&s, &SubsetRef::all(&s), &f, delta, &tau).unwrap();
            prop_assert!((u - brute_upper(&s, &all, &f, delta, &list)).abs() <= 1e-12 * u.max(1.0));
            prop_assert!(l <= u + 1e-12);
        }

        #[test]
        fn builtins_nonnegative_finite(n in 2usize..40, kappa in 1u8..=5, p in 1.0f64..3.0, delta in 0.001f64..0.999) {
            let s = grid(n);
            let f = MollifierFamily::builtin(kappa, p).unwrap();
            for x in 0..n {
                for y in 0..n {
                    if x != y {
                        let v = f.eval(delta, &s, x, y);
                        prop_assert!(v >= 0.0 && v.is_finite());
                    }
                }
            }
        }

        #[test]
        fn scale_covariance(n in 3usize..15, kappa in 1u8..=5, c in 0.1f64..10.0, delta in 0.05f64..0.9) {
            let s = grid(n);
            let t = s.rescaled(c).unwrap();
            let f = MollifierFamily::builtin(kappa, 1.0).unwrap();
            for x in 0..n {
                for y in 0..n {
                    if x != y {
                        let a = f.eval(delta, &s, x, y);
                        prop_assert!((f.eval(delta, &t, x, y) - a / c).abs() <= 1e-12 * a.max(1.0) / c);
                    }
                }
            }
            let tau = IntervalPartition::dyadic(0.5);
            let la = lower_sum(&s, &SubsetRef::all(&s), &f, delta, &tau).unwrap();
            let lb = lower_sum(&t, &SubsetRef::all(&t), &f, delta, &tau).unwrap();
            prop_assert!((la - lb).abs() <= 1e-12 * la.max(1.0));
            let ua = upper_sum(&s, &SubsetRef::all(&s), &f, delta, &tau).unwrap();
            let ub = upper_sum(&t, &SubsetRef::all(&t), &f, delta, &tau).unwrap();
            prop_assert!((ua - ub).abs() <= 1e-12 * ua.max(1.0));
        }

        #[test]
        fn opt_sums_monotone_in_budget(n in 5usize..40, kappa in 1u8..=5, delta in 0.05f64..0.5, b in 0usize..4) {
            let s = grid(n);
            let f = MollifierFamily::builtin(kappa, 1.0).unwrap();
            let all = SubsetRef::all(&s);
            let l0 = lower_sum_opt(&s, &all, &f, delta, 0.4, b).unwrap();
            let l1 = lower_sum_opt(&s, &all, &f, delta, 0.4, b + 1).unwrap();
            prop_assert!(l1 >= l0);
            let u0 = upper_sum_opt(&s, &all, &f, delta, 0.4, b).unwrap();
            let u1 = upper_sum_opt(&s, &all, &f, delta, 0.4, b + 1).unwrap();
            prop_assert!(u1 <= u0);
        }

        #[test]
        fn envelope_sandwich(n in 4usize..30, kappa in 1u8..=5, delta in 0.05f64..0.9, base in 0.1f64..1.0) {
            let s = grid(n);
            let f = MollifierFamily::builtin(kappa, 1.0).unwrap();
            let env = envelope_extract(&s, &f, delta, base, &SubsetRef::all(&s)).unwrap();
            for x in 0..n {
                for y in 0..n {
                    let d = s.dist(x, y);
                    if let Some(k) = bin_below(base, d) {
                        if k < env.lower.below.len() {
                            let v = f.eval(delta, &s, x, y) * s.ball_mass(x, d);
                            prop_assert!(env.lower.below[k] <= v + 1e-12);
                            prop_assert!(v <= env.upper.below[k] + 1e-12);
                        }
                    }
                }
            }
        }

        #[test]
        fn annulus_additivity(n in 3usize..30, x in 0usize..30, a in 0.0f64..0.5, b in 0.0f64..0.5, c in 0.0f64..0.5) {
            let s = grid(n);
            let x = x % n;
            let mut v = [a, b, c];
            v.sort_by(f64::total_cmp);
            let whole = s.annulus_mass(x, &Interval::half_open(v[0], v[2]));
            let parts = s.annulus_mass(x, &Interval::half_open(v[0], v[1])) + s.annulus_mass(x, &Interval::half_open(v[1], v[2]));
            prop_assert!((whole - parts).abs() < 1e-12);
            prop_assert_eq!(s.ball(x, v[2]), s.annulus(x, &Interval::closed(0.0, v[2])));
        }
    }
}
