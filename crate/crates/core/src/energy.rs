//! Local Lipschitz fields, Cheeger-energy brackets, the averaging operator
//! `A_p` and the Riesz potential `R_p`.

use std::ops::{Deref, DerefMut};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BbmError, Result};
use crate::regularity::ser_extended;
use crate::space::{Geometry, MetricMeasureSpace, SubsetRef};

/// One real value per atom.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalarField(pub Vec<f64>);

impl ScalarField {
    pub fn constant(n: usize, c: f64) -> Self {
        ScalarField(vec![c; n])
    }

    pub fn from_coords(space: &MetricMeasureSpace, f: impl Fn([f64; 2]) -> f64) -> Self {
        ScalarField((0..space.len()).map(|i| f(space.coords(i))).collect())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(BbmError::InvalidArgument(format!("field value at atom {i} is {}", self.0[i]))),
            None => Ok(()),
        }
    }

    /// `(sum_{x in s} |self - other|^p w)^{1/p}`
    pub fn lp_distance(&self, other: &ScalarField, space: &MetricMeasureSpace, s: &SubsetRef, p: f64) -> f64 {
        s.iter()
            .map(|x| (self[x] - other[x]).abs().powf(p) * space.weight(x))
            .sum::<f64>()
            .powf(1.0 / p)
    }
}

impl Deref for ScalarField {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for ScalarField {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

/// Finite pseudometric target `(Y, d_Y)`.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricTarget {
    /// Points of the real line.
    Real(Vec<f64>),
    /// Points of a grid geometry, for example the identity into a circle.
    Geometry(Geometry),
    /// Row-major pseudometric matrix.
    Matrix { n: usize, dist: Vec<f64> },
}

impl MetricTarget {
    /// Validates a pseudometric matrix: symmetric, zero diagonal, triangle
    /// inequality. Distinct points may coincide.
    pub fn matrix(n: usize, dist: Vec<f64>) -> Result<Self> {
        if dist.len() != n * n {
            return Err(BbmError::InvalidArgument(format!("expected {} target distances, got {}", n * n, dist.len())));
        }
        let d = |i: usize, j: usize| dist[i * n + j];
        for i in 0..n {
            if d(i, i) != 0.0 {
                return Err(BbmError::InvalidArgument(format!("target diagonal nonzero at {i}")));
            }
            for j in 0..n {
                if !(d(i, j) >= 0.0 && d(i, j).is_finite()) {
                    return Err(BbmError::InvalidArgument(format!("target distance ({i},{j}) is {}", d(i, j))));
                }
                if (d(i, j) - d(j, i)).abs() > 1e-12 {
                    return Err(BbmError::Asymmetric { i, j, dij: d(i, j), dji: d(j, i) });
                }
                for k in 0..n {
                    if d(i, k) > d(i, j) + d(j, k) + 1e-12 {
                        return Err(BbmError::TriangleViolation { i, j, k, dik: d(i, k), via: d(i, j) + d(j, k) });
                    }
                }
            }
        }
        Ok(MetricTarget::Matrix { n, dist })
    }

    pub fn len(&self) -> usize {
        match self {
            MetricTarget::Real(v) => v.len(),
            MetricTarget::Geometry(g) => g.len(),
            MetricTarget::Matrix { n, .. } => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn dist(&self, a: usize, b: usize) -> f64 {
        match self {
            MetricTarget::Real(v) => (v[a] - v[b]).abs(),
            MetricTarget::Geometry(g) => g.dist(a, b),
            MetricTarget::Matrix { n, dist } => dist[a * n + b],
        }
    }
}

/// Map from atoms into a metric target.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricMap {
    assign: Vec<usize>,
    target: MetricTarget,
}

impl MetricMap {
    pub fn new(assign: Vec<usize>, target: MetricTarget) -> Result<Self> {
        if let Some(&bad) = assign.iter().find(|&&t| t >= target.len()) {
            return Err(BbmError::InvalidArgument(format!("target id {bad} out of range")));
        }
        Ok(MetricMap { assign, target })
    }

    /// Real-valued field viewed as a map into the line.
    pub fn scalar(u: &ScalarField) -> Self {
        MetricMap { assign: (0..u.len()).collect(), target: MetricTarget::Real(u.0.clone()) }
    }

    /// Identity of a space into its own geometry.
    pub fn identity(space: &MetricMeasureSpace) -> Self {
        MetricMap { assign: (0..space.len()).collect(), target: MetricTarget::Geometry(space.geometry().clone()) }
    }

    pub fn len(&self) -> usize {
        self.assign.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assign.is_empty()
    }

    pub fn target(&self) -> &MetricTarget {
        &self.target
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assign
    }

    /// Values per atom when the target is the real line.
    pub fn scalar_values(&self) -> Option<ScalarField> {
        match &self.target {
            MetricTarget::Real(v) => Some(ScalarField(self.assign.iter().map(|&t| v[t]).collect())),
            _ => None,
        }
    }

    /// `d_f(x, x') = d_Y(f(x), f(x'))`
    #[inline]
    pub fn d_f(&self, x: usize, y: usize) -> f64 {
        self.target.dist(self.assign[x], self.assign[y])
    }

    /// Difference quotient `Q_f(x, x')`, zero on the diagonal.
    #[inline]
    pub fn q(&self, space: &MetricMeasureSpace, x: usize, y: usize) -> f64 {
        if x == y {
            0.0
        } else {
            self.d_f(x, y) / space.dist(x, y)
        }
    }

    /// `phi o f` for a dictionary member.
    pub fn compose(&self, member: &DictMember) -> ScalarField {
        ScalarField(self.assign.iter().map(|&t| member.eval(&self.target, t)).collect())
    }

    pub fn check_len(&self, space: &MetricMeasureSpace) -> Result<()> {
        if self.len() == space.len() {
            Ok(())
        } else {
            Err(BbmError::InvalidArgument(format!("map has {} atoms, space has {}", self.len(), space.len())))
        }
    }
}

/// Bounded 1-Lipschitz function on the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DictMember {
    /// `t -> min(d_Y(center, t), cap)`
    CappedDistance { center: usize, cap: f64 },
    /// Explicit value per target point.
    Table { values: Vec<f64> },
}

impl DictMember {
    #[inline]
    pub fn eval(&self, target: &MetricTarget, t: usize) -> f64 {
        match self {
            DictMember::CappedDistance { center, cap } => target.dist(*center, t).min(*cap),
            DictMember::Table { values } => values[t],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzDictionary {
    members: Vec<DictMember>,
    cap: f64,
}

impl LipschitzDictionary {
    /// `size` capped distance functions with centers spread evenly over the
    /// target (by value for real targets, by index otherwise). Capped
    /// distances are 1-Lipschitz by the triangle inequality of the target.
    pub fn capped_distance(target: &MetricTarget, size: usize, cap: f64) -> Result<Self> {
        if size == 0 || target.is_empty() {
            return Err(BbmError::InvalidArgument("dictionary needs at least one member and target point".into()));
        }
        if !(cap > 0.0) {
            return Err(BbmError::InvalidArgument(format!("cap must be positive, got {cap}")));
        }
        let t = target.len();
        let order: Vec<usize> = match target {
            MetricTarget::Real(v) => {
                let mut o: Vec<usize> = (0..t).collect();
                o.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
                o
            }
            _ => (0..t).collect(),
        };
        let members = (0..size)
            .map(|j| DictMember::CappedDistance { center: order[j * t / size], cap })
            .collect();
        Ok(LipschitzDictionary { members, cap })
    }

    /// Checks each member exhaustively over target pairs and against the cap.
    pub fn new(target: &MetricTarget, members: Vec<DictMember>, cap: f64) -> Result<Self> {
        let t = target.len();
        for (k, m) in members.iter().enumerate() {
            if let DictMember::Table { values } = m {
                if values.len() != t {
                    return Err(BbmError::InvalidArgument(format!("member {k} has {} values for {t} targets", values.len())));
                }
            }
            if let DictMember::CappedDistance { center, .. } = m {
                if *center >= t {
                    return Err(BbmError::InvalidArgument(format!("member {k} center {center} out of range")));
                }
            }
            for a in 0..t {
                let fa = m.eval(target, a);
                if !(fa.abs() <= cap) {
                    return Err(BbmError::InvalidArgument(format!("member {k} exceeds cap {cap} at target {a}")));
                }
                for b in a + 1..t {
                    let slack = 1e-12 * (1.0 + fa.abs());
                    if (fa - m.eval(target, b)).abs() > target.dist(a, b) + slack {
                        return Err(BbmError::InvalidArgument(format!(
                            "member {k} is not 1-Lipschitz on targets ({a},{b})"
                        )));
                    }
                }
            }
        }
        Ok(LipschitzDictionary { members, cap })
    }

    pub fn members(&self) -> &[DictMember] {
        &self.members
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Energy mass per atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnergyDensity(pub Vec<f64>);

impl EnergyDensity {
    /// `c * m`
    pub fn from_weights(space: &MetricMeasureSpace, c: f64) -> Self {
        EnergyDensity(space.weights().iter().map(|w| c * w).collect())
    }

    /// Spreads each region's energy over the region proportionally to mass.
    pub fn from_regions(space: &MetricMeasureSpace, regions: &[SubsetRef], energies: &[f64]) -> Self {
        let mut e = vec![0.0; space.len()];
        for (region, &value) in regions.iter().zip(energies) {
            let m = space.measure(region);
            if m > 0.0 {
                for x in region.iter() {
                    e[x] += value * space.weight(x) / m;
                }
            }
        }
        EnergyDensity(e)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn mass_of(&self, s: &SubsetRef) -> f64 {
        s.iter().map(|x| self.0[x]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyEstimate {
    #[serde(serialize_with = "ser_extended")]
    pub lower: f64,
    #[serde(serialize_with = "ser_extended")]
    pub upper: f64,
    pub method: String,
    pub p: f64,
    pub h: f64,
}

/// `max_{x' in B(x,h), x' != x} num(x') / d(x,x')`, 0 when no such `x'`.
#[inline]
fn local_lip(space: &MetricMeasureSpace, x: usize, h: f64, num: impl Fn(usize) -> f64) -> f64 {
    let row = space.row(x);
    let k = row.count_within(h);
    let mut best: f64 = 0.0;
    for i in 1..k {
        let j = row.ids[i] as usize;
        best = best.max(num(j) / row.dists[i]);
    }
    best
}

/// `lip_h[u](x)`: largest difference quotient to atoms within `h`.
pub fn lip_field(space: &MetricMeasureSpace, u: &[f64], h: f64) -> ScalarField {
    ScalarField(
        (0..space.len())
            .into_par_iter()
            .map(|x| local_lip(space, x, h, |j| (u[j] - u[x]).abs()))
            .collect(),
    )
}

/// `lip_h[f](x)` for a metric map.
pub fn lip_map(space: &MetricMeasureSpace, f: &MetricMap, h: f64) -> ScalarField {
    ScalarField((0..space.len()).into_par_iter().map(|x| local_lip(space, x, h, |j| f.d_f(x, j))).collect())
}

/// Global `Lip` of `u` over pairs of `s`; 0 for fewer than two atoms.
pub fn lip_constant(space: &MetricMeasureSpace, u: &[f64], s: &SubsetRef) -> f64 {
    let ids = s.ids();
    ids.par_iter()
        .enumerate()
        .map(|(a, &x)| {
            ids[a + 1..].iter().map(|&y| (u[x] - u[y]).abs() / space.dist(x, y)).fold(0.0, f64::max)
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0, f64::max)
}

fn sum_lip_power(space: &MetricMeasureSpace, o: &SubsetRef, lip: &[f64], p: f64) -> f64 {
    o.iter().map(|x| lip[x].powf(p) * space.weight(x)).sum()
}

fn check_energy_args(p: f64, h: f64) -> Result<()> {
    if p < 1.0 || !(h > 0.0) {
        return Err(BbmError::InvalidArgument(format!("need p >= 1 and h > 0, got p = {p}, h = {h}")));
    }
    Ok(())
}

/// Upper bound for the scalar relaxed energy of `u` on `o`: the least
/// `sum lip_h[v]^p w` over `u` and the given candidates. Candidates farther
/// than `tol` from `u` in `L^p(o)` are rejected.
#[allow(clippy::too_many_arguments)]
pub fn scalar_energy(
    space: &MetricMeasureSpace,
    o: &SubsetRef,
    u: &ScalarField,
    p: f64,
    h: f64,
    candidates: &[ScalarField],
    tol: f64,
) -> Result<EnergyEstimate> {
    check_energy_args(p, h)?;
    let mut best = sum_lip_power(space, o, &lip_field(space, u, h), p);
    let mut arg = 0;
    for (k, v) in candidates.iter().enumerate() {
        let distance = v.lp_distance(u, space, o, p);
        if !(distance <= tol) {
            return Err(BbmError::CandidateTooFar { index: k + 1, distance, tol });
        }
        let e = sum_lip_power(space, o, &lip_field(space, v, h), p);
        if e < best {
            best = e;
            arg = k + 1;
        }
    }
    Ok(EnergyEstimate {
        lower: 0.0,
        upper: best,
        method: format!("min over {} candidates of sum lip_h^p w, argmin candidate {arg}", candidates.len() + 1),
        p,
        h,
    })
}

/// Bracket for the metric-valued energy of `f` on `o`.
///
/// The lower value sums, over the disjoint regions, the best dictionary
/// post-composition energy; the upper value is `sum (lip_h f)^p w` over `o`.
pub fn metric_energy(
    space: &MetricMeasureSpace,
    o: &SubsetRef,
    f: &MetricMap,
    p: f64,
    h: f64,
    dict: &LipschitzDictionary,
    regions: &[SubsetRef],
) -> Result<EnergyEstimate> {
    check_energy_args(p, h)?;
    f.check_len(space)?;
    let (lower, per_region) = metric_energy_regions(space, o, f, p, h, dict, regions)?;
    let upper = sum_lip_power(space, o, &lip_map(space, f, h), p);
    let args: Vec<String> = per_region.iter().map(|(_, k)| k.to_string()).collect();
    Ok(EnergyEstimate {
        lower,
        upper,
        method: format!(
            "dictionary of {} over {} regions, argmax member per region [{}]; upper = sum (lip_h f)^p w",
            dict.len(),
            regions.len(),
            args.join(",")
        ),
        p,
        h,
    })
}

/// Per-region dictionary lower bounds `(energy, argmax member)` and their sum.
#[allow(clippy::type_complexity)]
pub fn metric_energy_regions(
    space: &MetricMeasureSpace,
    o: &SubsetRef,
    f: &MetricMap,
    p: f64,
    h: f64,
    dict: &LipschitzDictionary,
    regions: &[SubsetRef],
) -> Result<(f64, Vec<(f64, usize)>)> {
    let mut owner = vec![false; space.len()];
    for region in regions {
        for x in region.iter() {
            if owner[x] {
                return Err(BbmError::OverlappingRegions(x));
            }
            if !o.contains(x) {
                return Err(BbmError::InvalidArgument(format!("region atom {x} lies outside the domain")));
            }
            owner[x] = true;
        }
    }
    let per_region: Vec<(f64, usize)> = regions
        .iter()
        .map(|region| {
            let values: Vec<f64> = dict
                .members()
                .par_iter()
                .map(|m| {
                    let g = f.compose(m);
                    region
                        .iter()
                        .map(|x| local_lip(space, x, h, |j| (g[j] - g[x]).abs()).powf(p) * space.weight(x))
                        .sum::<f64>()
                })
                .collect();
            let mut best = (0.0, 0);
            for (k, v) in values.into_iter().enumerate() {
                if v > best.0 {
                    best = (v, k);
                }
            }
            best
        })
        .collect();
    Ok((per_region.iter().map(|r| r.0).sum(), per_region))
}

/// `A_p(x, r) = e(B(x,r)) / m(B(x,r))`, 0 when the ball is null.
pub fn averaging_ap(space: &MetricMeasureSpace, e: &EnergyDensity, x: usize, r: f64) -> f64 {
    let row = space.row(x);
    let k = row.count_within(r);
    let m = row.mass_of_first(k);
    if m > 0.0 {
        row.ids[..k].iter().map(|&j| e.0[j as usize]).sum::<f64>() / m
    } else {
        0.0
    }
}

/// `R_p(x, r) = (1/3) sum_k (2/3)^k A_p(x, r/2^k)`.
///
/// Once `B(x, r/2^K) = {x}` every later term is `A = e(x)/w(x)`, so the
/// remaining series is `(2/3)^K A` exactly; the result carries no
/// truncation error and any positive `tol` is met.
pub fn riesz_rp(space: &MetricMeasureSpace, e: &EnergyDensity, x: usize, r: f64, tol: f64) -> Result<f64> {
    if !(r > 0.0) || !(tol > 0.0) {
        return Err(BbmError::InvalidArgument(format!("need r > 0 and tol > 0, got r = {r}, tol = {tol}")));
    }
    Ok(riesz_unchecked(space, e, x, r))
}

pub(crate) fn riesz_unchecked(space: &MetricMeasureSpace, e: &EnergyDensity, x: usize, r: f64) -> f64 {
    let row = space.row(x);
    let mut k = row.count_within(r);
    let mut energy: f64 = row.ids[..k].iter().map(|&j| e.0[j as usize]).sum();
    let mut radius = r;
    let mut weight = 1.0 / 3.0;
    let mut total = 0.0;
    while k > 1 {
        let m = row.mass_of_first(k);
        if m > 0.0 {
            total += weight * energy / m;
        }
        radius *= 0.5;
        let next = row.count_within(radius);
        energy -= row.ids[next..k].iter().map(|&j| e.0[j as usize]).sum::<f64>();
        k = next;
        weight *= 2.0 / 3.0;
    }
    let w = space.weight(x);
    let stable = if w > 0.0 { e.0[x] / w } else { 0.0 };
    // (1/3) sum_{j >= K} (2/3)^j = (2/3)^K = 3 * weight
    total + 3.0 * weight * stable
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointwiseCheck {
    #[serde(serialize_with = "ser_extended")]
    pub constant: f64,
    pub witness: Option<(usize, usize)>,
}

/// Smallest `C` with `Q_f(x,x')^p <= C (R_p(x, lambda d) + R_p(x', lambda d))`
/// over `x in s`, `0 < d(x,x') <= R`.
#[allow(clippy::too_many_arguments)]
pub fn pointwise_inequality_check(
    space: &MetricMeasureSpace,
    f: &MetricMap,
    e: &EnergyDensity,
    p: f64,
    lambda: f64,
    s: &SubsetRef,
    big_r: f64,
) -> Result<PointwiseCheck> {
    if lambda < 1.0 || !(big_r > 0.0) {
        return Err(BbmError::InvalidArgument(format!("need lambda >= 1 and R > 0, got {lambda}, {big_r}")));
    }
    f.check_len(space)?;
    let per_x: Vec<(f64, Option<(usize, usize)>)> = s
        .ids()
        .par_iter()
        .map(|&x| {
            let row = space.row(x);
            let k = row.count_within(big_r);
            let mut best = (0.0, None);
            for i in 1..k {
                let y = row.ids[i] as usize;
                let d = row.dists[i];
                let num = (f.d_f(x, y) / d).powf(p);
                if num == 0.0 {
                    continue;
                }
                let den = riesz_unchecked(space, e, x, lambda * d) + riesz_unchecked(space, e, y, lambda * d);
                let c = if den > 0.0 { num / den } else { f64::INFINITY };
                if c > best.0 {
                    best = (c, Some((x, y)));
                }
            }
            best
        })
        .collect();
    let mut out = PointwiseCheck { constant: 0.0, witness: None };
    for (c, w) in per_x {
        if c > out.constant {
            out = PointwiseCheck { constant: c, witness: w };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::SpaceGenerator;
    use proptest::prelude::*;

    fn grid(n: usize) -> MetricMeasureSpace {
        MetricMeasureSpace::build(&SpaceGenerator::IntervalGrid { n }).unwrap()
    }

    fn x_field(s: &MetricMeasureSpace) -> ScalarField {
        ScalarField::from_coords(s, |c| c[0])
    }

    /// Oracle: `R_p` summed term by term until the geometric weight is negligible.
    fn riesz_brute(s: &MetricMeasureSpace, e: &EnergyDensity, x: usize, r: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..200 {
            let rk = r / 2f64.powi(k);
            let ball: Vec<usize> = (0..s.len()).filter(|&j| s.dist(x, j) <= rk).collect();
            let m: f64 = ball.iter().map(|&j| s.weight(j)).sum();
            let en: f64 = ball.iter().map(|&j| e.0[j]).sum();
            total += (2.0f64 / 3.0).powi(k) * en / m / 3.0;
        }
        total
    }

    #[test]
    fn lip_field_examples() {
        let s = grid(5);
        let lip = lip_field(&s, &x_field(&s), 0.2);
        assert!(lip.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let sq = ScalarField::from_coords(&s, |c| c[0] * c[0]);
        assert!((lip_field(&s, &sq, 0.2)[2] - 1.2).abs() < 1e-12);
        assert!(lip_field(&s, &ScalarField::constant(5, 2.0), 0.6).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lip_constant_examples() {
        let s = grid(5);
        let all = SubsetRef::all(&s);
        assert!((lip_constant(&s, &x_field(&s), &all) - 1.0).abs() < 1e-12);
        let bump = ScalarField(vec![0.2, 0.0, 0.0, 0.0, 0.0]);
        assert!((lip_constant(&s, &bump, &all) - 1.0).abs() < 1e-12);
        assert_eq!(lip_constant(&s, &x_field(&s), &SubsetRef::new(&s, [2]).unwrap()), 0.0);
    }

    #[test]
    fn scalar_energy_examples() {
        let s = grid(5);
        let all = SubsetRef::all(&s);
        let e = scalar_energy(&s, &all, &x_field(&s), 1.0, 0.2, &[], 0.1).unwrap();
        assert!((e.upper - 1.0).abs() < 1e-12);
        assert_eq!(e.lower, 0.0);
        let c = scalar_energy(&s, &all, &ScalarField::constant(5, 1.0), 2.0, 0.2, &[], 0.1).unwrap();
        assert_eq!(c.upper, 0.0);
        let g = grid(101);
        let e = scalar_energy(&g, &SubsetRef::all(&g), &x_field(&g), 2.0, 0.02, &[], 0.1).unwrap();
        assert!((e.upper - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_energy_rejects_far_candidate() {
        let s = grid(5);
        let far = ScalarField::constant(5, 10.0);
        let err = scalar_energy(&s, &SubsetRef::all(&s), &x_field(&s), 1.0, 0.2, &[far], 0.1).unwrap_err();
        assert!(matches!(err, BbmError::CandidateTooFar { index: 1, .. }));
    }

    #[test]
    fn scalar_energy_prefers_flatter_candidate() {
        let s = grid(5);
        let u = x_field(&s);
        let flatter = ScalarField(u.iter().map(|v| 0.5 + 0.9 * (v - 0.5)).collect());
        let e = scalar_energy(&s, &SubsetRef::all(&s), &u, 1.0, 0.2, &[flatter], 1.0).unwrap();
        assert!((e.upper - 0.9).abs() < 1e-12);
        assert!(e.method.ends_with("argmin candidate 1"));
    }

    #[test]
    fn circle_identity_metric_energy() {
        let n = 4000;
        let s = MetricMeasureSpace::build(&SpaceGenerator::CircleGrid { n }).unwrap();
        let f = MetricMap::identity(&s);
        let dict = LipschitzDictionary::capped_distance(f.target(), 8, 1.0).unwrap();
        let regions: Vec<SubsetRef> =
            (0..8).map(|j| SubsetRef::new(&s, j * n / 8..(j + 1) * n / 8).unwrap()).collect();
        let e = metric_energy(&s, &SubsetRef::all(&s), &f, 1.0, 0.001, &dict, &regions).unwrap();
        assert!(e.lower >= 0.99, "{}", e.lower);
        assert!(e.lower <= e.upper + 1e-12);
        assert!((e.upper - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_map_has_zero_energy() {
        let s = grid(5);
        let f = MetricMap::scalar(&ScalarField::constant(5, 0.3));
        let dict = LipschitzDictionary::capped_distance(f.target(), 3, 1.0).unwrap();
        let all = SubsetRef::all(&s);
        let e = metric_energy(&s, &all, &f, 1.0, 0.2, &dict, std::slice::from_ref(&all)).unwrap();
        assert_eq!((e.lower, e.upper), (0.0, 0.0));
    }

    #[test]
    fn scalar_map_reduces_to_scalar_case() {
        let s = grid(5);
        let f = MetricMap::scalar(&x_field(&s));
        let all = SubsetRef::all(&s);
        let dict = LipschitzDictionary::capped_distance(f.target(), 1, 10.0).unwrap();
        let e = metric_energy(&s, &all, &f, 1.0, 0.2, &dict, std::slice::from_ref(&all)).unwrap();
        assert!((e.lower - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlapping_regions_rejected() {
        let s = grid(5);
        let f = MetricMap::scalar(&x_field(&s));
        let dict = LipschitzDictionary::capped_distance(f.target(), 1, 10.0).unwrap();
        let a = SubsetRef::new(&s, [0, 1]).unwrap();
        let b = SubsetRef::new(&s, [1, 2]).unwrap();
        let err = metric_energy(&s, &SubsetRef::all(&s), &f, 1.0, 0.2, &dict, &[a, b]).unwrap_err();
        assert!(matches!(err, BbmError::OverlappingRegions(1)));
    }

    #[test]
    fn table_member_must_be_lipschitz() {
        let target = MetricTarget::Real(vec![0.0, 0.1, 0.2]);
        assert!(LipschitzDictionary::new(&target, vec![DictMember::Table { values: vec![0.0, 0.1, 0.2] }], 1.0).is_ok());
        assert!(LipschitzDictionary::new(&target, vec![DictMember::Table { values: vec![0.0, 0.5, 0.2] }], 1.0).is_err());
        assert!(LipschitzDictionary::new(&target, vec![DictMember::Table { values: vec![0.0, 0.1, 0.2] }], 0.15).is_err());
    }

    #[test]
    fn pseudometric_target_allows_coincident_points() {
        assert!(MetricTarget::matrix(2, vec![0.0, 0.0, 0.0, 0.0]).is_ok());
        assert!(MetricTarget::matrix(3, vec![0.0, 1.0, 5.0, 1.0, 0.0, 1.0, 5.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn averaging_examples() {
        let s = grid(5);
        assert!((averaging_ap(&s, &EnergyDensity::from_weights(&s, 1.0), 2, 0.2) - 1.0).abs() < 1e-12);
        assert!((averaging_ap(&s, &EnergyDensity::from_weights(&s, 2.0), 0, 0.05) - 2.0).abs() < 1e-12);
        let e = EnergyDensity(vec![0.0, 0.0, 0.0, 0.0, 0.2]);
        assert_eq!(averaging_ap(&s, &e, 0, 0.2), 0.0);
    }

    #[test]
    fn riesz_examples() {
        let s = grid(5);
        let ones = EnergyDensity::from_weights(&s, 1.0);
        assert!((riesz_rp(&s, &ones, 2, 0.2, 1e-12).unwrap() - 1.0).abs() < 1e-12);
        let point = EnergyDensity(vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let v = riesz_rp(&s, &point, 2, 0.4, 1e-12).unwrap();
        // (1/3)(1/1.0) + (2/9)(1/0.6) + (2/3)^2 * 5
        assert!((v - 79.0 / 27.0).abs() < 1e-12, "{v}");
        assert!((v - riesz_brute(&s, &point, 2, 0.4)).abs() < 1e-12);
    }

    #[test]
    fn riesz_single_atom() {
        let s = MetricMeasureSpace::build(&SpaceGenerator::Explicit { matrix: vec![vec![0.0]], weights: Some(vec![2.0]) })
            .unwrap();
        let e = EnergyDensity(vec![3.0]);
        assert!((riesz_rp(&s, &e, 0, 1.0, 1e-9).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn pointwise_check_examples() {
        let g = grid(1001);
        let f = MetricMap::scalar(&x_field(&g));
        let interior = SubsetRef::new(&g, 100..901).unwrap();
        let c = pointwise_inequality_check(&g, &f, &EnergyDensity::from_weights(&g, 1.0), 1.0, 1.0, &interior, 0.05)
            .unwrap();
        assert!((c.constant - 0.5).abs() < 1e-9, "{}", c.constant);
        let s = grid(5);
        let flat = MetricMap::scalar(&ScalarField::constant(5, 1.0));
        let c = pointwise_inequality_check(&s, &flat, &EnergyDensity::from_weights(&s, 1.0), 1.0, 1.0, &SubsetRef::all(&s), 1.0)
            .unwrap();
        assert_eq!(c.constant, 0.0);
    }

    #[test]
    fn pointwise_check_line5_matches_brute_force() {
        let s = grid(5);
        let u = x_field(&s);
        let f = MetricMap::scalar(&u);
        let e = EnergyDensity::from_weights(&s, 1.0);
        let c = pointwise_inequality_check(&s, &f, &e, 2.0, 2.0, &SubsetRef::all(&s), 0.4).unwrap();
        let mut best: f64 = 0.0;
        for x in 0..5 {
            for y in 0..5 {
                let d = s.dist(x, y);
                if x != y && d <= 0.4 + 1e-12 {
                    let q = ((u[x] - u[y]).abs() / d).powi(2);
                    best = best.max(q / (riesz_brute(&s, &e, x, 2.0 * d) + riesz_brute(&s, &e, y, 2.0 * d)));
                }
            }
        }
        assert!((c.constant - best).abs() < 1e-12);
        assert!((c.constant - 0.5).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn riesz_of_constant_density(n in 2usize..60, x in 0usize..60, r in 0.001f64..2.0, c in 0.0f64..5.0) {
            let s = grid(n);
            let x = x % n;
            let v = riesz_rp(&s, &EnergyDensity::from_weights(&s, c), x, r, 1e-12).unwrap();
            prop_assert!((v - c).abs() <= 1e-12 * c.max(1.0));
        }

        #[test]
        fn riesz_matches_series(vals in prop::collection::vec(0.0f64..3.0, 3..20), x in 0usize..20, r in 0.01f64..1.5) {
            let n = vals.len();
            let s = grid(n);
            let x = x % n;
            let e = EnergyDensity(vals);
            let v = riesz_rp(&s, &e, x, r, 1e-12).unwrap();
            prop_assert!((v - riesz_brute(&s, &e, x, r)).abs() <= 1e-10 * v.max(1.0));
        }

        #[test]
        fn dictionary_composition_contracts(vals in prop::collection::vec(-2.0f64..2.0, 3..15), size in 1usize..5) {
            let n = vals.len();
            let s = grid(n);
            let f = MetricMap::scalar(&ScalarField(vals));
            let dict = LipschitzDictionary::capped_distance(f.target(), size, 1.0).unwrap();
            for m in dict.members() {
                let g = MetricMap::scalar(&f.compose(m));
                for x in 0..n {
                    for y in 0..n {
                        prop_assert!(g.q(&s, x, y) <= f.q(&s, x, y) + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn metric_lower_monotone_in_dictionary_and_regions(vals in prop::collection::vec(-1.0f64..1.0, 6..16), cut in 1usize..5) {
            let n = vals.len();
            let s = grid(n);
            let all = SubsetRef::all(&s);
            let f = MetricMap::scalar(&ScalarField(vals));
            let small = LipschitzDictionary::capped_distance(f.target(), 2, 5.0).unwrap();
            let mut members = small.members().to_vec();
            members.extend(LipschitzDictionary::capped_distance(f.target(), 5, 5.0).unwrap().members().iter().cloned());
            let big = LipschitzDictionary::new(f.target(), members, 5.0).unwrap();
            let one = [all.clone()];
            let two = [SubsetRef::new(&s, 0..cut).unwrap(), SubsetRef::new(&s, cut..n).unwrap()];
            let base = metric_energy(&s, &all, &f, 1.0, 0.3, &small, &one).unwrap().lower;
            prop_assert!(metric_energy(&s, &all, &f, 1.0, 0.3, &big, &one).unwrap().lower >= base - 1e-12);
            prop_assert!(metric_energy(&s, &all, &f, 1.0, 0.3, &small, &two).unwrap().lower >= base - 1e-12);
        }
    }
}
