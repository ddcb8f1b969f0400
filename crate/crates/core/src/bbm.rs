//! The nonlocal functional `F(δ)`, its localized and tail parts, windowed
//! limit estimates and sandwich reports against the energy bracket.

use rayon::prelude::*;
use serde::Serialize;

use crate::approx::discrete_convolution;
use crate::energy::{metric_energy, scalar_energy, EnergyEstimate, LipschitzDictionary, MetricMap, ScalarField};
use crate::error::{BbmError, Result};
use crate::mollifier::{fmt_num, window_max, window_min, MollifierFamily};
use crate::regularity::ser_extended;
use crate::space::{MetricMeasureSpace, SubsetRef};

/// Strictly decreasing δ values in `(0, 1)` and the window width used for
/// liminf/limsup estimates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaSchedule {
    pub deltas: Vec<f64>,
    pub window: usize,
}

impl DeltaSchedule {
    pub fn new(deltas: Vec<f64>, window: usize) -> Result<Self> {
        let mut errors = Vec::new();
        if deltas.is_empty() {
            errors.push("delta schedule is empty".to_string());
        }
        if deltas.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
            errors.push("delta values must lie in (0, 1)".to_string());
        }
        if deltas.windows(2).any(|w| !(w[1] < w[0])) {
            errors.push("delta schedule not decreasing".to_string());
        }
        if window == 0 || window > deltas.len() {
            errors.push(format!("window {window} must lie in 1..={}", deltas.len()));
        }
        if errors.is_empty() {
            Ok(DeltaSchedule { deltas, window })
        } else {
            Err(BbmError::Config(errors))
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn summand(space: &MetricMeasureSpace, f: &MetricMap, family: &MollifierFamily, delta: f64, p: f64, x: usize, y: usize, d: f64) -> f64 {
    let df = f.d_f(x, y);
    if df == 0.0 {
        return 0.0;
    }
    (df / d).powf(p) * family.eval_at(delta, space, x, y, d) * space.weight(y)
}

fn check_delta(delta: f64) {
    debug_assert!(delta > 0.0 && delta < 1.0, "delta {delta} outside (0, 1)");
}

/// Per-atom sums `w(x) Σ_{x' in o, x' != x, d <= reach} ...` split at `r` into
/// `(d <= r, d > r)`, walking the sorted neighbour row of each `x`.
#[allow(clippy::too_many_arguments)]
fn split_sums(
    space: &MetricMeasureSpace,
    o: &SubsetRef,
    domain: &SubsetRef,
    r: f64,
    f: &MetricMap,
    family: &MollifierFamily,
    delta: f64,
    p: f64,
) -> Vec<(f64, f64)> {
    check_delta(delta);
    let in_domain = domain.mask(space.len());
    let reach = family.support(delta);
    o.ids()
        .par_iter()
        .map(|&x| {
            let wx = space.weight(x);
            if wx <= 0.0 {
                return (0.0, 0.0);
            }
            let row = space.row(x);
            let k = row.count_within(reach);
            let (mut near, mut far) = (0.0, 0.0);
            for i in 0..k {
                let y = row.ids[i] as usize;
                if y == x || !in_domain[y] {
                    continue;
                }
                let d = row.dists[i];
                let t = summand(space, f, family, delta, p, x, y, d);
                if d <= r {
                    near += t;
                } else {
                    far += t;
                }
            }
            (wx * near, wx * far)
        })
        .collect()
}

/// `F(δ) = Σ_{x != x' in o} Q_f(x,x')^p ρ_δ(x,x') w(x) w(x')`.
///
/// Only neighbours within the kernel support are visited.
pub fn functional(space: &MetricMeasureSpace, o: &SubsetRef, f: &MetricMap, family: &MollifierFamily, delta: f64, p: f64) -> f64 {
    split_sums(space, o, o, f64::INFINITY, f, family, delta, p).into_iter().map(|(a, _)| a).sum()
}

/// Reference `O(|o|^2)` evaluation of [`functional`].
pub fn functional_naive(
    space: &MetricMeasureSpace,
    o: &SubsetRef,
    f: &MetricMap,
    family: &MollifierFamily,
    delta: f64,
    p: f64,
) -> f64 {
    check_delta(delta);
    let mut total = 0.0;
    for x in o.iter() {
        let wx = space.weight(x);
        if wx <= 0.0 {
            continue;
        }
        let mut s = 0.0;
        for y in o.iter() {
            if y != x {
                s += f.q(space, x, y).powf(p) * family.eval(delta, space, x, y) * space.weight(y);
            }
        }
        total += wx * s;
    }
    total
}

/// Same summand over `x in o_prime`, `x' in B(x, r) ∩ domain`, `x' != x`.
#[allow(clippy::too_many_arguments)]
pub fn localized_functional(
    space: &MetricMeasureSpace,
    o_prime: &SubsetRef,
    domain: &SubsetRef,
    r: f64,
    f: &MetricMap,
    family: &MollifierFamily,
    delta: f64,
    p: f64,
) -> f64 {
    split_sums(space, o_prime, domain, r, f, family, delta, p).into_iter().map(|(a, _)| a).sum()
}

/// Complement of [`localized_functional`] on `o × o`: pairs with `d > r`.
pub fn tail_functional(
    space: &MetricMeasureSpace,
    o: &SubsetRef,
    r: f64,
    f: &MetricMap,
    family: &MollifierFamily,
    delta: f64,
    p: f64,
) -> f64 {
    split_sums(space, o, o, r, f, family, delta, p).into_iter().map(|(_, b)| b).sum()
}

/// `(localized at r, tail beyond r)` on `o × o` in one pass; the two parts
/// add up to [`functional`].
pub fn functional_split(
    space: &MetricMeasureSpace,
    o: &SubsetRef,
    r: f64,
    f: &MetricMap,
    family: &MollifierFamily,
    delta: f64,
    p: f64,
) -> (f64, f64) {
    let parts = split_sums(space, o, o, r, f, family, delta, p);
    let mut near = 0.0;
    let mut far = 0.0;
    for (a, b) in parts {
        near += a;
        far += b;
    }
    (near, far)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailSupremum {
    pub value: f64,
    pub witness: Option<usize>,
}

/// `max_{x in omega, w(x) > 0} Σ_{x' in omega, d > r} (ρ_δ(x,x') + ρ_δ(x',x)) w(x') / d^p`.
pub fn tail_supremum(
    space: &MetricMeasureSpace,
    omega: &SubsetRef,
    r: f64,
    family: &MollifierFamily,
    delta: f64,
    p: f64,
) -> TailSupremum {
    check_delta(delta);
    let in_omega = omega.mask(space.len());
    let values: Vec<Option<f64>> = omega
        .ids()
        .par_iter()
        .map(|&x| {
            if space.weight(x) <= 0.0 {
                return None;
            }
            let row = space.row(x);
            let start = row.count_within(r);
            let mut s = 0.0;
            for i in start..row.ids.len() {
                let y = row.ids[i] as usize;
                if !in_omega[y] {
                    continue;
                }
                let d = row.dists[i];
                let k = family.eval_at(delta, space, x, y, d) + family.eval_at(delta, space, y, x, d);
                s += k * space.weight(y) / d.powf(p);
            }
            Some(s)
        })
        .collect();
    let mut best = TailSupremum { value: 0.0, witness: None };
    for (&x, v) in omega.ids().iter().zip(values) {
        if let Some(v) = v {
            if best.witness.is_none() || v > best.value {
                best = TailSupremum { value: v, witness: Some(x) };
            }
        }
    }
    best
}

/// Windowed `(min, max)` of `F` over the last `window` rows.
pub fn limit_estimates(rows: &[(f64, f64)], window: usize) -> Result<(f64, f64)> {
    if window == 0 || rows.len() < window {
        return Err(BbmError::InvalidArgument(format!("need at least {window} rows for window {window}, got {}", rows.len())));
    }
    let values: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok((window_min(&values, window), window_max(&values, window)))
}

/// Inputs of the energy bracket used by [`sandwich_report`].
#[derive(Clone, Debug)]
pub struct EnergyArgs {
    /// Scale of `lip_h`.
    pub h: f64,
    pub dictionary_size: usize,
    pub cap: f64,
    /// Disjoint regions of the lower dictionary bound.
    pub regions: Vec<SubsetRef>,
    /// Radius grid: convolution candidates `u^r` and the tail radius (its minimum).
    pub radii: Vec<f64>,
    /// `L^p` tolerance for accepting a candidate.
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub delta: f64,
    pub functional: f64,
    /// Part of `F(δ)` from pairs farther apart than the tail radius.
    pub tail: f64,
    pub tail_supremum: TailSupremum,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub space: String,
    pub family: String,
    pub p: f64,
    pub window: usize,
    pub tail_radius: f64,
    pub rows: Vec<ExperimentRow>,
    pub liminf_est: f64,
    pub limsup_est: f64,
    pub energy: EnergyEstimate,
    /// Scalar maps only: the bracket from `u` and its accepted convolutions.
    pub scalar_energy: Option<EnergyEstimate>,
    /// `liminf_est / energy.upper`
    #[serde(serialize_with = "ser_extended")]
    pub lower_ratio: f64,
    /// `limsup_est / energy.lower`
    #[serde(serialize_with = "ser_extended")]
    pub upper_ratio: f64,
    pub flags: Vec<String>,
}

/// `num / den` with `0/0 = 0` and `x/0 = inf`; the second value says whether
/// the denominator vanished.
fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den > 0.0 {
        (num / den, false)
    } else if num > 0.0 {
        (f64::INFINITY, true)
    } else {
        (0.0, true)
    }
}

impl ExperimentReport {
    /// One line per δ: `delta, functional, tail, energy_lower, energy_upper,
    /// lower_ratio, upper_ratio, flags`, where the ratios are
    /// `F(δ)/energy_upper` and `F(δ)/energy_lower`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["delta", "functional", "tail", "energy_lower", "energy_upper", "lower_ratio", "upper_ratio", "flags"])?;
        for row in &self.rows {
            w.write_record([
                fmt_num(row.delta),
                fmt_num(row.functional),
                fmt_num(row.tail),
                fmt_num(self.energy.lower),
                fmt_num(self.energy.upper),
                fmt_num(ratio(row.functional, self.energy.upper).0),
                fmt_num(ratio(row.functional, self.energy.lower).0),
                row.flags.join(";"),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| BbmError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Energy bracket of `f` on `o`: the dictionary lower bound and the least
/// upper bound among `f` itself and, for scalar maps, the convolutions
/// `u^r` over the radius grid that lie within `tol` of `u`.
pub fn energy_bracket(
    space: &MetricMeasureSpace,
    o: &SubsetRef,
    f: &MetricMap,
    p: f64,
    energy: &EnergyArgs,
) -> Result<(EnergyEstimate, Option<EnergyEstimate>, Vec<String>)> {
    let dict = LipschitzDictionary::capped_distance(f.target(), energy.dictionary_size, energy.cap)?;
    let mut bracket = metric_energy(space, o, f, p, energy.h, &dict, &energy.regions)?;
    let mut flags = Vec::new();
    let scalar = match f.scalar_values() {
        Some(u) => {
            let mut candidates: Vec<ScalarField> = Vec::new();
            for &r in &energy.radii {
                match discrete_convolution(space, o, r, &u) {
                    Ok(conv) => {
                        let distance = conv.output.lp_distance(&u, space, o, p);
                        if distance <= energy.tol {
                            candidates.push(conv.output);
                        } else {
                            flags.push(format!("u^r at r={} rejected: L^p distance {}", fmt_num(r), fmt_num(distance)));
                        }
                    }
                    Err(e) => flags.push(format!("u^r at r={} skipped: {e}", fmt_num(r))),
                }
            }
            let est = scalar_energy(space, o, &u, p, energy.h, &candidates, energy.tol)?;
            if est.upper < bracket.upper {
                bracket.upper = est.upper;
                bracket.method = format!("{}; upper from scalar candidates", bracket.method);
            }
            Some(est)
        }
        None => None,
    };
    Ok((bracket, scalar, flags))
}

/// Evaluates `F(δ)` along the schedule and sets the windowed limits against
/// the energy bracket of `f`.
pub fn sandwich_report(
    space: &MetricMeasureSpace,
    o: &SubsetRef,
    f: &MetricMap,
    family: &MollifierFamily,
    p: f64,
    schedule: &DeltaSchedule,
    energy: &EnergyArgs,
) -> Result<ExperimentReport> {
    f.check_len(space)?;
    if !(p >= 1.0) {
        return Err(BbmError::InvalidArgument(format!("p must be >= 1, got {p}")));
    }
    if energy.radii.is_empty() || energy.radii.iter().any(|&r| !(r > 0.0)) {
        return Err(BbmError::InvalidArgument("radius grid must be nonempty and positive".into()));
    }
    let tail_radius = energy.radii.iter().copied().fold(f64::INFINITY, f64::min);
    let floor = 4.0 * space.h_min();
    let mut rows = Vec::with_capacity(schedule.deltas.len());
    for &delta in &schedule.deltas {
        let (near, tail) = functional_split(space, o, tail_radius, f, family, delta, p);
        let value = near + tail;
        let mut flags = Vec::new();
        if delta < floor {
            flags.push(format!("delta below resolution {}", fmt_num(floor)));
        }
        if tail > 0.05 * value {
            flags.push(format!("tail beyond r={} exceeds 5% of F", fmt_num(tail_radius)));
        }
        rows.push(ExperimentRow {
            delta,
            functional: value,
            tail,
            tail_supremum: tail_supremum(space, o, tail_radius, family, delta, p),
            flags,
        });
    }
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.delta, r.functional)).collect();
    let (liminf_est, limsup_est) = limit_estimates(&pairs, schedule.window)?;

    let (bracket, scalar, mut flags) = energy_bracket(space, o, f, p, energy)?;
    let (lower_ratio, lower_zero) = ratio(liminf_est, bracket.upper);
    let (upper_ratio, upper_zero) = ratio(limsup_est, bracket.lower);
    if lower_zero {
        flags.push("energy upper bound is zero".into());
    }
    if upper_zero {
        flags.push("energy lower bound is zero".into());
    }
    Ok(ExperimentReport {
        space: format!("{} atoms, h_min {}, diameter {}", space.len(), fmt_num(space.h_min()), fmt_num(space.diameter())),
        family: family.name(),
        p,
        window: schedule.window,
        tail_radius,
        rows,
        liminf_est,
        limsup_est,
        energy: bracket,
        scalar_energy: scalar,
        lower_ratio,
        upper_ratio,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::SpaceGenerator;
    use proptest::prelude::*;

    fn line5() -> MetricMeasureSpace {
        MetricMeasureSpace::build(&SpaceGenerator::IntervalGrid { n: 5 }).unwrap()
    }

    fn identity_u(s: &MetricMeasureSpace) -> MetricMap {
        MetricMap::scalar(&ScalarField::from_coords(s, |c| c[0]))
    }

    fn rho(k: u8) -> MollifierFamily {
        MollifierFamily::builtin(k, 1.0).unwrap()
    }

    /// Pairs enumerated directly from coordinates and closed-form ball masses.
    fn oracle_rho3_line5(delta: f64) -> f64 {
        let xs = [0.1, 0.3, 0.5, 0.7, 0.9];
        let ball = |x: f64, r: f64| xs.iter().filter(|&&y| (x - y).abs() <= r + 1e-12).count() as f64 * 0.2;
        let mut total = 0.0;
        for &x in &xs {
            for &y in &xs {
                if x != y && (x - y).abs() <= delta + 1e-12 {
                    total += 0.2 * 0.2 / ball(x, delta);
                }
            }
        }
        total
    }

    #[test]
    fn line5_rho3() {
        let s = line5();
        let all = SubsetRef::all(&s);
        let f = identity_u(&s);
        let v = functional(&s, &all, &f, &rho(3), 0.2, 1.0);
        assert!((v - 0.6).abs() < 1e-12, "{v}");
        assert!((v - oracle_rho3_line5(0.2)).abs() < 1e-12);
        assert!((functional_naive(&s, &all, &f, &rho(3), 0.2, 1.0) - v).abs() < 1e-12);
    }

    #[test]
    fn line5_rho5_matches_pair_sum() {
        let s = line5();
        let all = SubsetRef::all(&s);
        let f = identity_u(&s);
        let mut oracle = 0.0;
        for x in 0..5 {
            for y in 0..5 {
                let d = (x as f64 - y as f64).abs() * 0.2;
                if x != y && d > 0.1 && d <= 0.8 + 1e-12 {
                    oracle += 0.04 / (10f64.ln() * s.ball_mass(x, 4.0 * d));
                }
            }
        }
        let v = functional(&s, &all, &f, &rho(5), 0.1, 1.0);
        assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
    }

    #[test]
    fn constant_map_is_zero() {
        let s = line5();
        let all = SubsetRef::all(&s);
        let f = MetricMap::scalar(&ScalarField::constant(5, 2.0));
        for k in 1..=5 {
            assert_eq!(functional(&s, &all, &f, &rho(k), 0.3, 1.0), 0.0);
        }
    }

    #[test]
    fn localized_examples() {
        let s = line5();
        let all = SubsetRef::all(&s);
        let f = identity_u(&s);
        let mid = SubsetRef::new(&s, [2]).unwrap();
        let v = localized_functional(&s, &mid, &all, 0.2, &f, &rho(3), 0.2, 1.0);
        assert!((v - 0.2 * 2.0 * 0.2 / 0.6).abs() < 1e-12, "{v}");
        let full = localized_functional(&s, &all, &all, 2.0, &f, &rho(5), 0.1, 1.0);
        assert!((full - functional(&s, &all, &f, &rho(5), 0.1, 1.0)).abs() < 1e-12);
        assert_eq!(localized_functional(&s, &all, &all, 0.1, &f, &rho(5), 0.1, 1.0), 0.0);
    }

    #[test]
    fn tail_supremum_examples() {
        let s = line5();
        let all = SubsetRef::all(&s);
        assert_eq!(tail_supremum(&s, &all, 0.5, &rho(3), 0.2, 1.0).value, 0.0);
        let t = tail_supremum(&s, &all, 0.5, &rho(5), 0.1, 1.0);
        let expected = 2.0 / 10f64.ln() * 0.2 * (1.0 / 0.6 + 1.0 / 0.8);
        assert!((t.value - expected).abs() < 1e-12, "{}", t.value);
        assert!((t.value - 0.50668).abs() < 1e-5);
        assert_eq!(t.witness, Some(0));
        assert_eq!(tail_supremum(&s, &all, 1.0, &rho(5), 0.1, 1.0).value, 0.0);
    }

    #[test]
    fn limit_estimate_examples() {
        let rows = [(0.1, 1.0), (0.05, 0.9), (0.02, 1.1), (0.01, 1.0)];
        assert_eq!(limit_estimates(&rows, 3).unwrap(), (0.9, 1.1));
        assert_eq!(limit_estimates(&[(0.1, 2.0), (0.05, 2.0), (0.01, 2.0)], 3).unwrap(), (2.0, 2.0));
        let dec = [(0.1, 4.0), (0.05, 3.0), (0.02, 2.0), (0.01, 1.0)];
        assert_eq!(limit_estimates(&dec, 3).unwrap(), (1.0, 3.0));
        assert!(limit_estimates(&rows[..2], 3).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(DeltaSchedule::new(vec![0.1, 0.05], 2).is_ok());
        let err = DeltaSchedule::new(vec![0.1, 0.2], 2).unwrap_err().to_string();
        assert!(err.contains("schedule not decreasing"), "{err}");
        assert!(DeltaSchedule::new(vec![0.1], 2).is_err());
        assert!(DeltaSchedule::new(vec![1.5], 1).is_err());
    }

    fn energy_args(s: &MetricMeasureSpace, radii: Vec<f64>) -> EnergyArgs {
        EnergyArgs { h: 2.0 * s.h_min(), dictionary_size: 4, cap: 2.0, regions: vec![SubsetRef::all(s)], radii, tol: 0.05 }
    }

    #[test]
    fn constant_map_report_is_zero() {
        let s = MetricMeasureSpace::build(&SpaceGenerator::IntervalGrid { n: 101 }).unwrap();
        let f = MetricMap::scalar(&ScalarField::constant(101, 0.7));
        let sched = DeltaSchedule::new(vec![0.2, 0.1, 0.05], 3).unwrap();
        let rep = sandwich_report(&s, &SubsetRef::all(&s), &f, &rho(3), 1.0, &sched, &energy_args(&s, vec![0.4])).unwrap();
        assert!(rep.rows.iter().all(|r| r.functional == 0.0 && r.tail == 0.0));
        assert_eq!((rep.liminf_est, rep.limsup_est, rep.lower_ratio, rep.upper_ratio), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((rep.energy.lower, rep.energy.upper), (0.0, 0.0));
        assert!(rep.flags.iter().any(|f| f.contains("lower bound is zero")));
    }

    #[test]
    fn identity_report_small_grid() {
        let s = MetricMeasureSpace::build(&SpaceGenerator::IntervalGrid { n: 201 }).unwrap();
        let f = identity_u(&s);
        let sched = DeltaSchedule::new(vec![0.16, 0.08, 0.04], 3).unwrap();
        let rep = sandwich_report(&s, &SubsetRef::all(&s), &f, &rho(3), 1.0, &sched, &energy_args(&s, vec![0.32, 0.2])).unwrap();
        assert!(rep.liminf_est <= rep.limsup_est);
        assert!((rep.energy.upper - 1.0).abs() < 1e-9);
        assert!(rep.rows.iter().all(|r| r.tail == 0.0 && r.functional <= 1.0));
        let csv = rep.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("delta,functional,tail,energy_lower,energy_upper,lower_ratio,upper_ratio,flags"));
        let again = sandwich_report(&s, &SubsetRef::all(&s), &f, &rho(3), 1.0, &sched, &energy_args(&s, vec![0.32, 0.2])).unwrap();
        assert_eq!(csv, again.to_csv().unwrap());
    }

    #[test]
    fn circle_log_family_near_closed_form() {
        let n = 1001;
        let s = MetricMeasureSpace::build(&SpaceGenerator::CircleGrid { n }).unwrap();
        let f = MetricMap::identity(&s);
        let delta: f64 = 0.01;
        let g = 2.0 / delta.ln().abs() * ((1.0 / (8.0 * delta)).ln() / 8.0 + 3.0 / 8.0);
        assert!((g - 0.299974).abs() < 1e-6);
        let v = functional(&s, &SubsetRef::all(&s), &f, &rho(5), delta, 1.0);
        assert!((v / g - 1.0).abs() < 0.02, "{v} vs {g}");
    }

    fn small_space() -> impl Strategy<Value = (MetricMeasureSpace, Vec<f64>)> {
        (3usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.1f64..2.0, n),
                proptest::collection::vec(0.05f64..1.0, n * (n - 1) / 2),
                proptest::collection::vec(-1.0f64..1.0, n),
            )
                .prop_map(move |(w, pts, u)| {
                    // shortest-path closure of random edge lengths gives a metric
                    let mut d = vec![0.0; n * n];
                    let mut k = 0;
                    for i in 0..n {
                        for j in i + 1..n {
                            d[i * n + j] = pts[k];
                            d[j * n + i] = pts[k];
                            k += 1;
                        }
                    }
                    for m in 0..n {
                        for i in 0..n {
                            for j in 0..n {
                                let via = d[i * n + m] + d[m * n + j];
                                if via < d[i * n + j] {
                                    d[i * n + j] = via;
                                }
                            }
                        }
                    }
                    let s = MetricMeasureSpace::build(&SpaceGenerator::Explicit {
                        matrix: (0..n).map(|i| d[i * n..(i + 1) * n].to_vec()).collect(),
                        weights: Some(w),
                    })
                    .unwrap();
                    (s, u)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fast_path_matches_naive((s, u) in small_space(), k in 1u8..=5, delta in 0.05f64..0.95, p in 1.0f64..3.0) {
            let f = MetricMap::scalar(&ScalarField(u));
            let fam = MollifierFamily::builtin(k, p).unwrap();
            let all = SubsetRef::all(&s);
            let a = functional(&s, &all, &f, &fam, delta, p);
            let b = functional_naive(&s, &all, &f, &fam, delta, p);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{} vs {}", a, b);
        }

        #[test]
        fn decomposition_resums((s, u) in small_space(), k in 1u8..=5, delta in 0.05f64..0.95, r in 0.0f64..2.0) {
            let f = MetricMap::scalar(&ScalarField(u));
            let fam = rho(k);
            let all = SubsetRef::all(&s);
            let total = functional(&s, &all, &f, &fam, delta, 1.0);
            let near = localized_functional(&s, &all, &all, r, &f, &fam, delta, 1.0);
            let far = tail_functional(&s, &all, r, &f, &fam, delta, 1.0);
            prop_assert!((near + far - total).abs() <= 1e-12 * (1.0 + total.abs()));
        }

        #[test]
        fn kernel_monotonicity((s, u) in small_space(), delta in 0.05f64..0.95) {
            // rho^2 <= rho^3 pointwise
            let f = MetricMap::scalar(&ScalarField(u));
            let all = SubsetRef::all(&s);
            let a = functional(&s, &all, &f, &rho(2), delta, 1.0);
            let b = functional(&s, &all, &f, &rho(3), delta, 1.0);
            prop_assert!(a <= b + 1e-12);
        }

        #[test]
        fn lipschitz_postcomposition_contracts((s, u) in small_space(), k in 1u8..=5, delta in 0.05f64..0.95, c in 0usize..3, cap in 0.1f64..2.0) {
            let f = MetricMap::scalar(&ScalarField(u));
            let dict = LipschitzDictionary::capped_distance(f.target(), 3, cap).unwrap();
            let g = MetricMap::scalar(&f.compose(&dict.members()[c]));
            let all = SubsetRef::all(&s);
            let fam = rho(k);
            prop_assert!(functional(&s, &all, &g, &fam, delta, 1.0) <= functional(&s, &all, &f, &fam, delta, 1.0) + 1e-12);
        }
    }
}
