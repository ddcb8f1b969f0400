//! Empirical doubling, strong doubling and Poincaré constants.
//!
//! Continuum suprema over `r in (0, R]` become maxima over per-center
//! critical radii: every radius at which one of the balls or shells involved
//! changes, plus the radii just below and above. Between consecutive
//! critical radii all masses are constant, so the maximum is exact.

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::energy::{lip_field, ScalarField};
use crate::error::{BbmError, Result};
use crate::space::{Interval, MetricMeasureSpace, SubsetRef};

/// Which radii to examine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusSelection {
    /// All critical radii in `(floor, R]`.
    Critical { floor: f64 },
    /// Exactly these radii (those outside `(0, R]` are ignored).
    Explicit(Vec<f64>),
}

impl Default for RadiusSelection {
    fn default() -> Self {
        RadiusSelection::Critical { floor: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub atom: usize,
    pub radius: f64,
    /// Enlarged radius, when the quantity involves a second one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius2: Option<f64>,
    /// Index of the test function (Poincaré only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularityReport {
    pub quantity: String,
    #[serde(serialize_with = "ser_extended")]
    pub constant: f64,
    pub witness: Option<Witness>,
    pub radius_set: Vec<f64>,
    pub flags: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Serializes non-finite reals as `"inf"`, `"-inf"` or `"nan"`.
pub fn ser_extended<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

struct CenterBest {
    value: f64,
    witness: Option<Witness>,
    radii: Vec<f64>,
    empty: Vec<f64>,
}

fn radii_for(
    space: &MetricMeasureSpace,
    x: usize,
    big_r: f64,
    scales: &[f64],
    sel: &RadiusSelection,
) -> Vec<f64> {
    match sel {
        RadiusSelection::Critical { floor } => space.critical_radii(x, big_r, scales, *floor),
        RadiusSelection::Explicit(rs) => rs.iter().copied().filter(|&r| r > 0.0 && r <= big_r).collect(),
    }
}

fn check_radius(big_r: f64) -> Result<()> {
    if big_r > 0.0 && big_r.is_finite() {
        Ok(())
    } else {
        Err(BbmError::InvalidArgument(format!("R must be positive and finite, got {big_r}")))
    }
}

/// Folds per-center maxima in center order, keeping the first witness of the
/// overall maximum.
fn assemble(quantity: &str, per_center: Vec<CenterBest>, keep_flags: bool) -> RegularityReport {
    let mut constant = f64::NEG_INFINITY;
    let mut witness = None;
    let mut radius_set = Vec::new();
    let mut empty: Vec<(f64, usize)> = Vec::new();
    for c in per_center {
        if c.value > constant {
            constant = c.value;
            witness = c.witness;
        }
        radius_set.extend(c.radii);
        if keep_flags {
            empty.extend(c.empty.into_iter().map(|r| (r, 1)));
        }
    }
    radius_set.sort_by(f64::total_cmp);
    radius_set.dedup();
    empty.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut flags = Vec::new();
    let mut i = 0;
    while i < empty.len() {
        let r = empty[i].0;
        let mut count = 0;
        while i < empty.len() && empty[i].0 == r {
            count += empty[i].1;
            i += 1;
        }
        flags.push(format!("shell ({}, {}] empty at {count} atoms", 0.75 * r, r));
    }
    RegularityReport {
        quantity: quantity.to_string(),
        constant: if constant == f64::NEG_INFINITY { 0.0 } else { constant },
        witness,
        radius_set,
        flags,
        label: None,
    }
}

/// `max m(B(x,2r)) / m(B(x,r))` over positive-weight `x` in `B(omega, R)`.
pub fn doubling_constant(
    space: &MetricMeasureSpace,
    omega: &SubsetRef,
    big_r: f64,
    sel: &RadiusSelection,
) -> Result<RegularityReport> {
    check_radius(big_r)?;
    let centers = space.enlarge(omega, big_r).positive_part(space);
    let per_center: Vec<CenterBest> = centers
        .ids()
        .par_iter()
        .map(|&x| {
            let radii = radii_for(space, x, big_r, &[1.0, 2.0], sel);
            let mut best = CenterBest { value: f64::NEG_INFINITY, witness: None, radii: Vec::new(), empty: Vec::new() };
            for &r in &radii {
                let ratio = space.ball_mass(x, 2.0 * r) / space.ball_mass(x, r);
                if ratio > best.value {
                    best.value = ratio;
                    best.witness = Some(Witness { atom: x, radius: r, radius2: Some(2.0 * r), test: None });
                }
            }
            best.radii = radii;
            best
        })
        .collect();
    Ok(assemble("doubling", per_center, false))
}

/// `max m(B(x,2r)) / m(A(x,(3r/4, r]))` over positive-weight `x` in `B(v, R)`.
/// Radii with an empty shell are reported in `flags` and skipped.
pub fn strong_doubling_constant(
    space: &MetricMeasureSpace,
    v: &SubsetRef,
    big_r: f64,
    sel: &RadiusSelection,
) -> Result<RegularityReport> {
    check_radius(big_r)?;
    let centers = space.enlarge(v, big_r).positive_part(space);
    let per_center: Vec<CenterBest> = centers
        .ids()
        .par_iter()
        .map(|&x| {
            let radii = radii_for(space, x, big_r, &[0.75, 1.0, 2.0], sel);
            let mut best = CenterBest { value: f64::NEG_INFINITY, witness: None, radii: Vec::new(), empty: Vec::new() };
            for &r in &radii {
                let shell = space.annulus_mass(x, &Interval::half_open(0.75 * r, r));
                if shell <= 0.0 {
                    best.empty.push(r);
                    continue;
                }
                let ratio = space.ball_mass(x, 2.0 * r) / shell;
                if ratio > best.value {
                    best.value = ratio;
                    best.witness = Some(Witness { atom: x, radius: r, radius2: Some(2.0 * r), test: None });
                }
            }
            best.radii = radii;
            best
        })
        .collect();
    Ok(assemble("strong_doubling", per_center, true))
}

/// Empirical Poincaré ratio over a finite family of test functions.
///
/// The ratio at `(u, x, r)` is
/// `<|u - <u>_B|>_B / (r * <lip_h[u]^p>_{B(x, lambda r)}^{1/p})` with
/// `B = B(x, r)`. Zero over zero counts as 0; a positive numerator over a
/// zero denominator gives `+inf` and a flag.
#[allow(clippy::too_many_arguments)]
pub fn poincare_constant(
    space: &MetricMeasureSpace,
    omega: &SubsetRef,
    big_r: f64,
    lambda: f64,
    p: f64,
    tests: &[ScalarField],
    h: f64,
    sel: &RadiusSelection,
) -> Result<RegularityReport> {
    check_radius(big_r)?;
    if tests.is_empty() {
        return Err(BbmError::InvalidArgument("at least one test function is required".into()));
    }
    if lambda < 1.0 || p < 1.0 || h <= 0.0 {
        return Err(BbmError::InvalidArgument(format!(
            "need lambda >= 1, p >= 1, h > 0; got lambda = {lambda}, p = {p}, h = {h}"
        )));
    }
    for (k, u) in tests.iter().enumerate() {
        if u.len() != space.len() {
            return Err(BbmError::InvalidArgument(format!("test {k} has {} values for {} atoms", u.len(), space.len())));
        }
    }
    let lips: Vec<Vec<f64>> = tests.iter().map(|u| lip_field(space, u, h).0).collect();
    let centers = space.enlarge(omega, big_r).positive_part(space);
    let per_center: Vec<(CenterBest, Vec<String>)> = centers
        .ids()
        .par_iter()
        .map(|&x| {
            let row = space.row(x);
            let radii = radii_for(space, x, big_r, &[1.0, lambda], sel);
            let mut best = CenterBest { value: f64::NEG_INFINITY, witness: None, radii: Vec::new(), empty: Vec::new() };
            let mut flags = Vec::new();
            for (k, u) in tests.iter().enumerate() {
                let lip = &lips[k];
                for &r in &radii {
                    let inner = &row.ids[..row.count_within(r)];
                    let m = row.mass_of_first(inner.len());
                    // centered at u(x) so constant fields give an exact zero
                    let base = u[x];
                    let mean = base
                        + inner.iter().map(|&j| (u[j as usize] - base) * space.weight(j as usize)).sum::<f64>() / m;
                    let num = inner
                        .iter()
                        .map(|&j| (u[j as usize] - mean).abs() * space.weight(j as usize))
                        .sum::<f64>()
                        / m;
                    let outer = &row.ids[..row.count_within(lambda * r)];
                    let mo = row.mass_of_first(outer.len());
                    let avg = outer
                        .iter()
                        .map(|&j| lip[j as usize].powf(p) * space.weight(j as usize))
                        .sum::<f64>()
                        / mo;
                    let den = r * avg.powf(1.0 / p);
                    let ratio = if den > 0.0 {
                        num / den
                    } else if num > 0.0 {
                        flags.push(format!("zero denominator at atom {x}, r = {r}, test {k}"));
                        f64::INFINITY
                    } else {
                        0.0
                    };
                    if ratio > best.value {
                        best.value = ratio;
                        best.witness = Some(Witness { atom: x, radius: r, radius2: Some(lambda * r), test: Some(k) });
                    }
                }
            }
            best.radii = radii;
            (best, flags)
        })
        .collect();
    let mut flags = Vec::new();
    let bests = per_center
        .into_iter()
        .map(|(b, f)| {
            flags.extend(f);
            b
        })
        .collect();
    let mut report = assemble("poincare", bests, false);
    report.flags = flags;
    report.label = Some("lower bound on C_P".into());
    Ok(report)
}
