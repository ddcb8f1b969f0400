//! Separated sets, Lipschitz partitions of unity and annulus-average
//! discrete convolutions.

use rayon::prelude::*;
use serde::Serialize;

use crate::energy::{lip_constant, ScalarField};
use crate::error::{BbmError, Result};
use crate::regularity::ser_extended;
use crate::space::{Interval, MetricMeasureSpace, SubsetRef};

/// Greedy maximal `sep`-separated subset of `s`, scanning ids in ascending
/// order and keeping an atom when it is strictly farther than `sep` from
/// every atom kept so far.
pub fn separated_set(space: &MetricMeasureSpace, s: &SubsetRef, sep: f64) -> Vec<usize> {
    let mut blocked = vec![false; space.len()];
    let mut out = Vec::new();
    for x in s.iter() {
        if blocked[x] {
            continue;
        }
        out.push(x);
        let row = space.row(x);
        for &j in &row.ids[..row.count_within(sep)] {
            blocked[j as usize] = true;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct PartitionOfUnity {
    pub r: f64,
    pub centers: Vec<usize>,
    /// `psi_i = max(r/2 - d(c_i, ·), 0)`
    pub psi: Vec<ScalarField>,
    /// `Psi = max(sum_i psi_i, r/8)`
    pub normalizer: ScalarField,
    /// `phi_i = psi_i / Psi`
    pub phi: Vec<ScalarField>,
}

impl PartitionOfUnity {
    /// `sum_i phi_i(x)`
    pub fn sum_at(&self, x: usize) -> f64 {
        self.phi.iter().map(|f| f[x]).sum()
    }

    /// `max_x #{i : x in B(c_i, 2r)}`
    pub fn overlap(&self, space: &MetricMeasureSpace) -> usize {
        let mut count = vec![0usize; space.len()];
        for &c in &self.centers {
            let row = space.row(c);
            for &j in &row.ids[..row.count_within(2.0 * self.r)] {
                count[j as usize] += 1;
            }
        }
        count.into_iter().max().unwrap_or(0)
    }

    /// Largest discrete `Lip[phi_i]` over all centers. Pairs with both atoms
    /// outside the support of `phi_i` contribute nothing and are skipped.
    pub fn max_lip(&self, space: &MetricMeasureSpace) -> f64 {
        self.phi
            .par_iter()
            .zip(self.centers.par_iter())
            .map(|(phi, &c)| support_lip(space, phi, c, self.r / 2.0))
            .collect::<Vec<f64>>()
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// `Lip` of a field vanishing outside the open ball `B(c, radius)`.
fn support_lip(space: &MetricMeasureSpace, f: &[f64], c: usize, radius: f64) -> f64 {
    let row = space.row(c);
    let mut best: f64 = 0.0;
    for &x in &row.ids[..row.count_below(radius)] {
        let x = x as usize;
        for y in 0..space.len() {
            if y != x {
                best = best.max((f[x] - f[y]).abs() / space.dist(x, y));
            }
        }
    }
    best
}

/// Partition of unity at scale `r` on `s`; requires `r >= 4 h_min` so
/// that the `r/4` separation is resolvable.
pub fn partition_of_unity(space: &MetricMeasureSpace, s: &SubsetRef, r: f64) -> Result<PartitionOfUnity> {
    let floor = 4.0 * space.h_min();
    if !(r >= floor) || !(r > 0.0) {
        return Err(BbmError::Resolution { what: "partition radius".into(), value: r, floor });
    }
    build_partition(space, s, r)
}

pub(crate) fn build_partition(space: &MetricMeasureSpace, s: &SubsetRef, r: f64) -> Result<PartitionOfUnity> {
    let support = s.positive_part(space);
    if support.is_empty() {
        return Err(BbmError::InvalidArgument("partition of unity needs a set of positive mass".into()));
    }
    let centers = separated_set(space, &support, r / 4.0);
    let n = space.len();
    let psi: Vec<ScalarField> = centers
        .iter()
        .map(|&c| ScalarField((0..n).map(|x| (r / 2.0 - space.dist(c, x)).max(0.0)).collect()))
        .collect();
    let normalizer =
        ScalarField((0..n).map(|x| psi.iter().map(|f| f[x]).sum::<f64>().max(r / 8.0)).collect());
    let phi = psi.iter().map(|f| ScalarField((0..n).map(|x| f[x] / normalizer[x]).collect())).collect();
    Ok(PartitionOfUnity { r, centers, psi, normalizer, phi })
}

/// Measured quantities of the Lipschitz algebra `Lip[psi/Psi] <=
/// Lip[psi]/inf Psi + sup psi Lip[Psi] / inf Psi^2`, one entry per center:
/// `(Lip[phi_i], right-hand side)`.
pub fn quotient_lip_bounds(space: &MetricMeasureSpace, pou: &PartitionOfUnity) -> Vec<(f64, f64)> {
    let all = SubsetRef::all(space);
    let inf_big = pou.normalizer.iter().copied().fold(f64::INFINITY, f64::min);
    let lip_big = lip_constant(space, &pou.normalizer, &all);
    pou.psi
        .iter()
        .zip(&pou.phi)
        .map(|(psi, phi)| {
            let sup = psi.iter().copied().fold(0.0, f64::max);
            let rhs = lip_constant(space, psi, &all) / inf_big + sup * lip_big / (inf_big * inf_big);
            (lip_constant(space, phi, &all), rhs)
        })
        .collect()
}

/// Inner scale factor of the convolution: `r' = r / 32`.
pub const INNER: f64 = 32.0;
/// Annulus `(18 r', 30 r']` around each center.
pub const ANNULUS: (f64, f64) = (18.0, 30.0);

#[derive(Clone, Debug)]
pub struct ConvolutionResult {
    pub r: f64,
    pub inner: f64,
    pub partition: PartitionOfUnity,
    /// `<u>_{A_i}` per center, 0 on null annuli.
    pub averages: Vec<f64>,
    pub empty_annuli: Vec<usize>,
    pub output: ScalarField,
    /// Atoms where the nonempty-annulus weights do not sum to one, so the
    /// value is not a convex combination of annulus averages.
    pub flagged: Vec<usize>,
}

/// `u^r(x) = sum_i phi_i(x) <u>_{A(c_i, (18 r', 30 r'])}` with `r' = r/32`.
/// Requires `r >= 32 h_min`.
pub fn discrete_convolution(
    space: &MetricMeasureSpace,
    s: &SubsetRef,
    r: f64,
    u: &[f64],
) -> Result<ConvolutionResult> {
    let floor = INNER * space.h_min();
    if !(r >= floor) || !(r > 0.0) {
        return Err(BbmError::Resolution { what: "convolution radius".into(), value: r, floor });
    }
    if u.len() != space.len() {
        return Err(BbmError::InvalidArgument(format!("field has {} values for {} atoms", u.len(), space.len())));
    }
    let inner = r / INNER;
    let partition = build_partition(space, s, inner)?;
    let tau = Interval::half_open(ANNULUS.0 * inner, ANNULUS.1 * inner);
    let mut averages = Vec::with_capacity(partition.centers.len());
    let mut empty_annuli = Vec::new();
    for (i, &c) in partition.centers.iter().enumerate() {
        let ann = space.annulus(c, &tau);
        if space.measure(&ann) <= 0.0 {
            empty_annuli.push(i);
        }
        averages.push(space.average(&ann, u));
    }
    let n = space.len();
    let mut output = vec![0.0; n];
    let mut covered = vec![0.0; n];
    let empty: Vec<bool> = (0..partition.centers.len()).map(|i| empty_annuli.binary_search(&i).is_ok()).collect();
    for (i, phi) in partition.phi.iter().enumerate() {
        for x in 0..n {
            output[x] += phi[x] * averages[i];
            if !empty[i] {
                covered[x] += phi[x];
            }
        }
    }
    let flagged = (0..n).filter(|&x| (covered[x] - 1.0).abs() > 1e-12).collect();
    Ok(ConvolutionResult { r, inner, partition, averages, empty_annuli, output: ScalarField(output), flagged })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApproxConstants {
    #[serde(serialize_with = "ser_extended")]
    pub c0: f64,
    #[serde(serialize_with = "ser_extended")]
    pub c1: f64,
    pub h: f64,
    pub flags: Vec<String>,
}

/// Empirical constants of the two approximation estimates:
/// `C0 = max_x |u^r - u|^p / <d_u(x,·)^p>_{B(x,r)}` and
/// `C1 = max_x lip_h[u^r]^p m(B(x,r)) / sum_{A(x,(r/2,r))} Q_u^p w`,
/// with `h = 2 h_min` and `lip_h` taken over neighbours inside `S`.
pub fn approx_error_report(
    space: &MetricMeasureSpace,
    s: &SubsetRef,
    r: f64,
    u: &[f64],
    p: f64,
) -> Result<ApproxConstants> {
    if p < 1.0 {
        return Err(BbmError::InvalidArgument(format!("p must be >= 1, got {p}")));
    }
    let conv = discrete_convolution(space, s, r, u)?;
    let h = 2.0 * space.h_min();
    let in_s = s.mask(space.len());
    let out = &conv.output;
    let shell = Interval::open(r / 2.0, r);
    let per_x: Vec<(f64, f64)> = s
        .ids()
        .par_iter()
        .map(|&x| {
            let row = space.row(x);
            let k = row.count_within(r);
            let m = row.mass_of_first(k);
            let osc = row.ids[..k]
                .iter()
                .map(|&j| (u[j as usize] - u[x]).abs().powf(p) * space.weight(j as usize))
                .sum::<f64>()
                / m;
            let c0 = ratio((conv.output[x] - u[x]).abs().powf(p), osc);
            let range = row.range_of(&shell);
            let den: f64 = range
                .map(|i| {
                    let j = row.ids[i] as usize;
                    ((u[j] - u[x]).abs() / row.dists[i]).powf(p) * space.weight(j)
                })
                .sum();
            // u^r is only built over S, so lip_h looks at neighbours inside S
            let hk = row.count_within(h);
            let lip = (1..hk)
                .filter(|&i| in_s[row.ids[i] as usize])
                .map(|i| (out[row.ids[i] as usize] - out[x]).abs() / row.dists[i])
                .fold(0.0, f64::max);
            let c1 = ratio(lip.powf(p) * m, den);
            (c0, c1)
        })
        .collect();
    let mut c0: f64 = 0.0;
    let mut c1: f64 = 0.0;
    let mut flags = Vec::new();
    for (x, (a, b)) in s.iter().zip(per_x) {
        if a.is_infinite() || b.is_infinite() {
            flags.push(format!("positive over zero at atom {x}"));
        }
        c0 = c0.max(a);
        c1 = c1.max(b);
    }
    Ok(ApproxConstants { c0, c1, h, flags })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}
