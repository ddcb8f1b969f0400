//! Strict JSON experiment configuration.
//!
//! Unknown keys are rejected and schedules have no defaults; only the
//! window width and tolerances fall back to defaults.

use serde::{Deserialize, Serialize};

use crate::bbm::{DeltaSchedule, EnergyArgs};
use crate::energy::{MetricMap, ScalarField};
use crate::error::{BbmError, Result};
use crate::expr::Expr;
use crate::mollifier::{AdmissibilityArgs, MollifierFamily, MollifierSpec};
use crate::regularity::RadiusSelection;
use crate::space::{Geometry, MetricMeasureSpace, SpaceGenerator, SubsetRef};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub space: SpaceGenerator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MapSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mollifier: Option<MollifierSpec>,
    pub p: f64,
    /// Domain `O`; the whole space when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<SubsetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedules: Option<Schedules>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admissibility: Option<AdmissibilityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checks: Option<ChecksConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approximation: Option<ApproxConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub riesz: Option<RieszConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

/// The map `f` whose functional is studied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    /// Real-valued `u(x, y)` of the atom coordinates.
    ScalarExpr { expr: String },
    /// Identity of a circle grid into itself.
    IdentityCircle,
    /// One real value per atom.
    Table { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SubsetSpec {
    All,
    Ids { ids: Vec<usize> },
    /// Atoms whose first coordinate lies in `[lo, hi]`.
    CoordRange { lo: f64, hi: f64 },
    Ball { center: usize, radius: f64 },
}

/// Disjoint regions of the domain for the dictionary lower bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSpec {
    /// `count` consecutive blocks of domain atoms in id order.
    Blocks { count: usize },
    Lists { ids: Vec<Vec<usize>> },
}

fn default_window() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedules {
    pub delta: Vec<f64>,
    pub radius: Vec<f64>,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_tol() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub h: f64,
    pub dictionary_size: usize,
    pub cap: f64,
    pub regions: RegionSpec,
    /// `L^p` acceptance distance for convolution candidates.
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_margins() -> Vec<f64> {
    vec![0.0]
}

fn default_budget() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmissibilityConfig {
    /// Families to audit; the top-level mollifier when empty.
    #[serde(default)]
    pub families: Vec<MollifierSpec>,
    #[serde(default = "default_margins")]
    pub margins: Vec<f64>,
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// The set `V`; the domain when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<SubsetSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoincareConfig {
    #[serde(rename = "R")]
    pub big_r: f64,
    pub lambda: f64,
    pub h: f64,
    /// Test functions in `x`, `y`; the map itself when empty.
    #[serde(default)]
    pub tests: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    /// `R` values for the doubling constant.
    #[serde(default)]
    pub doubling: Vec<f64>,
    #[serde(default)]
    pub strong_doubling: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poincare: Option<PoincareConfig>,
    #[serde(default)]
    pub radii: RadiusSelection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convolution_radius: Option<f64>,
    /// Atoms at which `u^r` is recorded.
    #[serde(default)]
    pub probes: Vec<usize>,
}

fn default_riesz_tol() -> f64 {
    1e-12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RieszConfig {
    /// Density `g(x, y)`; the energy measure is `g w`.
    pub density: String,
    /// `(atom, r)` pairs.
    pub points: Vec<(usize, f64)>,
    #[serde(default = "default_riesz_tol")]
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for CSV and JSON outputs, relative to the config file.
    pub dir: String,
    /// Stem of every output file name.
    pub name: String,
    /// Golden file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden: Option<String>,
}

/// Parses and validates; every violation is listed in the error.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| BbmError::Config(vec![e.to_string()]))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.p >= 1.0) {
            errors.push(format!("p must be ≥ 1, got {}", self.p));
        }
        if let Some(m) = &self.map {
            match m {
                MapSpec::ScalarExpr { expr } => {
                    if let Err(e) = Expr::compile(expr, &["x", "y"]) {
                        errors.push(format!("map: {e}"));
                    }
                }
                MapSpec::IdentityCircle => {
                    if !matches!(self.space, SpaceGenerator::CircleGrid { .. }) {
                        errors.push("map identity_circle needs a circle_grid space".into());
                    }
                }
                MapSpec::Table { values } => {
                    if values.iter().any(|v| !v.is_finite()) {
                        errors.push("map table has non-finite values".into());
                    }
                }
            }
        }
        if let Some(spec) = &self.mollifier {
            if let Err(e) = spec.build(self.p.max(1.0)) {
                errors.push(format!("mollifier: {e}"));
            }
        }
        if let Some(s) = &self.schedules {
            check_decreasing("delta", &s.delta, &mut errors);
            check_decreasing("radius", &s.radius, &mut errors);
            if s.delta.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
                errors.push("delta values must lie in (0, 1)".into());
            }
            if s.radius.iter().any(|&r| !(r > 0.0)) {
                errors.push("radius values must be positive".into());
            }
            if s.window == 0 || s.window > s.delta.len() {
                errors.push(format!("window {} must lie in 1..={}", s.window, s.delta.len()));
            }
        }
        if let Some(e) = &self.energy {
            if !(e.h > 0.0) {
                errors.push("energy h must be positive".into());
            }
            if e.dictionary_size == 0 {
                errors.push("energy dictionary_size must be positive".into());
            }
            if !(e.cap > 0.0) {
                errors.push("energy cap must be positive".into());
            }
            if !(e.tol > 0.0) {
                errors.push("energy tol must be positive".into());
            }
            if let RegionSpec::Blocks { count: 0 } = e.regions {
                errors.push("region block count must be positive".into());
            }
            if self.map.is_none() {
                errors.push("energy section needs a map".into());
            }
        }
        if self.runs_sandwich() && self.schedules.is_none() {
            errors.push("map, mollifier and energy need schedules".into());
        }
        if let Some(a) = &self.admissibility {
            if self.schedules.is_none() {
                errors.push("admissibility needs schedules".into());
            }
            if a.families.is_empty() && self.mollifier.is_none() {
                errors.push("admissibility needs families or a mollifier".into());
            }
            for (i, f) in a.families.iter().enumerate() {
                if let Err(e) = f.build(self.p.max(1.0)) {
                    errors.push(format!("admissibility family {i}: {e}"));
                }
            }
            if a.margins.is_empty() || a.margins.iter().any(|&m| !(m >= 0.0)) {
                errors.push("admissibility margins must be nonempty and nonnegative".into());
            }
        }
        if let Some(c) = &self.checks {
            if c.doubling.iter().chain(&c.strong_doubling).any(|&r| !(r > 0.0)) {
                errors.push("check radii R must be positive".into());
            }
            if let Some(pc) = &c.poincare {
                if !(pc.big_r > 0.0) || !(pc.lambda >= 1.0) || !(pc.h > 0.0) {
                    errors.push("poincare needs R > 0, lambda ≥ 1 and h > 0".into());
                }
                for t in &pc.tests {
                    if let Err(e) = Expr::compile(t, &["x", "y"]) {
                        errors.push(format!("poincare test: {e}"));
                    }
                }
                if pc.tests.is_empty() && self.map.is_none() {
                    errors.push("poincare needs tests or a scalar map".into());
                }
            }
        }
        if let Some(a) = &self.approximation {
            if a.partition_radius.iter().chain(&a.convolution_radius).any(|&r| !(r > 0.0)) {
                errors.push("approximation radii must be positive".into());
            }
            if a.convolution_radius.is_some() && self.map.is_none() {
                errors.push("convolution needs a scalar map".into());
            }
        }
        if let Some(r) = &self.riesz {
            if let Err(e) = Expr::compile(&r.density, &["x", "y"]) {
                errors.push(format!("riesz density: {e}"));
            }
            if r.points.iter().any(|&(_, rad)| !(rad > 0.0)) {
                errors.push("riesz radii must be positive".into());
            }
        }
        if let Some(o) = &self.output {
            if o.name.is_empty() || o.name.contains(['/', '\\']) {
                errors.push("output name must be a plain file stem".into());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(BbmError::Config(errors))
        }
    }

    pub fn runs_sandwich(&self) -> bool {
        self.map.is_some() && self.mollifier.is_some() && self.energy.is_some()
    }

    pub fn build_space(&self) -> Result<MetricMeasureSpace> {
        MetricMeasureSpace::build(&self.space)
    }

    pub fn domain(&self, space: &MetricMeasureSpace) -> Result<SubsetRef> {
        match &self.domain {
            Some(s) => s.resolve(space),
            None => Ok(SubsetRef::all(space)),
        }
    }

    pub fn build_map(&self, space: &MetricMeasureSpace) -> Result<Option<MetricMap>> {
        let Some(m) = &self.map else { return Ok(None) };
        Ok(Some(match m {
            MapSpec::ScalarExpr { expr } => MetricMap::scalar(&field_from_expr(space, expr)?),
            MapSpec::IdentityCircle => match space.geometry() {
                Geometry::Circle { .. } => MetricMap::identity(space),
                _ => return Err(BbmError::Config(vec!["map identity_circle needs a circle_grid space".into()])),
            },
            MapSpec::Table { values } => {
                if values.len() != space.len() {
                    return Err(BbmError::Config(vec![format!(
                        "map table has {} values for {} atoms",
                        values.len(),
                        space.len()
                    )]));
                }
                MetricMap::scalar(&ScalarField(values.clone()))
            }
        }))
    }

    pub fn build_family(&self) -> Result<Option<MollifierFamily>> {
        self.mollifier.as_ref().map(|s| s.build(self.p)).transpose()
    }

    pub fn delta_schedule(&self) -> Result<DeltaSchedule> {
        let s = self.require_schedules()?;
        DeltaSchedule::new(s.delta.clone(), s.window)
    }

    pub fn energy_args(&self, space: &MetricMeasureSpace, domain: &SubsetRef) -> Result<EnergyArgs> {
        let e = self.energy.as_ref().ok_or_else(|| BbmError::Config(vec!["missing energy section".into()]))?;
        let s = self.require_schedules()?;
        Ok(EnergyArgs {
            h: e.h,
            dictionary_size: e.dictionary_size,
            cap: e.cap,
            regions: e.regions.resolve(space, domain)?,
            radii: s.radius.clone(),
            tol: e.tol,
        })
    }

    /// Families to audit with their admissibility arguments and the set `V`.
    pub fn admissibility_args(
        &self,
        space: &MetricMeasureSpace,
    ) -> Result<Option<(Vec<MollifierFamily>, AdmissibilityArgs, SubsetRef)>> {
        let Some(a) = &self.admissibility else { return Ok(None) };
        let s = self.require_schedules()?;
        let families = if a.families.is_empty() {
            vec![self.build_family()?.expect("validated")]
        } else {
            a.families.iter().map(|f| f.build(self.p)).collect::<Result<_>>()?
        };
        let mut args = AdmissibilityArgs::new(s.delta.clone(), s.radius.clone());
        args.margins = a.margins.clone();
        args.budget = a.budget;
        args.window = s.window;
        let v = match &a.region {
            Some(r) => r.resolve(space)?,
            None => self.domain(space)?,
        };
        Ok(Some((families, args, v)))
    }

    fn require_schedules(&self) -> Result<&Schedules> {
        self.schedules.as_ref().ok_or_else(|| BbmError::Config(vec!["missing schedules".into()]))
    }
}

fn check_decreasing(name: &str, s: &[f64], errors: &mut Vec<String>) {
    if s.is_empty() {
        errors.push(format!("{name} schedule is empty"));
    } else if s.windows(2).any(|w| !(w[1] < w[0])) {
        errors.push(format!("{name} schedule not decreasing"));
    }
}

/// Evaluates an expression in `x`, `y` at every atom's coordinates.
pub fn field_from_expr(space: &MetricMeasureSpace, src: &str) -> Result<ScalarField> {
    let e = Expr::compile(src, &["x", "y"])?;
    let values = (0..space.len())
        .map(|i| {
            let c = space.coords(i);
            e.eval(&c)
        })
        .collect::<Result<Vec<f64>>>()?;
    let field = ScalarField(values);
    field.check_finite()?;
    Ok(field)
}

impl SubsetSpec {
    pub fn resolve(&self, space: &MetricMeasureSpace) -> Result<SubsetRef> {
        match self {
            SubsetSpec::All => Ok(SubsetRef::all(space)),
            SubsetSpec::Ids { ids } => SubsetRef::new(space, ids.iter().copied()),
            SubsetSpec::CoordRange { lo, hi } => {
                SubsetRef::new(space, (0..space.len()).filter(|&i| (*lo..=*hi).contains(&space.coords(i)[0])))
            }
            SubsetSpec::Ball { center, radius } => {
                if *center >= space.len() {
                    return Err(BbmError::InvalidArgument(format!("ball center {center} out of range")));
                }
                Ok(space.ball(*center, *radius))
            }
        }
    }
}

impl RegionSpec {
    pub fn resolve(&self, space: &MetricMeasureSpace, domain: &SubsetRef) -> Result<Vec<SubsetRef>> {
        match self {
            RegionSpec::Blocks { count } => {
                let ids = domain.ids();
                let k = (*count).max(1);
                (0..k)
                    .map(|j| SubsetRef::new(space, ids[j * ids.len() / k..(j + 1) * ids.len() / k].iter().copied()))
                    .collect()
            }
            RegionSpec::Lists { ids } => ids.iter().map(|l| SubsetRef::new(space, l.iter().copied())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "space": {"kind": "interval_grid", "n": 5},
        "map": {"kind": "scalar_expr", "expr": "x"},
        "mollifier": {"family": 3},
        "p": 1,
        "schedules": {"delta": [0.4, 0.2], "radius": [0.4], "window": 2},
        "energy": {"h": 0.2, "dictionary_size": 2, "cap": 1, "regions": {"kind": "blocks", "count": 1}}
    }"#;

    fn err_of(text: &str) -> String {
        parse_config(text).unwrap_err().to_string()
    }

    #[test]
    fn minimal_config_parses() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.space, SpaceGenerator::IntervalGrid { n: 5 });
        assert!(cfg.runs_sandwich());
        assert_eq!(cfg.energy.as_ref().unwrap().tol, 0.05);
    }

    #[test]
    fn reports_each_violation() {
        let bad = MINIMAL.replace("[0.4, 0.2]", "[0.1, 0.2]");
        assert!(err_of(&bad).contains("schedule not decreasing"));
        let bad = MINIMAL.replace("\"p\": 1", "\"p\": 0.5");
        assert!(err_of(&bad).contains("p must be ≥ 1"));
        let both = bad.replace("[0.4, 0.2]", "[0.1, 0.2]");
        let msg = err_of(&both);
        assert!(msg.contains("p must be ≥ 1") && msg.contains("schedule not decreasing"), "{msg}");
    }

    #[test]
    fn rejects_unknown_keys_and_missing_schedules() {
        let extra = MINIMAL.replace("\"p\": 1", "\"p\": 1, \"colour\": 2");
        assert!(err_of(&extra).contains("colour"));
        let v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        let mut obj = v.as_object().unwrap().clone();
        obj.remove("schedules");
        assert!(err_of(&serde_json::Value::Object(obj).to_string()).contains("need schedules"));
    }

    #[test]
    fn round_trip() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(parse_config(&cfg.to_json()).unwrap(), cfg);
        let mut full = cfg.clone();
        full.checks = Some(ChecksConfig {
            doubling: vec![0.2],
            strong_doubling: vec![],
            poincare: Some(PoincareConfig { big_r: 0.2, lambda: 2.0, h: 0.2, tests: vec!["x * x".into()] }),
            radii: RadiusSelection::Explicit(vec![0.2]),
        });
        full.approximation = Some(ApproxConfig { partition_radius: Some(0.8), convolution_radius: None, probes: vec![0] });
        full.riesz = Some(RieszConfig { density: "1".into(), points: vec![(2, 0.4)], tol: 1e-9 });
        full.output = Some(OutputConfig { dir: "out".into(), name: "line5".into(), golden: None });
        full.domain = Some(SubsetSpec::CoordRange { lo: 0.2, hi: 0.8 });
        assert_eq!(parse_config(&full.to_json()).unwrap(), full);
    }

    #[test]
    fn builds_pieces() {
        let cfg = parse_config(MINIMAL).unwrap();
        let s = cfg.build_space().unwrap();
        let f = cfg.build_map(&s).unwrap().unwrap();
        assert!((f.scalar_values().unwrap()[2] - 0.5).abs() < 1e-15);
        let dom = SubsetSpec::CoordRange { lo: 0.2, hi: 0.8 }.resolve(&s).unwrap();
        assert_eq!(dom.ids(), &[1, 2, 3]);
        let regions = RegionSpec::Blocks { count: 2 }.resolve(&s, &SubsetRef::all(&s)).unwrap();
        assert_eq!((regions[0].ids(), regions[1].ids()), (&[0, 1][..], &[2, 3, 4][..]));
        let table = MapSpec::Table { values: vec![0.0; 4] };
        let mut c2 = cfg.clone();
        c2.map = Some(table);
        assert!(c2.build_map(&s).is_err());
    }
}
