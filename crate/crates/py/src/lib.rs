//! Python bindings for the `bbmlab` core.

use bbmlab::approx::discrete_convolution;
use bbmlab::bbm;
use bbmlab::cli::run_pipeline;
use bbmlab::config::parse_config;
use bbmlab::energy::{riesz_rp, EnergyDensity, MetricMap, ScalarField};
use bbmlab::mollifier::{IntervalPartition, MollifierFamily};
use bbmlab::regularity::{doubling_constant, strong_doubling_constant, RadiusSelection};
use bbmlab::space::{MetricMeasureSpace, SpaceGenerator, SubsetRef};
use bbmlab::BbmError;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: BbmError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A finite metric measure space.
#[pyclass(name = "Space", frozen)]
struct Space {
    inner: MetricMeasureSpace,
}

impl Space {
    fn subset(&self, ids: Option<Vec<usize>>) -> PyResult<SubsetRef> {
        match ids {
            None => Ok(SubsetRef::all(&self.inner)),
            Some(ids) => SubsetRef::new(&self.inner, ids).map_err(py_err),
        }
    }

    fn field(&self, values: Vec<f64>) -> PyResult<ScalarField> {
        if values.len() != self.inner.len() {
            return Err(PyValueError::new_err(format!("field has {} values for {} atoms", values.len(), self.inner.len())));
        }
        Ok(ScalarField(values))
    }

    /// `None` means the identity map into the space itself.
    fn map(&self, values: Option<Vec<f64>>) -> PyResult<MetricMap> {
        match values {
            None => Ok(MetricMap::identity(&self.inner)),
            Some(v) => Ok(MetricMap::scalar(&self.field(v)?)),
        }
    }
}

fn build(gen: SpaceGenerator) -> PyResult<Space> {
    MetricMeasureSpace::build(&gen).map(|inner| Space { inner }).map_err(py_err)
}

#[pymethods]
impl Space {
    /// Builds a space from its JSON description, e.g. `{"kind": "circle_grid", "n": 100}`.
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        let gen: SpaceGenerator = serde_json::from_str(spec).map_err(|e| PyValueError::new_err(e.to_string()))?;
        build(gen)
    }

    #[staticmethod]
    fn interval_grid(n: usize) -> PyResult<Self> {
        build(SpaceGenerator::IntervalGrid { n })
    }

    #[staticmethod]
    fn interval_nodes(n: usize) -> PyResult<Self> {
        build(SpaceGenerator::IntervalNodes { n })
    }

    #[staticmethod]
    fn circle_grid(n: usize) -> PyResult<Self> {
        build(SpaceGenerator::CircleGrid { n })
    }

    #[staticmethod]
    #[pyo3(signature = (matrix, weights=None))]
    fn explicit(matrix: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> PyResult<Self> {
        build(SpaceGenerator::Explicit { matrix, weights })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Space(atoms={}, h_min={}, diameter={})", self.inner.len(), self.inner.h_min(), self.inner.diameter())
    }

    fn dist(&self, i: usize, j: usize) -> PyResult<f64> {
        self.check(i)?;
        self.check(j)?;
        Ok(self.inner.dist(i, j))
    }

    fn coords(&self, i: usize) -> PyResult<(f64, f64)> {
        self.check(i)?;
        let c = self.inner.coords(i);
        Ok((c[0], c[1]))
    }

    fn ball_mass(&self, x: usize, r: f64) -> PyResult<f64> {
        self.check(x)?;
        Ok(self.inner.ball_mass(x, r))
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn h_min(&self) -> f64 {
        self.inner.h_min()
    }

    #[getter]
    fn diameter(&self) -> f64 {
        self.inner.diameter()
    }

    /// First coordinate of every atom.
    fn xs(&self) -> Vec<f64> {
        (0..self.inner.len()).map(|i| self.inner.coords(i)[0]).collect()
    }
}

impl Space {
    fn check(&self, i: usize) -> PyResult<()> {
        if i < self.inner.len() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("atom {i} out of range")))
        }
    }
}

fn family(kappa: u8, p: f64) -> PyResult<MollifierFamily> {
    MollifierFamily::builtin(kappa, p).map_err(py_err)
}

/// Nonlocal functional `F(δ)` of `values` (identity map when omitted) with the
/// builtin family `ρ^kappa`.
#[pyfunction]
#[pyo3(signature = (space, delta, kappa=3, p=1.0, values=None, domain=None))]
fn functional(space: &Space, delta: f64, kappa: u8, p: f64, values: Option<Vec<f64>>, domain: Option<Vec<usize>>) -> PyResult<f64> {
    let o = space.subset(domain)?;
    let f = space.map(values)?;
    let fam = family(kappa, p)?;
    Ok(bbm::functional(&space.inner, &o, &f, &fam, delta, p))
}

/// Near and far parts of the functional at radius `r`.
#[pyfunction]
#[pyo3(signature = (space, delta, r, kappa=3, p=1.0, values=None, domain=None))]
fn functional_split(
    space: &Space,
    delta: f64,
    r: f64,
    kappa: u8,
    p: f64,
    values: Option<Vec<f64>>,
    domain: Option<Vec<usize>>,
) -> PyResult<(f64, f64)> {
    let o = space.subset(domain)?;
    let f = space.map(values)?;
    let fam = family(kappa, p)?;
    Ok(bbm::functional_split(&space.inner, &o, r, &f, &fam, delta, p))
}

/// Lower and upper dyadic sums at scale `r`.
#[pyfunction]
#[pyo3(signature = (space, delta, r, kappa=3, p=1.0, subset=None))]
fn sums(space: &Space, delta: f64, r: f64, kappa: u8, p: f64, subset: Option<Vec<usize>>) -> PyResult<(f64, f64)> {
    let e = space.subset(subset)?;
    let fam = family(kappa, p)?;
    let tau = IntervalPartition::dyadic(r);
    let lo = bbmlab::mollifier::lower_sum(&space.inner, &e, &fam, delta, &tau).map_err(py_err)?;
    let hi = bbmlab::mollifier::upper_sum(&space.inner, &e, &fam, delta, &tau).map_err(py_err)?;
    Ok((lo, hi))
}

/// Discrete convolution `u^r`; returns the output and the flagged atoms.
#[pyfunction]
#[pyo3(signature = (space, r, values, subset=None))]
fn convolution(space: &Space, r: f64, values: Vec<f64>, subset: Option<Vec<usize>>) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let s = space.subset(subset)?;
    let u = space.field(values)?;
    let c = discrete_convolution(&space.inner, &s, r, &u).map_err(py_err)?;
    Ok((c.output.0, c.flagged))
}

/// Riesz-type potential `R_p(x, r)` of an energy density given per atom.
#[pyfunction]
#[pyo3(signature = (space, density, x, r, tol=1e-12))]
fn riesz(space: &Space, density: Vec<f64>, x: usize, r: f64, tol: f64) -> PyResult<f64> {
    space.check(x)?;
    let e = EnergyDensity(space.field(density)?.0);
    riesz_rp(&space.inner, &e, x, r, tol).map_err(py_err)
}

/// Doubling or strong doubling constant up to `big_r`, over all critical radii
/// above `floor`.
#[pyfunction]
#[pyo3(signature = (space, big_r, strong=false, floor=0.0, subset=None))]
fn regularity(space: &Space, big_r: f64, strong: bool, floor: f64, subset: Option<Vec<usize>>) -> PyResult<f64> {
    let s = space.subset(subset)?;
    let sel = RadiusSelection::Critical { floor };
    let rep = if strong {
        strong_doubling_constant(&space.inner, &s, big_r, &sel)
    } else {
        doubling_constant(&space.inner, &s, big_r, &sel)
    };
    rep.map(|r| r.constant).map_err(py_err)
}

/// Runs an experiment config given as JSON text; returns the summary as JSON text.
#[pyfunction]
#[pyo3(signature = (text, name="experiment"))]
fn run_config(py: Python<'_>, text: &str, name: &str) -> PyResult<String> {
    let cfg = parse_config(text).map_err(py_err)?;
    let out = py.allow_threads(|| run_pipeline(&cfg, name)).map_err(py_err)?;
    Ok(out.summary.to_string())
}

#[pymodule]
#[pyo3(name = "bbmlab")]
fn bbmlab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Space>()?;
    m.add_function(wrap_pyfunction!(functional, m)?)?;
    m.add_function(wrap_pyfunction!(functional_split, m)?)?;
    m.add_function(wrap_pyfunction!(sums, m)?)?;
    m.add_function(wrap_pyfunction!(convolution, m)?)?;
    m.add_function(wrap_pyfunction!(riesz, m)?)?;
    m.add_function(wrap_pyfunction!(regularity, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
