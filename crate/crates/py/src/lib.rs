//! Python bindings: routing primitives, latitude weights, and checkpoint
//! rollouts returned as numpy arrays.

use std::path::PathBuf;

use chrono::{DateTime, Utc};
use ndarray::{Array4, Axis};
use numpy::{IntoPyArray, PyArray1, PyArray2, PyArray4, PyReadonlyArray2};
use pyo3::exceptions::{PyFloatingPointError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use oceancast::data::ingest_raw;
use oceancast::eval::{Forecaster, Provenance};
use oceancast::grid::latitude_weights as lat_weights;
use oceancast::mot::{topk_select as select, SelectionMatrix};
use oceancast::train::{load_checkpoint, TrainState};
use oceancast::Error;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => PyValueError::new_err(msg),
        3 => PyOSError::new_err(msg),
        4 => PyFloatingPointError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

/// Normalized cos-latitude weights; they sum to the number of rows.
#[pyfunction]
fn latitude_weights<'py>(py: Python<'py>, latitudes: Vec<f64>) -> PyResult<Bound<'py, PyArray1<f64>>> {
    let w = lat_weights(&latitudes).map_err(to_py)?;
    Ok(w.0.into_pyarray(py))
}

/// Indicator of the `k` smallest entries in each row of a row-stochastic
/// selection matrix (ties go to the lower index).
#[pyfunction]
fn topk_select<'py>(py: Python<'py>, values: PyReadonlyArray2<'py, f64>, k: usize) -> PyResult<Bound<'py, PyArray2<u8>>> {
    let v = SelectionMatrix::from_values(values.as_array().to_owned(), 0.0, k).map_err(to_py)?;
    Ok(select(&v).indicator.into_pyarray(py))
}

/// A trained checkpoint.
#[pyclass(module = "oceancast_py")]
struct Model {
    state: TrainState,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: load_checkpoint(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn n_inputs(&self) -> usize {
        self.state.net_config.n_inputs
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.state.iteration
    }

    /// Channel labels in storage order, e.g. `T_0m`.
    #[getter]
    fn channel_labels(&self) -> Vec<String> {
        (0..self.state.layout.total_channels())
            .map(|c| self.state.layout.label(c, &self.state.grid))
            .collect()
    }

    /// Learned channel-by-window selection matrix.
    fn selection<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        self.state.selection.values().clone().into_pyarray(py)
    }

    /// Per-channel index of the preferred input window.
    fn selection_argmin(&self) -> Vec<usize> {
        self.state.selection.argmin()
    }

    /// Rolls out `steps` six-hourly states from the series stored in
    /// `data_dir`, initialized at the RFC 3339 time `init`. Returns physical
    /// values shaped `(steps, channels, lat, lon)`.
    fn rollout<'py>(&self, py: Python<'py>, data_dir: PathBuf, init: &str, steps: usize) -> PyResult<Bound<'py, PyArray4<f64>>> {
        let t: DateTime<Utc> = init
            .parse()
            .map_err(|e| PyValueError::new_err(format!("bad init time {init:?}: {e}")))?;
        let store = ingest_raw(&data_dir).map_err(to_py)?;
        let series = store.normalized(&self.state.norm).map_err(to_py)?;
        let n = self.state.net_config.n_inputs;
        let idx = store
            .index_of(t)
            .filter(|&i| i + 1 >= n)
            .ok_or_else(|| PyValueError::new_err(format!("no {n}-state window ends at {init}")))?;
        let fc = Forecaster::new(&self.state, &series.mask, Provenance::default()).map_err(to_py)?;
        let run = fc.rollout(&series.states[idx + 1 - n..=idx], t, steps).map_err(to_py)?;
        let (c, h, w) = run.states[0].dim();
        let mut out = Array4::<f64>::zeros((steps, c, h, w));
        for (mut slot, s) in out.axis_iter_mut(Axis(0)).zip(&run.states) {
            slot.assign(&self.state.norm.denormalize(s).map_err(to_py)?);
        }
        Ok(out.into_pyarray(py))
    }
}

#[pymodule]
fn oceancast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(latitude_weights, m)?)?;
    m.add_function(wrap_pyfunction!(topk_select, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
