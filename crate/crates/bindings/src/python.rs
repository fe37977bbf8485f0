use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use crate::ImageSource;

fn err(e: histograph_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[derive(FromPyObject)]
enum ImageArg {
    Bytes(Vec<u8>),
    Path(PathBuf),
}

impl ImageArg {
    fn source(&self) -> ImageSource<'_> {
        match self {
            Self::Bytes(b) => ImageSource::Ppm(b),
            Self::Path(p) => ImageSource::Path(p),
        }
    }
}

/// Graph JSON for a PPM path or PPM bytes.
#[pyfunction]
#[pyo3(signature = (image, params = ""))]
fn build_cell_graph(image: ImageArg, params: &str) -> PyResult<String> {
    crate::build_cell_graph(image.source(), params).and_then(|g| g.to_json()).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (image, params = ""))]
fn build_tissue_graph(image: ImageArg, params: &str) -> PyResult<String> {
    crate::build_tissue_graph(image.source(), params).and_then(|g| g.to_json()).map_err(err)
}

/// (class, probabilities)
#[pyfunction]
fn predict(model: PathBuf, graph: &str) -> PyResult<(usize, Vec<f64>)> {
    let p = crate::predict(&model, graph).map_err(err)?;
    Ok((p.class, p.probabilities))
}

#[pyfunction]
#[pyo3(signature = (model, graph, method, class_ = None, params = ""))]
fn explain(model: PathBuf, graph: &str, method: &str, class_: Option<usize>, params: &str) -> PyResult<Vec<f64>> {
    Ok(crate::explain(&model, graph, method, class_, params).map_err(err)?.scores)
}

#[pyfunction]
fn top_entities(scores: Vec<f64>, k: usize) -> PyResult<Vec<u32>> {
    crate::top_entities(&scores, k).map_err(err)
}

#[pymodule]
fn histograph(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(build_cell_graph, m)?)?;
    m.add_function(wrap_pyfunction!(build_tissue_graph, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(top_entities, m)?)?;
    Ok(())
}
