use pyo3::prelude::*;

#[pymodule]
fn crossview_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
