use pyo3::prelude::*;

#[pymodule]
fn nsg_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
