use pyo3::prelude::*;

#[pymodule]
fn stitchlab_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
