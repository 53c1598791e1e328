//! Drives the module through an embedded interpreter.

use pyo3::ffi::c_str;
use pyo3::prelude::*;

use dfkit::dfkit as module;

#[test]
fn pipeline_of_operations_from_python() {
    pyo3::append_to_inittab!(module);
    pyo3::prepare_freethreaded_python();
    let dir = tempfile::tempdir().unwrap();
    Python::with_gil(|py| {
        let locals = pyo3::types::PyDict::new(py);
        locals.set_item("tmp", dir.path()).unwrap();
        py.run(
            c_str!(
                r#"
import dfkit, os
shards = dfkit.make_fixture(os.path.join(tmp, "data"), shards=1, members=40)
cat = dfkit.Catalog.init(os.path.join(tmp, "cat"))
eng = dfkit.Engine()
ds = eng.etl([a for a, _ in shards], [s for _, s in shards])
sized = eng.add_signals(eng.filter(ds, "size > 2000"), "byte_len")
assert sized.column("byte_len") == sized.column("size")
m = cat.save(sized, "sized")
assert cat.load("sized@1").fingerprint == m["fingerprint"]
assert cat.list() == [("sized", [1])]
try:
    eng.filter(ds, "nope > 1")
    raise AssertionError("expected an error")
except dfkit.UserError as e:
    assert "nope" in str(e)
"#
            ),
            None,
            Some(&locals),
        )
        .map_err(|e| {
            e.display(py);
            e
        })
        .unwrap();
    });
}
