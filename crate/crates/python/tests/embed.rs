//! Imports the compiled module into an embedded interpreter and drives it
//! from Python source, the same way a user script would.

use pyo3::prelude::*;
use resmin_py::resmin_py;

#[test]
fn python_source_drives_an_interpolation_round_trip() {
    pyo3::append_to_inittab!(resmin_py);
    pyo3::prepare_freethreaded_python();
    Python::with_gil(|py| {
        let code = cr#"
import tempfile

import resmin_py

assert isinstance(resmin_py.__version__, str)

interp = resmin_py.Interpolator.kinetics([0.3, 0.7, 1.1], grid_points=40)
assert len(interp) == 3
assert interp.param_dim == 1
assert interp.state_dim == 3
assert len(interp.times) == 40

res = interp.solve([0.7])
assert res.converged
assert res.rho_star < 1e-10
assert abs(res.a[1] - 1.0) < 1e-6
assert res.slots == [0, 1, 2]
assert "rho_star" in repr(res)

# Off-sample query: still converges, reconstructed state has the right shape.
mid = interp.solve([0.5])
assert mid.rho_star <= mid.rho_initial
x = interp.state(mid.a, 10)
assert len(x) == 3
assert interp.rho([0.5], mid.a) <= mid.rho_initial * (1 + 1e-12)

# Round-trip through a store directory.
with tempfile.TemporaryDirectory() as d:
    interp.save(d + "/store")
    back = resmin_py.Interpolator.from_store(d + "/store")
    assert back.params == interp.params
    assert back.times == interp.times

try:
    resmin_py.Interpolator.from_store("/nonexistent/store")
except IOError:
    pass
else:
    raise AssertionError("missing store should raise IOError")

t, states = resmin_py.integrate_kinetics(0.7, grid_points=40)
assert len(t) == 40 and len(states) == 40 and len(states[0]) == 3
f = resmin_py.kinetics_rhs(states[0], 0.7)
assert len(f) == 3

kl = resmin_py.KlField()
assert kl.modes == 11
assert 0.0 < kl.captured_fraction <= 1.0
assert kl.kappa(600.0, [0.0] * 11) > 0.0
"#;
        if let Err(e) = py.run(code, None, None) {
            e.print(py);
            panic!("embedded python script failed");
        }
    });
}
