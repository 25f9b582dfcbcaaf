import numpy as np
import pytest

from geot import diffcore as dc
from geot.diffcore import ConfigError, NumericalError, ParamStore


def _store(**groups):
    ps = ParamStore()
    for name, v in groups.items():
        ps.add(name, np.asarray(v, dtype=np.float64))
    return ps


def test_sum_of_squares_loss_and_grad():
    ps = _store(x=[1.0, 2.0, 3.0])
    loss = dc.forward_backward(lambda p: (p.tensor("x") * p.tensor("x")).sum(), ps)
    assert loss == 14.0
    np.testing.assert_array_equal(ps.grad("x"), [2.0, 4.0, 6.0])


def test_constant_zero_loss():
    ps = _store(x=[1.0, -2.0])
    assert dc.forward_backward(lambda p: 0.0, ps) == 0.0
    np.testing.assert_array_equal(ps.grad("x"), [0.0, 0.0])


def test_accumulation_doubles_gradients():
    ps = _store(w=np.arange(6.0).reshape(2, 3))
    fn = lambda p: dc.tsum(dc.exp(p.tensor("w") * 0.1))
    dc.forward_backward(fn, ps)
    once = ps.grad("w").copy()
    dc.forward_backward(fn, ps)
    np.testing.assert_array_equal(ps.grad("w"), 2 * once)
    ps.zero_grad()
    assert not ps.grad("w").any()


def test_forward_backward_bit_deterministic():
    rng = np.random.default_rng(0)
    ps = _store(a=rng.standard_normal((4, 3)), b=rng.standard_normal(3))
    x = rng.standard_normal((5, 4))
    fn = lambda p: dc.tmean(dc.softmax(dc.matmul(x, p.tensor("a")) + p.tensor("b")) ** 2)
    l1 = dc.forward_backward(fn, ps)
    g1 = ps.grad("a").copy()
    ps.zero_grad()
    l2 = dc.forward_backward(fn, ps)
    assert l1 == l2
    assert np.array_equal(g1, ps.grad("a"))


def test_quadratic_passes_finite_diff_tightly():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    ps = _store(x=[0.3, -0.7])
    fn = lambda p: dc.tsum(p.tensor("x") * dc.matmul(p.tensor("x"), A))
    rep = dc.finite_diff_check(fn, ps, step=1e-5, tolerance=1e-4)
    assert rep.ok and rep.worst() < 1e-8


def test_unused_parameter_reports_zero_error():
    ps = _store(x=[1.0, 2.0], unused=[5.0])
    rep = dc.finite_diff_check(lambda p: dc.tsum(p.tensor("x") ** 2), ps)
    assert rep.ok
    assert rep.max_rel_error["unused"] == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_nonfinite_raises():
    ps = _store(x=[0.0])
    with pytest.raises(NumericalError):
        dc.finite_diff_check(lambda p: dc.log(p.tensor("x")), ps)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_raises():
    ps = _store(x=[-1.0])
    with pytest.raises(NumericalError):
        dc.forward_backward(lambda p: dc.log(p.tensor("x")).sum(), ps)


def test_vector_loss_rejected():
    ps = _store(x=[1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        dc.forward_backward(lambda p: p.tensor("x") * 2.0, ps)


@pytest.mark.parametrize("op", ["softmax", "relu", "softplus", "div", "power", "log", "index_select",
                                "row_times_matrix", "neighbor_max", "concat", "pick", "clamp_min"])
def test_primitive_gradients(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    ps = _store(a=rng.uniform(0.5, 1.5, (5, 3)), b=rng.uniform(0.5, 1.5, (5, 3)), T=rng.uniform(0.1, 1, (5, 3, 3)))
    nb = np.array([[1, 2], [0, 3], [4, 1], [2, 0], [3, 2]])
    weights = rng.standard_normal((5, 3))

    def fn(p):
        a, b = p.tensor("a"), p.tensor("b")
        out = {
            "softmax": lambda: dc.softmax(a),
            "relu": lambda: dc.relu(a - 1.0),
            "softplus": lambda: dc.softplus(a),
            "div": lambda: a / b,
            "power": lambda: a ** 1.7,
            "log": lambda: dc.log(a),
            "index_select": lambda: dc.index_select(a, np.array([0, 0, 3, 4, 1])),
            "row_times_matrix": lambda: dc.row_times_matrix(a, p.tensor("T")),
            "neighbor_max": lambda: dc.neighbor_max(a, nb),
            "concat": lambda: dc.concat([a, b], axis=1)[:, 1:4],
            "pick": lambda: dc.reshape(dc.pick(a, np.array([0, 2, 1, 1, 0])), (5, 1)) * b,
            "clamp_min": lambda: dc.clamp_min(a, 1.0),
        }[op]()
        return dc.tsum(out * weights[:, : out.shape[1]] if out.ndim == 2 else out)

    assert dc.finite_diff_check(fn, ps).ok


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    ps = _store(w=rng.standard_normal((3, 4)), b=np.array([1e-300, -0.0, 1 / 3]))
    path = tmp_path / "m.geotckpt"
    dc.save_checkpoint(path, ps, {"epoch": 3})
    back, meta = dc.load_checkpoint(path)
    assert path.read_text().splitlines()[0] == "GEOTCKPT v1"
    assert meta["epoch"] == "3"
    assert back.names() == ps.names()
    for n in ps:
        assert back.shape(n) == ps.shape(n)
        assert back.value(n).tobytes() == ps.value(n).tobytes()


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "bad.geotckpt"
    path.write_text("GEOTCKPT v9\n")
    with pytest.raises(ConfigError):
        dc.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    ps = _store(w=[1.0, 2.0, 3.0])
    path = tmp_path / "m.geotckpt"
    dc.save_checkpoint(path, ps)
    lines = path.read_text().splitlines()
    lines[-1] = " ".join(lines[-1].split()[:2])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ConfigError):
        dc.load_checkpoint(path)


def test_no_grad_tensor_records_nothing():
    ps = _store(x=[1.0, 2.0])
    t = ps.tensor("x", trainable=False)
    y = dc.exp(t)
    assert not y.requires_grad and y.parents == ()
