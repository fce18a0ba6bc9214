import numpy as np
import pytest

from depthgan.layers import SemanticLayout
from depthgan.tensor import ParamStore, Rng, grad_check


def random_layout(h, w, num_labels, seed=0):
    rng = np.random.default_rng(seed)
    return SemanticLayout(rng.integers(0, num_labels, (h, w)), num_labels)


def check_grads(build, shapes, seed=0, h=1e-5, low=None):
    """grad_check of ``build(*tensors)`` projected onto a fixed random direction."""
    rng = Rng(seed)
    store = ParamStore()
    ts = []
    for i, shape in enumerate(shapes):
        data = rng.uniform(low, 2.0, shape) if low is not None else rng.normal(0.0, 1.0, shape)
        ts.append(store.add(f"x{i}", data))
    from depthgan import tensor as T

    out_shape = build(*ts).shape
    r = T.Tensor(rng.normal(0.0, 1.0, out_shape))
    return grad_check(lambda: T.sum_(T.mul(build(*ts), r)), list(store), h)


@pytest.fixture
def rng():
    return Rng(1234)


# acceptance criteria report: criterion number -> (title, passed, detail)
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
