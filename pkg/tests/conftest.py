import os

import numpy as np
import pytest

from hvcnet.autograd import Tensor, backward, mul, no_record, record, reduce_sum


def numeric_grad(f, arrays, which, eps=1e-3):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[which]``."""
    x = arrays[which]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f(*arrays)
        x[idx] = orig - eps
        lo = f(*arrays)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def gradcheck(op, arrays, rng, grad_mask=None, eps=1e-3):
    """Max relative error between autograd and central differences for ``op``.

    The scalar checked is ``sum(op(*inputs) * R)`` for a fixed random ``R`` so
    every output element contributes. Relative error is measured against the
    largest gradient magnitude of each input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grad_mask = grad_mask or [True] * len(arrays)
    with no_record():
        out_shape = op(*[Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape)

    def scalar(*arrs):
        with no_record():
            return float(np.sum(op(*[Tensor(a) for a in arrs]).data * weights))

    tensors = [Tensor(a.copy(), requires_grad=m) for a, m in zip(arrays, grad_mask)]
    with record():
        loss = reduce_sum(mul(op(*tensors), Tensor(weights)))
    backward(loss)
    worst = 0.0
    for i, (t, m) in enumerate(zip(tensors, grad_mask)):
        if not m:
            assert t.grad is None
            continue
        num = numeric_grad(scalar, arrays, i, eps)
        scale = max(np.abs(num).max(), np.abs(t.grad).max(), 1e-12)
        worst = max(worst, float(np.abs(t.grad - num).max() / scale))
    return worst


@pytest.fixture(scope="session")
def proxy_data():
    from hvcnet.data.proxy import digits_proxy

    return digits_proxy()


def mnist_paths():
    """Paths to canonical MNIST IDX files from the environment, or None."""
    root = os.environ.get("HVCNET_MNIST_DIR")
    if not root:
        return None
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    out = {}
    for key, name in names.items():
        for cand in (name, name + ".gz"):
            path = os.path.join(root, cand)
            if os.path.exists(path):
                out[key] = path
                break
        else:
            return None
    return out


def tiny_config(**changes):
    """Nine-convolution network with a few filters per layer, for fast tests."""
    from hvcnet.model import ModelConfig

    base = dict(conv_filters=(2, 3, 4, 4, 5, 5, 6, 6, 7), custom_ladder=True)
    base.update(changes)
    return ModelConfig(**base)


# -- acceptance reporting ------------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.skipped:
        detail = report.longrepr[2] if isinstance(report.longrepr, tuple) else "skipped"
        _CRITERIA[number] = (title, "SKIP", detail.removeprefix("Skipped: "))
    elif report.failed:
        _CRITERIA[number] = (title, "FAIL", report.longrepr.reprcrash.message.splitlines()[0] if hasattr(report.longrepr, "reprcrash") else "")
    elif call.when == "call" and number not in _CRITERIA:
        _CRITERIA[number] = (title, "PASS", "")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {status:<4} {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
