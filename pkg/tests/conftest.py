import numpy as np
import pytest
import torch


def finite_difference_error(fn, tensors, eps: float = 1e-6, seed: int = 0) -> float:
    """Relative error between autograd and central differences.

    ``fn`` maps the listed double tensors to a tensor; it is reduced to a
    scalar with fixed random weights. Every element of every tensor is
    perturbed.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        probe = fn(*tensors)
    weights = torch.randn(probe.shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (fn(*tensors) * weights).sum()

    for t in tensors:
        t.grad = None
    scalar().backward()
    analytic = torch.cat([t.grad.reshape(-1) for t in tensors])
    numeric = []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = scalar().item()
                flat[i] = old - eps
                down = scalar().item()
                flat[i] = old
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


@pytest.fixture
def fd_error():
    return finite_difference_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting: one line per criterion in the terminal summary

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the current acceptance test."""

    def record(text: str) -> None:
        request.node.user_properties.append(("detail", text))

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    text = "; ".join(v for k, v in item.user_properties if k == "detail")
    if rep.failed and rep.when == "setup":
        text = "setup failed: " + rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash") else "setup failed"
    _ACCEPTANCE[marker.args[0]] = ("PASS" if rep.passed else "FAIL", text)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, text = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {text}")
