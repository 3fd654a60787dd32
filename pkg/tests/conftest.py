import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)
settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(f, params, eps=1e-6, rtol=1e-4, atol=1e-9, max_elems=None, gen=None):
    """Compare autograd gradients of scalar ``f()`` with central differences.

    Returns the worst elementwise relative error over every entry checked.
    """
    params = list(params)
    for p in params:
        p.grad = None
    f().backward()
    analytic = [p.grad.detach().clone() for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            idx = range(flat.numel())
            if max_elems is not None and flat.numel() > max_elems:
                idx = torch.randperm(flat.numel(), generator=gen)[:max_elems].tolist()
            for i in idx:
                old = flat[i].item()
                flat[i] = old + eps
                up = f().item()
                flat[i] = old - eps
                down = f().item()
                flat[i] = old
                num = (up - down) / (2 * eps)
                a = g.view(-1)[i].item()
                err = abs(a - num) / max(abs(a), abs(num), atol / rtol)
                worst = max(worst, err)
    return worst


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
