import numpy as np
import pytest
import torch

from mmfusion.backbone import BackboneConfig

DESK = [4, 8, 16, 32]
TINY = [2, 2, 2, 2]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return BackboneConfig(block_channels=TINY, dropout=0.0, head_hidden=8)


def finite_difference_grad(fn, tensors, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every element of ``tensors``."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(fn())
                flat[i] = orig - h
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def autograd_grad(fn, tensors):
    for t in tensors:
        t.grad = None
        t.requires_grad_(True)
    fn().backward()
    out = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    for t in tensors:
        t.requires_grad_(False)
        t.grad = None
    return out


def grad_rel_error(fn, tensors, h=1e-5) -> float:
    """Worst relative L2 error between autograd and finite differences."""
    analytic = autograd_grad(fn, tensors)
    numeric = finite_difference_grad(fn, tensors, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(float(n.norm()), float(a.norm()), 1e-8)
        worst = max(worst, float((a - n).norm()) / scale)
    return worst


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE: dict = {}


class criterion:
    """Record PASS/FAIL for one acceptance criterion; failures still propagate."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{exc_type.__name__}: {exc}".splitlines()[0]
        ACCEPTANCE[self.number] = f"{status} criterion {self.number:>2} {self.title}" + (f" [{detail}]" if detail else "")
        print("\n" + ACCEPTANCE[self.number])
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
