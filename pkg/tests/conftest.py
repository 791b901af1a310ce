import numpy as np
import pytest
import torch

from lanerep import dataset as D
from lanerep.scenegen import SceneConfig, generate_scene


def finite_difference_check(fn, params, eps=1e-5, n_probe=12, seed=0):
    """Max relative error between autograd and central differences.

    ``fn`` maps nothing to a scalar using ``params`` (float64 leaf tensors with
    requires_grad). A handful of random coordinates per tensor are probed.
    """
    rng = np.random.default_rng(seed)
    loss = fn()
    # roundoff floor: exact-zero gradients still see ~eps_machine * |loss| / eps
    floor = 1e-6 * max(1.0, abs(loss.item()))
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False):
            old = flat[i].item()
            flat[i] = old + eps
            up = fn().item()
            flat[i] = old - eps
            down = fn().item()
            flat[i] = old
            num = (up - down) / (2 * eps)
            ana = g.reshape(-1)[i].item()
            err = abs(num - ana) / max(abs(num), abs(ana), floor)
            worst = max(worst, err)
    return worst


@pytest.fixture(scope="session")
def tiny_dataset():
    scene = generate_scene(SceneConfig(n_cameras=4, groups_per_camera=(2, 2, 1, 2), n_windows=4, seed=2))
    return D.build_dataset(scene)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion; printed at the end of the run."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
