import numpy as np
import pytest
import torch

from semfeat.model import ModelConfig

TINY = ModelConfig(depth=2, base_channels=4, d_enc=8, d_task=4, d_attn=4, d_desc=8, num_classes=6)


def central_difference(fn, tensor: torch.Tensor, index: tuple, step: float = 1e-4) -> float:
    """d fn / d tensor[index] by central differences, restoring the entry afterwards."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + step
        up = float(fn())
        tensor[index] = orig - step
        down = float(fn())
        tensor[index] = orig
    return (up - down) / (2 * step)


def grad_rel_error(fn, tensors: dict[str, torch.Tensor], samples: int = 12, seed: int = 0) -> dict[str, float]:
    """Norm-relative error between autograd and finite differences on sampled entries of each tensor."""
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.grad = None
    fn().backward()
    errors = {}
    for name, t in tensors.items():
        flat = rng.choice(t.numel(), size=min(samples, t.numel()), replace=False)
        idx = [np.unravel_index(i, t.shape) for i in flat]
        analytic = np.array([t.grad[i].item() for i in idx])
        numeric = np.array([central_difference(fn, t, i) for i in idx])
        scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
        errors[name] = float(np.linalg.norm(analytic - numeric) / scale)
    return errors


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return TINY


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
