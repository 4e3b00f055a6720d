import pytest
import torch

from adaponder.config import ModelConfig, PonderSettings
from adaponder.model import init_parameters


def tiny_model(K=3, d=16, layers=2, heads=2, seed=0, router_scale=0.0, **cfg_kw):
    """A small random model; ``router_scale > 0`` gives a non-uniform router."""
    cfg = ModelConfig(d_model=d, n_layers=layers, n_heads=heads, seed=seed, **cfg_kw)
    model = init_parameters(cfg, PonderSettings(max_steps=K))
    if router_scale:
        g = torch.Generator().manual_seed(seed + 100)
        with torch.no_grad():
            model.router.weight.normal_(0.0, router_scale, generator=g)
            model.router.bias.normal_(0.0, router_scale, generator=g)
    model.eval()
    return model


@pytest.fixture
def model_k3():
    return tiny_model(K=3, router_scale=2.0)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


# -- acceptance reporting -------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records a result line and returns ``ok``."""

    def report(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
