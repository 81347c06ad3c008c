import numpy as np
import pytest

from backbone_fusion import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def leaf(rng, *shape, low=None, margin=0.0):
    """Random float64 leaf; ``low`` makes it positive, ``margin`` keeps |x| away from 0."""
    x = rng.standard_normal(shape)
    if margin:
        x = np.sign(x) * (np.abs(x) + margin)
    if low is not None:
        x = np.abs(x) + low
    return T.Tensor(x, requires_grad=True)


def weights_like(rng, t):
    """Fixed random projection so a scalar loss sees every output entry differently."""
    return T.Tensor(rng.standard_normal(t.shape))


TINY_ARCH = dict(
    image_size=64,
    patch_size=8,
    image_widths=(8, 16),
    image_depths=(2, 2),
    image_heads=(1, 2),
    window=4,
    text_width=16,
    text_depth=2,
    text_heads=2,
    embed_dim=8,
    fused_layers=1,
)


def tiny_config(**kw):
    """A full-pipeline config small enough for unit tests (64x64 scenes, 8-pixel patches)."""
    from backbone_fusion.config import Config

    base = dict(TINY_ARCH, steps=3, batch_size=4, warmup_steps=1, n_train=8, n_eval=8, rerank_k=2, beam=2)
    base.update(kw)
    return Config().with_overrides(**base)


@pytest.fixture(scope="session")
def tiny_records():
    from backbone_fusion.data import generate_dataset

    return generate_dataset(0, 8)


# acceptance lines collected by tests/test_acceptance.py, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0].rstrip("abcd")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:<4} {'PASS' if ok else 'FAIL'}  {detail}")
