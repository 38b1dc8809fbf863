import numpy as np
import pytest

from groundwork import model as M
from groundwork import synthworld as sw

# small enough that a full finite-difference sweep over every weight is cheap
TINY_WORLD = sw.WorldConfig(grid=(3, 3), count_range=(1, 2), size_range=(1, 2), distractor_range=(0, 2))
TINY_MODEL = M.ModelConfig(img_dim=TINY_WORLD.feature_dim, grid=(3, 3), d=4, n_heads=1, n_img_layers=1,
                           n_txt_layers=1, n_fusion=1, mlp_ratio=1, max_text_len=32)


def randomize(params, seed=0, scale=0.5):
    """Resample every weight, including the zero-initialized fusion outputs."""
    rng = np.random.default_rng(seed)
    for _, t in params.items():
        t.data = rng.normal(0, scale, size=t.shape)
    return params


def tiny_samples(seeds, modes=("detection",)):
    out = []
    for k, s in enumerate(seeds):
        out.append(sw.make_sample(s, TINY_WORLD, modes[k % len(modes)]))
    return out


@pytest.fixture
def tiny_params():
    return randomize(M.init_params(TINY_MODEL, 0), 1)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE: list[str] = []


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
