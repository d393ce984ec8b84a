import numpy as np
import pytest

from tropic_twin import config, plant
from tropic_twin.brain import FIXED_ACTION


@pytest.fixture(scope="session")
def cfg():
    return config.default_case_study()


def fixed_week(cfg, seed=0, days=7):
    exo = plant.synth_workload_array(days, plant.CONTROL_PERIOD_S, seed)
    return plant.simulate(np.tile(FIXED_ACTION, (len(exo), 1)), exo, cfg)


@pytest.fixture(scope="session")
def week_trace(cfg):
    return fixed_week(cfg, seed=0)


def random_graph(rng, n_inputs=3, depth=12):
    """Build a random differentiable expression over fresh inputs.

    Returns ``build(values) -> (graph, output)`` so the same expression can be
    re-evaluated at shifted inputs for finite differences.  Operands that would
    leave an op's domain are passed through a smooth positive map first, and
    ``max`` operands are kept well apart so the kink never sits inside a
    finite-difference stencil.
    """
    from tropic_twin import autodiff as ad

    plan = [(rng.integers(0, 11), rng.integers(0, 1 << 30), rng.integers(0, 1 << 30))
            for _ in range(depth)]

    def build(values):
        g = ad.Graph()
        pool = [g.input(float(v)) for v in values]
        for op, i, j in plan:
            a, b = pool[i % len(pool)], pool[j % len(pool)]
            pos = lambda v: v * v + 0.5  # noqa: E731
            if op == 0:
                out = a + b
            elif op == 1:
                out = a - b
            elif op == 2:
                out = a * b
            elif op == 3:
                out = a / pos(b)
            elif op == 4:
                out = ad.exp(ad.tanh(a))
            elif op == 5:
                out = ad.log(pos(a))
            elif op == 6:
                out = ad.tanh(a)
            elif op == 7:
                out = ad.maximum(a, b + 1.0) if abs(float(a.value - b.value - 1.0)) > 1e-2 else a + b
            elif op == 8:
                out = a**3
            elif op == 9:
                out = pos(a) ** 1.5
            else:
                out = 2.0 ** ad.tanh(a)
            # Squash large magnitudes so deep products stay well conditioned.
            if abs(float(out.value)) > 5.0:
                out = 5.0 * ad.tanh(out / 5.0)
            pool.append(out)
        return g, pool[-1]

    return build


def fd_gradient(build, x, h=1e-5):
    grad = np.zeros(len(x))
    for k in range(len(x)):
        e = np.zeros(len(x))
        e[k] = h
        grad[k] = (float(build(x + e)[1].value) - float(build(x - e)[1].value)) / (2 * h)
    return grad


def rel_err(a, b, floor=1e-5):
    """Relative error; magnitudes under ``floor`` (exact zeros against
    finite-difference round-off near 1e-11) are compared on that scale."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
