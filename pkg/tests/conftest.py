import numpy as np
import pytest

from dosegnn import autodiff as ad
from dosegnn.autodiff import Tensor, backward
from dosegnn.phantom import PhantomConfig, generate_phantom
from dosegnn.volume import VoxelGrid

# a phantom small enough for unit tests: 20^3 CT at 1.5 mm, 6^3 dose at 3 mm
SMALL = PhantomConfig(
    seed=3,
    ct_dims=(20, 20, 20),
    ct_spacing=(1.5, 1.5, 1.5),
    dose_dims=(6, 6, 6),
    dose_spacing=(3.0, 3.0, 3.0),
    dose_origin_jitter=2.0,
    ptv_radius_range=(4.0, 6.0),
    n_oars=1,
)


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_plan():
    return generate_phantom(SMALL, 0)


def random_grid(rng: np.random.Generator, max_dim: int = 12, with_values: bool = True) -> VoxelGrid:
    dims = rng.integers(1, max_dim + 1, size=3)
    spacing = rng.uniform(0.5, 3.0, size=3)
    origin = rng.uniform(-10, 10, size=3)
    values = rng.normal(size=int(np.prod(dims))) if with_values else None
    return VoxelGrid(origin, spacing, dims, values)


def mini_plan(dose_dims=(2, 2, 2), seed=5):
    """A tiny phantom for exhaustive gradient and training checks."""
    cfg = PhantomConfig(
        seed=seed,
        ct_dims=(12, 12, 12),
        ct_spacing=(1.0, 1.0, 1.0),
        dose_dims=dose_dims,
        dose_spacing=(2.0, 2.0, 2.0),
        dose_origin_jitter=1.0,
        ptv_radius_range=(2.0, 3.0),
        n_oars=0,
    )
    return generate_phantom(cfg, 0)


def jitter_params(model, seed=0, scale=0.1):
    """Move every parameter off the zero-bias init.

    With zero biases, all-air patches (normalized to 0) put hidden units exactly
    on the relu kink, where central differences do not measure the derivative.
    """
    rng = np.random.default_rng(seed)
    for t in model.parameters():
        t.data += rng.normal(scale=scale, size=t.shape)
    return model


def objective_grad_error(model, loss_fn, h=1e-5):
    """Max relative error between analytic and central-difference grads of ``loss_fn(model)``."""
    model.zero_grad()
    loss = loss_fn(model)
    backward(loss)
    worst = 0.0
    for p in model.parameters():
        analytic = p.grad.copy()
        for idx in np.ndindex(*p.shape):
            keep = p.data[idx]
            p.data[idx] = keep + h
            up = float(loss_fn(model).data)
            p.data[idx] = keep - h
            down = float(loss_fn(model).data)
            p.data[idx] = keep
            num = (up - down) / (2 * h)
            a = analytic[idx]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    model.zero_grad()
    return worst


def random_pair(seed: int, max_dim: int = 12):
    """Two overlapping random grids plus a threshold in [1, 10] mm."""
    rng = np.random.default_rng(seed)
    ct = VoxelGrid(rng.uniform(-5, 5, 3), rng.uniform(0.5, 2.5, 3), rng.integers(1, max_dim + 1, 3))
    lo, hi = ct.bounds()
    dose = VoxelGrid(rng.uniform(lo - 3, hi), rng.uniform(0.8, 4.0, 3), rng.integers(1, max_dim + 1, 3))
    return ct, dose, float(rng.uniform(1, 10))


def box_oracle(ct: VoxelGrid, dose: VoxelGrid, margin: float) -> np.ndarray:
    lo, hi = dose.bounds()
    keep = []
    for f in range(ct.size):
        p = ct.index_to_world(ct.unflatten_index(f))
        if np.all(p >= lo - margin) and np.all(p <= hi + margin):
            keep.append(f)
    return np.array(keep, dtype=np.int64)


def oracle_nodes(ct, dose, cfg):
    flat = box_oracle(ct, dose, cfg.ct_margin)
    ct_nodes = [(int(f), ct.index_to_world(ct.unflatten_index(f))) for f in flat]
    dose_nodes = [(f, dose.index_to_world(dose.unflatten_index(f))) for f in range(dose.size)]
    return ct_nodes, dose_nodes


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)


def grad_error(fn, *arrays, seed=0, h=1e-5):
    """Max relative error between analytic grads of sum(fn(*xs) * R) and central differences."""
    rng = np.random.default_rng(seed)
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    weights = rng.normal(size=out.shape)

    def scalar(*xs):
        return float(np.sum(fn(*[Tensor(x) for x in xs]).data * weights))

    loss = ad.sum_all(ad.mul(out, Tensor(weights)))
    backward(loss)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = np.zeros_like(arrays[i])
        for idx in np.ndindex(*arrays[i].shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            num[idx] = (scalar(*plus) - scalar(*minus)) / (2 * h)
        worst = max(worst, float(np.max(rel_err(leaf.grad, num))))
    return worst


def check_grad(fn, *arrays, seed=0, tol=1e-4):
    assert grad_error(fn, *arrays, seed=seed) <= tol


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
