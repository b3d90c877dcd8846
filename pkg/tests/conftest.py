import numpy as np
import pytest

from oilad import autodiff as ad
from oilad.mdp import builtin_env, value_iteration


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` with respect to the array ``x`` (edited in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    # the floor sits well above central-difference rounding noise (~1e-10 at h=1e-6, more for wide sums),
    # so an exactly zero gradient is not compared against that noise
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-4)
    return float(np.linalg.norm(a - b) / scale)


def check_grad(build, *arrays, h=1e-6):
    """Compare ``backward`` with central differences for every input array.

    ``build`` maps leaf tensors to a scalar tensor.  Returns the worst
    relative error.
    """
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(build(*leaves))
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f():
            with ad.no_grad():
                return build(*[ad.Tensor(l.data) for l in leaves]).item()
        num = numeric_grad(f, leaf.data, h)
        worst = max(worst, rel_err(leaf.grad, num))
    return worst


@pytest.fixture(scope="session")
def grid5():
    env = builtin_env("grid5")
    return env, value_iteration(env)


@pytest.fixture(scope="session")
def grid15():
    env = builtin_env("grid15")
    return env, value_iteration(env)


@pytest.fixture(scope="session")
def taxi():
    env = builtin_env("taxi")
    return env, value_iteration(env)
