import numpy as np
import pytest

from epiflow.boat import EnvConfig
from epiflow.data import Batch, generate


def finite_difference_check(loss_fn, net, grads, rel_tol=1e-4, step=1e-5):
    """Central-difference check of analytic gradients for one network.

    loss_fn() must re-evaluate the loss at the network's current
    parameters.  Targets that are semantically constants (semi-gradient
    targets, frozen EMA copies) must already be baked into loss_fn.
    Only use with small nets; this perturbs every parameter.
    """
    for i, (dw, db) in enumerate(grads):
        for arr, ana in ((net.weights[i], dw), (net.biases[i], db)):
            flat = arr.ravel()
            ana_flat = np.asarray(ana).ravel()
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                hi = loss_fn()
                flat[k] = orig - step
                lo = loss_fn()
                flat[k] = orig
                num = (hi - lo) / (2.0 * step)
                denom = max(1e-6, abs(num), abs(ana_flat[k]))
                err = abs(num - ana_flat[k]) / denom
                assert err <= rel_tol, (
                    f"layer {i} param {k}: analytic {ana_flat[k]:.8g} "
                    f"vs numeric {num:.8g} (rel err {err:.2e})"
                )


def random_batch(rng, n=16, z_lo=-6.0, z_hi=0.0, gamma=0.99):
    """Plausible boat transition batch for exercising the value losses."""
    xs = np.column_stack([rng.uniform(-3, 2, n), rng.uniform(-2, 2, n)])
    xs_next = xs + rng.normal(0, 0.01, (n, 2))
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.sqrt(rng.uniform(0, 1, n))
    acts = np.column_stack([rad * np.cos(theta), rad * np.sin(theta)])
    rs = -0.1 * np.hypot(xs[:, 0] - 0.5, xs[:, 1])
    ells = rng.uniform(-0.4, 1.5, n)
    z = rng.uniform(z_lo, z_hi, n)
    return Batch(
        xs=xs,
        acts=acts,
        rs=rs,
        ells=ells,
        xs_next=xs_next,
        dones=np.zeros(n),
        z=z,
        z_next=(z - rs) / gamma,
        idx=np.arange(n),
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(EnvConfig(), n_traj=12, horizon=25, seed=7)


@pytest.fixture(scope="session")
def small_bundle(tiny_dataset):
    """A briefly trained bundle shared by policy/eval tests (not converged)."""
    from epiflow.values import ValueTrainConfig, train

    cfg = ValueTrainConfig(steps=120, hidden=(16, 16), batch=64, seed=3)
    return train(tiny_dataset, cfg)
