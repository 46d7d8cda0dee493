"""Small scenarios shared by several test modules."""

import numpy as np
import scipy.sparse as sp

from mlsadjust.frames import BoresightParams
from mlsadjust.rwtls import EivProblem, vec
from mlsadjust.simkit import (
    SensorSpec, SurveySpec, TrajectorySpec, default_scenario, noiseless_scenario, scan_campaign,
)

TRUE_B = BoresightParams(np.deg2rad(0.5), np.deg2rad(-0.3), np.deg2rad(0.8),
                         [0.05, -0.02, 0.10], [0, 0, 0])


def short_loop(passes=1):
    return TrajectorySpec(waypoints=((0.0, 0.0), (40.0, 0.0), (40.0, 20.0), (0.0, 20.0)),
                          speed=1.5, closed=True, passes=passes)


def small_scenario(seed=0, noiseless=False, **kw):
    base = dict(trajectory=short_loop(), scan_interval=5.0)
    base.update(kw)
    make = noiseless_scenario if noiseless else default_scenario
    return make(seed, **base)


def small_campaign(seed=0, noiseless=False, **kw):
    return scan_campaign(small_scenario(seed, noiseless, **kw))


def random_problem(rng, m, n, noise=0.05, intercept=True, sparse=False):
    """Regression-type EIV problem: random columns plus an optional constant one."""
    n_rand = n - 1 if intercept else n
    true_a = rng.normal(size=(m, n_rand))
    phi = rng.normal(size=n)
    a_full = np.column_stack([true_a, np.ones(m)]) if intercept else true_a
    k = m * n_rand
    h = np.zeros(m * n)
    if intercept:
        h[(n - 1) * m:] = 1.0
    b = np.zeros((m * n, k))
    b[:k, :k] = np.eye(k)
    q_p = np.diag(rng.uniform(0.5, 2.0, m))
    q_a = np.diag(rng.uniform(0.5, 2.0, k))
    p = a_full @ phi + noise * rng.normal(size=m) * np.sqrt(np.diag(q_p))
    a = vec(true_a) + noise * rng.normal(size=k) * np.sqrt(np.diag(q_a))
    return EivProblem(p, h, sp.csr_matrix(b) if sparse else b, a, q_p, q_a, n), phi


def wls(a_mat, p, q_p):
    w = np.linalg.inv(q_p)
    return np.linalg.solve(a_mat.T @ w @ a_mat, a_mat.T @ w @ p)


__all__ = ["TRUE_B", "short_loop", "small_scenario", "small_campaign", "SensorSpec",
           "SurveySpec", "random_problem", "wls"]
