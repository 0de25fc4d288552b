"""Synthetic admission generators and finite-difference helpers shared by the tests."""

import numpy as np

from icd_embed.data import Admission


def planted(n=2000, seed=0, n_diseases=20, n_procedures=10, per_admission=3):
    """Each disease d maps to procedure d % n_procedures; positives are the images of the disease set."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        d = sorted(rng.choice(n_diseases, per_admission, replace=False).tolist())
        p = sorted({x % n_procedures for x in d})
        out.append(Admission(tuple(d), tuple(p), f"a{i}"))
    return out


def severe(n=2000, seed=0, n_severe=8, n_mild=24, n_minor=8, mild_per_admission=3):
    """Many-to-many set: one severe disease fixes 2 of the 3 positives.

    Severe disease s (index s) maps to procedures 2s and 2s+1.  Mild disease m
    (index n_severe + m) maps to procedure 2*n_severe + m % n_minor; only the
    first mild disease drawn contributes its procedure, the others are noise.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s = int(rng.integers(n_severe))
        mild = rng.choice(n_mild, mild_per_admission, replace=False).tolist()
        d = sorted([s] + [n_severe + m for m in mild])
        p = sorted({2 * s, 2 * s + 1, 2 * n_severe + mild[0] % n_minor})
        out.append(Admission(tuple(d), tuple(p), f"s{i}"))
    return out, n_severe + n_mild, 2 * n_severe + n_minor


def simplex(rng, n):
    w = rng.uniform(0.05, 1.0, size=n)
    return w / w.sum()


def numeric_grad(f, x, step=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = f()
        x[i] = orig - step
        lo = f()
        x[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_error(analytic, numeric):
    """Max-norm relative error of one gradient tensor."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
