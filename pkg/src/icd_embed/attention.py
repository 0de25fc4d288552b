"""Fusion of a set of disease embeddings into one vector.

Three fusion modes share one interface: ``fuse`` returns the weight
distribution ``mu`` over the set and the fused vector.  The self-attention
mode is a two-layer network::

    w_k = softmax(a_k^T tanh(A_k U))        k = 1..K   (first layer, K heads)
    mu  = softmax(b^T tanh(B W))            W = [w_1; ...; w_K]  (K x n)
    fused = U mu

Gradients are written out by hand; ``fuse_backward`` is checked against
finite differences in the test-suite.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from icd_embed.errors import NumericalError


class FusionMode(str, enum.Enum):
    MEAN = "mean"
    MAX = "max"
    SELF_ATTENTION = "sa"

    @classmethod
    def parse(cls, value) -> "FusionMode":
        if isinstance(value, cls):
            return value
        aliases = {"self_attention": "sa", "attention": "sa", "pool": "max", "avg": "mean"}
        value = aliases.get(str(value).lower(), str(value).lower())
        return cls(value)


@dataclass
class AttentionParams:
    """Self-attention weights: ``A`` (K, M, M), ``a`` (K, M), ``B`` (K, K), ``b`` (K,)."""

    A: np.ndarray
    a: np.ndarray
    B: np.ndarray
    b: np.ndarray

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def M(self) -> int:
        return self.A.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"A": self.A, "a": self.a, "B": self.B, "b": self.b}

    def copy(self) -> "AttentionParams":
        return AttentionParams(self.A.copy(), self.a.copy(), self.B.copy(), self.b.copy())

    @classmethod
    def zeros(cls, M: int, K: int) -> "AttentionParams":
        return cls(np.zeros((K, M, M)), np.zeros((K, M)), np.zeros((K, K)), np.zeros(K))

    def validate(self):
        K, M = self.K, self.M
        shapes = {"A": (K, M, M), "a": (K, M), "B": (K, K), "b": (K,)}
        for name, arr in self.arrays().items():
            if arr.shape != shapes[name]:
                raise ValueError(f"attention tensor {name} has shape {arr.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"attention tensor {name} has non-finite entries")


def init_attention(M: int, K: int, rng: np.random.Generator) -> AttentionParams:
    if M < 1 or K < 1:
        raise ValueError(f"M and K must be >= 1, got M={M}, K={K}")
    s_m = 1.0 / np.sqrt(M)
    s_k = 1.0 / np.sqrt(K)
    A = rng.uniform(-s_m, s_m, size=(K, M, M))
    a = rng.uniform(-s_m, s_m, size=(K, M))
    B = rng.uniform(-s_k, s_k, size=(K, K))
    b = rng.uniform(-s_k, s_k, size=K)
    return AttentionParams(A, a, B, b)


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


def head_weights(A_k, a_k, U_D):
    """Weights of one first-layer head: ``softmax(a_k^T tanh(A_k U_D))``."""
    U_D = np.asarray(U_D, dtype=float)
    if U_D.ndim != 2 or U_D.shape[1] < 1:
        raise ValueError("U_D must be an M x n matrix with n >= 1")
    logits = np.asarray(a_k) @ np.tanh(np.asarray(A_k) @ U_D)
    _check_finite(logits, "attention head logits")
    return softmax(logits)


def _forward(params: AttentionParams, U_D):
    H = np.tanh(np.einsum("kij,jn->kin", params.A, U_D))  # K x M x n
    S = np.einsum("ki,kin->kn", params.a, H)  # K x n
    _check_finite(S, "attention head logits")
    W = softmax(S, axis=1)
    G = np.tanh(params.B @ W)  # K x n
    r = params.b @ G
    _check_finite(r, "attention output logits")
    mu = softmax(r)
    return H, W, G, mu


def fuse(params: AttentionParams | None, mode, U_D):
    """Return ``(mu, fused)`` for the columns of ``U_D`` under ``mode``.

    Max-pooling has no natural weight vector; it reports a uniform ``mu`` so
    that a transport regulariser can still be formed against it.
    """
    mode = FusionMode.parse(mode)
    U_D = np.asarray(U_D, dtype=float)
    if U_D.ndim != 2 or U_D.shape[1] < 1:
        raise ValueError("U_D must be an M x n matrix with n >= 1")
    n = U_D.shape[1]
    if mode is FusionMode.SELF_ATTENTION:
        mu = _forward(params, U_D)[3]
        fused = U_D @ mu
    elif mode is FusionMode.MEAN:
        mu = np.full(n, 1.0 / n)
        fused = U_D.mean(axis=1)
    else:
        mu = np.full(n, 1.0 / n)
        fused = U_D.max(axis=1)
    _check_finite(fused, "fused embedding")
    return mu, fused


def fuse_backward(params: AttentionParams | None, mode, U_D, grad_fused, grad_mu=None):
    """Gradients of ``grad_fused . fused + grad_mu . mu`` w.r.t. the attention weights and ``U_D``.

    Returns ``(grad_params, grad_U_D)``.  ``grad_params`` is zero for the
    pooling modes (and ``None`` when ``params`` is ``None``).
    """
    mode = FusionMode.parse(mode)
    U_D = np.asarray(U_D, dtype=float)
    M, n = U_D.shape
    grad_fused = np.asarray(grad_fused, dtype=float)
    grad_mu = np.zeros(n) if grad_mu is None else np.asarray(grad_mu, dtype=float)
    zero = AttentionParams.zeros(params.M, params.K) if params is not None else None

    if mode is FusionMode.MEAN:
        return zero, np.repeat(grad_fused[:, None] / n, n, axis=1)
    if mode is FusionMode.MAX:
        gU = np.zeros_like(U_D)
        gU[np.arange(M), U_D.argmax(axis=1)] = grad_fused
        return zero, gU

    H, W, G, mu = _forward(params, U_D)
    gU = np.outer(grad_fused, mu)
    g_mu = grad_mu + U_D.T @ grad_fused
    g_r = mu * (g_mu - mu @ g_mu)

    g_b = G @ g_r
    g_Y = np.outer(params.b, g_r) * (1.0 - G**2)
    g_B = g_Y @ W.T
    g_W = params.B.T @ g_Y

    g_S = W * (g_W - np.sum(W * g_W, axis=1, keepdims=True))
    g_a = np.einsum("kin,kn->ki", H, g_S)
    g_Z = params.a[:, :, None] * g_S[:, None, :] * (1.0 - H**2)  # K x M x n
    g_A = np.einsum("kin,jn->kij", g_Z, U_D)
    gU += np.einsum("kij,kin->jn", params.A, g_Z)
    return AttentionParams(g_A, g_a, g_B, g_b), gU
