"""Alternating optimisation of embeddings and per-admission transport plans.

Each batch step first solves, for every admission, the transport problem
between its diseases (weighted by the fusion distribution) and its positive
procedures (uniform) using the current parameters.  The plans are then
frozen and the objective

    sum_i  L_P(i) + alpha * <C_theta(i), T_i>

is minimised for one Adam step.  The transport term reaches only the
embedding columns through the cosine cost; the attention weights learn from
the predictive loss alone.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from icd_embed.attention import FusionMode, fuse
from icd_embed.data import Admission, sample_negatives
from icd_embed.errors import DataError, NumericalError
from icd_embed.model import EPSILON_GUARD, Gradients, ModelParams, init_model, predictive_loss
from icd_embed.transport import OtConfig, cost_matrix, solve_ot

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    M: int = 200
    K: int = 8
    alpha: float = 0.1
    learning_rate: float = 0.001
    batch_size: int = 300
    epochs: int = 25
    fusion_mode: FusionMode = FusionMode.SELF_ATTENTION
    # Training re-solves every admission each step, so it runs a cheaper budget than standalone solves.
    ot: OtConfig = field(default_factory=lambda: OtConfig(outer_max=10, inner_max=200, inner_tol=1e-6))
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    threads: int = 1
    deterministic: bool = True

    def __post_init__(self):
        self.fusion_mode = FusionMode.parse(self.fusion_mode)
        for name in ("M", "K", "learning_rate", "batch_size", "adam_eps", "threads"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["fusion_mode"] = self.fusion_mode.value
        return out

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        """Inverse of :meth:`to_dict`, e.g. for the ``config`` entry of a model sidecar."""
        return cls(**{**d, "ot": OtConfig(**d["ot"])})


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        arrays = params.arrays()
        return cls({k: np.zeros_like(x) for k, x in arrays.items()}, {k: np.zeros_like(x) for k, x in arrays.items()})


def adam_update(params: ModelParams, state: AdamState, grads: dict[str, np.ndarray], cfg: TrainConfig):
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.arrays().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def cost_gradients(U_D, V_P, T_hat, epsilon_guard=EPSILON_GUARD):
    """Gradients of ``<C(U_D, V_P), T_hat>`` for the cosine cost, with ``T_hat`` held fixed.

    Returns ``(grad_U_D, grad_V_P)`` shaped like the inputs.
    """
    U_D = np.asarray(U_D, dtype=float)
    V_P = np.asarray(V_P, dtype=float)
    T = np.asarray(T_hat, dtype=float)
    nu = np.linalg.norm(U_D, axis=0)
    nv = np.linalg.norm(V_P, axis=0)
    prod = np.outer(nu, nv)
    live = prod > epsilon_guard
    denom = np.where(live, prod, epsilon_guard)
    S = U_D.T @ V_P
    W = T / denom
    # Norm terms only exist where the denominator is not the guard constant.
    WS = np.where(live, W * S, 0.0)
    gU = -V_P @ W.T + U_D * (WS.sum(axis=1) / np.maximum(nu**2, epsilon_guard))
    gV = -U_D @ W + V_P * (WS.sum(axis=0) / np.maximum(nv**2, epsilon_guard))
    return gU, gV


@dataclass
class AdmissionResult:
    loss: float
    ot: float
    grads: Gradients
    ot_converged: bool = True
    ot_inner_iterations: int = 0


def admission_objective(params: ModelParams, adm: Admission, negatives, T_hat=None, alpha=None,
                        epsilon_guard=EPSILON_GUARD):
    """``L_P + alpha * <C, T_hat>`` for one admission with a frozen plan.

    Returns ``(predictive_loss, transport_cost, Gradients)``; the gradients
    cover the full weighted objective.
    """
    alpha = params.alpha if alpha is None else alpha
    loss, grads = predictive_loss(params, adm.diseases, adm.positives, negatives, epsilon_guard)
    if T_hat is None or alpha == 0:
        return loss, 0.0, grads
    d = np.asarray(adm.diseases)
    p = np.asarray(adm.positives)
    U_D = params.U[:, d]
    V_P = params.V[:, p]
    C = cost_matrix(U_D, V_P, epsilon_guard)
    ot = float(np.sum(C * T_hat))
    gU, gV = cost_gradients(U_D, V_P, T_hat, epsilon_guard)
    grads.U_cols += alpha * gU
    # predictive_loss orders touched V columns as positives first, then negatives.
    grads.V_cols[:, : p.size] += alpha * gV
    return loss, ot, grads


def solve_admission_plan(params: ModelParams, adm: Admission, ot_cfg: OtConfig):
    d = np.asarray(adm.diseases)
    p = np.asarray(adm.positives)
    U_D = params.U[:, d]
    mu, _ = fuse(params.attention, params.fusion_mode, U_D)
    C = cost_matrix(U_D, params.V[:, p], ot_cfg.epsilon_guard)
    return solve_ot(C, mu, np.full(p.size, 1.0 / p.size), ot_cfg)


def _negatives(adm, n_procedures, rng):
    try:
        return sample_negatives(adm, n_procedures, rng)
    except DataError:
        return ()


def _admission_work(params, adm, negatives, cfg: TrainConfig):
    plan = None
    try:
        if cfg.alpha > 0:
            plan = solve_admission_plan(params, adm, cfg.ot)
        loss, ot, grads = admission_objective(
            params, adm, negatives, None if plan is None else plan.T, cfg.alpha, cfg.ot.epsilon_guard
        )
    except NumericalError as exc:
        raise NumericalError(f"admission {adm.admission_id!r}: {exc}") from exc
    if not (np.isfinite(loss) and np.isfinite(ot)):
        raise NumericalError(f"non-finite loss for admission {adm.admission_id!r}")
    if plan is None:
        return AdmissionResult(loss, ot, grads)
    diag = plan.diagnostics
    return AdmissionResult(loss, ot, grads, diag.converged and diag.inner_failures == 0, diag.inner_iterations)


@dataclass
class BatchDiagnostics:
    size: int = 0
    loss_sum: float = 0.0
    ot_sum: float = 0.0
    ot_nonconverged: int = 0
    ot_inner_iterations: int = 0


def batch_step(params: ModelParams, adam: AdamState, batch, cfg: TrainConfig, rng, executor=None):
    """One alternating step on ``batch``: plans from current parameters, then one Adam update.

    Parameters are updated in place; returns ``(params, adam, BatchDiagnostics)``.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    negs = [_negatives(adm, params.n_procedures, rng) for adm in batch]

    def work(i):
        return _admission_work(params, batch[i], negs[i], cfg)

    if executor is not None:
        results = list(executor.map(work, range(len(batch))))
    else:
        results = [work(i) for i in range(len(batch))]

    dense = {k: np.zeros_like(x) for k, x in params.arrays().items()}
    diag = BatchDiagnostics(size=len(batch))
    for res in results:
        res.grads.add_to(dense)
        diag.loss_sum += res.loss
        diag.ot_sum += res.ot
        diag.ot_nonconverged += 0 if res.ot_converged else 1
        diag.ot_inner_iterations += res.ot_inner_iterations
    adam_update(params, adam, dense, cfg)
    return params, adam, diag


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    mean_ot: float
    ot_nonconverged: int
    ot_inner_iterations: int
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "wall_time": self.wall_time}


def train(records, cfg: TrainConfig, n_diseases=None, n_procedures=None, progress=None):
    """Fit a model on ``records`` for ``cfg.epochs`` epochs.

    ``progress`` is called with each finished :class:`EpochRecord`.
    Returns ``(params, TrainReport)``.
    """
    if not records:
        raise ValueError("no training records")
    n_diseases = n_diseases or 1 + max(max(a.diseases) for a in records)
    n_procedures = n_procedures or 1 + max(max(a.positives) for a in records)
    init_rng, shuffle_rng, neg_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    params = init_model(cfg.M, n_diseases, n_procedures, cfg.K, cfg.fusion_mode, cfg.alpha, init_rng)
    adam = AdamState.for_params(params)
    report = TrainReport()
    start = time.perf_counter()

    executor = None
    if cfg.threads > 1 and not cfg.deterministic:
        executor = ThreadPoolExecutor(max_workers=cfg.threads)
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(len(records))
            total = BatchDiagnostics()
            for lo in range(0, len(records), cfg.batch_size):
                batch = [records[i] for i in order[lo : lo + cfg.batch_size]]
                _, _, diag = batch_step(params, adam, batch, cfg, neg_rng, executor)
                total.size += diag.size
                total.loss_sum += diag.loss_sum
                total.ot_sum += diag.ot_sum
                total.ot_nonconverged += diag.ot_nonconverged
                total.ot_inner_iterations += diag.ot_inner_iterations
            if total.ot_nonconverged:
                log.warning("epoch %d: %d transport solves hit an iteration cap", epoch, total.ot_nonconverged)
            rec = EpochRecord(
                epoch, total.loss_sum / total.size, total.ot_sum / total.size,
                total.ot_nonconverged, total.ot_inner_iterations, time.perf_counter() - t0,
            )
            report.epochs.append(rec)
            if progress is not None:
                progress(rec)
    finally:
        if executor is not None:
            executor.shutdown()
    report.wall_time = time.perf_counter() - start
    return params, report
