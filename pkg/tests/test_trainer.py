import numpy as np
import pytest

from icd_embed.data import Admission, sample_negatives
from icd_embed.errors import NumericalError
from icd_embed.model import init_model, predictive_loss
from icd_embed.trainer import (
    AdamState,
    TrainConfig,
    adam_update,
    admission_objective,
    batch_step,
    cost_gradients,
    solve_admission_plan,
    train,
)
import icd_embed.trainer as trainer_mod
from icd_embed.transport import OtConfig, cost_matrix
from synth import numeric_grad, planted, rel_error

TINY = dict(M=4, K=2, epochs=2, batch_size=4, learning_rate=0.05, seed=3)


def small_records(n=12, seed=0, nD=6, nP=5):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        d = sorted(rng.choice(nD, int(rng.integers(1, 4)), replace=False).tolist())
        p = sorted(rng.choice(nP, int(rng.integers(1, 3)), replace=False).tolist())
        out.append(Admission(tuple(d), tuple(p), f"r{i}"))
    return out


def tiny_params(seed, mode="sa", alpha=0.1, nD=6, nP=7):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 5))
    K = int(rng.integers(1, 4))
    p = init_model(M, nD, nP, K, mode, alpha, rng)
    for x in p.arrays().values():
        x *= 3.0
    return p, rng


# --- configuration ---------------------------------------------------------


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.M, cfg.K, cfg.alpha) == (200, 8, 0.1)
    assert (cfg.learning_rate, cfg.batch_size, cfg.epochs) == (0.001, 300, 25)
    assert (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
    assert cfg.ot.beta == 0.5


@pytest.mark.parametrize("bad", [dict(M=0), dict(K=0), dict(alpha=-0.1), dict(learning_rate=0),
                                 dict(batch_size=0), dict(epochs=-1), dict(adam_beta1=1.0), dict(threads=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_dict_is_json_ready():
    d = TrainConfig(fusion_mode="max").to_dict()
    assert d["fusion_mode"] == "max" and d["ot"]["beta"] == 0.5


# --- cost gradients --------------------------------------------------------


def test_cost_gradient_zero_rows():
    rng = np.random.default_rng(0)
    U, V = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    T = np.array([[0.2, 0.3], [0.0, 0.0], [0.1, 0.4]])
    gU, _ = cost_gradients(U, V, T)
    assert not np.any(gU[:, 1])


def test_cost_gradient_parallel_vectors_orthogonal_to_u():
    u = np.array([[1.0], [2.0], [-0.5]])
    v = 3.0 * u
    gU, gV = cost_gradients(u, v, np.ones((1, 1)))
    assert abs(float(gU[:, 0] @ u[:, 0])) <= 1e-14
    # At the minimum of the cosine distance the gradient itself vanishes.
    fd = numeric_grad(lambda: float(cost_matrix(u, v)[0, 0]), u)
    assert np.abs(fd).max() <= 1e-9 and np.abs(gU).max() <= 1e-14


def test_cost_gradient_random_instance():
    rng = np.random.default_rng(1)
    U, V = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    T = rng.dirichlet(np.ones(6)).reshape(3, 2)
    gU, gV = cost_gradients(U, V, T)

    def f():
        return float(np.sum(cost_matrix(U, V) * T))

    assert rel_error(gU, numeric_grad(f, U)) <= 1e-4
    assert rel_error(gV, numeric_grad(f, V)) <= 1e-4


def test_cost_gradient_zero_vector_is_finite():
    gU, gV = cost_gradients(np.zeros((3, 2)), np.ones((3, 2)), np.full((2, 2), 0.25))
    assert np.all(np.isfinite(gU)) and np.all(np.isfinite(gV))


# --- full objective with a frozen plan --------------------------------------


def batch_objective_error(seed, mode="sa"):
    """Max relative error of the summed batch objective's gradient over every parameter tensor."""
    p, rng = tiny_params(seed, mode)
    batch = []
    for i in range(int(rng.integers(1, 4))):
        d = sorted(rng.choice(6, int(rng.integers(1, 5)), replace=False).tolist())
        pos = sorted(rng.choice(7, int(rng.integers(1, 4)), replace=False).tolist())
        batch.append(Admission(tuple(d), tuple(pos), f"b{i}"))
    negs = [sample_negatives(a, 7, rng) for a in batch]
    plans = [solve_admission_plan(p, a, OtConfig()).T for a in batch]
    alpha = float(rng.uniform(0.05, 2.0))

    def total():
        out = 0.0
        for a, n, T in zip(batch, negs, plans):
            loss, ot, _ = admission_objective(p, a, n, T, alpha)
            out += loss + alpha * ot
        return out

    dense = {k: np.zeros_like(v) for k, v in p.arrays().items()}
    for a, n, T in zip(batch, negs, plans):
        admission_objective(p, a, n, T, alpha)[2].add_to(dense)
    return max(rel_error(dense[k], numeric_grad(total, x)) for k, x in p.arrays().items())


def test_objective_value_is_loss_plus_weighted_transport():
    p, _ = tiny_params(0)
    adm = Admission((0, 2), (1, 3), "x")
    T = solve_admission_plan(p, adm, OtConfig()).T
    loss, ot, _ = admission_objective(p, adm, (0, 5), T, alpha=0.3)
    C = cost_matrix(p.U[:, [0, 2]], p.V[:, [1, 3]])
    assert ot == pytest.approx(float(np.sum(C * T)), abs=1e-15)
    assert loss == pytest.approx(predictive_loss(p, [0, 2], [1, 3], [0, 5])[0], abs=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_full_objective_gradient(seed):
    assert batch_objective_error(seed) <= 1e-4


@pytest.mark.parametrize("mode", ["mean", "max"])
def test_full_objective_gradient_pooling(mode):
    assert max(batch_objective_error(seed, mode) for seed in range(10)) <= 1e-4


# --- one step --------------------------------------------------------------


def test_zero_gradient_step_leaves_parameters():
    p, _ = tiny_params(1)
    before = p.copy()
    state = AdamState.for_params(p)
    adam_update(p, state, {k: np.zeros_like(v) for k, v in p.arrays().items()}, TrainConfig())
    for k in p.arrays():
        assert np.array_equal(p.arrays()[k], before.arrays()[k])


def test_alpha_zero_step_is_plain_predictive_training():
    p, _ = tiny_params(2, alpha=0.0)
    q = p.copy()
    batch = small_records(4, nP=7)
    cfg = TrainConfig(M=p.M, K=p.K, alpha=0.0, learning_rate=0.01)
    batch_step(p, AdamState.for_params(p), batch, cfg, np.random.default_rng(5))

    rng = np.random.default_rng(5)
    negs = [sample_negatives(a, 7, rng) for a in batch]
    dense = {k: np.zeros_like(v) for k, v in q.arrays().items()}
    for a, n in zip(batch, negs):
        predictive_loss(q, a.diseases, a.positives, n)[1].add_to(dense)
    adam_update(q, AdamState.for_params(q), dense, cfg)
    for k in p.arrays():
        assert np.array_equal(p.arrays()[k], q.arrays()[k])


def test_plans_come_from_pre_update_parameters():
    p, _ = tiny_params(3)
    q = p.copy()
    batch = small_records(3, nP=7)
    cfg = TrainConfig(M=p.M, K=p.K, alpha=0.5, learning_rate=0.01)
    batch_step(p, AdamState.for_params(p), batch, cfg, np.random.default_rng(8))

    rng = np.random.default_rng(8)
    negs = [sample_negatives(a, 7, rng) for a in batch]
    plans = [solve_admission_plan(q, a, cfg.ot).T for a in batch]  # all solved before any update
    dense = {k: np.zeros_like(v) for k, v in q.arrays().items()}
    for a, n, T in zip(batch, negs, plans):
        admission_objective(q, a, n, T, 0.5)[2].add_to(dense)
    adam_update(q, AdamState.for_params(q), dense, cfg)
    for k in p.arrays():
        assert np.array_equal(p.arrays()[k], q.arrays()[k])


def test_empty_batch_rejected():
    p, _ = tiny_params(4)
    with pytest.raises(ValueError):
        batch_step(p, AdamState.for_params(p), [], TrainConfig(), np.random.default_rng(0))


def test_non_finite_parameters_name_the_admission():
    p, _ = tiny_params(5)
    p.U[:, 0] = np.nan
    batch = [Admission((0, 1), (2,), "bad-one")]
    with pytest.raises(NumericalError, match="bad-one"):
        batch_step(p, AdamState.for_params(p), batch, TrainConfig(M=p.M, K=p.K), np.random.default_rng(0))


def test_fully_positive_admission_is_trained_without_negatives():
    p, _ = tiny_params(6, nP=2)
    batch = [Admission((0,), (0, 1), "all")]
    _, _, diag = batch_step(p, AdamState.for_params(p), batch, TrainConfig(M=p.M, K=p.K), np.random.default_rng(0))
    assert diag.size == 1 and np.isfinite(diag.loss_sum)


# --- training loop ----------------------------------------------------------


def test_zero_epochs_returns_initial_model():
    cfg = TrainConfig(**{**TINY, "epochs": 0})
    params, report = train(small_records(), cfg, 6, 5)
    init_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[0])
    ref = init_model(cfg.M, 6, 5, cfg.K, cfg.fusion_mode, cfg.alpha, init_rng)
    for k in ref.arrays():
        assert np.array_equal(params.arrays()[k], ref.arrays()[k])
    assert report.epochs == []


def test_training_is_deterministic():
    recs = small_records(20)
    cfg = TrainConfig(**TINY, deterministic=True)
    a, ra = train(recs, cfg, 6, 5)
    b, rb = train(recs, cfg, 6, 5)
    for k in a.arrays():
        assert np.array_equal(a.arrays()[k], b.arrays()[k])
    assert [e.mean_loss for e in ra.epochs] == [e.mean_loss for e in rb.epochs]


def test_threaded_solves_merge_in_fixed_order():
    recs = small_records(20)
    seq, _ = train(recs, TrainConfig(**TINY, deterministic=True), 6, 5)
    par, _ = train(recs, TrainConfig(**TINY, threads=4, deterministic=False), 6, 5)
    for k in seq.arrays():
        assert np.allclose(seq.arrays()[k], par.arrays()[k], rtol=0, atol=1e-12)


def test_short_last_batch_is_trained(monkeypatch):
    sizes = []
    real = trainer_mod.batch_step

    def spy(params, adam, batch, cfg, rng, executor=None):
        sizes.append(len(batch))
        return real(params, adam, batch, cfg, rng, executor)

    monkeypatch.setattr(trainer_mod, "batch_step", spy)
    train(small_records(10), TrainConfig(**{**TINY, "batch_size": 4, "epochs": 1}), 6, 5)
    assert sizes == [4, 4, 2]


def test_report_has_one_record_per_epoch():
    seen = []
    _, report = train(small_records(), TrainConfig(**TINY), 6, 5, progress=seen.append)
    assert [e.epoch for e in report.epochs] == [1, 2] and seen == report.epochs
    assert report.to_dict()["epochs"][0]["epoch"] == 1
    assert all(e.mean_ot >= 0 for e in report.epochs)


def test_no_records():
    with pytest.raises(ValueError):
        train([], TrainConfig(**TINY))


# --- reference implementation of the averaged-embedding variant -------------


def reference_mean_trainer(U, V, batches, neg_rng, n_procedures, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Independent averaged-embedding BCE trainer with Adam; returns the per-batch loss trace."""
    U, V = U.copy(), V.copy()
    mU, vU, mV, vV = (np.zeros_like(U), np.zeros_like(U), np.zeros_like(V), np.zeros_like(V))
    trace = []
    for t, batch in enumerate(batches, start=1):
        gU, gV = np.zeros_like(U), np.zeros_like(V)
        total = 0.0
        for adm in batch:
            pos = list(adm.positives)
            comp = [j for j in range(n_procedures) if j not in pos]
            neg = sorted(neg_rng.choice(np.array(comp), size=min(len(pos), len(comp)), replace=False).tolist())
            h = U[:, list(adm.diseases)].mean(axis=1)
            for j, y in [(j, 1.0) for j in pos] + [(j, 0.0) for j in neg]:
                s = V[:, j] @ h
                prob = 1.0 / (1.0 + np.exp(-s))
                total += -np.log(prob) if y else -np.log(1.0 - prob)
                gV[:, j] += (prob - y) * h
                for d in adm.diseases:
                    gU[:, d] += (prob - y) * V[:, j] / len(adm.diseases)
        trace.append(total)
        for P, g, m, v in ((U, gU, mU, vU), (V, gV, mV, vV)):
            m[:] = b1 * m + (1 - b1) * g
            v[:] = b2 * v + (1 - b2) * g * g
            P -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return trace


def test_mean_variant_matches_reference_loop():
    recs = small_records(12, seed=4, nP=7)
    batches = [recs[0:4], recs[4:8], recs[8:12]]
    p, _ = tiny_params(7, mode="mean", alpha=0.0)
    expected = reference_mean_trainer(p.U, p.V, batches, np.random.default_rng(11), 7, lr=0.05)

    cfg = TrainConfig(M=p.M, K=p.K, alpha=0.0, fusion_mode="mean", learning_rate=0.05)
    adam, rng, trace = AdamState.for_params(p), np.random.default_rng(11), []
    for batch in batches:
        trace.append(batch_step(p, adam, batch, cfg, rng)[2].loss_sum)
    assert np.allclose(trace, expected, rtol=0, atol=1e-9)


# --- smoke on planted structure ----------------------------------------------


@pytest.mark.slow
def test_loss_falls_on_planted_set():
    recs = planted(2000, seed=0)
    cfg = TrainConfig(M=32, K=4, alpha=0.1, epochs=5, batch_size=32, learning_rate=0.01, seed=0)
    _, report = train(recs, cfg, 20, 10)
    assert report.epochs[4].mean_loss < report.epochs[0].mean_loss


def test_config_dict_round_trip():
    cfg = TrainConfig(M=7, fusion_mode="max", ot=OtConfig(outer_max=3), threads=2)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
