"""Procedure prediction head on top of the disease fusion.

``P(p | D) = sigmoid(v_p . f(U_D))`` where ``f`` is one of the fusion modes in
:mod:`icd_embed.attention`.  Model files use a small little-endian binary
layout (see ``save_model``).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from icd_embed.attention import AttentionParams, FusionMode, fuse, fuse_backward, init_attention
from icd_embed.data import CodeKind, CodeVocabulary
from icd_embed.errors import DataError

EPSILON_GUARD = 1e-16

MAGIC = b"ICDEMB\x00\x1a"
FORMAT_VERSION = 1
_FUSION_CODES = {FusionMode.MEAN: 0, FusionMode.MAX: 1, FusionMode.SELF_ATTENTION: 2}


@dataclass
class ModelParams:
    U: np.ndarray  # M x |D|
    V: np.ndarray  # M x |P|
    attention: AttentionParams
    fusion_mode: FusionMode = FusionMode.SELF_ATTENTION
    alpha: float = 0.1

    def __post_init__(self):
        self.fusion_mode = FusionMode.parse(self.fusion_mode)

    @property
    def M(self) -> int:
        return self.U.shape[0]

    @property
    def K(self) -> int:
        return self.attention.K

    @property
    def n_diseases(self) -> int:
        return self.U.shape[1]

    @property
    def n_procedures(self) -> int:
        return self.V.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "V": self.V, **self.attention.arrays()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.U.copy(), self.V.copy(), self.attention.copy(), self.fusion_mode, self.alpha)


@dataclass
class Gradients:
    """Sparse gradient bundle for one admission.

    ``U_idx``/``V_idx`` list the touched columns and ``U_cols``/``V_cols``
    hold the matching gradient columns.
    """

    U_idx: np.ndarray
    U_cols: np.ndarray
    V_idx: np.ndarray
    V_cols: np.ndarray
    attention: AttentionParams

    def add_to(self, dense: dict[str, np.ndarray], scale=1.0):
        np.add.at(dense["U"].T, self.U_idx, scale * self.U_cols.T)
        np.add.at(dense["V"].T, self.V_idx, scale * self.V_cols.T)
        for name, g in self.attention.arrays().items():
            dense[name] += scale * g

    def to_dense(self, params: ModelParams) -> dict[str, np.ndarray]:
        dense = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.add_to(dense)
        return dense


def init_model(M, dvocab_size, pvocab_size, K, fusion_mode, alpha, rng) -> ModelParams:
    if min(M, dvocab_size, pvocab_size, K) < 1:
        raise ValueError("M, vocabulary sizes and K must all be >= 1")
    s = 1.0 / np.sqrt(M)
    U = rng.uniform(-s, s, size=(M, dvocab_size))
    V = rng.uniform(-s, s, size=(M, pvocab_size))
    return ModelParams(U, V, init_attention(M, K, rng), FusionMode.parse(fusion_mode), float(alpha))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def _check_diseases(params, diseases):
    idx = np.asarray(diseases, dtype=int)
    if idx.size == 0:
        raise ValueError("disease set must be nonempty")
    if idx.min() < 0 or idx.max() >= params.n_diseases:
        raise IndexError(f"disease index out of range [0, {params.n_diseases})")
    return idx


def _check_procedures(params, procs):
    idx = np.asarray(procs, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= params.n_procedures):
        raise IndexError(f"procedure index out of range [0, {params.n_procedures})")
    return idx


def fused_vector(params: ModelParams, diseases):
    d = _check_diseases(params, diseases)
    return fuse(params.attention, params.fusion_mode, params.U[:, d])


def predict_prob(params: ModelParams, diseases, p: int) -> float:
    (pi,) = _check_procedures(params, [p])
    _, f = fused_vector(params, diseases)
    return float(sigmoid(params.V[:, pi] @ f))


def score_all(params: ModelParams, diseases) -> np.ndarray:
    _, f = fused_vector(params, diseases)
    return sigmoid(f @ params.V)


def recommend_top_l(params: ModelParams, diseases, L: int) -> list[int]:
    """Indices of the ``L`` best-scoring procedures; ties go to the lower index."""
    if not 1 <= L <= params.n_procedures:
        raise ValueError(f"L must lie in [1, {params.n_procedures}], got {L}")
    _, f = fused_vector(params, diseases)
    # Rank on raw logits: sigmoid saturates to equal floats far from zero.
    logits = f @ params.V
    order = np.lexsort((np.arange(logits.size), -logits))
    return order[:L].tolist()


def predictive_loss(params: ModelParams, diseases, positives, negatives, epsilon_guard=EPSILON_GUARD):
    """Binary cross-entropy over positive and sampled negative procedures.

    Returns ``(loss, Gradients)``.  Each term's log argument is floored at
    ``epsilon_guard``; a floored term contributes no gradient.
    """
    d = _check_diseases(params, diseases)
    pos = _check_procedures(params, positives)
    neg = _check_procedures(params, negatives)
    U_D = params.U[:, d]
    _, f = fuse(params.attention, params.fusion_mode, U_D)

    idx = np.concatenate([pos, neg]).astype(int)
    sign = np.concatenate([np.ones(pos.size), -np.ones(neg.size)])
    V_sel = params.V[:, idx]
    s = f @ V_sel
    cap = -np.log(epsilon_guard)
    terms = softplus(-sign * s)  # -log sigmoid(s) for positives, -log(1 - sigmoid(s)) for negatives
    clipped = terms > cap
    loss = float(np.sum(np.minimum(terms, cap)))

    g_s = -sign * sigmoid(-sign * s)
    g_s[clipped] = 0.0
    V_cols = np.outer(f, g_s)
    g_f = V_sel @ g_s
    g_att, U_cols = fuse_backward(params.attention, params.fusion_mode, U_D, g_f)
    return loss, Gradients(d, U_cols, idx, V_cols, g_att)


# --- model files -----------------------------------------------------------


@dataclass
class SavedModel:
    params: ModelParams
    disease_vocab: CodeVocabulary
    procedure_vocab: CodeVocabulary
    metadata: dict = field(default_factory=dict)


def _pack_codes(codes):
    out = [struct.pack("<I", len(codes))]
    for c in codes:
        raw = c.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
    return b"".join(out)


def _arr_bytes(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def model_bytes(params: ModelParams, dvocab: CodeVocabulary, pvocab: CodeVocabulary) -> bytes:
    """Serialise a model.

    Layout (all integers unsigned little-endian, floats IEEE-754 ``<f8``)::

        magic            8 bytes  b"ICDEMB\\x00\\x1a"
        version          u32
        M, K, |D|, |P|   4 x u32
        fusion           u8       0=mean 1=max 2=sa
        alpha            f64
        disease codes    u32 count, then per code: u16 byte length + UTF-8 bytes
        procedure codes  same
        U                M*|D| f64, row-major (M rows)
        V                M*|P| f64, row-major
        A                K*M*M f64
        a                K*M f64
        B                K*K f64
        b                K f64
    """
    if len(dvocab) != params.n_diseases or len(pvocab) != params.n_procedures:
        raise ValueError("vocabulary sizes do not match the embedding matrices")
    att = params.attention
    head = MAGIC + struct.pack(
        "<IIIIIBd", FORMAT_VERSION, params.M, params.K, params.n_diseases, params.n_procedures,
        _FUSION_CODES[params.fusion_mode], float(params.alpha),
    )
    parts = [head, _pack_codes(dvocab.codes), _pack_codes(pvocab.codes)]
    parts += [_arr_bytes(x) for x in (params.U, params.V, att.A, att.a, att.B, att.b)]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise DataError("model file is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def codes(self):
        (count,) = self.unpack("<I")
        out = []
        for _ in range(count):
            (length,) = self.unpack("<H")
            out.append(self.take(length).decode("utf-8"))
        return out

    def array(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(float).reshape(shape)


def model_from_bytes(buf: bytes):
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError("not an icd-embed model file (bad magic)")
    version, M, K, nD, nP, fusion, alpha = r.unpack("<IIIIIBd")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported model format version {version}")
    modes = {v: k for k, v in _FUSION_CODES.items()}
    if fusion not in modes:
        raise DataError(f"unknown fusion code {fusion}")
    dvocab = CodeVocabulary(CodeKind.DISEASE, r.codes())
    pvocab = CodeVocabulary(CodeKind.PROCEDURE, r.codes())
    if len(dvocab) != nD or len(pvocab) != nP:
        raise DataError("vocabulary length disagrees with header")
    U = r.array((M, nD))
    V = r.array((M, nP))
    att = AttentionParams(r.array((K, M, M)), r.array((K, M)), r.array((K, K)), r.array((K,)))
    if r.pos != len(buf):
        raise DataError("trailing bytes after model payload")
    return ModelParams(U, V, att, modes[fusion], alpha), dvocab, pvocab


def dataset_hash(admissions) -> str:
    h = hashlib.sha256()
    for a in admissions:
        h.update(json.dumps([a.admission_id, list(a.diseases), list(a.positives)]).encode())
        h.update(b"\n")
    return h.hexdigest()


def sidecar_path(path) -> str:
    return str(path) + ".json"


def save_model(path, params, dvocab, pvocab, metadata=None):
    """Write the binary model to ``path`` and its JSON metadata to ``path + '.json'``."""
    with open(path, "wb") as fh:
        fh.write(model_bytes(params, dvocab, pvocab))
    meta = {"format_version": FORMAT_VERSION, **(metadata or {})}
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> SavedModel:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read model file: {exc}") from None
    params, dvocab, pvocab = model_from_bytes(buf)
    meta = {}
    try:
        with open(sidecar_path(path), encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    return SavedModel(params, dvocab, pvocab, meta)
