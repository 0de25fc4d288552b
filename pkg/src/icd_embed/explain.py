"""Per-admission explanations: disease significance and disease-to-procedure transport.

The transport here couples an admission's diseases (weighted by the fusion
distribution) to the *recommended* procedures (uniform weights), which is
what one displays next to a recommendation.  Training couples diseases to
the ground-truth procedures instead; both go through the same solver.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from icd_embed.errors import DataError
from icd_embed.model import ModelParams, fused_vector, recommend_top_l, sigmoid
from icd_embed.transport import OtConfig, TransportPlan, cost_matrix, solve_ot


@dataclass
class Explanation:
    admission_id: str
    disease_codes: list[str]
    significance: np.ndarray
    recommended_codes: list[str]
    scores: np.ndarray
    transport: TransportPlan
    descriptions: dict[str, str] | None = None

    def to_dict(self) -> dict:
        """JSON-ready form.

        Keys: ``admission_id``, ``disease_codes``, ``significance`` (one weight
        per disease, sums to 1), ``recommended_codes`` (best first),
        ``scores`` (predicted probabilities, aligned with
        ``recommended_codes``), ``transport`` (``rows``, ``cols``,
        ``row_marginal``, ``col_marginal``, ``matrix`` with one row per
        disease), and ``descriptions`` (code -> text, or null).
        """
        return {
            "admission_id": self.admission_id,
            "disease_codes": list(self.disease_codes),
            "significance": self.significance.tolist(),
            "recommended_codes": list(self.recommended_codes),
            "scores": self.scores.tolist(),
            "transport": self.transport.to_dict(self.disease_codes, self.recommended_codes),
            "descriptions": None if self.descriptions is None else dict(self.descriptions),
        }

    def to_csv(self) -> str:
        """Transport matrix as CSV: header of procedure codes, first column of disease codes."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["disease"] + list(self.recommended_codes))
        for code, row in zip(self.disease_codes, self.transport.T):
            w.writerow([code] + [repr(float(x)) for x in row])
        return buf.getvalue()


def explain(params: ModelParams, admission, L: int, descriptions=None, ot_cfg: OtConfig | None = None,
            disease_vocab=None, procedure_vocab=None) -> Explanation:
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    d = list(admission.diseases)
    mu, f = fused_vector(params, d)
    rec = recommend_top_l(params, d, L)
    U_D = params.U[:, d]
    V_R = params.V[:, rec]
    cfg = ot_cfg or OtConfig()
    plan = solve_ot(cost_matrix(U_D, V_R, cfg.epsilon_guard), mu, np.full(L, 1.0 / L), cfg)

    d_codes = [disease_vocab.codes[i] for i in d] if disease_vocab else [str(i) for i in d]
    r_codes = [procedure_vocab.codes[j] for j in rec] if procedure_vocab else [str(j) for j in rec]
    desc = None
    if descriptions is not None:
        desc = {c: descriptions[c] for c in d_codes + r_codes if c in descriptions}
    return Explanation(admission.admission_id, d_codes, mu, r_codes, sigmoid(f @ V_R), plan, desc)


def load_descriptions(stream) -> dict[str, str]:
    """Read ``code<TAB>description`` rows; later duplicates win with a warning."""
    out = {}
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        code, sep, text = line.partition("\t")
        code = code.strip()
        if not sep or not code:
            raise DataError("expected 'code<TAB>description'", line=lineno)
        if code in out:
            warnings.warn(f"line {lineno}: duplicate description for {code!r}; keeping the later one", stacklevel=2)
        out[code] = text.strip()
    return out
