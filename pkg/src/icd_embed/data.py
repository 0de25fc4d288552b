"""Admission records: parsing, vocabularies, indexing, splitting, negative sampling."""

from __future__ import annotations

import enum
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from icd_embed.errors import DataError

log = logging.getLogger(__name__)


class CodeKind(str, enum.Enum):
    DISEASE = "disease"
    PROCEDURE = "procedure"


@dataclass(frozen=True)
class RawAdmission:
    admission_id: str
    disease_codes: tuple[str, ...]
    procedure_codes: tuple[str, ...]


@dataclass(frozen=True)
class Admission:
    diseases: tuple[int, ...]
    positives: tuple[int, ...]
    admission_id: str = ""

    def __post_init__(self):
        for name in ("diseases", "positives"):
            idx = getattr(self, name)
            if not idx:
                raise ValueError(f"admission {self.admission_id!r}: {name} must be nonempty")
            if len(set(idx)) != len(idx):
                raise ValueError(f"admission {self.admission_id!r}: duplicate indices in {name}")


@dataclass
class CodeVocabulary:
    kind: CodeKind
    codes: list[str]
    index_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.kind = CodeKind(self.kind)
        self.index_of = {c: j for j, c in enumerate(self.codes)}
        if len(self.index_of) != len(self.codes):
            raise DataError(f"duplicate codes in {self.kind.value} vocabulary")

    def __len__(self):
        return len(self.codes)

    def __contains__(self, code):
        return code in self.index_of

    def write(self, fh):
        for code in self.codes:
            fh.write(code + "\n")

    @classmethod
    def read(cls, fh, kind) -> "CodeVocabulary":
        codes = [line.rstrip("\r\n") for line in fh]
        while codes and not codes[-1]:
            codes.pop()
        return cls(kind, codes)


@dataclass
class DatasetStats:
    admission_count: int
    disease_vocab_size: int
    procedure_vocab_size: int
    diseases_per_admission_hist: dict[int, int]
    procedures_per_admission_hist: dict[int, int]

    def to_dict(self) -> dict:
        return {
            "admission_count": self.admission_count,
            "disease_vocab_size": self.disease_vocab_size,
            "procedure_vocab_size": self.procedure_vocab_size,
            "diseases_per_admission_hist": {str(k): v for k, v in sorted(self.diseases_per_admission_hist.items())},
            "procedures_per_admission_hist": {str(k): v for k, v in sorted(self.procedures_per_admission_hist.items())},
        }


def _code_list(obj, key, lineno):
    value = obj.get(key, [])
    if not isinstance(value, list) or not all(isinstance(c, str) for c in value):
        raise DataError(f"'{key}' must be an array of strings", line=lineno)
    return tuple(value)


def parse_admissions(stream) -> list[RawAdmission]:
    """Read JSON-lines admissions from a text or binary stream.

    Each nonblank line holds ``{"admission_id": str, "diseases": [...],
    "procedures": [...]}``; unknown keys are ignored.
    """
    if isinstance(stream, (bytes, str)):
        stream = io.BytesIO(stream.encode() if isinstance(stream, str) else stream)
    records = []
    seen = set()
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise DataError(f"invalid UTF-8: {exc}", line=lineno) from None
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed JSON: {exc.msg}", line=lineno) from None
        if not isinstance(obj, dict):
            raise DataError("expected a JSON object", line=lineno)
        adm_id = obj.get("admission_id")
        if not isinstance(adm_id, str) or not adm_id:
            raise DataError("'admission_id' must be a nonempty string", line=lineno)
        if adm_id in seen:
            raise DataError(f"duplicate admission_id {adm_id!r}", line=lineno)
        seen.add(adm_id)
        records.append(
            RawAdmission(adm_id, _code_list(obj, "diseases", lineno), _code_list(obj, "procedures", lineno))
        )
    return records


def load_admissions(path) -> list[RawAdmission]:
    with open(path, "rb") as fh:
        return parse_admissions(fh)


def write_admissions(records, fh):
    for rec in records:
        obj = {"admission_id": rec.admission_id, "diseases": list(rec.disease_codes),
               "procedures": list(rec.procedure_codes)}
        fh.write(json.dumps(obj) + "\n")


def build_vocabulary(records, kind, min_count: int = 1) -> CodeVocabulary:
    """Codes of ``kind`` occurring at least ``min_count`` times, in lexicographic order.

    Occurrences are counted on the raw records, before any admission is
    dropped for having an empty side.
    """
    kind = CodeKind(kind)
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    attr = "disease_codes" if kind is CodeKind.DISEASE else "procedure_codes"
    counts = Counter(code for rec in records for code in getattr(rec, attr))
    codes = sorted(code for code, n in counts.items() if n >= min_count)
    if not codes:
        raise DataError(f"no {kind.value} code occurs at least {min_count} times")
    return CodeVocabulary(kind, codes)


def index_and_filter(records, dvocab: CodeVocabulary, pvocab: CodeVocabulary) -> list[Admission]:
    out = []
    for rec in records:
        d = sorted({dvocab.index_of[c] for c in rec.disease_codes if c in dvocab.index_of})
        p = sorted({pvocab.index_of[c] for c in rec.procedure_codes if c in pvocab.index_of})
        if d and p:
            out.append(Admission(tuple(d), tuple(p), rec.admission_id))
    return out


def to_raw(adm: Admission, dvocab: CodeVocabulary, pvocab: CodeVocabulary) -> RawAdmission:
    return RawAdmission(
        adm.admission_id,
        tuple(dvocab.codes[i] for i in adm.diseases),
        tuple(pvocab.codes[j] for j in adm.positives),
    )


def split_train_test(records, test_fraction: float, seed: int):
    """Seeded shuffle, then the last ``floor(test_fraction * N)`` records form the test set."""
    n = len(records)
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if n < 2:
        raise ValueError("need at least 2 records to split")
    n_test = int(np.floor(test_fraction * n))
    if n_test == 0 or n_test == n:
        raise ValueError(f"test_fraction {test_fraction} on {n} records leaves an empty side")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [records[i] for i in order]
    return shuffled[: n - n_test], shuffled[n - n_test :]


def sample_negatives(admission: Admission, procedure_vocab_size: int, rng: np.random.Generator):
    """Uniformly sample ``|positives|`` procedures outside the positive set, without replacement.

    When the complement is smaller than the positive set the whole
    complement is returned.
    """
    pos = np.asarray(admission.positives)
    complement = np.setdiff1d(np.arange(procedure_vocab_size), pos, assume_unique=True)
    if complement.size == 0:
        raise DataError(
            f"admission {admission.admission_id!r}: every procedure is positive, cannot sample negatives"
        )
    k = min(len(pos), complement.size)
    return tuple(sorted(rng.choice(complement, size=k, replace=False).tolist()))


def compute_stats(records, disease_vocab_size=0, procedure_vocab_size=0) -> DatasetStats:
    d_hist = Counter(len(a.diseases) for a in records)
    p_hist = Counter(len(a.positives) for a in records)
    return DatasetStats(len(records), disease_vocab_size, procedure_vocab_size, dict(d_hist), dict(p_hist))


def prepare(records, min_count=1, disease_min_count=None, procedure_min_count=None):
    """Build both vocabularies and index the records in one go.

    Returns ``(admissions, disease_vocab, procedure_vocab)``.
    """
    dvocab = build_vocabulary(records, CodeKind.DISEASE, disease_min_count or min_count)
    pvocab = build_vocabulary(records, CodeKind.PROCEDURE, procedure_min_count or min_count)
    admissions = index_and_filter(records, dvocab, pvocab)
    if len(admissions) < len(records):
        log.info("dropped %d admissions with an empty side after filtering", len(records) - len(admissions))
    return admissions, dvocab, pvocab
