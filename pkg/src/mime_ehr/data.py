"""Multilevel EHR records: vocab, patients, serialization, and cohort slicing.

A patient is an ordered sequence of visits; a visit is a non-empty list of
diagnosis objects; a diagnosis object is one Dx code plus its own private
list of treatment codes.  A treatment ordered for two diagnoses in the same
visit appears as two copies, one per object, so nothing downstream has to
reason about sharing.

On disk a cohort is JSON lines: the first line is a header with the code
vocabularies, every following line is one patient with codes spelled as
strings.  Indices in memory are assigned by header order.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Array = np.ndarray


class CohortFormatError(ValueError):
    """Malformed cohort file or invariant-violating record."""


@dataclass
class CodeVocab:
    """Bidirectional map between code strings and dense indices."""

    dx_codes: list[str]
    tx_codes: list[str]
    dx_index: dict[str, int] = field(init=False, repr=False)
    tx_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.dx_codes or not self.tx_codes:
            raise CohortFormatError("vocab needs at least one Dx and one treatment code")
        if len(set(self.dx_codes)) != len(self.dx_codes):
            raise CohortFormatError("duplicate Dx code in vocab")
        if len(set(self.tx_codes)) != len(self.tx_codes):
            raise CohortFormatError("duplicate treatment code in vocab")
        self.dx_index = {c: i for i, c in enumerate(self.dx_codes)}
        self.tx_index = {c: i for i, c in enumerate(self.tx_codes)}

    @property
    def n_dx(self) -> int:
        return len(self.dx_codes)

    @property
    def n_tx(self) -> int:
        return len(self.tx_codes)


@dataclass
class DxObject:
    dx: int
    tx: list[int]


@dataclass
class Visit:
    objects: list[DxObject]


@dataclass
class Patient:
    id: str
    visits: list[Visit]
    hf_label: int | None = None


@dataclass
class Cohort:
    vocab: CodeVocab
    patients: list[Patient]
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.patients)


def validate_patient(patient: Patient, n_dx: int, n_tx: int, where: str = "") -> None:
    ctx = f" ({where})" if where else ""
    if not patient.visits:
        raise CohortFormatError(f"patient {patient.id!r} has no visits{ctx}")
    for visit in patient.visits:
        if not visit.objects:
            raise CohortFormatError(f"patient {patient.id!r} has an empty visit{ctx}")
        for obj in visit.objects:
            if not 0 <= obj.dx < n_dx:
                raise CohortFormatError(
                    f"patient {patient.id!r}: Dx index {obj.dx} out of range{ctx}")
            for t in obj.tx:
                if not 0 <= t < n_tx:
                    raise CohortFormatError(
                        f"patient {patient.id!r}: treatment index {t} out of range{ctx}")
    if patient.hf_label not in (None, 0, 1):
        raise CohortFormatError(f"patient {patient.id!r}: hf_label must be 0, 1, or null{ctx}")


def _patient_from_json(obj: dict, vocab: CodeVocab, lineno: int) -> Patient:
    try:
        pid = obj["id"]
        visits_raw = obj["visits"]
    except KeyError as exc:
        raise CohortFormatError(f"line {lineno}: missing field {exc}") from None
    label = obj.get("hf_label")
    visits = []
    for visit_raw in visits_raw:
        objects = []
        for entry in visit_raw:
            dx_code = entry["dx"]
            if dx_code not in vocab.dx_index:
                raise CohortFormatError(f"line {lineno}: unknown Dx code {dx_code!r}")
            tx = []
            for tx_code in entry.get("tx", []):
                if tx_code not in vocab.tx_index:
                    raise CohortFormatError(
                        f"line {lineno}: unknown treatment code {tx_code!r}")
                tx.append(vocab.tx_index[tx_code])
            objects.append(DxObject(vocab.dx_index[dx_code], tx))
        visits.append(Visit(objects))
    patient = Patient(str(pid), visits, None if label is None else int(label))
    try:
        validate_patient(patient, vocab.n_dx, vocab.n_tx)
    except CohortFormatError as exc:
        raise CohortFormatError(f"line {lineno}: {exc}") from None
    return patient


def read_cohort(path) -> Cohort:
    """Parse and validate a JSONL cohort file; errors carry line numbers."""
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise CohortFormatError("line 1: missing header")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise CohortFormatError(f"line 1: invalid JSON header ({exc.msg})") from None
        if not isinstance(header, dict) or "dx_codes" not in header or "tx_codes" not in header:
            raise CohortFormatError("line 1: header must contain dx_codes and tx_codes")
        vocab = CodeVocab(list(header["dx_codes"]), list(header["tx_codes"]))
        patients = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            patients.append(_patient_from_json(obj, vocab, lineno))
    return Cohort(vocab, patients, provenance=str(header.get("provenance", "")))


def write_cohort(cohort: Cohort, path) -> None:
    """Write the JSONL form; reading it back reproduces the cohort exactly."""
    vocab = cohort.vocab
    with open(path, "w", encoding="utf-8") as fh:
        header = {"dx_codes": vocab.dx_codes, "tx_codes": vocab.tx_codes}
        if cohort.provenance:
            header["provenance"] = cohort.provenance
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for patient in cohort.patients:
            visits = [[{"dx": vocab.dx_codes[o.dx], "tx": [vocab.tx_codes[t] for t in o.tx]}
                       for o in visit.objects]
                      for visit in patient.visits]
            record = {"id": patient.id, "hf_label": patient.hf_label, "visits": visits}
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def flatten_visit(visit: Visit, vocab: CodeVocab) -> Array:
    """Binary multi-hot vector over Dx then treatment codes.

    Structure and multiplicity are discarded: a treatment copied onto two
    diagnosis objects sets its dimension once, and any re-attachment of
    treatments between objects leaves the vector unchanged.
    """
    x = np.zeros(vocab.n_dx + vocab.n_tx)
    for obj in visit.objects:
        x[obj.dx] = 1.0
        for t in obj.tx:
            x[vocab.n_dx + t] = 1.0
    return x


def visit_complexity(patient: Patient) -> float:
    """Fraction of visits whose objects carry at least two distinct
    treatment-code sets (order- and duplicate-insensitive comparison)."""
    complex_count = 0
    for visit in patient.visits:
        tx_sets = {tuple(sorted(set(obj.tx))) for obj in visit.objects}
        if len(tx_sets) >= 2:
            complex_count += 1
    return complex_count / len(patient.visits)


def slice_by_complexity(cohort: Cohort, lo: float, hi: float,
                        max_visits: int | None = None) -> Cohort:
    """Keep patients with lo <= complexity < hi (hi=1.0 inclusive) and,
    when ``max_visits`` is given, strictly fewer visits than that."""
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError(f"need 0 <= lo < hi <= 1, got ({lo}, {hi})")
    limit = math.inf if max_visits is None else max_visits
    kept = []
    for patient in cohort.patients:
        c = visit_complexity(patient)
        in_range = (lo <= c < hi) or (hi == 1.0 and c == 1.0)
        if in_range and len(patient.visits) < limit:
            kept.append(patient)
    if not kept:
        warnings.warn(f"complexity slice [{lo}, {hi}) with max_visits={max_visits} is empty")
    tag = f"{cohort.provenance}|complexity[{lo},{hi}),max_visits={max_visits}"
    return Cohort(cohort.vocab, kept, tag)


def slice_by_max_visits(cohort: Cohort, t_max: int) -> Cohort:
    """Keep patients with at most ``t_max`` visits."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    kept = [p for p in cohort.patients if len(p.visits) <= t_max]
    return Cohort(cohort.vocab, kept, f"{cohort.provenance}|t_max<={t_max}")


def split_folds(cohort: Cohort, seed: int, n_folds: int = 5,
                ratios: Sequence[float] = (0.7, 0.1, 0.2),
                ) -> list[tuple[list[Patient], list[Patient], list[Patient]]]:
    """Independent random train/validation/test splits (not rotation CV).

    Each of the ``n_folds`` splits reshuffles the whole cohort with its own
    derived stream, so folds are exchangeable and deterministic under seed.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError(f"ratios must be three values summing to 1, got {ratios}")
    n = len(cohort.patients)
    if n < 10:
        raise ValueError(f"cohort has {n} patients; need at least 10 to split")
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    folds = []
    for k in range(n_folds):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), k)))
        order = rng.permutation(n)
        train = [cohort.patients[i] for i in order[:n_train]]
        val = [cohort.patients[i] for i in order[n_train:n_train + n_val]]
        test = [cohort.patients[i] for i in order[n_train + n_val:]]
        folds.append((train, val, test))
    return folds


def patients_with_min_visits(patients: Iterable[Patient], t_min: int) -> list[Patient]:
    return [p for p in patients if len(p.visits) >= t_min]
