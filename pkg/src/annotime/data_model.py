"""Cohort containers and CSV ingestion.

Encounters are read from a long-format CSV with one row per encounter
(``patient_id, channel_id, time``).  Patient-level data come from a second
CSV (``patient_id, censor_time, event_time, event_indicator, u_1..u_p``);
rows whose event columns are empty are treated as unlabeled.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CohortParseError",
    "CohortValidationError",
    "EncounterChannel",
    "Patient",
    "CohortData",
    "ingest_cohort",
    "export_cohort",
    "scale_times",
]


class CohortParseError(ValueError):
    """A row in an input file could not be parsed."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class CohortValidationError(ValueError):
    """Parsed data violate a cohort invariant."""


def _frozen_array(values: Iterable[float]) -> np.ndarray:
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float)
    arr = arr.reshape(-1).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EncounterChannel:
    """Encounter times of one code channel for one patient."""

    channel_id: int
    times: np.ndarray

    def __post_init__(self):
        times = _frozen_array(self.times)
        if times.size and (np.any(~np.isfinite(times)) or times.min() < 0):
            raise CohortValidationError(
                f"channel {self.channel_id}: encounter times must be finite and >= 0"
            )
        if times.size > 1 and np.any(np.diff(times) < 0):
            times = _frozen_array(np.sort(times))
        object.__setattr__(self, "times", times)

    @property
    def count(self) -> int:
        return int(self.times.size)

    def __eq__(self, other):
        if not isinstance(other, EncounterChannel):
            return NotImplemented
        return self.channel_id == other.channel_id and np.array_equal(self.times, other.times)


@dataclass(frozen=True, eq=False)
class Patient:
    """A single patient: follow-up, optional label, baseline covariates, encounters.

    Parameters
    ----------
    id : str
        Opaque identifier.
    censor_time : float
        End of follow-up ``C > 0``.
    channels : sequence of EncounterChannel
        One entry per channel, ordered by ``channel_id`` starting at 1.
    event_time, event_indicator : optional
        The label ``(X, Delta)``; both present or both absent.
    baseline : array-like
        Baseline covariates ``U``.
    """

    id: str
    censor_time: float
    channels: tuple
    event_time: float | None = None
    event_indicator: int | None = None
    baseline: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "censor_time", float(self.censor_time))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "baseline", _frozen_array(self.baseline))
        C = self.censor_time
        if not (math.isfinite(C) and C > 0):
            raise CohortValidationError(f"patient {self.id}: censor_time must be > 0, got {C}")
        for j, ch in enumerate(self.channels, start=1):
            if ch.channel_id != j:
                raise CohortValidationError(
                    f"patient {self.id}: channels must be ordered 1..q, found {ch.channel_id} at {j}"
                )
            if ch.times.size and ch.times[-1] > C:
                raise CohortValidationError(
                    f"patient {self.id}: channel {j} has encounter at {ch.times[-1]} > censor_time {C}"
                )
        has_x = self.event_time is not None
        has_d = self.event_indicator is not None
        if has_x != has_d:
            raise CohortValidationError(
                f"patient {self.id}: event_time and event_indicator must be given together"
            )
        if has_x:
            X = float(self.event_time)
            D = self.event_indicator
            if isinstance(D, (bool, np.bool_)) or D not in (0, 1):
                raise CohortValidationError(f"patient {self.id}: event_indicator must be 0 or 1, got {D!r}")
            if not (0 < X <= C):
                raise CohortValidationError(
                    f"patient {self.id}: event_time {X} must lie in (0, censor_time={C}]"
                )
            if D == 0 and X != C:
                raise CohortValidationError(
                    f"patient {self.id}: censored patient must have event_time == censor_time"
                )
            object.__setattr__(self, "event_time", X)
            object.__setattr__(self, "event_indicator", int(D))

    @property
    def labeled(self) -> bool:
        return self.event_time is not None

    @property
    def q(self) -> int:
        return len(self.channels)

    def counts(self) -> np.ndarray:
        return np.array([ch.count for ch in self.channels], dtype=int)

    def __eq__(self, other):
        if not isinstance(other, Patient):
            return NotImplemented
        return (
            self.id == other.id
            and self.censor_time == other.censor_time
            and self.event_time == other.event_time
            and self.event_indicator == other.event_indicator
            and np.array_equal(self.baseline, other.baseline)
            and self.channels == other.channels
        )


@dataclass(frozen=True, eq=False)
class CohortData:
    """Labeled and unlabeled patients sharing ``q`` encounter channels."""

    labeled: tuple
    unlabeled: tuple
    q: int
    horizon: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "labeled", tuple(self.labeled))
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))
        if self.q < 1:
            raise CohortValidationError("cohort needs at least one channel")
        everyone = self.labeled + self.unlabeled
        if any(not p.labeled for p in self.labeled) or any(p.labeled for p in self.unlabeled):
            raise CohortValidationError("labeled/unlabeled partition is inconsistent with patient labels")
        ids = [p.id for p in everyone]
        if len(set(ids)) != len(ids):
            raise CohortValidationError("duplicate patient ids")
        p_dims = {p.baseline.size for p in everyone}
        if len(p_dims) > 1:
            raise CohortValidationError("baseline covariate dimension differs across patients")
        for p in everyone:
            if p.q != self.q:
                raise CohortValidationError(f"patient {p.id} has {p.q} channels, expected {self.q}")
        horizon = self.horizon
        if horizon is None:
            horizon = max((p.censor_time for p in everyone), default=0.0)
        elif any(p.censor_time > horizon for p in everyone):
            raise CohortValidationError("censor_time exceeds cohort horizon")
        object.__setattr__(self, "horizon", float(horizon))

    @property
    def n(self) -> int:
        return len(self.labeled)

    @property
    def N(self) -> int:
        return len(self.unlabeled)

    @property
    def patients(self) -> tuple:
        return self.labeled + self.unlabeled

    @property
    def n_baseline(self) -> int:
        ps = self.patients
        return ps[0].baseline.size if ps else 0

    def labels(self):
        """Return ``(X, Delta)`` arrays for the labeled patients."""
        X = np.array([p.event_time for p in self.labeled], dtype=float)
        D = np.array([p.event_indicator for p in self.labeled], dtype=int)
        return X, D

    def __eq__(self, other):
        if not isinstance(other, CohortData):
            return NotImplemented
        return (
            self.q == other.q
            and self.horizon == other.horizon
            and self.labeled == other.labeled
            and self.unlabeled == other.unlabeled
        )


def scale_times(p: Patient, j: int) -> np.ndarray:
    """Encounter times of channel ``j`` (1-based) divided by the censor time."""
    if not 1 <= j <= p.q:
        raise IndexError(f"channel {j} out of range 1..{p.q}")
    return np.asarray(p.channels[j - 1].times) / p.censor_time


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

_ENC_COLUMNS = ("patient_id", "channel_id", "time")
_PAT_REQUIRED = ("patient_id", "censor_time")


def _parse_float(raw: str, path, line: int, column: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise CohortParseError(path, line, f"column {column!r}: not a number: {raw!r}") from None
    if not math.isfinite(value):
        raise CohortParseError(path, line, f"column {column!r}: non-finite value {raw!r}")
    return value


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CohortParseError(path, 1, "missing header row") from None
        rows = [(reader.line_num, row) for row in reader]
    return header, rows


def ingest_cohort(
    encounters_path,
    patients_path,
    n_channels: int | None = None,
    horizon: float | None = None,
) -> CohortData:
    """Read and validate a cohort from the two CSV files.

    ``n_channels`` fixes ``q``; by default it is the largest ``channel_id``
    seen.  Channel ids outside ``1..q`` are rejected.
    """
    pheader, prows = _read_rows(patients_path)
    for col in _PAT_REQUIRED:
        if col not in pheader:
            raise CohortParseError(patients_path, 1, f"missing column {col!r}")
    has_labels = "event_time" in pheader and "event_indicator" in pheader
    u_cols = [h for h in pheader if h.startswith("u_")]
    u_cols.sort(key=lambda h: int(h[2:]) if h[2:].isdigit() else h)
    pidx = {h: k for k, h in enumerate(pheader)}

    records = {}
    order = []
    for line, row in prows:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(pheader):
            raise CohortParseError(patients_path, line, f"expected {len(pheader)} fields, got {len(row)}")
        pid = row[pidx["patient_id"]].strip()
        if not pid:
            raise CohortParseError(patients_path, line, "empty patient_id")
        if pid in records:
            raise CohortParseError(patients_path, line, f"duplicate patient_id {pid!r}")
        C = _parse_float(row[pidx["censor_time"]], patients_path, line, "censor_time")
        X = D = None
        if has_labels:
            x_raw = row[pidx["event_time"]].strip()
            d_raw = row[pidx["event_indicator"]].strip()
            if x_raw or d_raw:
                if not (x_raw and d_raw):
                    raise CohortParseError(
                        patients_path, line, "event_time and event_indicator must both be set or both empty"
                    )
                X = _parse_float(x_raw, patients_path, line, "event_time")
                if d_raw not in ("0", "1"):
                    raise CohortParseError(
                        patients_path, line, f"event_indicator must be 0 or 1, got {d_raw!r}"
                    )
                D = int(d_raw)
        U = [_parse_float(row[pidx[c]], patients_path, line, c) for c in u_cols]
        records[pid] = (C, X, D, U)
        order.append(pid)

    eheader, erows = _read_rows(encounters_path)
    for col in _ENC_COLUMNS:
        if col not in eheader:
            raise CohortParseError(encounters_path, 1, f"missing column {col!r}")
    eidx = {h: k for k, h in enumerate(eheader)}
    times: dict[tuple[str, int], list[float]] = {}
    max_channel = 0
    for line, row in erows:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(eheader):
            raise CohortParseError(encounters_path, line, f"expected {len(eheader)} fields, got {len(row)}")
        pid = row[eidx["patient_id"]].strip()
        ch_raw = row[eidx["channel_id"]].strip()
        try:
            ch = int(ch_raw)
        except ValueError:
            raise CohortParseError(encounters_path, line, f"channel_id not an integer: {ch_raw!r}") from None
        t = _parse_float(row[eidx["time"]], encounters_path, line, "time")
        if pid not in records:
            raise CohortValidationError(f"{encounters_path}:{line}: unknown patient_id {pid!r}")
        if ch < 1 or (n_channels is not None and ch > n_channels):
            raise CohortValidationError(f"{encounters_path}:{line}: unknown channel_id {ch}")
        if t < 0:
            raise CohortValidationError(f"{encounters_path}:{line}: negative encounter time {t}")
        if t > records[pid][0]:
            raise CohortValidationError(
                f"{encounters_path}:{line}: patient {pid!r} encounter time {t} exceeds censor_time {records[pid][0]}"
            )
        max_channel = max(max_channel, ch)
        times.setdefault((pid, ch), []).append(t)

    q = n_channels if n_channels is not None else max(max_channel, 1)
    labeled, unlabeled = [], []
    for pid in order:
        C, X, D, U = records[pid]
        channels = [EncounterChannel(j, sorted(times.get((pid, j), []))) for j in range(1, q + 1)]
        p = Patient(pid, C, channels, event_time=X, event_indicator=D, baseline=U)
        (labeled if p.labeled else unlabeled).append(p)
    return CohortData(labeled, unlabeled, q, horizon=horizon)


def _fmt(x: float) -> str:
    return repr(float(x))


def export_cohort(cohort: CohortData, encounters_path, patients_path) -> None:
    """Write ``cohort`` in the format read by :func:`ingest_cohort`."""
    p_dim = cohort.n_baseline
    with open(patients_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "censor_time", "event_time", "event_indicator"]
                   + [f"u_{k}" for k in range(1, p_dim + 1)])
        for p in cohort.patients:
            lab = [_fmt(p.event_time), str(p.event_indicator)] if p.labeled else ["", ""]
            w.writerow([p.id, _fmt(p.censor_time)] + lab + [_fmt(u) for u in p.baseline])
    with open(encounters_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(_ENC_COLUMNS))
        for p in cohort.patients:
            for ch in p.channels:
                for t in ch.times:
                    w.writerow([p.id, ch.channel_id, _fmt(t)])


def make_patient(
    pid,
    censor_time: float,
    channel_times: Sequence[Sequence[float]],
    event_time=None,
    event_indicator=None,
    baseline=(),
) -> Patient:
    """Convenience constructor taking plain per-channel time lists."""
    channels = [EncounterChannel(j, ts) for j, ts in enumerate(channel_times, start=1)]
    return Patient(pid, censor_time, channels, event_time, event_indicator, baseline)


def write_text_atomic(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
