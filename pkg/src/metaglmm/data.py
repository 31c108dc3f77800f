"""Aggregate study records and CSV ingestion.

A record is one arm (or one single-arm study) summarised by its size, its
sample mean and, where the family needs it, a sample variance.  Two-arm
tables are expanded so that each arm becomes a record with covariates
``(1, z)`` and its own random effect.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .family import FamilySpec, Kind


class DataError(ValueError):
    """Malformed or inconsistent aggregate data."""


REQUIRED_COLUMNS = {
    Kind.BINOMIAL: ("study", "n", "events"),
    Kind.POISSON: ("study", "person_time", "events"),
    Kind.GAMMA: ("study", "n", "mean", "sd"),
    Kind.NORMAL: ("study", "estimate", "variance"),
}

_TREATMENT_LABELS = {"1", "t", "trt", "treat", "treatment", "experimental", "exp", "intervention"}
_CONTROL_LABELS = {"0", "c", "ctl", "ctrl", "control", "placebo", "conservative"}


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    record_id: str
    x: tuple[float, ...]
    ybar: float
    n: int | None = None
    person_time: float | None = None
    s2: float | None = None
    phi_hat: float | None = None
    arm: int | None = None

    @property
    def events(self) -> float:
        """Total event count for binomial and Poisson records."""
        if self.person_time is not None:
            return self.ybar * self.person_time
        return self.ybar * self.n


@dataclass(frozen=True)
class Dataset:
    family: FamilySpec
    records: tuple[StudyRecord, ...]
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise DataError("no records")
        p = len(self.records[0].x)
        for rec in self.records:
            if len(rec.x) != p:
                raise DataError(
                    f"record {rec.record_id} has {len(rec.x)} covariates, expected {p}"
                )
        names = tuple(self.covariate_names) or tuple(f"x{j}" for j in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} covariate names for {p} covariates")
        object.__setattr__(self, "covariate_names", names)

    @property
    def K(self) -> int:
        return len(self.records)

    @property
    def p(self) -> int:
        return len(self.records[0].x)

    @property
    def two_arm(self) -> bool:
        return all(rec.arm is not None for rec in self.records)

    @cached_property
    def X(self) -> np.ndarray:
        X = np.array([rec.x for rec in self.records], dtype=float)
        X.setflags(write=False)
        return X

    def with_records(self, records) -> "Dataset":
        return replace(self, records=tuple(records))


def validate_record(rec: StudyRecord, family: FamilySpec) -> None:
    """Raise :class:`DataError` if ``rec`` breaks the invariants of ``family``."""
    kind = family.kind
    if not all(math.isfinite(v) for v in rec.x):
        raise DataError(f"record {rec.record_id}: non-finite covariate")
    if kind is Kind.BINOMIAL:
        if rec.n is None or rec.n <= 0:
            raise DataError(f"record {rec.record_id}: n must be a positive integer")
        if not 0.0 <= rec.ybar <= 1.0:
            raise DataError(f"record {rec.record_id}: proportion {rec.ybar} outside [0, 1]")
        events = rec.n * rec.ybar
        if abs(events - round(events)) > 1e-9:
            raise DataError(f"record {rec.record_id}: n*ybar = {events} is not an integer")
    elif kind is Kind.POISSON:
        if rec.person_time is None or not rec.person_time > 0:
            raise DataError(f"record {rec.record_id}: person_time must be positive")
        if rec.ybar < 0:
            raise DataError(f"record {rec.record_id}: negative event rate")
    elif kind is Kind.GAMMA:
        if rec.n is None or rec.n <= 0:
            raise DataError(f"record {rec.record_id}: n must be a positive integer")
        if not rec.ybar > 0:
            raise DataError(f"record {rec.record_id}: gamma mean must be positive")
        if rec.s2 is None or not rec.s2 > 0:
            raise DataError(f"record {rec.record_id}: gamma records need a positive variance")
        if rec.phi_hat is not None and abs(rec.phi_hat - rec.s2 / rec.ybar**2) > 1e-12 * max(1.0, rec.phi_hat):
            raise DataError(f"record {rec.record_id}: phi_hat inconsistent with s2/ybar^2")
    else:
        if rec.phi_hat is None or not rec.phi_hat > 0:
            raise DataError(f"record {rec.record_id}: normal records need a positive variance")


def plugin_dispersion(record: StudyRecord, family: FamilySpec) -> StudyRecord:
    """Attach the plug-in dispersion used by the likelihood.

    Gamma records get ``s2 / ybar**2``; binomial and Poisson have no
    dispersion and get 1.  Normal records keep a reported variance, or fall
    back to the per-subject sample variance.
    """
    kind = family.kind
    if kind is Kind.GAMMA:
        if record.s2 is None:
            raise DataError(f"record {record.record_id}: gamma dispersion needs s2")
        if not (record.ybar > 0 and record.s2 > 0):
            raise DataError(f"record {record.record_id}: gamma dispersion needs ybar > 0 and s2 > 0")
        return replace(record, phi_hat=record.s2 / record.ybar**2)
    if kind is Kind.NORMAL:
        if record.phi_hat is not None:
            return record
        if record.s2 is None:
            raise DataError(f"record {record.record_id}: normal record needs a variance")
        return replace(record, phi_hat=record.s2)
    return replace(record, phi_hat=1.0)


def _number(row: Mapping[str, str], key: str, line: int) -> float:
    raw = row.get(key)
    if raw is None or str(raw).strip() == "":
        raise DataError(f"line {line}: missing value for {key!r}")
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise DataError(f"line {line}: non-numeric value {raw!r} in column {key!r}") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}: non-finite value in column {key!r}")
    return value


def _count(row, key, line) -> int:
    value = _number(row, key, line)
    if value != int(value):
        raise DataError(f"line {line}: {key!r} must be an integer, got {value}")
    return int(value)


def _arm(raw, line) -> int:
    label = str(raw).strip().lower()
    if label in _TREATMENT_LABELS:
        return 1
    if label in _CONTROL_LABELS:
        return 0
    raise DataError(f"line {line}: unrecognised arm label {raw!r}")


def _record_from_row(row, family, x, line, record_id, arm=None) -> StudyRecord:
    study = str(row["study"]).strip()
    kind = family.kind
    if kind is Kind.BINOMIAL:
        n = _count(row, "n", line)
        events = _count(row, "events", line)
        if n <= 0 or not 0 <= events <= n:
            raise DataError(f"line {line}: need 0 <= events <= n and n > 0")
        rec = StudyRecord(study, record_id, x, events / n, n=n, arm=arm)
    elif kind is Kind.POISSON:
        t = _number(row, "person_time", line)
        events = _number(row, "events", line)
        if t <= 0 or events < 0:
            raise DataError(f"line {line}: need person_time > 0 and events >= 0")
        rec = StudyRecord(study, record_id, x, events / t, person_time=t, arm=arm)
    elif kind is Kind.GAMMA:
        n = _count(row, "n", line)
        mean = _number(row, "mean", line)
        sd = _number(row, "sd", line)
        rec = StudyRecord(study, record_id, x, mean, n=n, s2=sd * sd, arm=arm)
    else:
        est = _number(row, "estimate", line)
        var = _number(row, "variance", line)
        rec = StudyRecord(study, record_id, x, est, n=1, phi_hat=var, arm=arm)
    try:
        rec = plugin_dispersion(rec, family)
        validate_record(rec, family)
    except DataError as exc:
        raise DataError(f"line {line}: {exc}") from None
    return rec


def expand_two_arm(rows: Iterable[Mapping], family: FamilySpec, covariates: tuple[str, ...] = ()) -> Dataset:
    """Build a dataset with one record per arm from arm-level rows.

    Every row needs ``study`` and ``arm`` keys plus the family's summary
    fields.  Each study must supply exactly one treatment and one control arm.
    Covariate vectors are ``(1, z, *covariates)``.
    """
    rows = list(rows)
    if not rows:
        raise DataError("no records")
    arms: dict[str, list[int]] = {}
    records = []
    for i, row in enumerate(rows):
        line = int(row.get("_line", i + 2))
        arm = _arm(row.get("arm", ""), line)
        study = str(row["study"]).strip()
        arms.setdefault(study, []).append(arm)
        x = (1.0, float(arm)) + tuple(_number(row, c, line) for c in covariates)
        label = "treatment" if arm else "control"
        records.append(_record_from_row(row, family, x, line, f"{study}:{label}", arm=arm))
    for study, seen in arms.items():
        if sorted(seen) != [0, 1]:
            raise DataError(f"study {study!r} must supply exactly one treatment and one control arm")
    return Dataset(family, records, ("intercept", "treatment") + tuple(covariates))


def records_from_rows(rows: Iterable[Mapping], family: FamilySpec, covariates: tuple[str, ...] = ()) -> Dataset:
    """Single-arm rows: one record per row with covariates ``(1, *covariates)``."""
    records = []
    for i, row in enumerate(rows):
        line = int(row.get("_line", i + 2))
        x = (1.0,) + tuple(_number(row, c, line) for c in covariates)
        records.append(_record_from_row(row, family, x, line, str(row["study"]).strip()))
    if not records:
        raise DataError("no records")
    return Dataset(family, records, ("intercept",) + tuple(covariates))


def load_csv(path, family: FamilySpec, schema: Mapping[str, str] | None = None) -> Dataset:
    """Read an aggregate-data CSV.

    ``schema`` maps canonical column names (``study``, ``n``, ``events``,
    ``mean``, ...) to the names used in the file.  Columns that are not part
    of the family's schema are treated as numeric study-level covariates.  An
    ``arm`` column switches on two-arm expansion.
    """
    schema = dict(schema or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError("no records")
        header = [h.strip() for h in reader.fieldnames]
        rename = {schema.get(k, k): k for k in (*REQUIRED_COLUMNS[family.kind], "arm")}
        canonical = [rename.get(h, h) for h in header]
        missing = [c for c in REQUIRED_COLUMNS[family.kind] if c not in canonical]
        if missing:
            raise DataError(f"missing column(s) {', '.join(missing)} for {family.name} data")
        known = set(REQUIRED_COLUMNS[family.kind]) | {"arm"}
        covariates = tuple(c for c in canonical if c not in known)
        rows = []
        for line, raw in enumerate(reader, start=2):
            values = list(raw.values())
            if len(values) != len(canonical) or None in values or raw.get(None):
                raise DataError(f"line {line}: expected {len(canonical)} fields")
            row = {c: v for c, v in zip(canonical, values)}
            row["_line"] = line
            rows.append(row)
    if not rows:
        raise DataError("no records")
    if "arm" in canonical:
        ds = expand_two_arm(rows, family, covariates)
    else:
        ds = records_from_rows(rows, family, covariates)
    if ds.K < 2:
        raise DataError("a meta-analysis needs at least two records")
    return ds


def _fmt(value: float) -> str:
    return format(float(value), ".12g")


def write_csv(dataset: Dataset, path) -> None:
    """Write ``dataset`` in the schema that :func:`load_csv` reads."""
    kind = dataset.family.kind
    two_arm = dataset.two_arm
    skip = 2 if two_arm else 1
    covariates = dataset.covariate_names[skip:]
    cols = list(REQUIRED_COLUMNS[kind])
    if two_arm:
        cols.insert(1, "arm")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols + list(covariates))
        for rec in dataset.records:
            if kind is Kind.BINOMIAL:
                body = [rec.n, int(round(rec.events))]
            elif kind is Kind.POISSON:
                body = [_fmt(rec.person_time), _fmt(rec.events)]
            elif kind is Kind.GAMMA:
                body = [rec.n, _fmt(rec.ybar), _fmt(math.sqrt(rec.s2))]
            else:
                body = [_fmt(rec.ybar), _fmt(rec.phi_hat)]
            head = [rec.study_id] + (["treatment" if rec.arm else "control"] if two_arm else [])
            writer.writerow(head + body + [_fmt(v) for v in rec.x[skip:]])


BUNDLED = {"long2020": ("long2020.csv", "gamma")}


def load_bundled(name: str) -> Dataset:
    """Load one of the datasets shipped with the package (see ``BUNDLED``)."""
    if name not in BUNDLED:
        raise KeyError(f"unknown dataset {name!r}; bundled: {', '.join(sorted(BUNDLED))}")
    filename, family = BUNDLED[name]
    ref = resources.files("metaglmm.datasets").joinpath(filename)
    with resources.as_file(ref) as path:
        return load_csv(Path(path), FamilySpec.from_name(family))
