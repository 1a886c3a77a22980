"""Longitudinal mixed-type data containers, CSV ingest, and design matrices.

A dataset holds one observation series per (subject, marker) pair.  Markers
are typed by family ("gaussian", "poisson", "binomial") and every subject
must have at least one observation for every marker.  Subjects are indexed
0..N-1 in order of first appearance in the source file; markers are indexed
0..R-1 in declaration order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

FAMILIES = ("gaussian", "poisson", "binomial")

CSV_COLUMNS = ("subject_id", "marker_id", "time", "value")


class DataError(Exception):
    """Base class for data-layer failures."""


class ParseError(DataError):
    """Malformed CSV row; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(DataError):
    """Structurally parsed but invalid data (bad value for family, missing series, ...)."""


@dataclass(frozen=True)
class MarkerSeries:
    """Observations of one marker for one subject, sorted by time."""

    subject: int
    marker: int
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or v.ndim != 1 or t.shape != v.shape:
            raise ValidationError("times and values must be 1-d arrays of equal length")
        if t.size == 0:
            raise ValidationError("empty series")
        if np.any(np.diff(t) < 0):
            raise ValidationError("times must be non-decreasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValidationError("times and values must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def n_obs(self) -> int:
        return self.times.size


def _check_family_values(family: str, values: np.ndarray, where: str) -> None:
    if family == "poisson":
        if np.any(values < 0) or np.any(values != np.floor(values)):
            raise ValidationError(f"{where}: poisson values must be non-negative integers")
    elif family == "binomial":
        if not np.all(np.isin(values, (0.0, 1.0))):
            raise ValidationError(f"{where}: binomial values must be 0 or 1")
    elif family != "gaussian":
        raise ValidationError(f"{where}: unknown family {family!r}")


@dataclass(frozen=True)
class Dataset:
    """Mixed-type longitudinal dataset.

    Attributes
    ----------
    subject_ids : tuple of str
        External subject identifiers, in first-appearance order.
    marker_names : tuple of str
        Marker identifiers, in declaration order.
    families : tuple of str
        Per-marker family tag, aligned with marker_names.
    series : mapping
        (subject_index, marker_index) -> MarkerSeries.
    """

    subject_ids: tuple
    marker_names: tuple
    families: tuple
    series: Mapping

    def __post_init__(self):
        if len(self.marker_names) != len(self.families):
            raise ValidationError("marker_names and families must align")
        for fam in self.families:
            if fam not in FAMILIES:
                raise ValidationError(f"unknown family {fam!r}")
        n, r = len(self.subject_ids), len(self.marker_names)
        if n == 0 or r == 0:
            raise ValidationError("dataset needs at least one subject and one marker")
        for i in range(n):
            for j in range(r):
                s = self.series.get((i, j))
                if s is None:
                    raise ValidationError(
                        f"subject {self.subject_ids[i]!r} has no observations "
                        f"for marker {self.marker_names[j]!r}"
                    )
                _check_family_values(
                    self.families[j], s.values,
                    f"subject {self.subject_ids[i]!r}, marker {self.marker_names[j]!r}",
                )

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_markers(self) -> int:
        return len(self.marker_names)

    def n_obs(self, marker: int) -> int:
        """Total observation count for one marker."""
        return sum(self.series[(i, marker)].n_obs for i in range(self.n_subjects))


def ingest_csv(source, families: Mapping[str, str]) -> Dataset:
    """Read a long-format CSV into a Dataset.

    Parameters
    ----------
    source : path or file-like
        CSV with header subject_id,marker_id,time,value.
    families : mapping
        marker_id -> family; iteration order fixes marker indices.

    Raises
    ------
    ParseError
        Malformed row (wrong field count, non-numeric time/value), with line number.
    ValidationError
        Unknown marker, family-incompatible value, or a subject missing a marker.
    """
    marker_names = tuple(families.keys())
    marker_index = {m: j for j, m in enumerate(marker_names)}
    fam_list = tuple(families[m] for m in marker_names)
    for m, fam in families.items():
        if fam not in FAMILIES:
            raise ValidationError(f"marker {m!r}: unknown family {fam!r}")

    if hasattr(source, "read"):
        fh = source
        close = False
    else:
        fh = open(source, "r", newline="")
        close = True
    try:
        reader = csv.reader(fh)
        rows = {}          # (subject_id, marker_id) -> list of (time, value)
        subject_order = []
        seen_subjects = set()
        header_seen = False
        for lineno, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if not header_seen:
                got = tuple(c.strip() for c in row)
                if got != CSV_COLUMNS:
                    raise ParseError(
                        f"expected header {','.join(CSV_COLUMNS)}, got {','.join(got)}", lineno
                    )
                header_seen = True
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", lineno)
            sid, mid, t_raw, v_raw = (c.strip() for c in row)
            if mid not in marker_index:
                raise ValidationError(f"line {lineno}: unknown marker {mid!r}")
            try:
                t = float(t_raw)
                v = float(v_raw)
            except ValueError:
                raise ParseError(f"non-numeric time/value ({t_raw!r}, {v_raw!r})", lineno) from None
            if not (np.isfinite(t) and np.isfinite(v)):
                raise ParseError(f"non-finite time/value ({t_raw}, {v_raw})", lineno)
            if sid not in seen_subjects:
                seen_subjects.add(sid)
                subject_order.append(sid)
            rows.setdefault((sid, mid), []).append((t, v))
        if not header_seen:
            raise ParseError("empty file", 1)
    finally:
        if close:
            fh.close()

    series = {}
    for i, sid in enumerate(subject_order):
        for mid, j in marker_index.items():
            obs = rows.get((sid, mid))
            if not obs:
                raise ValidationError(
                    f"subject {sid!r} has no observations for marker {mid!r}"
                )
            # stable sort by time keeps file order among tied times
            obs_sorted = sorted(obs, key=lambda tv: tv[0])
            t = np.array([tv[0] for tv in obs_sorted])
            v = np.array([tv[1] for tv in obs_sorted])
            _check_family_values(fam_list[j], v, f"subject {sid!r}, marker {mid!r}")
            series[(i, j)] = MarkerSeries(subject=i, marker=j, times=t, values=v)

    return Dataset(
        subject_ids=tuple(subject_order),
        marker_names=marker_names,
        families=fam_list,
        series=series,
    )


def write_csv(data: Dataset, target) -> None:
    """Write a Dataset in the long CSV format accepted by ingest_csv."""
    if hasattr(target, "write"):
        fh = target
        close = False
    else:
        fh = open(target, "w", newline="")
        close = True
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i, sid in enumerate(data.subject_ids):
            for j, mid in enumerate(data.marker_names):
                s = data.series[(i, j)]
                for t, v in zip(s.times, s.values):
                    w.writerow([sid, mid, repr(float(t)), repr(float(v))])
    finally:
        if close:
            fh.close()


# ---------------------------------------------------------------------------
# design matrices

def _b_intercept(t):
    return np.ones_like(t)


def _b_time(t):
    return t


def _b_time2(t):
    return t ** 2


def _b_time3(t):
    return t ** 3


BUILDERS: Mapping[str, Callable] = {
    "intercept": _b_intercept,
    "time": _b_time,
    "time2": _b_time2,
    "time3": _b_time3,
}


@dataclass(frozen=True)
class DesignSpec:
    """Per-marker fixed/random design term lists.

    fixed[r] and random[r] are ordered tuples of builder names; random[r]
    must be an ordered sublist of fixed[r] (random slopes require matching
    fixed effects).
    """

    fixed: tuple
    random: tuple

    def __post_init__(self):
        if len(self.fixed) != len(self.random):
            raise ValidationError("fixed and random must have one entry per marker")
        for r, (fx, rd) in enumerate(zip(self.fixed, self.random)):
            if len(fx) == 0:
                raise ValidationError(f"marker {r}: fixed design must be non-empty")
            for name in tuple(fx) + tuple(rd):
                if name not in BUILDERS:
                    raise ValidationError(f"marker {r}: unknown design term {name!r}")
            if len(set(fx)) != len(fx) or len(set(rd)) != len(rd):
                raise ValidationError(f"marker {r}: duplicate design terms")
            it = iter(fx)
            if not all(term in it for term in rd):
                raise ValidationError(
                    f"marker {r}: random terms must be an ordered sublist of fixed terms"
                )

    def p(self, r: int) -> int:
        return len(self.fixed[r])

    def q(self, r: int) -> int:
        return len(self.random[r])


@dataclass(frozen=True)
class DesignMatrices:
    """Built fixed (X) and random (Z) design matrices per (subject, marker)."""

    spec: DesignSpec
    X: Mapping      # (i, r) -> (n_i, p_r)
    Z: Mapping      # (i, r) -> (n_i, q_r)

    def p(self, r: int) -> int:
        return self.spec.p(r)

    def q(self, r: int) -> int:
        return self.spec.q(r)


def build_designs(data: Dataset, spec: DesignSpec) -> DesignMatrices:
    """Evaluate design builders on every series' observation times."""
    if len(spec.fixed) != data.n_markers:
        raise ValidationError(
            f"design spec has {len(spec.fixed)} markers, dataset has {data.n_markers}"
        )
    X, Z = {}, {}
    for (i, r), s in data.series.items():
        t = s.times
        X[(i, r)] = np.column_stack([BUILDERS[name](t) for name in spec.fixed[r]])
        if spec.q(r) > 0:
            Z[(i, r)] = np.column_stack([BUILDERS[name](t) for name in spec.random[r]])
        else:
            Z[(i, r)] = np.zeros((t.size, 0))
    return DesignMatrices(spec=spec, X=X, Z=Z)
