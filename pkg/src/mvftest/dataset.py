"""Dataset representation for sparsely observed multivariate functional samples.

Each subject contributes a q-dimensional response vector at a handful of
subject-specific observation times.  Time is rescaled affinely to [0, 1] at
ingestion; the original bounds are kept as metadata so files round-trip.

File format (long): comma-separated with header
``subject,group,time,outcome,value`` where ``outcome`` is 1-based.  Files
written by :func:`save_long_format` start with a ``# format=mvftest-long``
comment carrying ``q`` and the original domain; their ``time`` column is
already rescaled and the original time is emitted as ``time_raw``.  Files
without that marker are treated as raw input whose ``time`` column is in
original units.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "DataFormatError",
    "ObservationRecord",
    "SubjectSeries",
    "MvFunctionalDataset",
    "load_long_format",
    "save_long_format",
    "standardize_outcomes",
    "negate_components",
]

_FORMAT_MARKER = "mvftest-long"
_COLUMNS = ("subject", "group", "time", "outcome", "value")


class DataFormatError(ValueError):
    """Raised when an input file or record collection violates the dataset contract."""


@dataclass(frozen=True)
class ObservationRecord:
    """One q-vector of responses recorded for a subject at one time point.

    ``time`` is in internal [0, 1] coordinates.
    """

    subject_id: str
    group: int
    time: float
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class SubjectSeries:
    """All observations of one subject: strictly increasing times, (m, q) values."""

    subject_id: str
    group: int
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise DataFormatError(f"subject {self.subject_id!r}: needs at least one record")
        if values.ndim != 2 or values.shape[0] != times.size:
            raise DataFormatError(f"subject {self.subject_id!r}: values must be (m, q)")
        if np.any(np.diff(times) <= 0):
            raise DataFormatError(f"subject {self.subject_id!r}: times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise DataFormatError(f"subject {self.subject_id!r}: non-finite value")
        if not (int(self.group) == self.group and self.group >= 0):
            raise DataFormatError(f"subject {self.subject_id!r}: group must be a nonnegative integer")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "group", int(self.group))
        times.flags.writeable = False
        values.flags.writeable = False

    @property
    def m(self) -> int:
        return self.times.size


@dataclass(frozen=True, eq=False)
class MvFunctionalDataset:
    """Immutable collection of subject series sharing one component count q.

    ``domain`` holds the original time bounds; stored times live in [0, 1].
    Group labels must be dense integers 0..G-1 with every label present.
    """

    q: int
    domain: tuple[float, float]
    subjects: tuple[SubjectSeries, ...]

    def __post_init__(self):
        a, b = self.domain
        if not (math.isfinite(a) and math.isfinite(b) and b > a):
            raise DataFormatError(f"invalid domain {self.domain}")
        if not self.subjects:
            raise DataFormatError("dataset needs at least one subject")
        seen_ids = set()
        for subj in self.subjects:
            if subj.values.shape[1] != self.q:
                raise DataFormatError(
                    f"subject {subj.subject_id!r}: expected q={self.q} components, "
                    f"got {subj.values.shape[1]}"
                )
            if subj.times[0] < 0.0 or subj.times[-1] > 1.0:
                raise DataFormatError(
                    f"subject {subj.subject_id!r}: internal times outside [0, 1]"
                )
            if subj.subject_id in seen_ids:
                raise DataFormatError(f"duplicate subject id {subj.subject_id!r}")
            seen_ids.add(subj.subject_id)
        labels = sorted({s.group for s in self.subjects})
        if labels != list(range(len(labels))):
            raise DataFormatError(
                f"group labels must be dense 0..G-1 with each present, got {labels}"
            )
        object.__setattr__(self, "domain", (float(a), float(b)))
        object.__setattr__(self, "subjects", tuple(self.subjects))

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def n_groups(self) -> int:
        return max(s.group for s in self.subjects) + 1

    @property
    def groups(self) -> np.ndarray:
        return np.array([s.group for s in self.subjects], dtype=int)

    @property
    def subject_ids(self) -> tuple[str, ...]:
        return tuple(s.subject_id for s in self.subjects)

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.n_groups)

    def pooled(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack all records: times (N,), values (N, q), group labels (N,)."""
        times = np.concatenate([s.times for s in self.subjects])
        values = np.vstack([s.values for s in self.subjects])
        groups = np.concatenate(
            [np.full(s.m, s.group, dtype=int) for s in self.subjects]
        )
        return times, values, groups

    def iter_records(self) -> Iterator[ObservationRecord]:
        for subj in self.subjects:
            for j in range(subj.m):
                yield ObservationRecord(
                    subject_id=subj.subject_id,
                    group=subj.group,
                    time=float(subj.times[j]),
                    values=subj.values[j],
                )

    def subject(self, subject_id: str) -> SubjectSeries:
        for subj in self.subjects:
            if subj.subject_id == subject_id:
                return subj
        raise KeyError(f"unknown subject {subject_id!r}")

    def time_to_raw(self, t) -> np.ndarray:
        a, b = self.domain
        return a + np.asarray(t, dtype=float) * (b - a)

    def with_values(self, new_values: Sequence[np.ndarray]) -> "MvFunctionalDataset":
        """Same subjects/times with replaced value matrices (e.g. residuals)."""
        if len(new_values) != self.n:
            raise ValueError("need one value matrix per subject")
        subjects = tuple(
            SubjectSeries(s.subject_id, s.group, s.times, np.asarray(v, dtype=float))
            for s, v in zip(self.subjects, new_values)
        )
        return MvFunctionalDataset(q=self.q, domain=self.domain, subjects=subjects)

    def equals(self, other: "MvFunctionalDataset") -> bool:
        if self.q != other.q or self.domain != other.domain or self.n != other.n:
            return False
        for a, b in zip(self.subjects, other.subjects):
            if a.subject_id != b.subject_id or a.group != b.group:
                return False
            if not np.array_equal(a.times, b.times) or not np.array_equal(a.values, b.values):
                return False
        return True


def _parse_header_comment(lines: list[str]) -> dict:
    meta = {}
    for line in lines:
        body = line.lstrip("#").strip()
        for token in body.split():
            if "=" in token:
                key, _, val = token.partition("=")
                meta[key] = val
    return meta


def load_long_format(
    path,
    schema: dict[str, str] | None = None,
    domain: tuple[float, float] | None = None,
) -> MvFunctionalDataset:
    """Load a long-format file into a validated dataset.

    ``schema`` maps canonical column names (subject, group, time, outcome,
    value) to the file's column names.  ``domain`` overrides the time bounds
    used for the affine rescale; otherwise a header comment or the observed
    range supplies them.
    """
    colmap = dict(zip(_COLUMNS, _COLUMNS))
    if schema:
        colmap.update(schema)

    with open(path, "r", encoding="utf-8", newline="") as fh:
        raw_lines = fh.read().splitlines()
    comments = [ln for ln in raw_lines if ln.startswith("#")]
    body = [ln for ln in raw_lines if not ln.startswith("#") and ln.strip()]
    if not body:
        raise DataFormatError(f"{path}: no data rows")
    meta = _parse_header_comment(comments)
    internal_format = meta.get("format") == _FORMAT_MARKER

    reader = csv.DictReader(body)
    missing = [c for c in _COLUMNS if colmap[c] not in (reader.fieldnames or [])]
    if missing:
        raise DataFormatError(f"{path}: missing columns {missing} (have {reader.fieldnames})")

    # (subject, time, outcome) -> value, with duplicate detection
    cells: dict[tuple[str, float], dict[int, float]] = {}
    subj_group: dict[str, int] = {}
    order: list[str] = []
    q_seen = 0
    for line_no, row in enumerate(reader, start=2):
        sid = row[colmap["subject"]].strip()
        try:
            grp = int(row[colmap["group"]])
            time = float(row[colmap["time"]])
            outcome = int(row[colmap["outcome"]])
            value = float(row[colmap["value"]])
        except (TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}:{line_no}: unparseable row {row}") from exc
        if outcome < 1:
            raise DataFormatError(f"{path}:{line_no}: outcome index must be >= 1")
        if not math.isfinite(value) or not math.isfinite(time):
            raise DataFormatError(
                f"{path}:{line_no}: non-finite entry for (subject={sid}, time={time}, outcome={outcome})"
            )
        if sid in subj_group:
            if subj_group[sid] != grp:
                raise DataFormatError(f"{path}: subject {sid!r} has inconsistent group labels")
        else:
            subj_group[sid] = grp
            order.append(sid)
        key = (sid, time)
        per_time = cells.setdefault(key, {})
        if outcome in per_time:
            raise DataFormatError(
                f"{path}: duplicate record for (subject={sid}, time={time}, outcome={outcome})"
            )
        per_time[outcome] = value
        q_seen = max(q_seen, outcome)

    q = int(meta["q"]) if "q" in meta else q_seen
    for (sid, time), per_time in cells.items():
        got = set(per_time)
        want = set(range(1, q + 1))
        if got != want:
            missing_out = sorted(want - got)
            raise DataFormatError(
                f"incomplete response vector at (subject={sid}, time={time}): "
                f"missing outcome(s) {missing_out}"
            )

    all_times = np.array([t for (_, t) in cells])
    if domain is not None:
        a, b = float(domain[0]), float(domain[1])
    elif "domain" in meta:
        a_str, _, b_str = meta["domain"].partition(",")
        a, b = float(a_str), float(b_str)
    else:
        a, b = (0.0, 1.0) if internal_format else (all_times.min(), all_times.max())
    if b <= a:
        raise DataFormatError(f"degenerate time domain [{a}, {b}]")

    subjects = []
    for sid in order:
        pairs = sorted((t, per) for (s, t), per in cells.items() if s == sid)
        times = np.array([t for t, _ in pairs])
        if not internal_format:
            if times.min() < a or times.max() > b:
                raise DataFormatError(
                    f"subject {sid!r}: time outside the declared domain [{a}, {b}]"
                )
            times = (times - a) / (b - a)
        values = np.array([[per[o] for o in range(1, q + 1)] for _, per in pairs])
        subjects.append(SubjectSeries(sid, subj_group[sid], times, values))
    return MvFunctionalDataset(q=q, domain=(a, b), subjects=tuple(subjects))


def save_long_format(data: MvFunctionalDataset, path, header_lines: Iterable[str] = ()) -> None:
    """Write a dataset in long format with rescaled time plus original time_raw."""
    a, b = data.domain
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# format={_FORMAT_MARKER} q={data.q} domain={a!r},{b!r}\n")
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("subject,group,time,outcome,value,time_raw\n")
        for subj in data.subjects:
            raw = data.time_to_raw(subj.times)
            for j in range(subj.m):
                for o in range(data.q):
                    fh.write(
                        f"{subj.subject_id},{subj.group},{subj.times[j]!r},"
                        f"{o + 1},{subj.values[j, o]!r},{raw[j]!r}\n"
                    )


def standardize_outcomes(
    data: MvFunctionalDataset,
    reference_time: float = 0.0,
    atol: float = 1e-8,
) -> tuple[MvFunctionalDataset, list[tuple[float, float]]]:
    """Center and scale each component by its mean/SD at the reference time.

    The reference time is in internal [0, 1] coordinates.  Returns the
    transformed dataset and the per-component (center, scale) pairs; scale is
    the ddof=1 standard deviation so the transformed baseline has sample mean
    0 and SD 1 exactly.
    """
    baseline_rows = []
    baseline_subjects = set()
    for subj in data.subjects:
        hit = np.abs(subj.times - reference_time) <= atol
        if hit.any():
            baseline_rows.append(subj.values[hit])
            baseline_subjects.add(subj.subject_id)
    if len(baseline_subjects) < 2:
        raise DataFormatError(
            f"need records at reference time {reference_time} from at least 2 subjects"
        )
    baseline = np.vstack(baseline_rows)
    centers = baseline.mean(axis=0)
    scales = baseline.std(axis=0, ddof=1)
    for comp, s in enumerate(scales, start=1):
        if s <= 0 or not math.isfinite(s):
            raise DataFormatError(f"outcome {comp}: zero baseline standard deviation")
    new_values = [(subj.values - centers) / scales for subj in data.subjects]
    pairs = [(float(c), float(s)) for c, s in zip(centers, scales)]
    return data.with_values(new_values), pairs


def negate_components(data: MvFunctionalDataset, components: Iterable[int]) -> MvFunctionalDataset:
    """Flip the sign of the listed components (1-based outcome indices)."""
    comps = sorted(set(int(c) for c in components))
    if not comps:
        return data
    if comps[0] < 1 or comps[-1] > data.q:
        raise ValueError(f"component indices must lie in 1..{data.q}, got {comps}")
    sign = np.ones(data.q)
    sign[[c - 1 for c in comps]] = -1.0
    return data.with_values([subj.values * sign for subj in data.subjects])
