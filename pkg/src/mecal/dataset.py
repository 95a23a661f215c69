"""Dataset containers, validation and CSV I/O for measurement-error analyses.

The central object is :class:`MEDataset`: an outcome (continuous, binary, or
censored survival), up to two error-prone measurements per individual with an
explicit presence mask, and a matrix of error-free covariates.  Covariates
declared binary may themselves carry per-entry missingness, which the Bayes
engine imputes.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "OutcomeKind",
    "OutcomeSpec",
    "MEDataset",
    "make_dataset",
    "validate_dataset",
    "read_csv",
    "write_csv",
]


class OutcomeKind(str, enum.Enum):
    """Which outcome model the dataset is analysed under."""

    LINEAR = "linear"
    LOGISTIC = "logistic"
    COX = "cox"
    WEIBULL = "weibull"

    @property
    def is_survival(self) -> bool:
        return self in (OutcomeKind.COX, OutcomeKind.WEIBULL)

    @property
    def has_intercept(self) -> bool:
        # The Cox model absorbs any intercept into the baseline hazard.
        return self is not OutcomeKind.COX


def _as_kind(kind: "OutcomeKind | str") -> OutcomeKind:
    if isinstance(kind, OutcomeKind):
        return kind
    try:
        return OutcomeKind(str(kind).lower())
    except ValueError:
        names = ", ".join(k.value for k in OutcomeKind)
        raise ValueError(f"unknown outcome kind {kind!r}; expected one of {names}") from None


@dataclass(frozen=True)
class OutcomeSpec:
    """Outcome model specification.

    ``fixed_shape`` pins the Weibull shape parameter (shape 1 turns the model
    into exponential regression); it is ignored for other kinds.
    """

    kind: OutcomeKind
    fixed_shape: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", _as_kind(self.kind))
        if self.fixed_shape is not None:
            if self.kind is not OutcomeKind.WEIBULL:
                raise ValueError("fixed_shape only applies to the weibull outcome model")
            if not self.fixed_shape > 0:
                raise ValueError("fixed_shape must be > 0")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MEDataset:
    """Immutable container for one study sample.

    Attributes
    ----------
    w, w_observed:
        (n, 2) error-prone measurements and their presence mask.  Values at
        unobserved slots are NaN and never read.
    z, z_observed, z_binary:
        (n, p) error-free covariates with presence mask; ``z_binary`` flags the
        covariates declared binary (the only ones allowed to be missing).
    y:
        outcome vector for linear/logistic data, else None.
    time, event:
        survival outcome for cox/weibull data, else None.
    """

    w: np.ndarray
    w_observed: np.ndarray
    z: np.ndarray
    z_observed: np.ndarray
    z_binary: np.ndarray
    y: np.ndarray | None = None
    time: np.ndarray | None = None
    event: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", _freeze(np.asarray(self.w, dtype=float)))
        object.__setattr__(self, "w_observed", _freeze(np.asarray(self.w_observed, dtype=bool)))
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(len(z), -1) if z.size else z.reshape(self.w.shape[0], 0)
        object.__setattr__(self, "z", _freeze(z))
        object.__setattr__(self, "z_observed", _freeze(np.asarray(self.z_observed, dtype=bool).reshape(z.shape)))
        object.__setattr__(self, "z_binary", _freeze(np.asarray(self.z_binary, dtype=bool).reshape(z.shape[1])))
        for name in ("y", "time", "event"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _freeze(np.asarray(val, dtype=float)))

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def p(self) -> int:
        return self.z.shape[1]

    @property
    def n_measurements(self) -> np.ndarray:
        """Number of observed error-prone measurements per individual."""
        return self.w_observed.sum(axis=1)

    def measurement_sum(self, shift: float = 0.0) -> np.ndarray:
        """Per-individual sum of observed measurements, second one shifted by -shift."""
        w = np.where(self.w_observed, np.nan_to_num(self.w, nan=0.0), 0.0)
        total = w.sum(axis=1)
        if shift:
            total = total - shift * self.w_observed[:, 1]
        return total

    def w_bar(self, shift: float = 0.0) -> np.ndarray:
        """Mean of observed measurements; NaN for individuals with none."""
        n_i = self.n_measurements
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n_i > 0, self.measurement_sum(shift) / np.maximum(n_i, 1), np.nan)

    @property
    def outcome_kind_family(self) -> str:
        return "survival" if self.time is not None else "scalar"


def make_dataset(
    *,
    w1: np.ndarray,
    w2: np.ndarray | None = None,
    z: np.ndarray | None = None,
    binary_z: "tuple[int, ...] | list[int]" = (),
    y: np.ndarray | None = None,
    time: np.ndarray | None = None,
    event: np.ndarray | None = None,
) -> MEDataset:
    """Build an MEDataset from plain arrays, treating NaN entries as missing.

    ``binary_z`` lists the (0-based) columns of ``z`` that are binary and may
    contain NaN missingness flags.
    """
    w1 = np.asarray(w1, dtype=float)
    n = len(w1)
    w = np.full((n, 2), np.nan)
    w[:, 0] = w1
    if w2 is not None:
        w[:, 1] = np.asarray(w2, dtype=float)
    w_observed = ~np.isnan(w)
    if z is None:
        z = np.zeros((n, 0))
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(n, 1)
    z_observed = ~np.isnan(z)
    z_binary = np.zeros(z.shape[1], dtype=bool)
    for j in binary_z:
        z_binary[j] = True
    return MEDataset(
        w=w,
        w_observed=w_observed,
        z=z,
        z_observed=z_observed,
        z_binary=z_binary,
        y=y,
        time=time,
        event=event,
    )


def validate_dataset(
    d: MEDataset,
    spec: OutcomeSpec,
    allow_empty_measurements: bool = False,
) -> list[str]:
    """Check every dataset invariant against the outcome specification.

    Returns a list of human-readable violations (empty when the dataset is
    valid).  Never raises.  ``allow_empty_measurements`` permits individuals
    with zero recorded measurements, which only the Bayes full-data analysis
    supports.
    """
    violations: list[str] = []
    n = d.n

    if spec.kind.is_survival:
        if d.time is None or d.event is None:
            violations.append(f"outcome model {spec.kind.value!r} requires time and event columns")
        else:
            if len(d.time) != n or len(d.event) != n:
                violations.append("time/event length does not match number of individuals")
            else:
                bad_t = np.flatnonzero(~(d.time > 0) | ~np.isfinite(d.time))
                for i in bad_t[:10]:
                    violations.append(f"row {i}: survival time must be finite and > 0, got {d.time[i]!r}")
                bad_d = np.flatnonzero(~np.isin(d.event, (0.0, 1.0)))
                for i in bad_d[:10]:
                    violations.append(f"row {i}: event indicator must be 0 or 1, got {d.event[i]!r}")
        if d.y is not None:
            violations.append(f"outcome model {spec.kind.value!r} does not use a y column")
    else:
        if d.y is None:
            violations.append(f"outcome model {spec.kind.value!r} requires a y column")
        elif len(d.y) != n:
            violations.append("y length does not match number of individuals")
        elif spec.kind is OutcomeKind.LOGISTIC:
            bad = np.flatnonzero(~np.isin(d.y, (0.0, 1.0)))
            for i in bad[:10]:
                violations.append(f"row {i}: binary outcome must be 0 or 1, got {d.y[i]!r}")
        else:
            bad = np.flatnonzero(~np.isfinite(d.y))
            for i in bad[:10]:
                violations.append(f"row {i}: continuous outcome must be finite, got {d.y[i]!r}")
        if d.time is not None or d.event is not None:
            violations.append(f"outcome model {spec.kind.value!r} does not use time/event columns")

    if d.w.shape != (n, 2) or d.w_observed.shape != (n, 2):
        violations.append("w and w_observed must have shape (n, 2)")
    else:
        bad_w = np.flatnonzero(d.w_observed.any(axis=1) & ~np.isfinite(np.where(d.w_observed, d.w, 0.0)).all(axis=1))
        for i in bad_w[:10]:
            violations.append(f"row {i}: observed measurement is not finite")
        if not allow_empty_measurements:
            empty = np.flatnonzero(d.n_measurements == 0)
            for i in empty[:10]:
                violations.append(f"row {i}: no recorded measurements (permitted only in Bayes full-data analyses)")

    if d.z.shape[0] != n or d.z_observed.shape != d.z.shape:
        violations.append("z and z_observed must have shape (n, p)")
    else:
        for j in range(d.p):
            col_obs = d.z_observed[:, j]
            missing = np.flatnonzero(~col_obs)
            if missing.size and not d.z_binary[j]:
                violations.append(
                    f"covariate z{j + 1}: {missing.size} missing entries but not declared binary-with-missingness"
                )
            bad = np.flatnonzero(col_obs & ~np.isfinite(np.where(col_obs, d.z[:, j], 0.0)))
            for i in bad[:10]:
                violations.append(f"row {i}: covariate z{j + 1} is not finite")
            if d.z_binary[j]:
                vals = d.z[col_obs, j]
                bad_v = np.flatnonzero(~np.isin(vals, (0.0, 1.0)))
                if bad_v.size:
                    rows = np.flatnonzero(col_obs)[bad_v]
                    for i in rows[:10]:
                        violations.append(f"row {i}: binary covariate z{j + 1} must be 0 or 1, got {d.z[i, j]!r}")

    return violations


# ---------------------------------------------------------------------------
# CSV interchange format
# ---------------------------------------------------------------------------
# Header row required.  Outcome columns: `y` (linear/logistic) or `time,event`
# (cox/weibull); then `w1`, `w2` (blank = missing) and `z1..zp` (blank allowed
# only for covariates declared binary-with-missingness).


def _fmt(value: float) -> str:
    # repr() is the shortest string that round-trips the float bit-exactly.
    return repr(float(value))


def write_csv(d: MEDataset, path_or_buf) -> None:
    """Serialize a dataset in the interchange CSV format (full precision)."""
    if d.y is not None:
        header = ["y"]
    else:
        header = ["time", "event"]
    header += ["w1", "w2"] + [f"z{j + 1}" for j in range(d.p)]

    def rows():
        for i in range(d.n):
            row: list[str] = []
            if d.y is not None:
                row.append(_fmt(d.y[i]))
            else:
                row.append(_fmt(d.time[i]))
                row.append(_fmt(d.event[i]))
            for j in range(2):
                row.append(_fmt(d.w[i, j]) if d.w_observed[i, j] else "")
            for j in range(d.p):
                row.append(_fmt(d.z[i, j]) if d.z_observed[i, j] else "")
            yield row

    if hasattr(path_or_buf, "write"):
        writer = csv.writer(path_or_buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows())
    else:
        with open(path_or_buf, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows())


class DatasetFormatError(ValueError):
    """Raised when a CSV dataset cannot be parsed; carries row-level messages."""

    def __init__(self, messages: list[str]):
        self.messages = messages
        super().__init__("; ".join(messages))


def read_csv(path_or_buf, kind: "OutcomeKind | str", binary_z: "tuple | list" = ()) -> MEDataset:
    """Parse the interchange CSV format into an MEDataset.

    ``binary_z`` names the covariate columns (by header name, e.g. ``"z2"``,
    or 0-based index) that are binary and may contain blank missing entries.
    """
    kind = _as_kind(kind)
    if hasattr(path_or_buf, "read"):
        content = path_or_buf.read()
    else:
        with open(path_or_buf, "r", encoding="utf-8") as fh:
            content = fh.read()
    reader = csv.reader(io.StringIO(content))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetFormatError(["empty file: header row required"]) from None
    header = [h.strip() for h in header]

    if kind.is_survival:
        outcome_cols = ["time", "event"]
    else:
        outcome_cols = ["y"]
    missing_cols = [c for c in outcome_cols + ["w1"] if c not in header]
    if missing_cols:
        raise DatasetFormatError([f"missing required column {c!r}" for c in missing_cols])
    z_names = sorted((h for h in header if h.startswith("z") and h[1:].isdigit()), key=lambda h: int(h[1:]))
    expected = [f"z{j + 1}" for j in range(len(z_names))]
    if z_names != expected:
        raise DatasetFormatError([f"covariate columns must be z1..zp without gaps, got {z_names}"])
    col = {name: header.index(name) for name in header}

    binary_idx: set[int] = set()
    for b in binary_z:
        if isinstance(b, str):
            if b not in col or not b.startswith("z"):
                raise DatasetFormatError([f"binary covariate {b!r} not found among {z_names}"])
            binary_idx.add(int(b[1:]) - 1)
        else:
            binary_idx.add(int(b))

    rows = [r for r in reader if any(cell.strip() for cell in r)]
    n = len(rows)
    errors: list[str] = []

    def parse(row_idx: int, row: list[str], name: str, required: bool) -> float:
        idx = col[name]
        cell = row[idx].strip() if idx < len(row) else ""
        if cell == "":
            if required:
                errors.append(f"row {row_idx}: column {name!r} must not be blank")
            return np.nan
        try:
            return float(cell)
        except ValueError:
            errors.append(f"row {row_idx}: column {name!r} is not a number: {cell!r}")
            return np.nan

    y = np.empty(n) if not kind.is_survival else None
    time = np.empty(n) if kind.is_survival else None
    event = np.empty(n) if kind.is_survival else None
    w = np.full((n, 2), np.nan)
    z = np.full((n, len(z_names)), np.nan)
    has_w2 = "w2" in col

    for i, row in enumerate(rows):
        if kind.is_survival:
            time[i] = parse(i, row, "time", required=True)
            event[i] = parse(i, row, "event", required=True)
        else:
            y[i] = parse(i, row, "y", required=True)
        w[i, 0] = parse(i, row, "w1", required=False)
        if has_w2:
            w[i, 1] = parse(i, row, "w2", required=False)
        for j, name in enumerate(z_names):
            z[i, j] = parse(i, row, name, required=j not in binary_idx)

    if errors:
        raise DatasetFormatError(errors)

    return make_dataset(
        w1=w[:, 0],
        w2=w[:, 1],
        z=z,
        binary_z=sorted(binary_idx),
        y=y,
        time=time,
        event=event,
    )
