"""Long-format profile CSV ingestion and artifact serialization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from amfewma.mfpca import FORMAT_VERSION
from amfewma.smoothing import DiscreteProfile

PROFILE_COLUMNS = ("unit_id", "channel", "t", "y")


class IngestError(ValueError):
    pass


@dataclass
class IngestReport:
    profiles: list[list[DiscreteProfile]]
    n_rows: int
    dropped: list[str] = field(default_factory=list)

    @property
    def n_units(self) -> int:
        return len(self.profiles)

    @property
    def p(self) -> int:
        return len(self.profiles[0]) if self.profiles else 0

    def values(self) -> np.ndarray:
        """``(n_units, p, m)`` values; requires a common observation grid."""
        grids = {tuple(pr.t) for unit in self.profiles for pr in unit}
        if len(grids) != 1:
            raise IngestError("profiles are not observed on a common grid")
        return np.stack([[pr.y for pr in unit] for unit in self.profiles])

    @property
    def t(self) -> np.ndarray:
        return self.profiles[0][0].t


def ingest(path, min_points: int = 4, domain=(0.0, 1.0)) -> IngestReport:
    """Read long-format ``unit_id, channel, t, y`` rows into per-unit profile lists.

    Units keep their first-appearance order. Any malformed row is an error
    citing its line number.
    """
    path = Path(path)
    groups: dict[str, dict[int, list[tuple[float, float]]]] = {}
    n_rows = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestError(f"{path}: no data rows")
        header = [h.strip() for h in header]
        missing = [c for c in PROFILE_COLUMNS if c not in header]
        if missing:
            raise IngestError(f"{path}: header lacks columns {missing}")
        col = {c: header.index(c) for c in PROFILE_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            unit = row[col["unit_id"]].strip()
            try:
                channel = int(row[col["channel"]])
                t = float(row[col["t"]])
                y = float(row[col["y"]])
            except ValueError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
            if not (math.isfinite(t) and math.isfinite(y)):
                raise IngestError(f"{path}:{lineno}: non-finite value")
            if channel < 1:
                raise IngestError(f"{path}:{lineno}: channel must be >= 1")
            if not domain[0] <= t <= domain[1]:
                raise IngestError(f"{path}:{lineno}: t={t} outside {domain}")
            groups.setdefault(unit, {}).setdefault(channel, []).append((t, y))
            n_rows += 1
    if n_rows == 0:
        raise IngestError(f"{path}: no data rows")

    p = None
    profiles = []
    for unit, chans in groups.items():
        ids = sorted(chans)
        if ids != list(range(1, len(ids) + 1)):
            raise IngestError(f"unit {unit!r}: channels {ids} are not 1..{len(ids)}")
        if p is None:
            p = len(ids)
        elif len(ids) != p:
            raise IngestError(f"unit {unit!r} has {len(ids)} channels, earlier units have {p}")
        unit_profiles = []
        for ch in ids:
            pts = chans[ch]
            if len(pts) < min_points:
                raise IngestError(f"unit {unit!r} channel {ch}: {len(pts)} points, need at least {min_points}")
            t = np.array([a for a, _ in pts])
            y = np.array([b for _, b in pts])
            if np.any(np.diff(t) <= 0):
                raise IngestError(f"unit {unit!r} channel {ch}: t is not strictly increasing")
            unit_profiles.append(DiscreteProfile(unit, ch, t, y))
        profiles.append(unit_profiles)
    return IngestReport(profiles, n_rows)


def write_profiles(path, values: np.ndarray, t: np.ndarray, unit_ids=None) -> int:
    """Write ``(n, p, m)`` values as long-format rows; returns the row count.

    Floats are written with ``repr`` so reading them back is bit-exact.
    """
    values = np.asarray(values, dtype=float)
    n, p, m = values.shape
    unit_ids = [str(i + 1) for i in range(n)] if unit_ids is None else [str(u) for u in unit_ids]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROFILE_COLUMNS)
        for i in range(n):
            for j in range(p):
                for k in range(m):
                    w.writerow((unit_ids[i], j + 1, repr(float(t[k])), repr(float(values[i, j, k]))))
    return n * p * m


def write_json(path, payload: dict, seed=None) -> None:
    doc = {"format_version": FORMAT_VERSION, "seed": seed, **payload}
    Path(path).write_text(json.dumps(doc, indent=1, default=_default))


def read_json(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {doc.get('format_version')!r}")
    return doc


def write_rows(path, rows: list[dict], columns=None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
