"""Sparse count tensors, event-log ingestion, and fiber-holdout masks.

Coordinates and mode indices are 0-based everywhere in memory. The text
formats (COO tensors, mask files) use 1-based coordinates; the conversion
happens only at the I/O boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SparseCountTensor",
    "FiberMask",
    "HeldoutSet",
    "EventSchema",
    "TimeBinning",
    "load_events",
    "make_fiber_mask",
    "split",
    "load_coo",
    "write_coo",
    "load_mask",
    "write_mask",
    "load_vocab",
    "write_vocab",
]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SparseCountTensor:
    """M-mode count tensor in coordinate form; zero cells are implicit.

    ``coords`` holds one row per stored cell (lexicographically sorted,
    unique); ``counts`` are the matching strictly positive values.
    """

    shape: tuple[int, ...]
    coords: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if len(shape) == 0 or any(d <= 0 for d in shape):
            raise ValueError(f"invalid tensor shape {shape}")
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, len(shape))
        counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if coords.shape[0] != counts.shape[0]:
            raise ValueError("coords and counts disagree in length")
        if counts.size and counts.min() <= 0:
            raise ValueError("stored counts must be strictly positive")
        if coords.size:
            if coords.min() < 0 or (coords >= np.asarray(shape)).any():
                raise ValueError("coordinate out of range for shape")
        order = np.lexsort(coords.T[::-1])
        coords, counts = coords[order], counts[order]
        if coords.shape[0] > 1 and np.all(coords[1:] == coords[:-1], axis=1).any():
            raise ValueError("duplicate coordinates; aggregate entries first")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "counts", _frozen(counts))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def nnz(self) -> int:
        return int(self.counts.shape[0])

    def total(self) -> int:
        return int(self.counts.sum())

    def density(self) -> float:
        return self.nnz / math.prod(self.shape)

    @classmethod
    def from_entries(cls, shape, entries) -> "SparseCountTensor":
        """Build from (multi-index, count) pairs, summing duplicates and
        dropping zero totals."""
        items = entries.items() if isinstance(entries, dict) else entries
        agg: dict[tuple[int, ...], int] = {}
        for idx, c in items:
            c = int(c)
            if c < 0:
                raise ValueError(f"negative count {c} at {tuple(idx)}")
            key = tuple(int(i) for i in idx)
            agg[key] = agg.get(key, 0) + c
        kept = [(k, v) for k, v in agg.items() if v > 0]
        M = len(shape)
        coords = np.array([k for k, _ in kept], dtype=np.int64).reshape(len(kept), M)
        counts = np.array([v for _, v in kept], dtype=np.int64)
        return cls(tuple(shape), coords, counts)

    def to_dict(self) -> dict[tuple[int, ...], int]:
        return {tuple(map(int, r)): int(c) for r, c in zip(self.coords, self.counts)}

    def entry(self, idx) -> int:
        key = np.asarray(idx, dtype=np.int64)
        hit = np.flatnonzero(np.all(self.coords == key, axis=1))
        return int(self.counts[hit[0]]) if hit.size else 0


@dataclass(frozen=True)
class FiberMask:
    """Set of held-out fibers: coordinates for every mode except ``free_mode``.

    A cell is masked iff its non-free coordinates match one of the stems.
    Stems are stored lexicographically sorted and must be unique.
    """

    free_mode: int
    stems: np.ndarray  # (n_stems, M-1)

    def __post_init__(self):
        if self.free_mode < 0:
            raise ValueError("free_mode must be non-negative")
        stems = np.asarray(self.stems, dtype=np.int64)
        if stems.ndim != 2:
            raise ValueError("stems must be a 2-d array")
        if stems.size and stems.min() < 0:
            raise ValueError("stem coordinates must be non-negative")
        order = np.lexsort(stems.T[::-1])
        stems = stems[order]
        if stems.shape[0] > 1 and np.all(stems[1:] == stems[:-1], axis=1).any():
            raise ValueError("stems must be unique")
        object.__setattr__(self, "free_mode", int(self.free_mode))
        object.__setattr__(self, "stems", _frozen(stems))

    @property
    def n_stems(self) -> int:
        return int(self.stems.shape[0])


@dataclass(frozen=True)
class HeldoutSet:
    """Every cell of every masked fiber with its true count (zeros included)."""

    coords: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if coords.shape[0] != counts.shape[0]:
            raise ValueError("coords and counts disagree in length")
        if counts.size and counts.min() < 0:
            raise ValueError("heldout counts must be non-negative")
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "counts", _frozen(counts))

    @property
    def n_cells(self) -> int:
        return int(self.counts.shape[0])

    def total(self) -> int:
        return int(self.counts.sum())

    def positive(self) -> "HeldoutSet":
        keep = self.counts > 0
        return HeldoutSet(self.coords[keep], self.counts[keep])


def make_fiber_mask(tensor: SparseCountTensor, free_mode: int, fraction: float,
                    seed: int) -> FiberMask:
    """Sample floor(fraction * n_candidate_stems) stems uniformly without
    replacement; deterministic given the seed."""
    M = tensor.ndim
    if not 0 <= free_mode < M:
        raise ValueError(f"free_mode {free_mode} out of range for {M}-mode tensor")
    if M < 2:
        raise ValueError("fiber masking needs at least two modes")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie strictly in (0, 1), got {fraction}")
    reduced = tuple(d for m, d in enumerate(tensor.shape) if m != free_mode)
    total = math.prod(reduced)
    n = int(math.floor(fraction * total))
    if n < 1:
        raise ValueError(
            f"fraction {fraction} of {total} candidate stems selects none")
    rng = np.random.default_rng(seed)
    keys = np.sort(rng.choice(total, size=n, replace=False))
    stems = np.stack(np.unravel_index(keys, reduced), axis=1)
    return FiberMask(free_mode=free_mode, stems=stems)


def _check_mask(tensor: SparseCountTensor, mask: FiberMask) -> None:
    M = tensor.ndim
    if not 0 <= mask.free_mode < M:
        raise ValueError("mask free_mode out of range for tensor")
    if mask.stems.shape[1] != M - 1:
        raise ValueError("mask stem width does not match tensor mode count")
    reduced = np.asarray(
        [d for m, d in enumerate(tensor.shape) if m != mask.free_mode])
    if mask.n_stems and (mask.stems >= reduced).any():
        raise ValueError("mask stem coordinate out of range for tensor")


def split(tensor: SparseCountTensor, mask: FiberMask) -> tuple[SparseCountTensor, HeldoutSet]:
    """Partition a tensor into unmasked training entries and the full heldout
    cell list (zeros materialized) of the masked fibers."""
    _check_mask(tensor, mask)
    M = tensor.ndim
    others = [m for m in range(M) if m != mask.free_mode]
    if mask.n_stems == 0:
        empty = HeldoutSet(np.zeros((0, M), dtype=np.int64), np.zeros(0, dtype=np.int64))
        return tensor, empty
    reduced = tuple(tensor.shape[m] for m in others)
    stem_keys = np.ravel_multi_index(tuple(mask.stems.T), reduced)  # sorted
    d_free = tensor.shape[mask.free_mode]

    if tensor.nnz:
        cell_keys = np.ravel_multi_index(
            tuple(tensor.coords[:, others].T), reduced)
        masked = np.isin(cell_keys, stem_keys)
    else:
        cell_keys = np.zeros(0, dtype=np.int64)
        masked = np.zeros(0, dtype=bool)
    train = SparseCountTensor(tensor.shape, tensor.coords[~masked],
                              tensor.counts[~masked])

    held_coords = np.empty((mask.n_stems * d_free, M), dtype=np.int64)
    for j, m in enumerate(others):
        held_coords[:, m] = np.repeat(mask.stems[:, j], d_free)
    held_coords[:, mask.free_mode] = np.tile(np.arange(d_free), mask.n_stems)
    held_counts = np.zeros(mask.n_stems * d_free, dtype=np.int64)
    if masked.any():
        stem_pos = np.searchsorted(stem_keys, cell_keys[masked])
        pos = stem_pos * d_free + tensor.coords[masked, mask.free_mode]
        held_counts[pos] = tensor.counts[masked]
    return train, HeldoutSet(held_coords, held_counts)


# ---------------------------------------------------------------------------
# Text formats. COO: header "M D_1 ... D_M", then "d_1 ... d_M count" per
# non-zero, 1-based, '#' comments allowed. Mask: header "free_mode=m", then
# one stem per line. Vocabulary: one label per line.
# ---------------------------------------------------------------------------

def write_coo(tensor: SparseCountTensor, path) -> None:
    with open(path, "w") as f:
        f.write(f"{tensor.ndim} {' '.join(str(d) for d in tensor.shape)}\n")
        for row, c in zip(tensor.coords, tensor.counts):
            f.write(" ".join(str(int(v) + 1) for v in row) + f" {int(c)}\n")


def load_coo(path) -> SparseCountTensor:
    shape = None
    M = 0
    entries = []
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if shape is None:
                try:
                    M = int(tok[0])
                    dims = [int(t) for t in tok[1:]]
                except ValueError:
                    raise ValueError(f"{path}:{ln}: malformed header") from None
                if M < 1 or len(dims) != M or any(d <= 0 for d in dims):
                    raise ValueError(f"{path}:{ln}: malformed header")
                shape = tuple(dims)
                continue
            if len(tok) != M + 1:
                raise ValueError(f"{path}:{ln}: expected {M + 1} fields, got {len(tok)}")
            try:
                vals = [int(t) for t in tok]
            except ValueError:
                raise ValueError(f"{path}:{ln}: non-integer field") from None
            coords, count = vals[:M], vals[M]
            if any(not 1 <= c <= shape[m] for m, c in enumerate(coords)):
                raise ValueError(f"{path}:{ln}: coordinate out of range")
            if count <= 0:
                raise ValueError(f"{path}:{ln}: count must be positive")
            entries.append((tuple(c - 1 for c in coords), count))
    if shape is None:
        raise ValueError(f"{path}: missing header line")
    return SparseCountTensor.from_entries(shape, entries)


def write_mask(mask: FiberMask, path) -> None:
    with open(path, "w") as f:
        f.write(f"free_mode={mask.free_mode + 1}\n")
        for row in mask.stems:
            f.write(" ".join(str(int(v) + 1) for v in row) + "\n")


def load_mask(path) -> FiberMask:
    free_mode = None
    stems = []
    width = None
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if free_mode is None:
                if not line.startswith("free_mode="):
                    raise ValueError(f"{path}:{ln}: expected 'free_mode=' header")
                free_mode = int(line.split("=", 1)[1]) - 1
                continue
            try:
                row = [int(t) - 1 for t in line.split()]
            except ValueError:
                raise ValueError(f"{path}:{ln}: non-integer stem coordinate") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ValueError(f"{path}:{ln}: inconsistent stem width")
            stems.append(row)
    if free_mode is None:
        raise ValueError(f"{path}: missing 'free_mode=' header")
    arr = np.array(stems, dtype=np.int64).reshape(len(stems), width or 0)
    return FiberMask(free_mode=free_mode, stems=arr)


def write_vocab(labels, path) -> None:
    with open(path, "w") as f:
        for lab in labels:
            f.write(f"{lab}\n")


def load_vocab(path) -> list[str]:
    with open(path) as f:
        return [line.rstrip("\n") for line in f if line.rstrip("\n")]


# ---------------------------------------------------------------------------
# Event-log ingestion: delimiter-separated text with a header row; one column
# per mode plus an optional count column. Rows aggregate by summation.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeBinning:
    """Calendar binning for the temporal mode; dates are 'YYYY',
    'YYYY-MM', or 'YYYY-MM-DD'. ``start``/``end`` fix the bin range
    (inclusive); left unset they are inferred from the data."""

    unit: str  # "month" or "year"
    start: str | None = None
    end: str | None = None

    def __post_init__(self):
        if self.unit not in ("month", "year"):
            raise ValueError(f"unknown time binning unit {self.unit!r}")


@dataclass(frozen=True)
class EventSchema:
    mode_columns: tuple[str, ...]
    count_column: str | None = None
    delimiter: str = "\t"
    vocabularies: dict[int, tuple[str, ...]] | None = None
    time_mode: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode_columns", tuple(self.mode_columns))
        if len(self.mode_columns) < 1:
            raise ValueError("schema needs at least one mode column")
        if self.time_mode is not None and not 0 <= self.time_mode < len(self.mode_columns):
            raise ValueError("time_mode out of range")


def _parse_ym(text: str, path, ln) -> tuple[int, int]:
    parts = text.strip().split("-")
    try:
        if len(parts) == 1:
            return int(parts[0]), 1
        if len(parts) in (2, 3):
            y, mo = int(parts[0]), int(parts[1])
            if not 1 <= mo <= 12:
                raise ValueError
            return y, mo
    except ValueError:
        pass
    raise ValueError(f"{path}:{ln}: cannot parse date {text!r}")


def _ym_index(ym: tuple[int, int], anchor: tuple[int, int], unit: str) -> int:
    if unit == "month":
        return (ym[0] - anchor[0]) * 12 + (ym[1] - anchor[1])
    return ym[0] - anchor[0]


def _bin_label(anchor: tuple[int, int], idx: int, unit: str) -> str:
    if unit == "year":
        return str(anchor[0] + idx)
    y, mo = anchor
    mo += idx
    y, mo = y + (mo - 1) // 12, (mo - 1) % 12 + 1
    return f"{y:04d}-{mo:02d}"


def load_events(path, schema: EventSchema,
                time_binning: TimeBinning | None = None
                ) -> tuple[SparseCountTensor, list[list[str]]]:
    """Aggregate an event log into a count tensor.

    Returns the tensor and one vocabulary (coordinate -> label) per mode;
    for a binned time mode the vocabulary lists the bin labels.
    """
    M = len(schema.mode_columns)
    if time_binning is not None and schema.time_mode is None:
        raise ValueError("time_binning given but schema.time_mode is unset")
    time_mode = schema.time_mode if time_binning is not None else None

    fixed = schema.vocabularies or {}
    lookups: list[dict[str, int] | None] = []
    vocabs: list[list[str]] = []
    for m in range(M):
        if m == time_mode:
            lookups.append(None)
            vocabs.append([])
        elif m in fixed:
            vocabs.append(list(fixed[m]))
            lookups.append({lab: i for i, lab in enumerate(fixed[m])})
        else:
            vocabs.append([])
            lookups.append({})

    records: list[tuple[int, list, int]] = []
    with open(path) as f:
        header = f.readline()
        if not header:
            raise ValueError(f"{path}: empty file, expected a header row")
        names = [c.strip() for c in header.rstrip("\n").split(schema.delimiter)]
        col_of = {}
        for col in schema.mode_columns:
            if col not in names:
                raise ValueError(f"{path}: schema column {col!r} not in header")
            col_of[col] = names.index(col)
        if schema.count_column is not None:
            if schema.count_column not in names:
                raise ValueError(
                    f"{path}: schema column {schema.count_column!r} not in header")
            count_idx = names.index(schema.count_column)
        else:
            count_idx = None

        for ln, raw in enumerate(f, 2):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            tok = line.split(schema.delimiter)
            if len(tok) < len(names):
                raise ValueError(
                    f"{path}:{ln}: expected {len(names)} fields, got {len(tok)}")
            key: list = []
            for m, col in enumerate(schema.mode_columns):
                val = tok[col_of[col]].strip()
                if m == time_mode:
                    key.append(_parse_ym(val, path, ln))
                else:
                    lut = lookups[m]
                    if m in fixed:
                        if val not in lut:
                            raise ValueError(
                                f"{path}:{ln}: label {val!r} not in mode-{m + 1} vocabulary")
                        key.append(lut[val])
                    else:
                        if val not in lut:
                            lut[val] = len(vocabs[m])
                            vocabs[m].append(val)
                        key.append(lut[val])
            if count_idx is None:
                count = 1
            else:
                try:
                    count = int(tok[count_idx].strip())
                except ValueError:
                    raise ValueError(f"{path}:{ln}: non-integer count") from None
                if count < 0:
                    raise ValueError(f"{path}:{ln}: negative count")
            records.append((ln, key, count))

    if time_mode is not None:
        tb = time_binning
        observed = [rec[1][time_mode] for rec in records]
        anchor = _parse_ym(tb.start, path, 0) if tb.start else (
            min(observed) if observed else (1970, 1))
        if tb.end:
            last = _ym_index(_parse_ym(tb.end, path, 0), anchor, tb.unit)
        elif observed:
            last = max(_ym_index(ym, anchor, tb.unit) for ym in observed)
        else:
            last = 0
        if last < 0:
            raise ValueError("time binning end precedes start")
        for ln, key, _ in records:
            idx = _ym_index(key[time_mode], anchor, tb.unit)
            if not 0 <= idx <= last:
                raise ValueError(
                    f"{path}:{ln}: date outside the declared time range")
            key[time_mode] = idx
        vocabs[time_mode] = [_bin_label(anchor, i, tb.unit) for i in range(last + 1)]

    shape = tuple(len(v) for v in vocabs)
    if any(d == 0 for d in shape):
        # No rows touched some mode and no vocabulary was declared for it.
        shape = tuple(max(d, 1) for d in shape)
        for m, v in enumerate(vocabs):
            if not v:
                vocabs[m] = ["(none)"]
    entries = [(tuple(key), count) for _, key, count in records if count > 0]
    tensor = SparseCountTensor.from_entries(shape, entries)
    return tensor, vocabs
