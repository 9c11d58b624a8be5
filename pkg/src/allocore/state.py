"""Model state for the sparse-core Poisson Tucker family.

The core tensor is never materialized: it is represented by ``Q`` strictly
positive values and their latent locations, a (Q, M) index table. Three core
modes share this representation:

* ``allocore``     - locations are free latent variables,
* ``cp_locked``    - locations pinned to the super-diagonal (CP form),
* ``tucker_dense`` - locations enumerate every core cell (dense Tucker).
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Hyperparameters",
    "ModelState",
    "IntegrityError",
    "CORE_MODES",
    "init_canonical",
    "init_explicit",
    "core_value_at",
    "reconstruct_at",
    "reconstruct_cells",
    "cell_rates",
    "effective_dims",
    "save_state",
    "load_state",
    "substream",
]

CORE_MODES = ("allocore", "cp_locked", "tucker_dense")

# Positive floor applied to gamma draws so factor/core values never collapse
# to exact zero in float64.
TINY = 1e-300

# Sub-stream identifiers; a generator is derived per (seed, iteration, block).
INIT_BLOCK, THIN_BLOCK, LOCATION_BLOCK, LAMBDA_BLOCK, PHI_BLOCK, PI_BLOCK, DATA_BLOCK = range(7)

STATE_FORMAT_VERSION = 1


class IntegrityError(RuntimeError):
    """A state directory failed its checksum or internal consistency check."""


def substream(seed: int, iteration: int, block: int) -> np.random.Generator:
    """Counter-style generator keyed by (seed, iteration, block).

    Iteration 0 is reserved for initialization; chain sweeps use their
    absolute 1-based iteration number, which makes resumed chains
    bit-identical to uninterrupted ones.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(iteration), int(block)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Hyperparameters:
    """Gamma shape/rate pairs for core values (a0, b0) and factor entries
    (e0, f0), plus the per-mode Dirichlet concentration alpha0.

    ``alpha0`` may be a scalar (shared by all modes) or a per-mode tuple.
    ``divide_alpha_by_k`` switches the concentration to alpha0/K_m per
    component; the default keeps alpha0 per component.
    """

    a0: float = 1.0
    b0: float = 1.0
    e0: float = 1.0
    f0: float = 10.0
    alpha0: float | tuple[float, ...] = 0.1
    divide_alpha_by_k: bool = False

    def __post_init__(self):
        for name in ("a0", "b0", "e0", "f0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        a = self.alpha0
        if isinstance(a, (int, float)):
            if a <= 0:
                raise ValueError("alpha0 must be strictly positive")
        else:
            object.__setattr__(self, "alpha0", tuple(float(x) for x in a))
            if any(x <= 0 for x in self.alpha0):
                raise ValueError("alpha0 must be strictly positive")

    def alpha_for_mode(self, m: int) -> float:
        if isinstance(self.alpha0, tuple):
            return self.alpha0[m]
        return float(self.alpha0)

    def alpha_vector(self, m: int, k_m: int) -> np.ndarray:
        base = self.alpha_for_mode(m)
        if self.divide_alpha_by_k:
            base = base / k_m
        return np.full(k_m, base)


@dataclass
class ModelState:
    """All latent parameters of one chain.

    ``factors[m]`` is the (D_m, K_m) matrix of strictly positive factor
    entries; ``core_values``/``core_locations`` are the Q allocated core
    entries; ``mode_priors[m]`` is the length-K_m simplex of the rank-1
    location prior. ``seed``/``next_iteration`` fully determine the chain's
    remaining randomness.
    """

    shape: tuple[int, ...]
    hyper: Hyperparameters
    factors: list[np.ndarray]
    core_values: np.ndarray
    core_locations: np.ndarray
    mode_priors: list[np.ndarray]
    core_mode: str = "allocore"
    seed: int = 0
    next_iteration: int = 1

    @property
    def M(self) -> int:
        return len(self.shape)

    @property
    def Q(self) -> int:
        return int(self.core_values.shape[0])

    @property
    def K(self) -> tuple[int, ...]:
        return tuple(int(f.shape[1]) for f in self.factors)

    def validate(self) -> None:
        if self.core_mode not in CORE_MODES:
            raise ValueError(f"unknown core mode {self.core_mode!r}")
        if len(self.factors) != self.M or len(self.mode_priors) != self.M:
            raise ValueError("per-mode parameter lists do not match mode count")
        for m, (d, f) in enumerate(zip(self.shape, self.factors)):
            if f.shape != (d, f.shape[1]) or f.shape[0] != d:
                raise ValueError(f"factor matrix {m} has shape {f.shape}, want ({d}, K)")
            if not np.all(f > 0) or not np.all(np.isfinite(f)):
                raise ValueError(f"factor matrix {m} must be strictly positive and finite")
        if self.core_values.ndim != 1 or self.core_locations.shape != (self.Q, self.M):
            raise ValueError("core value/location shapes disagree")
        if self.Q < 1:
            raise ValueError("core budget must be at least 1")
        if not np.all(self.core_values > 0) or not np.all(np.isfinite(self.core_values)):
            raise ValueError("core values must be strictly positive and finite")
        for m, k_m in enumerate(self.K):
            col = self.core_locations[:, m]
            if col.min() < 0 or col.max() >= k_m:
                raise ValueError(f"core location out of range in mode {m}")
            pri = self.mode_priors[m]
            if pri.shape != (k_m,) or pri.min() < 0 or abs(pri.sum() - 1.0) > 1e-12:
                raise ValueError(f"mode-{m} prior is not a simplex over {k_m} entries")
        if self.core_mode == "cp_locked":
            if len(set(self.K)) != 1:
                raise ValueError("cp_locked requires a hypercube core")
            diag = np.arange(self.Q)[:, None] * np.ones(self.M, dtype=np.int64)
            if not np.array_equal(self.core_locations, diag):
                raise ValueError("cp_locked locations must sit on the super-diagonal")
        if self.core_mode == "tucker_dense" and self.Q != math.prod(self.K):
            raise ValueError("tucker_dense must enumerate every core cell")

    def snapshot(self) -> "ModelState":
        return ModelState(
            shape=self.shape,
            hyper=self.hyper,
            factors=[f.copy() for f in self.factors],
            core_values=self.core_values.copy(),
            core_locations=self.core_locations.copy(),
            mode_priors=[p.copy() for p in self.mode_priors],
            core_mode=self.core_mode,
            seed=self.seed,
            next_iteration=self.next_iteration,
        )


def _categorical(rng: np.random.Generator, probs: np.ndarray, size: int) -> np.ndarray:
    cum = np.cumsum(probs)
    cum[-1] = max(cum[-1], 1.0)
    return np.minimum(np.searchsorted(cum, rng.random(size), side="right"),
                      len(probs) - 1).astype(np.int64)


def _build_state(shape, K, Q, core_mode, hyper, seed, placement) -> ModelState:
    shape = tuple(int(d) for d in shape)
    K = tuple(int(k) for k in K)
    rng = substream(seed, 0, INIT_BLOCK)
    core_values = np.maximum(rng.gamma(hyper.a0, 1.0 / hyper.b0, size=Q), TINY)
    factors = [np.maximum(rng.gamma(hyper.e0, 1.0 / hyper.f0, size=(d, k)), TINY)
               for d, k in zip(shape, K)]
    mode_priors = [rng.dirichlet(hyper.alpha_vector(m, k)) for m, k in enumerate(K)]

    M = len(shape)
    if placement == "diagonal":
        locations = np.arange(Q, dtype=np.int64)[:, None] * np.ones(M, dtype=np.int64)
    elif placement == "enumerate":
        locations = np.stack(
            np.unravel_index(np.arange(Q), K), axis=1).astype(np.int64)
    elif placement == "prior":
        locations = np.empty((Q, M), dtype=np.int64)
        for m in range(M):
            locations[:, m] = _categorical(rng, mode_priors[m], Q)
    else:  # pragma: no cover
        raise ValueError(placement)

    state = ModelState(shape=shape, hyper=hyper, factors=factors,
                       core_values=core_values, core_locations=locations,
                       mode_priors=mode_priors, core_mode=core_mode, seed=int(seed))
    state.validate()
    return state


def init_canonical(shape, Q: int, hyper: Hyperparameters | None = None,
                   seed: int = 0, core_mode: str = "allocore") -> ModelState:
    """Canonical configuration: K_1 = ... = K_M = Q with the core initialized
    on the super-diagonal; values, factors, and priors drawn from their
    priors."""
    if Q < 1:
        raise ValueError("budget Q must be at least 1")
    hyper = hyper or Hyperparameters()
    if core_mode == "tucker_dense":
        return init_explicit(shape, (Q,) * len(shape), Q, core_mode, hyper, seed)
    if core_mode not in CORE_MODES:
        raise ValueError(f"unknown core mode {core_mode!r}")
    return _build_state(shape, (Q,) * len(shape), Q, core_mode, hyper, seed,
                        placement="diagonal")


def init_explicit(shape, K, Q: int, core_mode: str,
                  hyper: Hyperparameters | None = None, seed: int = 0,
                  core_cell_limit: int = 10 ** 6) -> ModelState:
    """Non-cubic cores. allocore draws initial locations from the location
    prior; cp_locked pins the first Q diagonal cells; tucker_dense enumerates
    every core cell (rejected above ``core_cell_limit``)."""
    hyper = hyper or Hyperparameters()
    K = tuple(int(k) for k in K)
    if len(K) != len(shape):
        raise ValueError("K must give one latent dimension per mode")
    if any(k < 1 for k in K):
        raise ValueError("latent dimensions must be at least 1")
    if core_mode == "tucker_dense":
        cells = math.prod(K)
        if cells > core_cell_limit:
            raise ValueError(
                f"dense core of {cells} cells exceeds the configured limit "
                f"of {core_cell_limit}")
        return _build_state(shape, K, cells, core_mode, hyper, seed,
                            placement="enumerate")
    if Q < 1:
        raise ValueError("budget Q must be at least 1")
    if core_mode == "cp_locked":
        if len(set(K)) != 1:
            raise ValueError("cp_locked requires equal latent dimensions in every mode")
        if Q > K[0]:
            raise ValueError("cp_locked requires Q <= K to fit the super-diagonal")
        return _build_state(shape, K, Q, core_mode, hyper, seed, placement="diagonal")
    if core_mode != "allocore":
        raise ValueError(f"unknown core mode {core_mode!r}")
    return _build_state(shape, K, Q, core_mode, hyper, seed, placement="prior")


def core_value_at(state: ModelState, kappa) -> float:
    """Value of the (implicit) core tensor at one location: the sum of the
    allocated values that sit there."""
    kappa = np.asarray(kappa, dtype=np.int64)
    if kappa.shape != (state.M,):
        raise ValueError("core index must have one coordinate per mode")
    if (kappa < 0).any() or (kappa >= np.asarray(state.K)).any():
        raise ValueError(f"core index {tuple(kappa)} out of range for K={state.K}")
    hit = np.all(state.core_locations == kappa, axis=1)
    return float(state.core_values[hit].sum())


def cell_rates(state: ModelState, coords: np.ndarray) -> np.ndarray:
    """Per-class Poisson rates at the given cells: out[i, q] is the rate the
    q-th core entry contributes to cell i. O(n * Q * M)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, state.M)
    rates = np.tile(state.core_values, (coords.shape[0], 1))
    for m in range(state.M):
        rates *= state.factors[m][coords[:, m][:, None],
                                  state.core_locations[:, m][None, :]]
    return rates


def reconstruct_cells(state: ModelState, coords: np.ndarray) -> np.ndarray:
    return cell_rates(state, coords).sum(axis=1)


def reconstruct_at(state: ModelState, d) -> float:
    """Model reconstruction at one cell without materializing the core."""
    d = np.asarray(d, dtype=np.int64)
    if d.shape != (state.M,):
        raise ValueError("cell index must have one coordinate per mode")
    if (d < 0).any() or (d >= np.asarray(state.shape)).any():
        raise ValueError(f"cell index {tuple(d)} out of range for shape {state.shape}")
    return float(cell_rates(state, d[None, :])[0].sum())


def effective_dims(state: ModelState) -> tuple[int, tuple[int, ...]]:
    """Distinct occupied core locations and, per mode, distinct occupied
    sub-indices."""
    q_eff = int(np.unique(state.core_locations, axis=0).shape[0])
    k_eff = tuple(int(np.unique(state.core_locations[:, m]).shape[0])
                  for m in range(state.M))
    return q_eff, k_eff


# ---------------------------------------------------------------------------
# State directory format: manifest.txt (key=value) plus one factor matrix per
# mode, the allocated core entries, and the location-prior simplexes. Data
# files are covered by a SHA-256 checksum recorded in the manifest.
# ---------------------------------------------------------------------------

def _data_files(m: int) -> list[str]:
    return [f"factors_{i + 1}.txt" for i in range(m)] + ["core.txt", "priors.txt"]


def _checksum(dirpath, names) -> str:
    h = hashlib.sha256()
    for name in names:
        with open(os.path.join(dirpath, name), "rb") as f:
            h.update(f.read())
    return h.hexdigest()


def save_state(state: ModelState, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for m, f in enumerate(state.factors):
        np.savetxt(os.path.join(dirpath, f"factors_{m + 1}.txt"), f, fmt="%.17g")
    with open(os.path.join(dirpath, "core.txt"), "w") as f:
        for lam, loc in zip(state.core_values, state.core_locations):
            f.write(f"{lam:.17g} " + " ".join(str(int(k) + 1) for k in loc) + "\n")
    with open(os.path.join(dirpath, "priors.txt"), "w") as f:
        for p in state.mode_priors:
            f.write(" ".join(f"{v:.17g}" for v in p) + "\n")

    digest = _checksum(dirpath, _data_files(state.M))
    h = state.hyper
    alpha = h.alpha0 if isinstance(h.alpha0, tuple) else (h.alpha0,) * state.M
    lines = [
        f"version={STATE_FORMAT_VERSION}",
        f"mode={state.core_mode}",
        f"M={state.M}",
        "shape=" + " ".join(str(d) for d in state.shape),
        "K=" + " ".join(str(k) for k in state.K),
        f"Q={state.Q}",
        f"a0={h.a0!r}", f"b0={h.b0!r}", f"e0={h.e0!r}", f"f0={h.f0!r}",
        "alpha0=" + " ".join(repr(a) for a in alpha),
        f"divide_alpha_by_k={int(h.divide_alpha_by_k)}",
        f"seed={state.seed}",
        f"next_iteration={state.next_iteration}",
        f"checksum={digest}",
    ]
    with open(os.path.join(dirpath, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _read_manifest(dirpath) -> dict[str, str]:
    path = os.path.join(dirpath, "manifest.txt")
    out = {}
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: malformed manifest line {line!r}")
            key, val = line.split("=", 1)
            out[key] = val
    return out


def load_state(dirpath) -> ModelState:
    man = _read_manifest(dirpath)
    try:
        version = int(man["version"])
        M = int(man["M"])
        shape = tuple(int(d) for d in man["shape"].split())
        K = tuple(int(k) for k in man["K"].split())
        Q = int(man["Q"])
        mode = man["mode"]
        seed = int(man["seed"])
        next_iteration = int(man["next_iteration"])
        declared = man["checksum"]
    except KeyError as exc:
        raise ValueError(f"{dirpath}: manifest missing key {exc}") from None
    if version != STATE_FORMAT_VERSION:
        raise ValueError(
            f"{dirpath}: state format version {version} is not supported "
            f"(expected {STATE_FORMAT_VERSION})")
    if len(shape) != M or len(K) != M:
        raise ValueError(f"{dirpath}: manifest shape/K do not match M={M}")

    actual = _checksum(dirpath, _data_files(M))
    if actual != declared:
        raise IntegrityError(f"{dirpath}: checksum mismatch, state files corrupt")

    alpha = tuple(float(a) for a in man["alpha0"].split())
    hyper = Hyperparameters(
        a0=float(man["a0"]), b0=float(man["b0"]),
        e0=float(man["e0"]), f0=float(man["f0"]),
        alpha0=alpha if len(set(alpha)) > 1 else alpha[0],
        divide_alpha_by_k=bool(int(man.get("divide_alpha_by_k", "0"))),
    )

    factors = []
    for m in range(M):
        mat = np.loadtxt(os.path.join(dirpath, f"factors_{m + 1}.txt"), ndmin=2)
        if mat.shape != (shape[m], K[m]):
            raise ValueError(
                f"{dirpath}: factor matrix {m + 1} has shape {mat.shape}, "
                f"manifest says {(shape[m], K[m])}")
        factors.append(mat)

    core_values = np.empty(Q)
    locations = np.empty((Q, M), dtype=np.int64)
    with open(os.path.join(dirpath, "core.txt")) as f:
        rows = [line.split() for line in f if line.strip()]
    if len(rows) != Q:
        raise ValueError(f"{dirpath}: core file has {len(rows)} rows, manifest says {Q}")
    for q, row in enumerate(rows):
        if len(row) != M + 1:
            raise ValueError(f"{dirpath}: core row {q + 1} has {len(row)} fields")
        core_values[q] = float(row[0])
        locations[q] = [int(t) - 1 for t in row[1:]]

    priors = []
    with open(os.path.join(dirpath, "priors.txt")) as f:
        prior_rows = [line.split() for line in f if line.strip()]
    if len(prior_rows) != M:
        raise ValueError(f"{dirpath}: priors file has {len(prior_rows)} rows, want {M}")
    for m, row in enumerate(prior_rows):
        if len(row) != K[m]:
            raise ValueError(f"{dirpath}: mode-{m + 1} prior has {len(row)} entries")
        priors.append(np.array([float(t) for t in row]))

    state = ModelState(shape=shape, hyper=hyper, factors=factors,
                       core_values=core_values, core_locations=locations,
                       mode_priors=priors, core_mode=mode, seed=seed,
                       next_iteration=next_iteration)
    state.validate()
    return state
