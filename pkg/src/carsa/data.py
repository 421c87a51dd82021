"""Dataset file format, loading and normalization, deterministic stratified
fold splitting, and a synthetic VAR(1) generator with planted class-dependent
coupling graphs.

On-disk layout of a dataset directory:

* ``manifest.csv`` — header ``subject_id,label,path``; label is 0 (control)
  or 1 (patient); path is relative to the manifest.
* one CSV per subject — m rows of T comma-separated values, no header.
* ``domains.csv`` (optional) — header ``component,domain,is_important``.
* ``gtruth_class0.csv`` / ``gtruth_class1.csv`` (synthetic only) — the m x m
  coupling matrices used to generate each class.

Floats are written with 17 significant digits, which round-trips float64
exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """Malformed dataset file or inconsistent dataset contents."""


class StratificationError(DatasetError):
    """A class label required for stratified splitting is absent."""


class SyntheticSpecError(ValueError):
    """Invalid synthetic generator specification."""


_EDGE_DENSITY = 0.4  # per ordered pair inside the important block
_MIN_EDGE_DIFF = 0.25  # classes must differ in at least this fraction of edges
# Probability that an edge weight is +beta rather than -beta, per class. The
# opposite biases give the classes opposite dynamical signatures (persistent
# vs. oscillatory), so the class difference survives order-invariant pooling.
_SIGN_POS_PROB = (1.0, 0.0)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


@dataclass
class Sample:
    subject_id: str
    X: np.ndarray  # (m, T) component time series
    label: int


@dataclass
class DomainMap:
    """Component id -> domain name, plus the important/noise flag."""

    domain: dict[int, str]
    is_important: dict[int, bool]

    def important_ids(self) -> list[int]:
        return sorted(i for i, flag in self.is_important.items() if flag)

    def noise_ids(self) -> list[int]:
        return sorted(i for i, flag in self.is_important.items() if not flag)


@dataclass
class Dataset:
    samples: list[Sample]
    m: int
    T: int
    domain_map: DomainMap | None = None
    _by_id: dict[str, Sample] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._by_id:
            self._by_id = {s.subject_id: s for s in self.samples}

    def subject(self, subject_id: str) -> Sample:
        return self._by_id[subject_id]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=int)


@dataclass
class SyntheticSpec:
    n_subjects: int = 100  # per class
    m: int = 20
    m_imp: int = 8
    T: int = 100
    beta: float = 0.35
    sigma: float = 1.0
    rho_self: float = 0.5
    rho_max: float = 0.95
    burn_in: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.T < 2 or self.n_subjects < 1:
            raise SyntheticSpecError(
                f"need m >= 1, T >= 2, n_subjects >= 1; got m={self.m}, T={self.T}, "
                f"n_subjects={self.n_subjects}"
            )
        if not 0 <= self.m_imp <= self.m:
            raise SyntheticSpecError(f"m_imp={self.m_imp} out of range for m={self.m}")
        if not 0 < self.rho_max < 1:
            raise SyntheticSpecError(f"rho_max must be in (0, 1), got {self.rho_max}")
        if self.sigma <= 0:
            raise SyntheticSpecError(f"sigma must be > 0, got {self.sigma}")
        if self.burn_in < 0:
            raise SyntheticSpecError(f"burn_in must be >= 0, got {self.burn_in}")


@dataclass
class FoldPlan:
    """subject_id -> fold index, plus the per-trial seeds."""

    assignment: dict[str, int]
    n_folds: int
    seeds: list[int]

    def fold_ids(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignment.items() if f == fold]


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def zscore(X: np.ndarray) -> np.ndarray:
    """Per-row (component) standardization to mean 0, population std 1."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=1, keepdims=True)
    sd = X.std(axis=1, keepdims=True)
    flat = np.where(sd[:, 0] == 0.0)[0]
    if flat.size:
        raise DatasetError(f"component {int(flat[0])} is constant; cannot z-score")
    return (X - mu) / sd


# ---------------------------------------------------------------------------
# loading and writing
# ---------------------------------------------------------------------------


def _load_subject_file(path: Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                raise DatasetError(f"{path}: row {lineno}: non-numeric cell") from None
            if rows and len(values) != len(rows[0]):
                raise DatasetError(
                    f"{path}: row {lineno} has {len(values)} values, expected {len(rows[0])}"
                )
            rows.append(values)
    if not rows:
        raise DatasetError(f"{path}: empty subject file")
    X = np.asarray(rows, dtype=np.float64)
    if X.shape[1] < 2:
        raise DatasetError(f"{path}: series length must be >= 2, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise DatasetError(f"{path}: non-finite value")
    return X


def load_domain_map(path) -> DomainMap:
    path = Path(path)
    domain: dict[int, str] = {}
    important: dict[int, bool] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["component", "domain", "is_important"]:
            raise DatasetError(f"{path}: expected header component,domain,is_important")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 or row[2] not in ("0", "1"):
                raise DatasetError(f"{path}: line {lineno}: malformed domain row")
            try:
                cid = int(row[0])
            except ValueError:
                raise DatasetError(f"{path}: line {lineno}: bad component id {row[0]!r}") from None
            domain[cid] = row[1]
            important[cid] = row[2] == "1"
    return DomainMap(domain, important)


def load_dataset(manifest_path) -> Dataset:
    """Parse a manifest and all subject files it references."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["subject_id", "label", "path"]:
            raise DatasetError(f"{manifest_path}: line 1: expected header subject_id,label,path")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DatasetError(f"{manifest_path}: line {lineno}: expected 3 fields, got {len(row)}")
            sid, label_s, rel = row
            if label_s not in ("0", "1"):
                raise DatasetError(
                    f"{manifest_path}: line {lineno}: unknown label {label_s!r} (expected 0 or 1)"
                )
            if sid in seen:
                raise DatasetError(f"{manifest_path}: line {lineno}: duplicate subject_id {sid!r}")
            seen.add(sid)
            spath = base / rel
            if not spath.exists():
                raise DatasetError(f"{manifest_path}: line {lineno}: missing subject file {spath}")
            samples.append(Sample(sid, _load_subject_file(spath), int(label_s)))
    if not samples:
        raise DatasetError(f"{manifest_path}: no subjects listed")
    m, T = samples[0].X.shape
    for s in samples:
        if s.X.shape != (m, T):
            raise DatasetError(
                f"subject {s.subject_id} has shape {s.X.shape}, expected {(m, T)}"
            )
    domain_map = None
    dpath = base / "domains.csv"
    if dpath.exists():
        domain_map = load_domain_map(dpath)
    return Dataset(samples, m, T, domain_map)


def write_dataset(dataset: Dataset, out_dir, ground_truth: tuple[np.ndarray, np.ndarray] | None = None):
    """Write a dataset directory (manifest, subject files, optional domain map
    and ground-truth coupling matrices)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "label", "path"])
        for s in dataset.samples:
            w.writerow([s.subject_id, s.label, f"{s.subject_id}.csv"])
    for s in dataset.samples:
        with open(out / f"{s.subject_id}.csv", "w", newline="") as fh:
            for row in s.X:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    if dataset.domain_map is not None:
        with open(out / "domains.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component", "domain", "is_important"])
            for cid in sorted(dataset.domain_map.domain):
                w.writerow([
                    cid,
                    dataset.domain_map.domain[cid],
                    int(dataset.domain_map.is_important[cid]),
                ])
    if ground_truth is not None:
        for c, G in enumerate(ground_truth):
            with open(out / f"gtruth_class{c}.csv", "w", newline="") as fh:
                for row in np.asarray(G):
                    fh.write(",".join(_fmt(v) for v in row) + "\n")


def load_ground_truth(directory) -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    out = []
    for c in (0, 1):
        path = directory / f"gtruth_class{c}.csv"
        if not path.exists():
            raise DatasetError(f"ground-truth file not found: {path}")
        G = np.loadtxt(path, delimiter=",", ndmin=2)
        if G.shape[0] != G.shape[1]:
            raise DatasetError(f"{path}: ground truth must be square, got {G.shape}")
        out.append(G)
    if out[0].shape != out[1].shape:
        raise DatasetError("ground-truth matrices disagree in shape")
    return out[0], out[1]


# ---------------------------------------------------------------------------
# fold planning
# ---------------------------------------------------------------------------


def make_folds(dataset: Dataset, master_seed: int, n_folds: int = 4,
               n_trials: int = 10) -> FoldPlan:
    """Label-stratified folds: shuffle ids within each class with the seeded
    generator, then deal them round-robin. Same inputs give the same plan."""
    if len(dataset.samples) < 8:
        raise DatasetError(f"need at least 8 subjects to split, got {len(dataset.samples)}")
    if n_folds < 2:
        raise ValueError(f"n_folds must be >= 2, got {n_folds}")
    by_class: dict[int, list[str]] = {0: [], 1: []}
    for s in dataset.samples:
        by_class[s.label].append(s.subject_id)
    for label, ids in by_class.items():
        if not ids:
            raise StratificationError(f"class {label} absent; cannot stratify folds")
    rng = np.random.default_rng(master_seed)
    assignment: dict[str, int] = {}
    for label in (0, 1):
        ids = by_class[label]
        order = rng.permutation(len(ids))
        for pos, idx in enumerate(order):
            assignment[ids[idx]] = pos % n_folds
    seeds = [master_seed + i for i in range(n_trials)]
    return FoldPlan(assignment, n_folds, seeds)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


def spectral_radius(G: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvals(np.asarray(G, dtype=np.float64))).max())


def _edge_set(G: np.ndarray) -> set[tuple[int, int]]:
    m = G.shape[0]
    return {(i, j) for i in range(m) for j in range(m) if i != j and G[i, j] != 0.0}


def _draw_coupling(rng: np.random.Generator, spec: SyntheticSpec,
                   pos_prob: float = 0.5) -> np.ndarray:
    """Sparse signed coupling inside the important block; noise components get
    only a self-loop. ``pos_prob`` sets the fraction of +beta edges."""
    G = np.zeros((spec.m, spec.m))
    for i in range(spec.m_imp):
        for j in range(spec.m_imp):
            if i != j and rng.random() < _EDGE_DENSITY:
                sign = 1.0 if rng.random() < pos_prob else -1.0
                G[i, j] = spec.beta * sign
    for i in range(spec.m_imp, spec.m):
        G[i, i] = spec.rho_self
    return G


def _cap_radius(G: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    sr = spectral_radius(G)
    if sr > spec.rho_max:
        if sr == 0.0:
            raise SyntheticSpecError("cannot rescale a zero coupling matrix")
        G = G * (spec.rho_max / sr)
    return G


def _simulate(rng: np.random.Generator, G: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    total = spec.burn_in + spec.T
    eps = rng.normal(0.0, spec.sigma, size=(total, spec.m))
    x = np.zeros(spec.m)
    out = np.empty((spec.T, spec.m))
    for t in range(total):
        x = G @ x + eps[t]
        if t >= spec.burn_in:
            out[t - spec.burn_in] = x
    return np.ascontiguousarray(out.T)


def gen_synthetic(spec: SyntheticSpec) -> tuple[Dataset, tuple[np.ndarray, np.ndarray]]:
    """Generate a two-class VAR(1) dataset with planted coupling graphs.

    Class c follows x_t = G_c x_{t-1} + eps_t with eps ~ N(0, sigma^2 I); the
    first ``m_imp`` components carry a class-specific sparse signed coupling
    pattern (the two patterns differ in at least 25% of their edges and have
    opposite sign biases), the rest are independent AR(1) noise with
    coefficient ``rho_self``. Both matrices are rescaled to spectral radius
    <= ``rho_max`` if they exceed it. Returns the dataset with (G_0, G_1).
    """
    rng = np.random.default_rng(spec.seed)
    G0 = _draw_coupling(rng, spec, _SIGN_POS_PROB[0])
    G1 = _draw_coupling(rng, spec, _SIGN_POS_PROB[1])
    e0 = _edge_set(G0)
    if e0:
        for _ in range(100):
            e1 = _edge_set(G1)
            need = _MIN_EDGE_DIFF * max(len(e0), len(e1))
            if len(e0 ^ e1) >= need:
                break
            G1 = _draw_coupling(rng, spec, _SIGN_POS_PROB[1])
        else:
            raise SyntheticSpecError("could not draw class patterns differing in >= 25% of edges")
    G0 = _cap_radius(G0, spec)
    G1 = _cap_radius(G1, spec)
    samples = []
    for c, G in ((0, G0), (1, G1)):
        for i in range(spec.n_subjects):
            samples.append(Sample(f"c{c}_{i:03d}", _simulate(rng, G, spec), c))
    domain_map = DomainMap(
        domain={i: ("important" if i < spec.m_imp else "noise") for i in range(spec.m)},
        is_important={i: i < spec.m_imp for i in range(spec.m)},
    )
    return Dataset(samples, spec.m, spec.T, domain_map), (G0, G1)
