"""Functional network connectivity (FNC) matrices and their summaries.

Two kinds of m x m matrix share one CSV format (a header row of component
ids, then one row per component):

* ``attention`` — the model's softmax attention, a directed graph where entry
  (i, j) is how much component i attends to component j; rows sum to 1.
* ``pearson`` — the classical symmetric correlation matrix of the raw series.

Block summaries average the off-diagonal entries within each ordered pair of
domains, and ``graph_recovery_score`` asks how well the off-diagonal weights
rank true coupling edges above absent ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import training
from .data import DomainMap, Sample, zscore
from .model import ModelConfig, ModelParams, forward

_KINDS = ("attention", "pearson")


class DomainMapError(ValueError):
    """A component has no domain assignment."""


@dataclass
class FncMatrix:
    values: np.ndarray  # (m, m)
    kind: str           # "attention" | "pearson"
    tag: str = ""       # free-form provenance (subject id, "group", ...)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"FNC matrix must be square, got {self.values.shape}")
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}, got {self.kind!r}")

    @property
    def m(self) -> int:
        return self.values.shape[0]


def attention_fnc(params: ModelParams, config: ModelConfig, sample: Sample,
                  apply_zscore: bool = True) -> FncMatrix:
    """Run the model on one subject and keep its attention matrix.

    The subject is normalized the same way training normalizes inputs, so a
    checkpoint sees the data distribution it was fit on.
    """
    X = zscore(sample.X) if apply_zscore else sample.X
    trace = forward(X, params, config)
    return FncMatrix(trace.attention, "attention", sample.subject_id)


def pearson_fnc(sample: Sample) -> FncMatrix:
    """Pearson correlation across time between all component pairs."""
    X = np.asarray(sample.X, dtype=np.float64)
    sd = X.std(axis=1)
    flat = np.where(sd == 0.0)[0]
    if flat.size:
        raise ValueError(
            f"subject {sample.subject_id}: component {int(flat[0])} is constant"
        )
    r = np.corrcoef(X)
    np.clip(r, -1.0, 1.0, out=r)
    np.fill_diagonal(r, 1.0)
    return FncMatrix(r, "pearson", sample.subject_id)


def group_average(matrices: Sequence[FncMatrix], tag: str = "group") -> FncMatrix:
    """Entrywise mean of same-kind, same-size matrices."""
    if not matrices:
        raise ValueError("group_average of no matrices")
    kinds = {fm.kind for fm in matrices}
    if len(kinds) != 1:
        raise ValueError(f"cannot average mixed kinds: {sorted(kinds)}")
    shapes = {fm.values.shape for fm in matrices}
    if len(shapes) != 1:
        raise ValueError(f"cannot average mixed shapes: {sorted(shapes)}")
    return FncMatrix(np.mean([fm.values for fm in matrices], axis=0),
                     matrices[0].kind, tag)


# ---------------------------------------------------------------------------
# block summaries over domains
# ---------------------------------------------------------------------------


@dataclass
class BlockSummary:
    """Mean off-diagonal weight per ordered (from_domain, to_domain) pair.

    ``important_mean`` / ``noise_mean`` / ``cross_mean`` aggregate over the
    is_important flag instead of named domains; empty groups give None.
    """

    block_means: dict[tuple[str, str], float]
    block_counts: dict[tuple[str, str], int]
    important_mean: float | None
    noise_mean: float | None
    cross_mean: float | None


def block_stats(fnc: FncMatrix, domain_map: DomainMap) -> BlockSummary:
    m = fnc.m
    for i in range(m):
        if i not in domain_map.domain:
            raise DomainMapError(f"component {i} has no domain assignment")
    sums: dict[tuple[str, str], float] = {}
    counts: dict[tuple[str, str], int] = {}
    groups = {"imp": [0.0, 0], "noise": [0.0, 0], "cross": [0.0, 0]}
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            key = (domain_map.domain[i], domain_map.domain[j])
            sums[key] = sums.get(key, 0.0) + fnc.values[i, j]
            counts[key] = counts.get(key, 0) + 1
            imp_i = domain_map.is_important[i]
            imp_j = domain_map.is_important[j]
            g = "imp" if imp_i and imp_j else ("noise" if not imp_i and not imp_j else "cross")
            groups[g][0] += fnc.values[i, j]
            groups[g][1] += 1
    means = {k: sums[k] / counts[k] for k in sums}

    def grp(name):
        total, n = groups[name]
        return total / n if n else None

    return BlockSummary(means, counts, grp("imp"), grp("noise"), grp("cross"))


def graph_recovery_score(A: np.ndarray | FncMatrix, G: np.ndarray) -> float:
    """AUC for ranking true coupling edges above absent ones.

    Off-diagonal entries of |G| > 0 are the positive labels; the matching
    off-diagonal entries of A are the scores. Self-loops are excluded because
    the attention diagonal mixes self-similarity with coupling.
    """
    Av = A.values if isinstance(A, FncMatrix) else np.asarray(A, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if Av.shape != G.shape or Av.ndim != 2 or Av.shape[0] != Av.shape[1]:
        raise ValueError(f"shape mismatch: scores {Av.shape} vs truth {G.shape}")
    off = ~np.eye(Av.shape[0], dtype=bool)
    scores = Av[off]
    labels = (np.abs(G[off]) > 0).astype(int)
    return training.auc(list(zip(scores, labels)))


# ---------------------------------------------------------------------------
# CSV round-trip
# ---------------------------------------------------------------------------


def write_fnc_csv(matrix: np.ndarray | FncMatrix, path):
    values = matrix.values if isinstance(matrix, FncMatrix) else np.asarray(matrix)
    m = values.shape[0]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(str(i) for i in range(m)) + "\n")
        for row in values:
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")


def read_fnc_csv(path, kind: str = "attention", tag: str = "") -> FncMatrix:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise ValueError(f"{path}: empty FNC file")
    header, body = rows[0], rows[1:]
    if header != [str(i) for i in range(len(header))]:
        raise ValueError(f"{path}: malformed component-id header")
    values = np.array([[float(c) for c in row] for row in body])
    if values.shape != (len(header), len(header)):
        raise ValueError(f"{path}: expected {len(header)}x{len(header)}, got {values.shape}")
    return FncMatrix(values, kind, tag)


def write_block_csv(summary: BlockSummary, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["from_domain", "to_domain", "mean_weight"])
        for (src, dst) in sorted(summary.block_means):
            w.writerow([src, dst, format(summary.block_means[(src, dst)], ".17g")])
