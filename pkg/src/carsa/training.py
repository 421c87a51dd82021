"""Training loop and cross-validation protocol.

One *trial* = one (fold, seed) pair: initialize from the seed, run Adam with
global-norm gradient clipping over the fold's training subjects, then score
the held-out fold. A *protocol run* executes every fold x seed combination and
writes per-trial artifacts (checkpoint, mean validation attention) plus an
aggregate summary.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .adcore import Tape
from .data import Dataset, FoldPlan, zscore
from .model import ModelConfig, ModelParams, build_batch, init_params, save_checkpoint

log = logging.getLogger(__name__)


class MetricError(ValueError):
    """A metric needs both classes present."""


class TrainingDivergence(RuntimeError):
    """A loss or gradient went non-finite during optimization."""


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    clip_norm: float = 5.0  # 0 disables clipping
    master_seed: int = 0    # fold assignment + trial seed enumeration
    trials: int = 10        # seeded trials per fold

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError(f"lr and eps must be > 0, got {self.lr}, {self.eps}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.clip_norm < 0:
            raise ValueError(f"clip_norm must be >= 0, got {self.clip_norm}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.arrays.items()},
            v={k: np.zeros_like(a) for k, a in params.arrays.items()},
        )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig):
    """In-place Adam update with bias correction.

    Gradients are first checked for finiteness, then jointly rescaled if their
    global norm exceeds ``clip_norm``. The denominator is sqrt(v_hat) + eps,
    so the very first step moves each weight by about lr in the direction of
    -sign(g).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in {name}")
    gnorm = global_norm(grads)
    if cfg.clip_norm > 0 and gnorm > cfg.clip_norm:
        s = cfg.clip_norm / gnorm
        grads = {k: g * s for k, g in grads.items()}
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, arr in params.arrays.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        arr -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def auc(scored: Sequence[tuple[float, int]]) -> float:
    """Area under the ROC curve via the rank-sum identity.

    ``scored`` pairs a class-1 score with the true label. Ties contribute 1/2
    through average ranks. Raises MetricError when either class is absent.
    """
    scores = np.array([s for s, _ in scored], dtype=np.float64)
    labels = np.array([l for _, l in scored], dtype=int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"auc needs both classes, got {n_pos} positive / {n_neg} negative")
    ranks = rankdata(scores, method="average")
    u = float(ranks[labels == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass
class EvalResult:
    accuracy: float
    auc_value: float
    probabilities: np.ndarray  # (n, classes)
    predictions: np.ndarray    # (n,)
    attentions: list[np.ndarray]


def evaluate(params: ModelParams, config: ModelConfig, Xs: Sequence[np.ndarray],
             labels: Sequence[int], batch_size: int = 64) -> EvalResult:
    """Forward-only scoring of normalized subjects (no tape, no gradients)."""
    labels = np.asarray(labels, dtype=int)
    probs = np.empty((len(Xs), config.classes))
    attns: list[np.ndarray] = []
    for start in range(0, len(Xs), batch_size):
        res = build_batch(list(Xs[start:start + batch_size]), params, config)
        for i, sub in enumerate(res.subjects):
            z = sub.logits.value[0]
            e = np.exp(z - z.max())
            probs[start + i] = e / e.sum()
            attns.append(sub.attention.value.copy())
    preds = probs.argmax(axis=1)
    acc = float((preds == labels).mean())
    return EvalResult(acc, auc(list(zip(probs[:, 1], labels))), probs, preds, attns)


# ---------------------------------------------------------------------------
# one trial
# ---------------------------------------------------------------------------


@dataclass
class TrialReport:
    fold: int
    seed: int
    epoch_count: int
    train_losses: list[float]
    val_accuracy: float
    val_auc: float
    checkpoint_path: str
    attention_path: str


def train_fold(dataset: Dataset, plan: FoldPlan, fold: int, seed: int,
               model_config: ModelConfig, train_config: TrainConfig,
               out_dir) -> TrialReport:
    """Train on every fold but ``fold``, validate on ``fold``, write artifacts.

    Deterministic given (dataset, plan, fold, seed, configs): the seed drives
    both initialization and the per-epoch batch shuffles.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    val_ids = set(plan.fold_ids(fold))
    train_samples = [s for s in dataset.samples if s.subject_id not in val_ids]
    val_samples = [s for s in dataset.samples if s.subject_id in val_ids]
    if not train_samples or not val_samples:
        raise ValueError(f"fold {fold} leaves an empty split")
    Xtr = [zscore(s.X) for s in train_samples]
    ytr = np.array([s.label for s in train_samples], dtype=int)
    Xva = [zscore(s.X) for s in val_samples]
    yva = [s.label for s in val_samples]

    rng = np.random.default_rng(seed)
    params = init_params(model_config, rng)
    state = AdamState.zeros(params)
    losses = []
    for epoch in range(train_config.epochs):
        order = rng.permutation(len(Xtr))
        total = 0.0
        n_batches = 0
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            with Tape() as tape:
                res = build_batch([Xtr[i] for i in batch], params, model_config,
                                  labels=ytr[batch])
                loss = float(res.loss.value[0, 0])
                if not math.isfinite(loss):
                    raise TrainingDivergence(
                        f"non-finite loss at fold {fold} seed {seed} epoch {epoch}"
                    )
                tape.backward(res.loss)
            grads = {
                name: (node.grad if node.grad is not None else np.zeros_like(node.value))
                for name, node in res.param_nodes.items()
            }
            adam_step(params, grads, state, train_config)
            total += loss
            n_batches += 1
        losses.append(total / n_batches)
        ev = evaluate(params, model_config, Xva, yva)
        log.debug("fold %d seed %d epoch %d loss %.4f val acc %.3f auc %.3f",
                  fold, seed, epoch, losses[-1], ev.accuracy, ev.auc_value)

    ckpt = out / "checkpoint.npz"
    save_checkpoint(ckpt, params, model_config,
                    meta={"m": dataset.m, "fold": fold, "seed": seed})
    att_path = out / "attention.csv"
    _write_val_attention(ev, np.asarray(yva), att_path)
    log.info("fold %d seed %d: val accuracy %.3f auc %.3f", fold, seed,
             ev.accuracy, ev.auc_value)
    return TrialReport(fold, seed, train_config.epochs, losses, ev.accuracy,
                       ev.auc_value, str(ckpt), str(att_path))


def _write_val_attention(ev: EvalResult, labels: np.ndarray, path):
    """Mean attention over correctly classified validation subjects; if the
    trial got nothing right, fall back to all subjects."""
    from .connectivity import write_fnc_csv  # local import: connectivity uses auc()

    correct = [a for a, ok in zip(ev.attentions, ev.predictions == labels) if ok]
    if not correct:
        log.warning("no correct validation subjects; averaging attention over all")
        correct = ev.attentions
    write_fnc_csv(np.mean(correct, axis=0), path)


# ---------------------------------------------------------------------------
# the full protocol
# ---------------------------------------------------------------------------


def trial_dir(out_dir, fold: int, seed: int) -> Path:
    return Path(out_dir) / "trials" / f"fold{fold}_seed{seed}"


def run_protocol(dataset: Dataset, plan: FoldPlan, model_config: ModelConfig,
                 train_config: TrainConfig, out_dir,
                 parallel: int = 1) -> tuple[list[TrialReport], list[tuple[int, int, str]]]:
    """Run every (fold, seed) trial and write summary.csv / summary.txt.

    A diverging trial is recorded as a failure and the rest keep running, so
    partial results survive. Returns (completed reports, failures).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    combos = [(f, s) for f in range(plan.n_folds) for s in plan.seeds]
    reports: list[TrialReport] = []
    failures: list[tuple[int, int, str]] = []
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            futures = [
                ex.submit(train_fold, dataset, plan, f, s, model_config,
                          train_config, trial_dir(out, f, s))
                for f, s in combos
            ]
            for (f, s), fut in zip(combos, futures):
                try:
                    reports.append(fut.result())
                except TrainingDivergence as exc:
                    failures.append((f, s, str(exc)))
    else:
        for f, s in combos:
            try:
                reports.append(train_fold(dataset, plan, f, s, model_config,
                                          train_config, trial_dir(out, f, s)))
            except TrainingDivergence as exc:
                failures.append((f, s, str(exc)))
    write_summary(reports, failures, out)
    return reports, failures


def summarize(reports: Sequence[TrialReport]) -> dict:
    accs = np.array([r.val_accuracy for r in reports])
    aucs = np.array([r.val_auc for r in reports])
    by_fold = {}
    for r in reports:
        by_fold.setdefault(r.fold, []).append(r)
    return {
        "trials": len(reports),
        "accuracy_mean": float(accs.mean()),
        "accuracy_median": float(np.median(accs)),
        "accuracy_std": float(accs.std()),
        "auc_mean": float(aucs.mean()),
        "auc_median": float(np.median(aucs)),
        "auc_std": float(aucs.std()),
        "folds": {
            f: {
                "accuracy_mean": float(np.mean([r.val_accuracy for r in rs])),
                "auc_mean": float(np.mean([r.val_auc for r in rs])),
            }
            for f, rs in sorted(by_fold.items())
        },
    }


def write_summary(reports: Sequence[TrialReport], failures, out_dir):
    out = Path(out_dir)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "seed", "epoch_count", "val_accuracy", "val_auc",
                    "checkpoint", "attention_path"])
        for r in reports:
            w.writerow([
                r.fold, r.seed, r.epoch_count,
                format(r.val_accuracy, ".17g"), format(r.val_auc, ".17g"),
                os.path.relpath(r.checkpoint_path, out),
                os.path.relpath(r.attention_path, out),
            ])
    lines = []
    if reports:
        agg = summarize(reports)
        lines.append(f"trials: {agg['trials']} completed, {len(failures)} failed")
        lines.append(
            "accuracy mean/median/std: "
            f"{agg['accuracy_mean']:.4f} / {agg['accuracy_median']:.4f} / {agg['accuracy_std']:.4f}"
        )
        lines.append(
            "auc mean/median/std: "
            f"{agg['auc_mean']:.4f} / {agg['auc_median']:.4f} / {agg['auc_std']:.4f}"
        )
        for f, stats in agg["folds"].items():
            lines.append(
                f"fold {f}: accuracy {stats['accuracy_mean']:.4f} auc {stats['auc_mean']:.4f}"
            )
    else:
        lines.append(f"trials: 0 completed, {len(failures)} failed")
    for f, s, msg in failures:
        lines.append(f"FAILED fold {f} seed {s}: {msg}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
