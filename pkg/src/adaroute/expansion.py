"""Pooling and frozen random-feature expansion for router inputs.

A pooled hidden vector is lifted into a higher-dimensional space by a
fixed Gaussian projection followed by rectification. Lifting buys linear
separability for clusters that are entangled in the original space; the
projection is identified entirely by (seed, in_dim, out_dim, scale_mode)
and regenerated on demand, never stored.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .router import ExpandedBatch, solve_joint

SCALE_MODES = ("inv_sqrt_d", "unit")


@dataclass(frozen=True)
class ExpansionPipeline:
    """Frozen projection with its regeneration identity."""

    projection: np.ndarray  # (in_dim, out_dim) float64
    seed: int
    scale_mode: str

    def __post_init__(self):
        proj = np.array(self.projection, dtype=np.float64, order="C", copy=True)
        if proj.ndim != 2:
            raise ValueError(f"projection must be 2-d, got shape {proj.shape}")
        proj.setflags(write=False)
        object.__setattr__(self, "projection", proj)

    @property
    def in_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[1]


def mean_pool(hidden: np.ndarray) -> np.ndarray:
    """Average a (T, d) stack of per-position states into one length-d vector."""
    H = np.asarray(hidden, dtype=np.float64)
    if H.ndim != 2:
        raise ValueError(f"hidden states must be 2-d, got shape {H.shape}")
    if H.shape[0] == 0:
        raise ValueError("cannot pool an empty sequence")
    return H.mean(axis=0)


def make_pipeline(
    seed: int, in_dim: int, out_dim: int, scale_mode: str = "inv_sqrt_d"
) -> ExpansionPipeline:
    """Draw the frozen Gaussian projection for a given identity.

    Entries are i.i.d. normal with std 1/sqrt(in_dim) (scale_mode
    "inv_sqrt_d", the default) or 1 ("unit"). The generator is seeded
    PCG64, so identical arguments give bit-identical matrices on any
    platform. Expansion is meant to go up in dimension; out_dim <= in_dim
    is allowed but warns.
    """
    if in_dim < 1 or out_dim < 1:
        raise ValueError(f"dimensions must be positive, got ({in_dim}, {out_dim})")
    if scale_mode not in SCALE_MODES:
        raise ValueError(f"scale_mode must be one of {SCALE_MODES}, got {scale_mode!r}")
    if out_dim <= in_dim:
        warnings.warn(
            f"expansion width {out_dim} does not exceed input width {in_dim}; "
            "separability gains need out_dim > in_dim",
            RuntimeWarning,
            stacklevel=2,
        )
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(in_dim) if scale_mode == "inv_sqrt_d" else 1.0
    proj = rng.standard_normal((in_dim, out_dim)) * std
    return ExpansionPipeline(projection=proj, seed=int(seed), scale_mode=scale_mode)


def expand(pipeline: ExpansionPipeline, pooled: np.ndarray) -> np.ndarray:
    """Rectified projection of one pooled vector: max(0, pooled @ P)."""
    h = np.asarray(pooled, dtype=np.float64)
    if h.ndim != 1 or h.shape[0] != pipeline.in_dim:
        raise ValueError(
            f"pooled vector must be 1-d of length {pipeline.in_dim}, got shape {h.shape}"
        )
    return np.maximum(h @ pipeline.projection, 0.0)


def expand_batch(pipeline: ExpansionPipeline, pooled_rows: np.ndarray) -> np.ndarray:
    """expand applied row-wise to an (n, in_dim) matrix."""
    X = np.asarray(pooled_rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != pipeline.in_dim:
        raise ValueError(
            f"pooled rows must be (n, {pipeline.in_dim}), got shape {X.shape}"
        )
    return np.maximum(X @ pipeline.projection, 0.0)


def separability_probe(
    datasets_by_task,
    pipeline: ExpansionPipeline | None = None,
    lam: float = 1.0,
) -> float:
    """How linearly separable the task datasets are, as fit accuracy in [0, 1].

    Fits one multinomial ridge classifier (the same closed-form solve the
    router uses) on all samples, optionally expanded first, and scores
    argmax accuracy on those same samples. Ties go to the lowest task id,
    so two identical datasets score exactly 0.5.
    """
    datasets = [np.asarray(d, dtype=np.float64) for d in datasets_by_task]
    if len(datasets) < 2:
        raise ValueError(f"probe needs at least 2 task datasets, got {len(datasets)}")
    for tid, d in enumerate(datasets):
        if d.ndim != 2:
            raise ValueError(f"task {tid} dataset must be 2-d, got shape {d.shape}")
        if d.shape[0] < 2:
            raise ValueError(f"task {tid} has {d.shape[0]} samples; need at least 2")
        if d.shape[1] != datasets[0].shape[1]:
            raise ValueError("task datasets must share feature width")
    X = np.vstack(datasets)
    if pipeline is not None:
        X = expand_batch(pipeline, X)
    ids = np.concatenate(
        [np.full(d.shape[0], tid, dtype=np.int64) for tid, d in enumerate(datasets)]
    )
    batch = ExpandedBatch.from_task_ids(X, ids, num_tasks=len(datasets))
    W = solve_joint([batch], lam=lam)
    predicted = np.argmax(X @ W, axis=1)
    return float(np.mean(predicted == ids))
