"""Analytic task router.

Multi-output ridge regression over expanded features, computable two ways:
a closed-form joint solve over everything seen so far, and exact recursive
updates that fold each batch into accumulated correlation statistics via
the matrix inversion lemma. Both routes give the same weights, which is
what makes the router replay-free: no batch ever needs to be revisited.

All router arithmetic is float64. States are immutable snapshots; every
operation returns a fresh state and never mutates its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class SingularUpdateError(RuntimeError):
    """The per-batch system (I + H R H^T) could not be factorized."""


def _owned(a, dtype=np.float64) -> np.ndarray:
    # private, read-only copy so states cannot alias caller buffers
    out = np.array(a, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RlsState:
    """Sufficient statistics of the router.

    R is the inverse of the regularized feature autocorrelation,
    Q the accumulated feature-label cross correlation, and W = R @ Q
    the ridge weights those statistics imply. lam is the ridge strength
    fixed at initialization.
    """

    R: np.ndarray
    Q: np.ndarray
    W: np.ndarray
    lam: float

    def __post_init__(self):
        R = _owned(self.R)
        Q = _owned(self.Q)
        W = _owned(self.W)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ValueError(f"R must be square, got shape {R.shape}")
        if Q.ndim != 2 or Q.shape[0] != R.shape[0]:
            raise ValueError(f"Q must be ({R.shape[0]}, K), got shape {Q.shape}")
        if W.shape != Q.shape:
            raise ValueError(f"W must match Q shape {Q.shape}, got {W.shape}")
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise ValueError(f"lam must be positive and finite, got {self.lam}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def dim(self) -> int:
        return self.R.shape[0]

    @property
    def task_count(self) -> int:
        return self.Q.shape[1]


@dataclass(frozen=True)
class ExpandedBatch:
    """One task batch in router space: expanded features with one-hot labels."""

    features: np.ndarray  # (n, E) float64
    labels: np.ndarray    # (n, K) float64, one-hot rows

    def __post_init__(self):
        feats = _owned(self.features)
        labels = _owned(self.labels)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {feats.shape}")
        if labels.ndim != 2 or labels.shape[0] != feats.shape[0]:
            raise ValueError(
                f"labels must be ({feats.shape[0]}, K), got shape {labels.shape}"
            )
        if labels.shape[0] > 0 and labels.shape[1] > 0:
            binary = (labels == 0.0) | (labels == 1.0)
            if not binary.all() or not (labels.sum(axis=1) == 1.0).all():
                raise ValueError("labels must be exact one-hot rows")
        elif labels.shape[0] > 0:
            raise ValueError("labels must have at least one column for a nonempty batch")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_task_ids(cls, features, task_ids, num_tasks: int) -> "ExpandedBatch":
        ids = np.asarray(task_ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError("task_ids must be 1-d")
        if ids.size and (ids.min() < 0 or ids.max() >= num_tasks):
            raise ValueError(f"task ids must lie in [0, {num_tasks})")
        labels = np.zeros((ids.size, num_tasks))
        labels[np.arange(ids.size), ids] = 1.0
        return cls(features=features, labels=labels)

    @property
    def count(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class RouteDecision:
    """Softmax affinity over known tasks plus the winning index."""

    probabilities: np.ndarray  # (K,) sums to 1
    selected: int

    def __post_init__(self):
        object.__setattr__(self, "probabilities", _owned(self.probabilities))
        object.__setattr__(self, "selected", int(self.selected))


def init_state(dim: int, lam: float) -> RlsState:
    """Fresh router with no tasks: R = I / lam, empty Q and W."""
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise ValueError(f"dim must be a positive integer, got {dim!r}")
    if not np.isfinite(lam) or lam <= 0:
        raise ValueError(f"lam must be positive and finite, got {lam!r}")
    empty = np.zeros((dim, 0))
    return RlsState(R=np.eye(dim) / lam, Q=empty, W=empty, lam=float(lam))


def solve_joint(batches, lam: float, dim: int | None = None) -> np.ndarray:
    """Closed-form ridge weights over the concatenation of all batches.

    W = (sum_i H_i^T H_i + lam I)^{-1} (sum_i H_i^T Y_i), the unique
    minimizer of ||Y - H W||^2 + lam ||W||^2 over the stacked data.
    Batches must share feature and label widths (pad labels with zero
    columns for tasks absent from a batch). An empty batch list needs an
    explicit dim and yields a (dim, 0) result.
    """
    if not np.isfinite(lam) or lam <= 0:
        raise ValueError(f"lam must be positive and finite, got {lam!r}")
    batches = list(batches)
    if not batches:
        if dim is None:
            raise ValueError("empty batch list requires an explicit dim")
        return np.zeros((dim, 0))
    E = batches[0].features.shape[1]
    K = batches[0].labels.shape[1]
    if dim is not None and dim != E:
        raise ValueError(f"dim {dim} does not match batch feature width {E}")
    G = lam * np.eye(E)
    C = np.zeros((E, K))
    for b in batches:
        if b.features.shape[1] != E or b.labels.shape[1] != K:
            raise ValueError(
                "all batches must share feature and label widths; "
                f"expected ({E}, {K}), got "
                f"({b.features.shape[1]}, {b.labels.shape[1]})"
            )
        G += b.features.T @ b.features
        C += b.features.T @ b.labels
    cho = scipy.linalg.cho_factor(G, lower=True)  # SPD for lam > 0
    return scipy.linalg.cho_solve(cho, C)


def grow_label_space(state: RlsState, new_tasks: int) -> RlsState:
    """Append new_tasks zero columns to Q and W. R is untouched.

    Label columns are indexed by task id, so growth is the only thing
    that happens when a new task arrives before its first batch.
    """
    if not isinstance(new_tasks, (int, np.integer)) or new_tasks < 1:
        raise ValueError(f"new_tasks must be a positive integer, got {new_tasks!r}")
    pad = np.zeros((state.dim, new_tasks))
    return RlsState(
        R=state.R,
        Q=np.hstack([state.Q, pad]),
        W=np.hstack([state.W, pad]),
        lam=state.lam,
    )


def _check_batch(state: RlsState, batch: ExpandedBatch):
    if batch.features.shape[1] != state.dim:
        raise ValueError(
            f"batch feature width {batch.features.shape[1]} does not match "
            f"router dim {state.dim}"
        )
    if batch.labels.shape[1] != state.task_count:
        raise ValueError(
            f"batch label width {batch.labels.shape[1]} does not match current "
            f"task count {state.task_count}; call grow_label_space first"
        )
    return batch.features, batch.labels


def _chunk_slices(n: int, chunk_size: int):
    if not isinstance(chunk_size, (int, np.integer)) or chunk_size < 1:
        raise ValueError(f"chunk_size must be a positive integer, got {chunk_size!r}")
    for start in range(0, n, chunk_size):
        yield slice(start, min(start + chunk_size, n))


def _woodbury_step(R, Q, H, Y):
    # R' = R - R H^T (I + H R H^T)^{-1} H R ; Q' = Q + H^T Y
    n = H.shape[0]
    RHt = R @ H.T
    S = np.eye(n) + H @ RHt
    try:
        cho = scipy.linalg.cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularUpdateError(
            f"batch update system of size {n} is not positive definite: {exc}"
        ) from exc
    R_new = R - RHt @ scipy.linalg.cho_solve(cho, RHt.T)
    R_new = 0.5 * (R_new + R_new.T)  # exact symmetry up to shared rounding
    Q_new = Q + H.T @ Y
    return R_new, Q_new


def update(state: RlsState, batch: ExpandedBatch, chunk_size: int = 64) -> RlsState:
    """Fold one batch into the state without revisiting old data.

    Chunks of at most chunk_size rows go through the rank-n inversion
    identity, so only an (n_c, n_c) system is ever factorized. The result
    equals solve_joint over all data seen since init, and the chunking is
    a mathematical no-op.
    """
    H, Y = _check_batch(state, batch)
    R, Q = state.R, state.Q
    for sl in _chunk_slices(H.shape[0], chunk_size):
        R, Q = _woodbury_step(R, Q, H[sl], Y[sl])
    return RlsState(R=R, Q=Q, W=R @ Q, lam=state.lam)


def update_weight_direct(
    state: RlsState, batch: ExpandedBatch, chunk_size: int = 64
) -> RlsState:
    """Same fold as update, but W advances by its own recursion.

    W' = (I - R' H^T H) W + R' H^T Y with the already-updated R', instead
    of re-forming R' Q'. Algebraically identical to update; kept as an
    independent route so the two can cross-check each other.
    """
    H, Y = _check_batch(state, batch)
    R, Q, W = state.R, state.Q, state.W
    for sl in _chunk_slices(H.shape[0], chunk_size):
        Hc, Yc = H[sl], Y[sl]
        R, Q = _woodbury_step(R, Q, Hc, Yc)
        W = W - R @ (Hc.T @ (Hc @ W)) + R @ (Hc.T @ Yc)
    return RlsState(R=R, Q=Q, W=W, lam=state.lam)


def route(weights: np.ndarray, features: np.ndarray) -> RouteDecision:
    """Softmax task affinities for one expanded feature vector.

    Logits are shifted by their max before exponentiation. The winner is
    the argmax; exact ties resolve to the lowest index.
    """
    W = np.asarray(weights, dtype=np.float64)
    h = np.asarray(features, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"weights must be 2-d, got shape {W.shape}")
    if h.ndim != 1 or h.shape[0] != W.shape[0]:
        raise ValueError(
            f"features must be 1-d of length {W.shape[0]}, got shape {h.shape}"
        )
    if W.shape[1] == 0:
        raise ValueError("no tasks registered; router has zero label columns")
    logits = h @ W
    shifted = logits - logits.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    return RouteDecision(probabilities=probs, selected=int(np.argmax(logits)))


def check_state(state: RlsState, tol: float = 1e-9) -> dict:
    """Verify state invariants; returns the measured residuals.

    R must be symmetric positive definite and W must equal R @ Q, both
    within tol. Raises ValueError on violation.
    """
    sym = float(np.abs(state.R - state.R.T).max()) if state.dim else 0.0
    if sym > tol:
        raise ValueError(f"R asymmetry {sym:.3e} exceeds {tol:.1e}")
    try:
        scipy.linalg.cho_factor(state.R, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"R is not positive definite: {exc}") from exc
    wq = 0.0
    if state.task_count:
        wq = float(np.abs(state.W - state.R @ state.Q).max())
        if wq > tol:
            raise ValueError(f"|W - R Q| = {wq:.3e} exceeds {tol:.1e}")
    return {"symmetry": sym, "wq_residual": wq}
