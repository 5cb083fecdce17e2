"""Continual loop, evaluation metrics, and forgetting baselines.

One phase per task: fit that task's adapter on its training split, fold
that task's router-fit features into the analytic router, drop both
splits, then score every task seen so far. Earlier training data is never
revisited; what preserves old behavior is that old adapters and old
router columns simply stop changing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig
from .encoder import AdapterBank, LayeredEncoder, train_adapter
from .expansion import expand, expand_batch, make_pipeline, mean_pool
from .router import (
    ExpandedBatch,
    RlsState,
    RouteDecision,
    grow_label_space,
    init_state,
    route,
    solve_joint,
    update,
    update_weight_direct,
)
from .tasks import TaskStream, generate_task_stream, generic_prompts


class AccuracyMatrix:
    """Lower-triangular scores: cell (i, t) is the exact-match accuracy on
    the task learned at phase i, measured after phase t. Cells that were
    never measured stay absent; they are not zeros."""

    def __init__(self, num_phases: int):
        if num_phases < 1:
            raise ValueError("need at least one phase")
        self.num_phases = num_phases
        self._cells = {}

    def set(self, task_phase: int, after_phase: int, value: float) -> None:
        if not 0 <= task_phase <= after_phase < self.num_phases:
            raise ValueError(
                f"cell ({task_phase}, {after_phase}) outside the lower triangle "
                f"of a {self.num_phases}-phase run"
            )
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {value}")
        if (task_phase, after_phase) in self._cells:
            raise ValueError(f"cell ({task_phase}, {after_phase}) already recorded")
        self._cells[(task_phase, after_phase)] = float(value)

    def get(self, task_phase: int, after_phase: int) -> float:
        return self._cells[(task_phase, after_phase)]

    def has(self, task_phase: int, after_phase: int) -> bool:
        return (task_phase, after_phase) in self._cells

    def final_column(self) -> np.ndarray:
        last = self.num_phases - 1
        missing = [i for i in range(self.num_phases) if (i, last) not in self._cells]
        if missing:
            raise ValueError(f"final column incomplete; missing phases {missing}")
        return np.array([self._cells[(i, last)] for i in range(self.num_phases)])

    def to_cells(self) -> list:
        return [[i, t, v] for (i, t), v in sorted(self._cells.items())]

    @classmethod
    def from_cells(cls, num_phases: int, cells) -> "AccuracyMatrix":
        m = cls(num_phases)
        for i, t, v in cells:
            m.set(int(i), int(t), float(v))
        return m


def compute_op(matrix: AccuracyMatrix) -> float:
    """Overall performance: mean of the final column."""
    return float(matrix.final_column().mean())


def compute_bwt(matrix: AccuracyMatrix) -> float:
    """Backward transfer: mean drop from each task's own-phase score to its
    final score, over all but the last task. Zero means no forgetting."""
    k = matrix.num_phases
    if k < 2:
        raise ValueError("backward transfer needs at least 2 phases")
    final = matrix.final_column()
    missing = [i for i in range(k - 1) if not matrix.has(i, i)]
    if missing:
        raise ValueError(
            f"backward transfer needs the diagonal; missing phases {missing}"
        )
    drops = [final[i] - matrix.get(i, i) for i in range(k - 1)]
    return float(np.mean(drops))


@dataclass
class RoutingAccuracyTrace:
    """Per-phase routing accuracy on each seen task's eval split."""

    records: list = field(default_factory=list)

    def append(self, phase: int, per_task: dict) -> None:
        avg = float(np.mean(list(per_task.values())))
        self.records.append(
            {"phase": int(phase), "per_task": dict(per_task), "average": avg}
        )

    @property
    def averages(self) -> list:
        return [r["average"] for r in self.records]


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    trace: RoutingAccuracyTrace
    state: RlsState
    bank: AdapterBank
    order: tuple
    generalist_id: int | None = None


def task_features(encoder: LayeredEncoder, pipeline, prompts) -> np.ndarray:
    """Router-space features for a batch of prompts: lower pass, mean pool,
    expansion. Blocks are position-wise, so the batch is run as one
    flattened sequence."""
    P = np.asarray(prompts, dtype=np.int64)
    if P.ndim != 2:
        raise ValueError(f"prompts must be (n, T), got shape {P.shape}")
    H = encoder.forward_lower(P.reshape(-1))
    pooled = H.reshape(P.shape[0], P.shape[1], -1).mean(axis=1)
    return expand_batch(pipeline, pooled)


def build_pipeline(config: RunConfig):
    return make_pipeline(
        config.pipeline.seed,
        config.encoder.hidden,
        config.pipeline.expansion,
        config.pipeline.scale_mode,
    )


def _task_seed(base: int, task_id: int) -> int:
    return int(np.random.SeedSequence([base, task_id]).generate_state(1, np.uint64)[0])


def run_inference(
    encoder: LayeredEncoder,
    pipeline,
    weights: np.ndarray,
    bank: AdapterBank,
    prompt,
    max_len: int = 4,
    reroute_each_token: bool = False,
):
    """Route one prompt, pick its adapter, and decode greedily.

    The prompt is pooled once and the routing decision reused for the
    whole continuation unless reroute_each_token is set. A selected index
    with no adapter in the bank (the generalist class, or a task not yet
    learned) falls back to the bare frozen encoder. Returns the generated
    tokens (stop token excluded) and the prompt's RouteDecision.
    """
    p = np.asarray(prompt, dtype=np.int64)
    H = encoder.forward_lower(p)
    decision = route(weights, expand(pipeline, mean_pool(H)))
    if not reroute_each_token:
        adapter = bank.get(decision.selected)
        return encoder.generate(p, adapter, max_len), decision
    seq = list(p)
    out = []
    for _ in range(max_len):
        H = encoder.forward_lower(np.asarray(seq, dtype=np.int64))
        step = route(weights, expand(pipeline, mean_pool(H)))
        logits = encoder.forward_upper(H, bank.get(step.selected))
        nxt = int(np.argmax(logits[-1]))
        if nxt == encoder.config.eos_token:
            break
        out.append(nxt)
        seq.append(nxt)
    return np.asarray(out, dtype=np.int64), decision


def _exact_match(generated: np.ndarray, answer_row: np.ndarray) -> bool:
    # answer rows end with the stop token, which generate never returns
    return bool(np.array_equal(generated, answer_row[:-1]))


def run_continual(
    stream: TaskStream,
    config: RunConfig,
    *,
    start_phase: int = 0,
    state: RlsState | None = None,
    bank: AdapterBank | None = None,
    phase_callback=None,
) -> RunResult:
    """Run the task sequence end to end (or resume from start_phase).

    Per phase: train the task's adapter, fold its router-fit features into
    the router, drop both splits, then evaluate every task seen so far via
    run_inference. Router label columns are indexed by task id, so the
    final router is order-independent up to rounding. phase_callback, if
    given, is called as (completed_phases, state, bank) after each phase.
    """
    order = config.task_order()
    k = stream.spec.num_tasks
    if len(order) != k:
        raise ValueError("config order length does not match stream task count")
    if not 0 <= start_phase <= k:
        raise ValueError(f"start_phase must lie in [0, {k}]")
    encoder = LayeredEncoder.from_config(config.encoder)
    pipeline = build_pipeline(config)
    generalist_id = k if config.generalist_route else None
    if state is None:
        if start_phase != 0:
            raise ValueError("resume from start_phase > 0 needs state and bank")
        state = init_state(config.pipeline.expansion, config.pipeline.lam)
        bank = AdapterBank()
        if config.generalist_route:
            state = grow_label_space(state, k + 1)
            gen = generic_prompts(stream.spec, config.stream_seed, config.generalist_samples)
            feats = task_features(encoder, pipeline, gen)
            batch = ExpandedBatch.from_task_ids(
                feats, np.full(gen.shape[0], generalist_id), k + 1
            )
            state = update(state, batch, config.chunk_size)
    elif bank is None:
        raise ValueError("resume needs both state and bank")

    matrix = AccuracyMatrix(k)
    trace = RoutingAccuracyTrace()
    eval_cache = {}
    for phase in range(start_phase, k):
        tid = order[phase]
        tdata = stream.training_data(tid)
        hyper = replace(config.adapter, seed=_task_seed(config.adapter.seed, tid))
        adapter = train_adapter(
            encoder, tdata.prompts, tdata.answers, hyper, task_id=tid
        )
        bank.add(adapter)
        rdata = stream.router_data(tid)
        feats = task_features(encoder, pipeline, rdata.prompts)
        needed = tid + 1 if generalist_id is None else k + 1
        if state.task_count < needed:
            state = grow_label_space(state, needed - state.task_count)
        batch = ExpandedBatch.from_task_ids(
            feats, np.full(feats.shape[0], tid), state.task_count
        )
        state = update(state, batch, config.chunk_size)
        del tdata, rdata, feats, batch  # phase inputs are gone before the next phase

        per_task_route = {}
        for i in range(phase + 1):
            tid_i = order[i]
            if tid_i not in eval_cache:
                eval_cache[tid_i] = stream.eval_data(tid_i)
            edata = eval_cache[tid_i]
            hits = 0
            routed = 0
            for row in range(edata.count):
                tokens, decision = run_inference(
                    encoder,
                    pipeline,
                    state.W,
                    bank,
                    edata.prompts[row],
                    max_len=config.max_len,
                    reroute_each_token=config.per_token_rerouting,
                )
                hits += _exact_match(tokens, edata.answers[row])
                routed += decision.selected == tid_i
            matrix.set(i, phase, hits / edata.count)
            per_task_route[tid_i] = routed / edata.count
        trace.append(phase, per_task_route)
        if phase_callback is not None:
            phase_callback(phase + 1, state, bank)
    return RunResult(
        matrix=matrix,
        trace=trace,
        state=state,
        bank=bank,
        order=order,
        generalist_id=generalist_id,
    )


class _MlpRouter:
    """Two-layer gradient-trained router used only as a forgetting baseline."""

    def __init__(self, in_dim: int, hidden: int, seed: int):
        rng = np.random.default_rng(seed)
        self.W1 = rng.standard_normal((in_dim, hidden)) / np.sqrt(in_dim)
        self.b1 = np.zeros(hidden)
        self.W2 = np.zeros((hidden, 0))
        self.b2 = np.zeros(0)

    @property
    def classes(self) -> int:
        return self.W2.shape[1]

    def grow(self, classes: int) -> None:
        if classes <= self.classes:
            return
        extra = classes - self.classes
        self.W2 = np.hstack([self.W2, np.zeros((self.W1.shape[1], extra))])
        self.b2 = np.concatenate([self.b2, np.zeros(extra)])

    def _hidden(self, X):
        return np.maximum(X @ self.W1 + self.b1, 0.0)

    def train_on(self, X, class_id: int, epochs: int, lr: float) -> None:
        n = X.shape[0]
        for _ in range(epochs):
            Hh = self._hidden(X)
            logits = Hh @ self.W2 + self.b2
            z = logits - logits.max(axis=1, keepdims=True)
            P = np.exp(z)
            P /= P.sum(axis=1, keepdims=True)
            P[:, class_id] -= 1.0
            P /= n
            dW2 = Hh.T @ P
            db2 = P.sum(axis=0)
            dh = P @ self.W2.T
            dh[Hh <= 0.0] = 0.0
            dW1 = X.T @ dh
            db1 = dh.sum(axis=0)
            self.W2 -= lr * dW2
            self.b2 -= lr * db2
            self.W1 -= lr * dW1
            self.b1 -= lr * db1

    def predict(self, X) -> np.ndarray:
        return np.argmax(self._hidden(X) @ self.W2 + self.b2, axis=1)


def run_bp_router_baseline(stream: TaskStream, config: RunConfig) -> RoutingAccuracyTrace:
    """Routing-only ablation: same features, same schedule, but the router
    is a two-layer MLP trained by gradient descent on each phase's data
    alone. Adapters are not involved; only routing accuracy is traced."""
    order = config.task_order()
    encoder = LayeredEncoder.from_config(config.encoder)
    pipeline = build_pipeline(config)
    mlp = _MlpRouter(
        config.pipeline.expansion, config.baseline.hidden, config.baseline.seed
    )
    eval_feats = {}
    trace = RoutingAccuracyTrace()
    for phase, tid in enumerate(order):
        feats = task_features(encoder, pipeline, stream.router_data(tid).prompts)
        mlp.grow(tid + 1)
        mlp.train_on(feats, tid, config.baseline.epochs, config.baseline.learning_rate)
        per_task = {}
        for tid_i in order[: phase + 1]:
            if tid_i not in eval_feats:
                eval_feats[tid_i] = task_features(
                    encoder, pipeline, stream.eval_data(tid_i).prompts
                )
            per_task[tid_i] = float(np.mean(mlp.predict(eval_feats[tid_i]) == tid_i))
        trace.append(phase, per_task)
    return trace


def run_single_adapter_baseline(stream: TaskStream, config: RunConfig) -> AccuracyMatrix:
    """Capacity ablation: one shared adapter fine-tuned through the whole
    sequence, no routing. Where the routed system freezes per-task weights,
    this baseline keeps overwriting the same factors."""
    order = config.task_order()
    k = stream.spec.num_tasks
    encoder = LayeredEncoder.from_config(config.encoder)
    matrix = AccuracyMatrix(k)
    shared = None
    hyper = replace(config.adapter, seed=_task_seed(config.adapter.seed, 0))
    eval_cache = {}
    for phase, tid in enumerate(order):
        tdata = stream.training_data(tid)
        shared = train_adapter(
            encoder,
            tdata.prompts,
            tdata.answers,
            hyper,
            task_id=-1,
            init_adapter=shared,
        )
        for i in range(phase + 1):
            tid_i = order[i]
            if tid_i not in eval_cache:
                eval_cache[tid_i] = stream.eval_data(tid_i)
            edata = eval_cache[tid_i]
            hits = sum(
                _exact_match(
                    encoder.generate(edata.prompts[row], shared, config.max_len),
                    edata.answers[row],
                )
                for row in range(edata.count)
            )
            matrix.set(i, phase, hits / edata.count)
    return matrix


def evaluate_bank(
    stream: TaskStream, config: RunConfig, state: RlsState, bank: AdapterBank
) -> dict:
    """Score every stream task against a router/bank pair (a loaded
    checkpoint, typically). Returns per-task exact-match and routing
    accuracy on the eval splits."""
    encoder = LayeredEncoder.from_config(config.encoder)
    pipeline = build_pipeline(config)
    per_task = {}
    for tid in range(stream.spec.num_tasks):
        edata = stream.eval_data(tid)
        hits = 0
        routed = 0
        for row in range(edata.count):
            tokens, decision = run_inference(
                encoder,
                pipeline,
                state.W,
                bank,
                edata.prompts[row],
                max_len=config.max_len,
                reroute_each_token=config.per_token_rerouting,
            )
            hits += _exact_match(tokens, edata.answers[row])
            routed += decision.selected == tid
        per_task[tid] = {
            "score": hits / edata.count,
            "routing_accuracy": routed / edata.count,
        }
    return per_task


def run_sweep(config: RunConfig, split_layers, expansions) -> dict:
    """Grid of full runs over (split layer, expansion width).

    Returns {(split, expansion): (op, bwt)}; the stream is shared across
    cells since it does not depend on either knob.
    """
    stream = generate_task_stream(config.stream, config.stream_seed)
    results = {}
    for split in split_layers:
        for expansion in expansions:
            cfg = replace(
                config,
                encoder=replace(config.encoder, split_layer=split),
                pipeline=replace(config.pipeline, expansion=expansion),
            )
            res = run_continual(stream, cfg)
            op = compute_op(res.matrix)
            bwt = compute_bwt(res.matrix) if stream.spec.num_tasks >= 2 else None
            results[(split, expansion)] = (op, bwt)
    return results


def run_equivalence_suite(
    trials: int = 25, seed: int = 20240801, tol: float = 1e-9, chunk_sizes=(1, 7, 64)
) -> dict:
    """Self-test of the router identities on random instances.

    For each instance, the recursive fold, the direct weight recursion,
    and every chunked variant must agree with the closed-form joint solve.
    Returns the measured maxima; "passed" compares them against tol.
    """
    rng = np.random.default_rng(seed)
    max_joint = 0.0
    max_direct = 0.0
    max_chunk = 0.0
    for _ in range(trials):
        E = int(rng.choice([8, 32, 64]))
        k = int(rng.integers(2, 6))
        lam = float(rng.choice([0.1, 1.0, 10.0]))
        batches = []
        for tid in range(k):
            n = int(rng.integers(1, 101))
            feats = rng.standard_normal((n, E))
            batches.append(
                ExpandedBatch.from_task_ids(feats, np.full(n, tid), k)
            )
        folded = grow_label_space(init_state(E, lam), k)
        direct = folded
        for b in batches:
            folded = update(folded, b)
            direct = update_weight_direct(direct, b)
        W_joint = solve_joint(batches, lam)
        max_joint = max(max_joint, float(np.abs(folded.W - W_joint).max()))
        max_direct = max(max_direct, float(np.abs(direct.W - folded.W).max()))
        n_total = batches[0].count
        for size in tuple(chunk_sizes) + (n_total,):
            chunked = grow_label_space(init_state(E, lam), k)
            for b in batches:
                chunked = update(chunked, b, chunk_size=size)
            max_chunk = max(max_chunk, float(np.abs(chunked.W - W_joint).max()))
    return {
        "trials": trials,
        "tol": tol,
        "joint_recursive": max_joint,
        "recursive_direct": max_direct,
        "chunking": max_chunk,
        "passed": max(max_joint, max_direct, max_chunk) <= tol,
    }
