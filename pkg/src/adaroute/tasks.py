"""Synthetic token-mapping task streams.

Each task pairs a prompt-token distribution with its own token-to-answer
rule, so task identity is recoverable from the prompt alone and the
correct answer is a per-token function the position-wise encoder can
actually realize. Vocabulary layout: id 0 is end-of-sequence, then a
prompt pool carved into per-task alphabets, an answer pool shared by all
tasks, and whatever remains is a generic pool used only by the optional
generalist route.

A prompt for task k draws each token from task k's own alphabet with
probability `separation`, and uniformly from the whole prompt pool
otherwise; the target is task k's rule applied to the final prompt token,
followed by end-of-sequence. Streams regenerate bit-exactly from
(spec, seed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

EOS = 0
_MAX_REDRAWS = 200


@dataclass(frozen=True)
class StreamSpec:
    """Shape of a task stream; the seed lives alongside, not inside."""

    num_tasks: int = 8
    samples_per_task: int = 60
    prompt_len: int = 10
    separation: float = 1.0
    router_fraction: float = 0.15
    eval_fraction: float = 0.2
    vocab: int = 64
    prompt_pool: int = 40
    answer_pool: int = 16

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be at least 1")
        if not 0.0 <= self.separation <= 1.0:
            raise ValueError(f"separation must lie in [0, 1], got {self.separation}")
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be at least 1")
        if self.prompt_pool < self.num_tasks:
            raise ValueError("prompt pool smaller than task count")
        if self.answer_pool < 1:
            raise ValueError("answer pool must be nonempty")
        if 1 + self.prompt_pool + self.answer_pool > self.vocab:
            raise ValueError(
                f"vocab {self.vocab} too small for eos + prompt pool "
                f"{self.prompt_pool} + answer pool {self.answer_pool}"
            )
        if not 0.0 < self.router_fraction < 1.0:
            raise ValueError("router_fraction must lie in (0, 1)")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must lie in (0, 1)")
        counts = self.split_counts
        if min(counts) < 1:
            raise ValueError(
                f"samples_per_task {self.samples_per_task} leaves an empty split "
                f"(train/router/eval = {counts})"
            )

    @property
    def tokens_per_task(self) -> int:
        return self.prompt_pool // self.num_tasks

    @property
    def answer_start(self) -> int:
        return 1 + self.prompt_pool

    @property
    def generic_start(self) -> int:
        return 1 + self.prompt_pool + self.answer_pool

    @property
    def generic_pool(self) -> int:
        return self.vocab - self.generic_start

    @property
    def split_counts(self) -> tuple:
        n = self.samples_per_task
        n_router = max(1, round(self.router_fraction * n))
        n_eval = max(1, round(self.eval_fraction * n))
        return n - n_router - n_eval, n_router, n_eval


def _owned_int(a) -> np.ndarray:
    out = np.array(a, dtype=np.int64, order="C", copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SplitData:
    """Prompt/answer pairs for one split of one task."""

    prompts: np.ndarray  # (n, T_p) int64
    answers: np.ndarray  # (n, 2) int64, each row [answer token, EOS]

    def __post_init__(self):
        p = _owned_int(self.prompts)
        a = _owned_int(self.answers)
        if p.ndim != 2 or a.ndim != 2 or a.shape != (p.shape[0], 2):
            raise ValueError(
                f"mismatched split shapes: prompts {p.shape}, answers {a.shape}"
            )
        object.__setattr__(self, "prompts", p)
        object.__setattr__(self, "answers", a)

    @property
    def count(self) -> int:
        return self.prompts.shape[0]


@dataclass(frozen=True)
class Task:
    task_id: int
    alphabet: np.ndarray    # own prompt tokens
    answer_map: np.ndarray  # (vocab,) token -> answer token, -1 off the prompt pool
    train: SplitData
    router_fit: SplitData
    eval: SplitData

    def __post_init__(self):
        object.__setattr__(self, "alphabet", _owned_int(self.alphabet))
        object.__setattr__(self, "answer_map", _owned_int(self.answer_map))


@dataclass(frozen=True)
class TaskStream:
    spec: StreamSpec
    seed: int
    tasks: tuple

    def training_data(self, task_id: int) -> SplitData:
        return self.tasks[task_id].train

    def router_data(self, task_id: int) -> SplitData:
        return self.tasks[task_id].router_fit

    def eval_data(self, task_id: int) -> SplitData:
        return self.tasks[task_id].eval

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.spec), sort_keys=True).encode())
        h.update(str(self.seed).encode())
        for t in self.tasks:
            h.update(t.alphabet.tobytes())
            h.update(t.answer_map.tobytes())
            for split in (t.train, t.router_fit, t.eval):
                h.update(split.prompts.tobytes())
                h.update(split.answers.tobytes())
        return h.hexdigest()

    def to_payload(self) -> dict:
        tasks = []
        for t in self.tasks:
            tasks.append(
                {
                    "task_id": t.task_id,
                    "alphabet": t.alphabet.tolist(),
                    "answer_map": t.answer_map.tolist(),
                    "splits": {
                        name: {
                            "prompts": split.prompts.tolist(),
                            "answers": split.answers.tolist(),
                        }
                        for name, split in (
                            ("train", t.train),
                            ("router_fit", t.router_fit),
                            ("eval", t.eval),
                        )
                    },
                }
            )
        return {
            "spec": asdict(self.spec),
            "seed": self.seed,
            "digest": self.digest(),
            "tasks": tasks,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "TaskStream":
        spec = StreamSpec(**payload["spec"])
        tasks = []
        for entry in payload["tasks"]:
            splits = {
                name: SplitData(
                    prompts=np.asarray(entry["splits"][name]["prompts"]),
                    answers=np.asarray(entry["splits"][name]["answers"]),
                )
                for name in ("train", "router_fit", "eval")
            }
            tasks.append(
                Task(
                    task_id=entry["task_id"],
                    alphabet=np.asarray(entry["alphabet"]),
                    answer_map=np.asarray(entry["answer_map"]),
                    train=splits["train"],
                    router_fit=splits["router_fit"],
                    eval=splits["eval"],
                )
            )
        stream = cls(spec=spec, seed=int(payload["seed"]), tasks=tuple(tasks))
        if "digest" in payload and payload["digest"] != stream.digest():
            raise ValueError("stream artifact digest mismatch; content is corrupt")
        return stream


def _draw_unique_prompts(rng, n, spec, alphabet):
    """Mixture draw with duplicate rows redrawn until all n are distinct."""
    per = alphabet.shape[0]
    T = spec.prompt_len

    def draw(count):
        own = alphabet[rng.integers(0, per, size=(count, T))]
        shared = 1 + rng.integers(0, spec.prompt_pool, size=(count, T))
        use_own = rng.random((count, T)) < spec.separation
        return np.where(use_own, own, shared)

    prompts = draw(n)
    for _ in range(_MAX_REDRAWS):
        _, first = np.unique(prompts, axis=0, return_index=True)
        if first.shape[0] == n:
            return prompts
        dup_rows = np.setdiff1d(np.arange(n), first)
        prompts[dup_rows] = draw(dup_rows.shape[0])
    raise RuntimeError(
        f"could not draw {n} distinct prompts from alphabet of size {per}; "
        "shrink samples_per_task or grow prompt_len"
    )


def generate_task_stream(spec: StreamSpec, seed: int) -> TaskStream:
    """Materialize a stream; identical (spec, seed) give identical bits."""
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    tasks = []
    per = spec.tokens_per_task
    for tid in range(spec.num_tasks):
        rng = np.random.default_rng(np.random.SeedSequence([seed, tid]))
        alphabet = np.arange(1 + tid * per, 1 + (tid + 1) * per, dtype=np.int64)
        answer_map = np.full(spec.vocab, -1, dtype=np.int64)
        answer_map[1:1 + spec.prompt_pool] = spec.answer_start + rng.integers(
            0, spec.answer_pool, size=spec.prompt_pool
        )
        prompts = _draw_unique_prompts(rng, spec.samples_per_task, spec, alphabet)
        answers = np.stack(
            [answer_map[prompts[:, -1]], np.full(spec.samples_per_task, EOS)],
            axis=1,
        )
        n_train, n_router, n_eval = spec.split_counts
        cut1, cut2 = n_train, n_train + n_router
        tasks.append(
            Task(
                task_id=tid,
                alphabet=alphabet,
                answer_map=answer_map,
                train=SplitData(prompts[:cut1], answers[:cut1]),
                router_fit=SplitData(prompts[cut1:cut2], answers[cut1:cut2]),
                eval=SplitData(prompts[cut2:], answers[cut2:]),
            )
        )
    return TaskStream(spec=spec, seed=int(seed), tasks=tuple(tasks))


def generic_prompts(spec: StreamSpec, seed: int, count: int) -> np.ndarray:
    """Task-agnostic prompts drawn from the generic pool."""
    if spec.generic_pool < 1:
        raise ValueError("vocab layout leaves no generic pool tokens")
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, spec.num_tasks, 1]))
    return spec.generic_start + rng.integers(
        0, spec.generic_pool, size=(count, spec.prompt_len)
    )
