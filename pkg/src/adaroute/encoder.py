"""Frozen layered encoder with per-task low-rank adapters.

The encoder is a token embedding followed by a stack of residual
position-wise feed-forward blocks (pre-norm, affine -> GELU -> affine),
split at a configurable layer. The lower segment feeds the router; the
upper segment carries task behavior. Base weights are drawn once from a
seed and never change; all task capacity lives in low-rank factor pairs
attached to every affine map above the split, trained by exact manual
backpropagation of the masked cross-entropy loss.

Blocks mix nothing across positions, so the next-token map the upper
segment can realize is a per-token function; task streams are built
accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
ADAPTED_SLOTS = ("w1", "w2")

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    # d/dx [0.5 x (1 + erf(x/sqrt 2))] = Phi(x) + x phi(x)
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_grad(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64, order="C", copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture and seed of the frozen base."""

    hidden: int = 32
    ffn_hidden: int = 64
    total_layers: int = 4
    split_layer: int = 2
    vocab: int = 64
    block_kind: str = "residual_ffn"
    seed: int = 101
    eos_token: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.ffn_hidden < 1:
            raise ValueError("hidden and ffn_hidden must be positive")
        if self.total_layers < 2:
            raise ValueError("need at least 2 layers to split")
        if not 1 <= self.split_layer < self.total_layers:
            raise ValueError(
                f"split_layer must satisfy 1 <= split < {self.total_layers}, "
                f"got {self.split_layer}"
            )
        if self.vocab < 2:
            raise ValueError("vocab must hold at least eos plus one token")
        if self.block_kind != "residual_ffn":
            raise ValueError(f"unknown block kind {self.block_kind!r}")
        if not 0 <= self.eos_token < self.vocab:
            raise ValueError("eos_token must be a valid token id")

    @property
    def adapted_layers(self) -> tuple:
        """1-based indices of the blocks that carry adapters."""
        return tuple(range(self.split_layer + 1, self.total_layers + 1))


@dataclass(frozen=True)
class _Block:
    ln_g: np.ndarray
    ln_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class LowRankAdapter:
    """Per-task factors: (layer, slot) -> (B, A) with delta = B @ A.

    B starts at zero and A from a seeded Gaussian, so a fresh adapter is
    an exact no-op on the forward pass.
    """

    task_id: int
    rank: int
    factors: dict  # (layer:int 1-based, slot:str) -> (B, A)


class LayeredEncoder:
    """Frozen stack split into a lower (router) and upper (task) segment."""

    def __init__(self, config, embed, blocks, final_ln_g, final_ln_b, head, head_b):
        self.config = config
        self.embed = _frozen(embed)
        self.blocks = tuple(
            _Block(*(_frozen(getattr(b, f)) for f in
                     ("ln_g", "ln_b", "w1", "b1", "w2", "b2")))
            for b in blocks
        )
        self.final_ln_g = _frozen(final_ln_g)
        self.final_ln_b = _frozen(final_ln_b)
        self.head = _frozen(head)
        self.head_b = _frozen(head_b)
        if self.embed.shape != (config.vocab, config.hidden):
            raise ValueError("embedding shape does not match config")
        if len(self.blocks) != config.total_layers:
            raise ValueError("block count does not match config")

    @classmethod
    def from_config(cls, config: EncoderConfig) -> "LayeredEncoder":
        d, f, v = config.hidden, config.ffn_hidden, config.vocab
        rng = np.random.default_rng(config.seed)
        embed = rng.standard_normal((v, d))
        blocks = []
        for _ in range(config.total_layers):
            blocks.append(
                _Block(
                    ln_g=np.ones(d),
                    ln_b=np.zeros(d),
                    w1=rng.standard_normal((d, f)) / math.sqrt(d),
                    b1=np.zeros(f),
                    w2=rng.standard_normal((f, d)) / math.sqrt(f),
                    b2=np.zeros(d),
                )
            )
        head = rng.standard_normal((d, v)) / math.sqrt(d)
        return cls(
            config,
            embed=embed,
            blocks=blocks,
            final_ln_g=np.ones(d),
            final_ln_b=np.zeros(d),
            head=head,
            head_b=np.zeros(v),
        )

    def base_bytes(self) -> bytes:
        """All frozen weights in fixed order, for immutability checks."""
        parts = [self.embed.tobytes()]
        for b in self.blocks:
            for f in ("ln_g", "ln_b", "w1", "b1", "w2", "b2"):
                parts.append(getattr(b, f).tobytes())
        parts += [
            self.final_ln_g.tobytes(),
            self.final_ln_b.tobytes(),
            self.head.tobytes(),
            self.head_b.tobytes(),
        ]
        return b"".join(parts)

    def _check_tokens(self, tokens) -> np.ndarray:
        t = np.asarray(tokens)
        if t.ndim != 1 or t.shape[0] == 0:
            raise ValueError(f"token sequence must be 1-d and nonempty, got shape {t.shape}")
        if not np.issubdtype(t.dtype, np.integer):
            raise ValueError(f"tokens must be integers, got dtype {t.dtype}")
        if t.min() < 0 or t.max() >= self.config.vocab:
            raise ValueError(
                f"token ids must lie in [0, {self.config.vocab}), "
                f"got range [{t.min()}, {t.max()}]"
            )
        return t.astype(np.int64)

    def _factors(self, adapter, layer):
        if adapter is None:
            return None, None
        return (
            adapter.factors.get((layer, "w1")),
            adapter.factors.get((layer, "w2")),
        )

    def _block_forward(self, X, layer, adapter=None):
        blk = self.blocks[layer - 1]
        fac1, fac2 = self._factors(adapter, layer)
        ln, _ = _layer_norm(X, blk.ln_g, blk.ln_b)
        U = ln @ blk.w1 + blk.b1
        if fac1 is not None:
            U = U + (ln @ fac1[0]) @ fac1[1]
        G = gelu(U)
        V = G @ blk.w2 + blk.b2
        if fac2 is not None:
            V = V + (G @ fac2[0]) @ fac2[1]
        return X + V

    def forward_lower(self, tokens) -> np.ndarray:
        """Embed and run the lower segment; (T,) ids -> (T, hidden)."""
        t = self._check_tokens(tokens)
        X = self.embed[t]
        for layer in range(1, self.config.split_layer + 1):
            X = self._block_forward(X, layer)
        return X

    def forward_upper(self, hidden, adapter=None) -> np.ndarray:
        """Run the upper segment on lower-segment output; (T, d) -> (T, vocab)."""
        X = np.asarray(hidden, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.config.hidden:
            raise ValueError(
                f"hidden states must be (T, {self.config.hidden}), got shape {X.shape}"
            )
        for layer in range(self.config.split_layer + 1, self.config.total_layers + 1):
            X = self._block_forward(X, layer, adapter)
        Xf, _ = _layer_norm(X, self.final_ln_g, self.final_ln_b)
        return Xf @ self.head + self.head_b

    def block_preactivation(self, X, layer, adapter=None) -> np.ndarray:
        """First-affine pre-activation of one block given that block's input.

        Introspection hook used to verify that adapter deltas enter the
        pre-activation linearly.
        """
        if not 1 <= layer <= self.config.total_layers:
            raise ValueError(f"layer must lie in [1, {self.config.total_layers}]")
        blk = self.blocks[layer - 1]
        fac1, _ = self._factors(adapter, layer)
        ln, _ = _layer_norm(np.asarray(X, dtype=np.float64), blk.ln_g, blk.ln_b)
        U = ln @ blk.w1 + blk.b1
        if fac1 is not None:
            U = U + (ln @ fac1[0]) @ fac1[1]
        return U

    def generate(self, prompt, adapter=None, max_len: int = 8) -> np.ndarray:
        """Greedy continuation of a prompt.

        Appends argmax tokens one at a time, stopping at the end-of-sequence
        token (which is not returned) or after max_len tokens.
        """
        if max_len < 1:
            raise ValueError(f"max_len must be at least 1, got {max_len}")
        seq = list(self._check_tokens(prompt))
        out = []
        for _ in range(max_len):
            H = self.forward_lower(np.asarray(seq, dtype=np.int64))
            logits = self.forward_upper(H, adapter)
            nxt = int(np.argmax(logits[-1]))
            if nxt == self.config.eos_token:
                break
            out.append(nxt)
            seq.append(nxt)
        return np.asarray(out, dtype=np.int64)


def adapter_delta(adapter: LowRankAdapter, layer: int, slot: str = "w1") -> np.ndarray:
    """Dense update B @ A for one adapted affine map."""
    if slot not in ADAPTED_SLOTS:
        raise ValueError(f"slot must be one of {ADAPTED_SLOTS}, got {slot!r}")
    key = (layer, slot)
    if key not in adapter.factors:
        raise ValueError(f"layer {layer} slot {slot!r} is not adapted")
    B, A = adapter.factors[key]
    return B @ A


def new_adapter(config: EncoderConfig, task_id: int, rank: int, seed) -> LowRankAdapter:
    """Fresh adapter: B zero, A Gaussian with std 1/sqrt(rank)."""
    if rank < 1:
        raise ValueError(f"rank must be positive, got {rank}")
    d, f = config.hidden, config.ffn_hidden
    dims = {"w1": (d, f), "w2": (f, d)}
    rng = np.random.default_rng(seed)
    std = 1.0 / math.sqrt(rank)
    factors = {}
    for layer in config.adapted_layers:
        for slot in ADAPTED_SLOTS:
            din, dout = dims[slot]
            B = np.zeros((din, rank))
            A = rng.standard_normal((rank, dout)) * std
            B.setflags(write=False)
            A.setflags(write=False)
            factors[(layer, slot)] = (B, A)
    return LowRankAdapter(task_id=int(task_id), rank=int(rank), factors=factors)


def adapter_bytes(adapter: LowRankAdapter) -> bytes:
    """Factor contents in fixed key order, for bitwise comparisons."""
    parts = [f"{adapter.task_id}:{adapter.rank}".encode()]
    for key in sorted(adapter.factors):
        B, A = adapter.factors[key]
        parts.append(repr(key).encode())
        parts.append(B.tobytes())
        parts.append(A.tobytes())
    return b"".join(parts)


class AdapterBank:
    """Insertion-ordered task id -> adapter registry.

    Entries are write-once: adding a duplicate id is an error and nothing
    here ever mutates a stored adapter.
    """

    def __init__(self):
        self._adapters = {}

    def add(self, adapter: LowRankAdapter) -> None:
        if adapter.task_id in self._adapters:
            raise ValueError(f"task {adapter.task_id} already has an adapter")
        self._adapters[adapter.task_id] = adapter

    def get(self, task_id: int, default=None):
        return self._adapters.get(task_id, default)

    def __contains__(self, task_id: int) -> bool:
        return task_id in self._adapters

    def __len__(self) -> int:
        return len(self._adapters)

    @property
    def task_ids(self) -> tuple:
        return tuple(self._adapters)


@dataclass(frozen=True)
class AdapterHyper:
    """Training knobs for one task adapter."""

    rank: int = 4
    learning_rate: float = 0.5
    epochs: int = 300
    seed: int = 0


def _prepare_batch(encoder: LayeredEncoder, prompts, targets):
    P = np.asarray(prompts)
    T = np.asarray(targets)
    if P.ndim != 2 or P.shape[0] == 0 or P.shape[1] == 0:
        raise ValueError(f"prompts must be (n, T_p) and nonempty, got shape {P.shape}")
    if T.ndim != 2 or T.shape[0] != P.shape[0] or T.shape[1] == 0:
        raise ValueError(
            f"targets must be ({P.shape[0]}, T_a) with T_a >= 1, got shape {T.shape}"
        )
    seq = np.concatenate([P, T], axis=1)
    ids = encoder._check_tokens(seq.reshape(-1)).reshape(seq.shape)
    inputs = ids[:, :-1]
    gold = ids[:, 1:]
    # loss only where the next token is a target token
    mask = np.zeros_like(inputs, dtype=bool)
    mask[:, P.shape[1] - 1:] = True
    H_low = encoder.forward_lower(inputs.reshape(-1))
    return H_low, gold.reshape(-1), mask.reshape(-1)


def _upper_with_caches(encoder: LayeredEncoder, factors, X):
    cfg = encoder.config
    caches = []
    for layer in range(cfg.split_layer + 1, cfg.total_layers + 1):
        blk = encoder.blocks[layer - 1]
        B1, A1 = factors[(layer, "w1")]
        B2, A2 = factors[(layer, "w2")]
        ln, lncache = _layer_norm(X, blk.ln_g, blk.ln_b)
        lnB1 = ln @ B1
        U = ln @ blk.w1 + blk.b1 + lnB1 @ A1
        G = gelu(U)
        gB2 = G @ B2
        V = G @ blk.w2 + blk.b2 + gB2 @ A2
        caches.append((layer, ln, lncache, U, G, lnB1, gB2))
        X = X + V
    Xf, fcache = _layer_norm(X, encoder.final_ln_g, encoder.final_ln_b)
    logits = Xf @ encoder.head + encoder.head_b
    return logits, caches, fcache


def _masked_ce(logits, gold, mask):
    m = logits[mask]
    g = gold[mask]
    n = g.shape[0]
    if n == 0:
        raise ValueError("loss mask selects no positions")
    z = m - m.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -float(logp[np.arange(n), g].mean())
    dm = np.exp(logp)
    dm[np.arange(n), g] -= 1.0
    dm /= n
    dlogits = np.zeros_like(logits)
    dlogits[mask] = dm
    return loss, dlogits


def _loss_and_grads(encoder, factors, H_low, gold, mask):
    logits, caches, fcache = _upper_with_caches(encoder, factors, H_low)
    loss, dlogits = _masked_ce(logits, gold, mask)
    dXf = dlogits @ encoder.head.T
    dX = _layer_norm_grad(dXf, encoder.final_ln_g, fcache)
    grads = {}
    for layer, ln, lncache, U, G, lnB1, gB2 in reversed(caches):
        blk = encoder.blocks[layer - 1]
        B1, A1 = factors[(layer, "w1")]
        B2, A2 = factors[(layer, "w2")]
        dV = dX  # residual: dX flows on unchanged below
        dA2 = gB2.T @ dV
        dB2 = G.T @ (dV @ A2.T)
        dG = dV @ blk.w2.T + (dV @ A2.T) @ B2.T
        dU = dG * gelu_grad(U)
        dA1 = lnB1.T @ dU
        dB1 = ln.T @ (dU @ A1.T)
        dln = dU @ blk.w1.T + (dU @ A1.T) @ B1.T
        dX = dX + _layer_norm_grad(dln, blk.ln_g, lncache)
        grads[(layer, "w1")] = (dB1, dA1)
        grads[(layer, "w2")] = (dB2, dA2)
    return loss, grads


def _complete_factors(encoder, adapter):
    cfg = encoder.config
    missing = [
        (layer, slot)
        for layer in cfg.adapted_layers
        for slot in ADAPTED_SLOTS
        if (layer, slot) not in adapter.factors
    ]
    if missing:
        raise ValueError(f"adapter is missing factors for {missing}")
    return {k: adapter.factors[k] for k in adapter.factors}


def adapter_loss_and_grads(encoder, adapter, prompts, targets):
    """Masked cross-entropy of target tokens plus exact factor gradients.

    Returns (loss, grads) with grads keyed like adapter.factors. This is
    the quantity train_adapter descends; exposed so the gradients can be
    checked against finite differences.
    """
    factors = _complete_factors(encoder, adapter)
    H_low, gold, mask = _prepare_batch(encoder, prompts, targets)
    return _loss_and_grads(encoder, factors, H_low, gold, mask)


def adapter_loss(encoder, adapter, prompts, targets) -> float:
    factors = _complete_factors(encoder, adapter)
    H_low, gold, mask = _prepare_batch(encoder, prompts, targets)
    logits, _, _ = _upper_with_caches(encoder, factors, H_low)
    loss, _ = _masked_ce(logits, gold, mask)
    return loss


def train_adapter(
    encoder: LayeredEncoder,
    prompts,
    targets,
    hyper: AdapterHyper,
    task_id: int = 0,
    init_adapter: LowRankAdapter | None = None,
    loss_history: list | None = None,
) -> LowRankAdapter:
    """Fit one adapter by full-batch gradient descent.

    The lower segment is run once (it is frozen and adapter-free), then
    each epoch recomputes the upper pass, takes exact gradients of the
    masked cross-entropy with respect to every B and A, and steps with a
    fixed learning rate. Deterministic given (data, hyper); the base and
    any init_adapter are left untouched. epochs = 0 returns the fresh
    zero-delta adapter unchanged.
    """
    if hyper.epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {hyper.epochs}")
    if hyper.learning_rate <= 0:
        raise ValueError(f"learning_rate must be positive, got {hyper.learning_rate}")
    H_low, gold, mask = _prepare_batch(encoder, prompts, targets)
    if init_adapter is None:
        start = new_adapter(encoder.config, task_id, hyper.rank, hyper.seed)
    else:
        start = init_adapter
    _complete_factors(encoder, start)
    factors = {
        k: (np.array(B, copy=True), np.array(A, copy=True))
        for k, (B, A) in start.factors.items()
    }
    lr = hyper.learning_rate
    for _ in range(hyper.epochs):
        loss, grads = _loss_and_grads(encoder, factors, H_low, gold, mask)
        if loss_history is not None:
            loss_history.append(loss)
        for key, (B, A) in factors.items():
            gB, gA = grads[key]
            B -= lr * gB
            A -= lr * gA
    if loss_history is not None:
        final, _, _ = _upper_with_caches(encoder, factors, H_low)
        loss_history.append(_masked_ce(final, gold, mask)[0])
    for B, A in factors.values():
        B.setflags(write=False)
        A.setflags(write=False)
    return LowRankAdapter(task_id=int(task_id), rank=start.rank, factors=factors)
