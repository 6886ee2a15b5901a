"""Lot featurization, running normalization, and the attention scorer.

The scoring network embeds each queued lot, mixes the queue through one
head of scaled dot-product self-attention (with a residual connection),
and maps each mixed representation through a shared two-layer tanh head
to a scalar score.  The actor-critic variant adds a value head over the
mean-pooled representations concatenated with fab-state features.

Queue-order reductions (attention softmax denominators, the attended sums,
and the critic's mean pool) are computed over value-sorted addends, which
makes the forward pass *exactly* permutation equivariant: reordering the
queue reorders the scores bit-for-bit and leaves the value untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .fabmodel import FabModel, Lot, Tool

N_LOT_FEATURES = 11
N_FAB_FEATURES = 8

STD_EPS = 1e-6


class NormalizerError(RuntimeError):
    pass


class DescriptorMismatch(ValueError):
    pass


class MissingCriticError(RuntimeError):
    """The value head was requested from an actor-only parameter vector."""


# ---------------------------------------------------------------------------
# Streaming statistics
# ---------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Mergeable per-feature mean/variance (Chan's parallel form).

    ``update`` folds in a batch of rows; ``merge`` combines two partial
    statistics exactly as if their streams had been concatenated.  A frozen
    instance ignores updates, which is how evaluation runs keep the
    statistics fixed.
    """

    dim: int
    count: float = 0.0
    mean: np.ndarray = None  # type: ignore[assignment]
    m2: np.ndarray = None  # type: ignore[assignment]
    frozen: bool = False

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    def copy(self, frozen: bool | None = None) -> "RunningStats":
        return RunningStats(
            dim=self.dim,
            count=self.count,
            mean=self.mean.copy(),
            m2=self.m2.copy(),
            frozen=self.frozen if frozen is None else frozen,
        )

    def update(self, rows: np.ndarray) -> None:
        if self.frozen:
            return
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        n = rows.shape[0]
        if n == 0:
            return
        bmean = rows.mean(axis=0)
        bm2 = ((rows - bmean) ** 2).sum(axis=0)
        self._merge_raw(float(n), bmean, bm2)

    def merge(self, other: "RunningStats") -> None:
        if self.frozen:
            return
        if other.dim != self.dim:
            raise NormalizerError("cannot merge statistics of different widths")
        self._merge_raw(other.count, other.mean, other.m2)

    def _merge_raw(self, n_b: float, mean_b: np.ndarray, m2_b: np.ndarray) -> None:
        if n_b == 0:
            return
        n_a = self.count
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta * delta * (n_a * n_b / n)
        self.count = n

    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros(self.dim)
        return np.sqrt(self.m2 / (self.count - 1))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Z-score ``x`` (rows or a single vector) with clamped std."""
        if not self.frozen and self.count < 2:
            raise NormalizerError(
                "normalizer needs at least 2 observations (or frozen statistics)"
            )
        std = np.maximum(self.std(), STD_EPS)
        return (np.asarray(x, dtype=np.float64) - self.mean) / std


def merged(a: RunningStats, b: RunningStats) -> RunningStats:
    out = a.copy(frozen=False)
    out.merge(b)
    return out


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------


def featurize_lot(lot: Lot, tool: Tool, sim) -> np.ndarray:
    """Raw (unnormalized) 11-feature vector for one eligible lot.

    The two batch-related trailing features are zeroed when the deciding
    tool is not a batch tool.
    """
    model: FabModel = sim.model
    now = sim.clock
    step = model.step_of(lot)
    times = step.processing_time_hours
    own_time = times[tool.id]
    n_alt = len(times) - 1
    faster = 1.0 if any(t < own_time for t in times.values()) else 0.0
    setup = tool.setup_duration(sim.machines[tool.id].setup_family, step.setup_id)
    group = model.groups_by_id[tool.group_id]
    is_batch = 1.0 if group.batching is not None else 0.0
    pct_full = 0.0
    if group.batching is not None and step.batch_eligible:
        key = model.batch_family(group.id, lot.product_id, lot.current_step)
        avail = 0
        for other_id in sim.queues[group.id]:
            other = sim.lots[other_id]
            if model.batch_family(group.id, other.product_id, other.current_step) == key:
                avail += 1
        pct_full = min(1.0, avail / group.batching.max_size)
    return np.array(
        [
            lot.due_date - now,
            lot.step_due_dates[lot.current_step] - now,
            now - lot.step_arrival_time,
            float(n_alt),
            faster,
            own_time,
            setup,
            model.remaining_min_ct(lot.product_id, lot.current_step),
            float(lot.wafer_count),
            is_batch,
            pct_full,
        ],
        dtype=np.float64,
    )


def featurize_queue(lot_ids: list[int], tool: Tool, sim) -> np.ndarray:
    return np.stack([featurize_lot(sim.lots[lid], tool, sim) for lid in lot_ids])


# ---------------------------------------------------------------------------
# Architecture and flat parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchDescriptor:
    n_lot_features: int = N_LOT_FEATURES
    embed_dim: int = 16
    key_dim: int = 16
    ff_hidden: int = 32
    critic: bool = False
    n_fab_features: int = N_FAB_FEATURES
    critic_hidden: int = 32

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        f, e, k, h = self.n_lot_features, self.embed_dim, self.key_dim, self.ff_hidden
        shapes = [
            ("W_embed", (f, e)),
            ("b_embed", (e,)),
            ("W_query", (e, k)),
            ("b_query", (k,)),
            ("W_key", (e, k)),
            ("b_key", (k,)),
            ("W_value", (e, e)),
            ("b_value", (e,)),
            ("W_ff1", (e, h)),
            ("b_ff1", (h,)),
            ("W_ff2", (h, 1)),
            ("b_ff2", (1,)),
        ]
        if self.critic:
            c = e + self.n_fab_features
            ch = self.critic_hidden
            shapes += [
                ("W_critic1", (c, ch)),
                ("b_critic1", (ch,)),
                ("W_critic2", (ch, 1)),
                ("b_critic2", (1,)),
            ]
        return shapes

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchDescriptor":
        return cls(**json.loads(text))


def unflatten_params(theta: np.ndarray, desc: ArchDescriptor) -> dict[str, np.ndarray]:
    """Views into ``theta`` per named array (no copies)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (desc.param_count,):
        raise ValueError(
            f"parameter vector has length {theta.shape}, descriptor needs {desc.param_count}"
        )
    out = {}
    offset = 0
    for name, shape in desc.param_shapes():
        size = int(np.prod(shape))
        out[name] = theta[offset : offset + size].reshape(shape)
        offset += size
    return out


def flatten_params(arrays: dict[str, np.ndarray], desc: ArchDescriptor) -> np.ndarray:
    parts = []
    for name, shape in desc.param_shapes():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        parts.append(arr.ravel())
    return np.concatenate(parts)


@dataclass
class PolicyParams:
    """Flat parameter vector plus its architecture descriptor."""

    theta: np.ndarray
    desc: ArchDescriptor
    _views: dict[str, np.ndarray] = field(default=None, repr=False, compare=False)  # type: ignore[assignment]
    # fused query/key/value projection, precomputed for the forward pass
    _qkv_w: np.ndarray = field(default=None, repr=False, compare=False)  # type: ignore[assignment]
    _qkv_b: np.ndarray = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        self._views = unflatten_params(self.theta, self.desc)
        v = self._views
        self._qkv_w = np.concatenate([v["W_query"], v["W_key"], v["W_value"]], axis=1)
        self._qkv_b = np.concatenate([v["b_query"], v["b_key"], v["b_value"]])

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    @classmethod
    def zeros(cls, desc: ArchDescriptor) -> "PolicyParams":
        return cls(np.zeros(desc.param_count), desc)

    @classmethod
    def random(cls, desc: ArchDescriptor, rng: np.random.Generator, scale: float = 0.1) -> "PolicyParams":
        return cls(rng.normal(0.0, scale, size=desc.param_count), desc)


# expected_remaining_ct's position in the lot feature vector
REMAINING_CT_FEATURE = 7


def srpt_like_params(desc: ArchDescriptor) -> PolicyParams:
    """Parameters whose score decreases monotonically in the expected
    remaining cycle time, reproducing shortest-remaining-first dispatch
    exactly (z-scoring and tanh preserve the ordering).  Useful as a
    baseline-equivalent starting point for evolutionary search.
    """
    p = PolicyParams.zeros(desc)
    p["W_embed"][REMAINING_CT_FEATURE, 0] = 1.0
    p["W_ff1"][0, 0] = 0.5
    p["W_ff2"][0, 0] = -2.0
    return PolicyParams(p.theta, desc)


# ---------------------------------------------------------------------------
# Order-exact reductions
# ---------------------------------------------------------------------------


def _lin(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # broadcast-multiply then reduce over the input axis; the reduction
    # order never depends on the queue axis, so row results are identical
    # regardless of row position
    return (x[:, :, None] * w[None, :, :]).sum(axis=1) + b


def _sorted_sum(x: np.ndarray, axis: int) -> np.ndarray:
    # summing value-sorted addends makes the result a function of the
    # addend multiset only, i.e. exact under queue permutations
    return np.sort(x, axis=axis).sum(axis=axis)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _forward(feats: np.ndarray, params: PolicyParams, fab: np.ndarray | None = None):
    """Shared forward pass; returns (scores, value-or-None, cache)."""
    x = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    p = params
    dk = p.desc.key_dim
    e = _lin(x, p["W_embed"], p["b_embed"])
    qkv = _lin(e, p._qkv_w, p._qkv_b)
    q, k, v = qkv[:, :dk], qkv[:, dk : 2 * dk], qkv[:, 2 * dk :]
    scale = 1.0 / np.sqrt(dk)
    if x.shape[0] == 1:
        # single-lot queue: the attention weight is exactly 1
        attn = np.ones((1, 1))
        z = v.copy()
    else:
        logits = (q[:, None, :] * k[None, :, :]).sum(axis=2) * scale
        shifted = logits - logits.max(axis=1, keepdims=True)
        expl = np.exp(shifted)
        denom = _sorted_sum(expl, axis=1)
        attn = expl / denom[:, None]
        z = _sorted_sum(attn[:, :, None] * v[None, :, :], axis=1)
    h = e + z
    pre1 = _lin(h, p["W_ff1"], p["b_ff1"])
    u = np.tanh(pre1)
    scores = _lin(u, p["W_ff2"], p["b_ff2"])[:, 0]

    value = None
    vcache = None
    if fab is not None:
        if not p.desc.critic:
            raise MissingCriticError("parameter vector has no value head")
        pooled = _sorted_sum(h, axis=0) / h.shape[0]
        c = np.concatenate([pooled, np.asarray(fab, dtype=np.float64)])
        prec = c @ p["W_critic1"] + p["b_critic1"]
        hc = np.tanh(prec)
        value = float(hc @ p["W_critic2"][:, 0] + p["b_critic2"][0])
        vcache = (c, hc)

    cache = (x, e, q, k, v, attn, z, h, u, scale, vcache)
    return scores, value, cache


def attention_scores(feats: np.ndarray, params: PolicyParams) -> np.ndarray:
    """One scalar score per queued lot (exactly permutation equivariant)."""
    scores, _, _ = _forward(feats, params)
    return scores


def value_estimate(feats: np.ndarray, fab: np.ndarray, params: PolicyParams) -> float:
    """Critic scalar over pooled lot representations and fab-state features."""
    _, value, _ = _forward(feats, params, fab=fab)
    return value


def _backward(cache, dscores: np.ndarray, dvalue: float, params: PolicyParams, grads: dict[str, np.ndarray]):
    """Accumulate d(loss)/d(params) into ``grads`` for one decision sample."""
    x, e, q, k, v, attn, z, h, u, scale, vcache = cache
    p = params
    n = h.shape[0]

    # score head
    du = dscores[:, None] * p["W_ff2"][None, :, 0]
    grads["W_ff2"] += u.T @ dscores[:, None]
    grads["b_ff2"] += np.array([dscores.sum()])
    dpre1 = du * (1.0 - u * u)
    grads["W_ff1"] += h.T @ dpre1
    grads["b_ff1"] += dpre1.sum(axis=0)
    dh = dpre1 @ p["W_ff1"].T

    # critic head
    if dvalue != 0.0:
        c, hc = vcache
        dhc = dvalue * p["W_critic2"][:, 0]
        grads["W_critic2"] += hc[:, None] * dvalue
        grads["b_critic2"] += np.array([dvalue])
        dprec = dhc * (1.0 - hc * hc)
        grads["W_critic1"] += c[:, None] @ dprec[None, :]
        grads["b_critic1"] += dprec
        dc = p["W_critic1"] @ dprec
        dh = dh + dc[: e.shape[1]][None, :] / n

    dz = dh
    dattn = dz @ v.T
    dv = attn.T @ dz
    # softmax backward per row
    dlogits = attn * (dattn - (dattn * attn).sum(axis=1, keepdims=True))
    dlogits *= scale
    dq = dlogits @ k
    dk = dlogits.T @ q

    de = dh.copy()
    de += dq @ p["W_query"].T
    grads["W_query"] += e.T @ dq
    grads["b_query"] += dq.sum(axis=0)
    de += dk @ p["W_key"].T
    grads["W_key"] += e.T @ dk
    grads["b_key"] += dk.sum(axis=0)
    de += dv @ p["W_value"].T
    grads["W_value"] += e.T @ dv
    grads["b_value"] += dv.sum(axis=0)

    grads["W_embed"] += x.T @ de
    grads["b_embed"] += de.sum(axis=0)


def zero_grads(desc: ArchDescriptor) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    flat = np.zeros(desc.param_count)
    return flat, unflatten_params(flat, desc)


# ---------------------------------------------------------------------------
# Action selection
# ---------------------------------------------------------------------------


def select_es(scores: np.ndarray) -> int:
    """Argmax selection; ties resolve to the lowest index."""
    if len(scores) == 0:
        raise ValueError("cannot select from an empty queue")
    return int(np.argmax(scores))


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores)
    e = np.exp(shifted)
    return e / e.sum()


def log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores)
    return shifted - np.log(np.exp(shifted).sum())


def select_ppo(scores: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Sample an index from softmax(scores); returns (index, log-probability)."""
    if len(scores) == 0:
        raise ValueError("cannot select from an empty queue")
    probs = softmax(scores)
    idx = int(rng.choice(len(probs), p=probs / probs.sum()))
    return idx, float(log_softmax(scores)[idx])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: PolicyParams, lot_norm: RunningStats, fab_norm: RunningStats | None = None, extra: dict | None = None) -> None:
    """Versioned policy checkpoint with the descriptor embedded."""
    payload = {
        "version": np.array(CHECKPOINT_VERSION),
        "descriptor": np.frombuffer(params.desc.to_json().encode(), dtype=np.uint8),
        "theta": params.theta,
        "lot_count": np.array(lot_norm.count),
        "lot_mean": lot_norm.mean,
        "lot_m2": lot_norm.m2,
    }
    if fab_norm is not None:
        payload.update(
            fab_count=np.array(fab_norm.count), fab_mean=fab_norm.mean, fab_m2=fab_norm.m2
        )
    if extra:
        payload["extra"] = np.frombuffer(json.dumps(extra).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path, expected_desc: ArchDescriptor | None = None):
    """Load a checkpoint; raises DescriptorMismatch on architecture drift.

    Returns (params, lot_norm, fab_norm_or_None, extra_dict).
    """
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise DescriptorMismatch(f"unsupported checkpoint version {version}")
        desc = ArchDescriptor.from_json(bytes(data["descriptor"]).decode())
        if expected_desc is not None and desc != expected_desc:
            raise DescriptorMismatch(
                f"checkpoint descriptor {desc} does not match expected {expected_desc}"
            )
        params = PolicyParams(data["theta"].copy(), desc)
        lot_norm = RunningStats(
            dim=len(data["lot_mean"]),
            count=float(data["lot_count"]),
            mean=data["lot_mean"].copy(),
            m2=data["lot_m2"].copy(),
            frozen=True,
        )
        fab_norm = None
        if "fab_mean" in data:
            fab_norm = RunningStats(
                dim=len(data["fab_mean"]),
                count=float(data["fab_count"]),
                mean=data["fab_mean"].copy(),
                m2=data["fab_m2"].copy(),
                frozen=True,
            )
        extra = json.loads(bytes(data["extra"]).decode()) if "extra" in data else {}
    return params, lot_norm, fab_norm, extra
