"""Bit-width search with a recurrent policy trained by REINFORCE.

Reward of a complete sequence is ``accuracy + lam * ratio`` where accuracy is
measured after a one-shot snap to k-means codebooks (no retraining) and the
ratio comes from :func:`dnq.codec.compression_ratio`. The return credited to
step ``t`` is the mean reward of ``N`` policy completions of ``b_1 .. b_t``.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import net
from .codec import CompressionSpec, compression_ratio
from .policy import NUM_ACTIONS, Context, PolicyModel
from .quantizer import weight_cluster

log = logging.getLogger(__name__)

BITS = tuple(range(2, 2 + NUM_ACTIONS))
EMBED_DIM = 7


def bits_to_action(b: int) -> int:
    if b not in BITS:
        raise ValueError(f"bit-width {b} outside {BITS[0]}..{BITS[-1]}")
    return b - BITS[0]


def action_to_bits(a: int) -> int:
    return BITS[a]


def searched_layers(model: net.NetworkModel) -> list[int]:
    """Layers the controller assigns bits to: quantizable conv layers, or all quantizable ones if there are none."""
    q = model.quantizable_indices()
    conv = [i for i in q if model.layers[i].spec.kind == "conv2d"]
    return conv or q


def _log_scaled(x: float, cap_bits: float) -> float:
    return min(math.log2(max(x, 1)) / cap_bits, 1.0)


def embed_layer(spec: net.LayerSpec, position: int, length: int) -> np.ndarray:
    kh, kw = spec.kernel
    return np.array([
        position / length,
        _log_scaled(spec.param_count, 24),
        _log_scaled(spec.fan_in, 16),
        _log_scaled(spec.fan_out, 16),
        min(kh * kw / 49.0, 1.0),
        1.0 if spec.kind == "dense" else 0.0,
        1.0 if spec.kind == "conv2d" else 0.0,
    ])


def embed_model(model: net.NetworkModel, layers: Optional[Sequence[int]] = None) -> np.ndarray:
    """One feature row per searched layer: index/L, log sizes, kernel area, kind one-hot; all in [0, 1]."""
    layers = searched_layers(model) if layers is None else list(layers)
    if not layers:
        raise ValueError("model has no quantizable layers")
    L = len(layers)
    return np.stack([embed_layer(model.layers[i].spec, pos + 1, L) for pos, i in enumerate(layers)])


def combine_reward(accuracy: float, ratio: float, lam: float) -> float:
    return accuracy + lam * ratio


@dataclass(frozen=True)
class RolloutRecord:
    sequence: tuple[int, ...]
    accuracy: float
    ratio: float
    reward: float
    step_returns: tuple[float, ...] = ()


class RewardEvaluator:
    """Reward of a searched bit-width sequence against a frozen model snapshot.

    Layers outside the search get ``fixed_bits``. Snapped weights are cached
    per (layer, bits) and records per sequence; both caches are lock-guarded
    so rollouts may be evaluated from several threads.
    """

    def __init__(
        self,
        model: net.NetworkModel,
        eval_data: Optional[net.Dataset],
        lam: float = 0.05,
        fixed_bits: int = 3,
        layers: Optional[Sequence[int]] = None,
        accuracy_fn: Optional[Callable[[tuple[int, ...]], float]] = None,
    ):
        if lam < 0:
            raise ValueError("lambda must be non-negative")
        self.model = model.copy()
        self.eval_data = eval_data
        self.lam = lam
        self.fixed_bits = fixed_bits
        self.layers = searched_layers(model) if layers is None else list(layers)
        self.accuracy_fn = accuracy_fn
        self._snap: dict[tuple[int, int], np.ndarray] = {}
        self._records: dict[tuple[int, ...], RolloutRecord] = {}
        self._lock = threading.Lock()

    @property
    def length(self) -> int:
        return len(self.layers)

    def full_bitwidths(self, sequence: Sequence[int]) -> list[int]:
        """Bit-widths for every quantizable layer, in model order."""
        if len(sequence) != len(self.layers):
            raise ValueError(f"sequence has {len(sequence)} entries, model has {len(self.layers)} searched layers")
        chosen = dict(zip(self.layers, sequence))
        return [int(chosen.get(i, self.fixed_bits)) for i in self.model.quantizable_indices()]

    def _snapped(self, li: int, bits: int) -> np.ndarray:
        key = (li, bits)
        with self._lock:
            hit = self._snap.get(key)
        if hit is None:
            w = self.model.layers[li].weight
            book, assign = weight_cluster(w, bits, layer_index=li)
            hit = book.centroids[assign].reshape(w.shape)
            with self._lock:
                self._snap.setdefault(key, hit)
        return hit

    def snapped_model(self, sequence: Sequence[int]) -> net.NetworkModel:
        bits = self.full_bitwidths(sequence)
        layers = []
        qmap = dict(zip(self.model.quantizable_indices(), bits))
        for i, layer in enumerate(self.model.layers):
            w = self._snapped(i, qmap[i]) if i in qmap and qmap[i] < 32 else layer.weight
            layers.append(net.Layer(layer.spec, w, layer.bias))
        return net.NetworkModel(self.model.input_shape, layers, self.model.float_bits)

    def ratio(self, sequence: Sequence[int]) -> float:
        return compression_ratio(CompressionSpec.for_model(self.model, self.full_bitwidths(sequence)))

    def __call__(self, sequence: Sequence[int]) -> RolloutRecord:
        seq = tuple(int(b) for b in sequence)
        with self._lock:
            rec = self._records.get(seq)
        if rec is not None:
            return rec
        for b in seq:
            bits_to_action(b)
        if self.accuracy_fn is not None:
            acc = float(self.accuracy_fn(seq))
        else:
            acc = net.accuracy(self.snapped_model(seq), self.eval_data)
        r = self.ratio(seq)
        rec = RolloutRecord(seq, acc, r, combine_reward(acc, r, self.lam))
        with self._lock:
            return self._records.setdefault(seq, rec)


def evaluate_reward(
    model: net.NetworkModel,
    sequence: Sequence[int],
    eval_data: net.Dataset,
    lam: float = 0.05,
    fixed_bits: int = 3,
) -> RolloutRecord:
    return RewardEvaluator(model, eval_data, lam, fixed_bits)(sequence)


def _reward_of_actions(evaluator, actions) -> float:
    return evaluator(tuple(action_to_bits(a) for a in actions)).reward


def mc_return(
    policy: PolicyModel,
    ctx: Context,
    evaluator,
    prefix: Sequence[int],
    n_samples: int,
    rng: Optional[np.random.Generator] = None,
    exhaustive: bool = False,
) -> float:
    """Estimated return of an action prefix (actions are 0-based indices).

    Samples ``n_samples`` completions from the policy and averages their
    rewards. ``exhaustive`` replaces sampling by the exact expectation over
    every completion, weighted by its policy probability.
    """
    L = len(ctx.x)
    if not 1 <= len(prefix) <= L:
        raise ValueError("prefix length must be in [1, L]")
    if len(prefix) == L:
        return _reward_of_actions(evaluator, prefix)
    if exhaustive:
        return _expected_completion(policy, ctx, evaluator, list(prefix))
    if n_samples < 1:
        raise ValueError("need at least one Monte Carlo sample")
    total = 0.0
    for _ in range(n_samples):
        actions, _ = policy.sample(ctx, rng, prefix)
        total += _reward_of_actions(evaluator, actions)
    return total / n_samples


def _expected_completion(policy, ctx, evaluator, prefix):
    L = len(ctx.x)
    state, prev = policy.advance(ctx, prefix)

    def rec(l, state, prev, acts):
        if l == L:
            return _reward_of_actions(evaluator, acts)
        probs, new_state, _ = policy.step(ctx, l, state, prev)
        return sum(probs[a] * rec(l + 1, new_state, a, acts + [a]) for a in range(policy.num_actions))

    return rec(len(prefix), state, prev, prefix)


@dataclass
class Rollout:
    actions: list[int]
    returns: list[float]

    @property
    def bits(self) -> tuple[int, ...]:
        return tuple(action_to_bits(a) for a in self.actions)


def estimate_gradient(policy: PolicyModel, ctx: Context, batch: Sequence[Rollout]) -> dict:
    """Batch mean of sum_l grad log P(b_l | b_<l) * R_l."""
    if not batch:
        raise ValueError("empty rollout batch")
    L = len(ctx.x)
    total = None
    for ro in batch:
        if len(ro.actions) != L or len(ro.returns) != L:
            raise ValueError(
                f"rollout has {len(ro.actions)} actions and {len(ro.returns)} returns for {L} steps"
            )
        g = policy.grad_log_prob(ctx, ro.actions, ro.returns)
        if total is None:
            total = g
        else:
            for k in total:
                total[k] += g[k]
    return {k: v / len(batch) for k, v in total.items()}


def policy_gradient_step(policy: PolicyModel, ctx: Context, batch: Sequence[Rollout], lr: float) -> PolicyModel:
    """Gradient ascent on expected reward; mutates and returns ``policy``."""
    g = estimate_gradient(policy, ctx, batch)
    for k, v in g.items():
        policy.params[k] += lr * v
    return policy


@dataclass
class ControllerConfig:
    iterations: int = 1000
    batch_size: int = 5
    lr: float = 0.01
    lam: float = 0.05
    mc_samples: int = 4
    hidden: int = 32
    cell: str = "lstm"
    fixed_bits: int = 3
    eval_samples: int = 1000
    baseline: bool = False
    baseline_decay: float = 0.9
    exhaustive_mc: bool = False
    seed: int = 0


@dataclass
class SearchHistoryRow:
    iteration: int
    mean_reward: float
    best_reward: float
    best_sequence: tuple[int, ...]


@dataclass
class SearchResult:
    best: RolloutRecord
    history: list[SearchHistoryRow]
    policy: PolicyModel
    layers: list[int]
    full_bitwidths: list[int] = field(default_factory=list)

    @property
    def best_sequence(self) -> tuple[int, ...]:
        return self.best.sequence

    def greedy_sequence(self, embeddings: np.ndarray) -> tuple[int, ...]:
        ctx = self.policy.context(embeddings)
        state, prev = self.policy.initial_state(), None
        out = []
        for l in range(len(embeddings)):
            probs, state, _ = self.policy.step(ctx, l, state, prev)
            prev = int(np.argmax(probs))
            out.append(action_to_bits(prev))
        return tuple(out)


def train_controller(
    model: net.NetworkModel,
    eval_data: Optional[net.Dataset],
    config: Optional[ControllerConfig] = None,
    evaluator: Optional[RewardEvaluator] = None,
    log_path=None,
) -> SearchResult:
    """Sample sequences, score each step by Monte Carlo completion, update the policy.

    Returns the highest-reward sequence seen (first one wins ties) together
    with a per-iteration history of mean and best reward.
    """
    cfg = config or ControllerConfig()
    if evaluator is None:
        data = eval_data.subset(cfg.eval_samples) if eval_data is not None else None
        evaluator = RewardEvaluator(model, data, cfg.lam, cfg.fixed_bits)
    emb = embed_model(model, evaluator.layers)
    policy = PolicyModel(emb.shape[1], cfg.hidden, cfg.cell, seed=cfg.seed)
    L = len(emb)
    best: Optional[RolloutRecord] = None
    history: list[SearchHistoryRow] = []
    baseline = None
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "mean_reward", "best_reward", "best_sequence"])
    try:
        for it in range(cfg.iterations):
            rng = np.random.default_rng([cfg.seed, it])
            ctx = policy.context(emb)
            batch = []
            rewards = []
            for _ in range(cfg.batch_size):
                actions, _ = policy.sample(ctx, rng)
                rec = evaluator(tuple(action_to_bits(a) for a in actions))
                if best is None or rec.reward > best.reward:
                    best = rec
                rets = [
                    mc_return(policy, ctx, evaluator, actions[: t + 1], cfg.mc_samples, rng, cfg.exhaustive_mc)
                    for t in range(L - 1)
                ] + [rec.reward]
                rewards.append(rec.reward)
                batch.append(Rollout(actions, rets))
            mean_reward = float(np.mean(rewards))
            if cfg.baseline:
                b = mean_reward if baseline is None else baseline
                for ro in batch:
                    ro.returns = [r - b for r in ro.returns]
                baseline = mean_reward if baseline is None else cfg.baseline_decay * baseline + (1 - cfg.baseline_decay) * mean_reward
            policy_gradient_step(policy, ctx, batch, cfg.lr)
            row = SearchHistoryRow(it, mean_reward, best.reward, best.sequence)
            history.append(row)
            if writer:
                writer.writerow([it, repr(mean_reward), repr(best.reward), " ".join(map(str, best.sequence))])
            if it % 100 == 0:
                log.info("search iteration %d: mean reward %.4f, best %.4f %s", it, mean_reward, best.reward, best.sequence)
    finally:
        if fh:
            fh.close()
    return SearchResult(best, history, policy, evaluator.layers, evaluator.full_bitwidths(best.sequence))


def write_sequence(path, result: SearchResult, lam: float) -> None:
    doc = {
        "searched_layers": result.layers,
        "sequence": list(result.best.sequence),
        "bitwidths": result.full_bitwidths,
        "reward": result.best.reward,
        "accuracy": result.best.accuracy,
        "ratio": result.best.ratio,
        "lambda": lam,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_sequence(path) -> dict:
    doc = json.loads(Path(path).read_text())
    for key in ("sequence", "bitwidths"):
        if key not in doc:
            raise ValueError(f"{path}: missing {key!r}")
    for b in doc["sequence"]:
        bits_to_action(int(b))
    return doc


def enumerate_sequences(length: int):
    return itertools.product(BITS, repeat=length)
