"""Iterative distance-ordered weight quantization with masked retraining.

Each global iteration does, for every quantizable layer:

1. weight clustering: k-means with a pinned zero centroid (centroids are
   learned on the first iteration only, later iterations just re-assign);
2. distance clustering: 1-D k-means over |w - nearest centroid| of the
   still-float weights;
3. weight sharing: the largest-distance weights are snapped to their
   centroids and masked out, following a descending count schedule;

then the remaining float weights are retrained with the gradient mask.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import net

log = logging.getLogger(__name__)

MIN_BITS, MAX_BITS = 2, 8
FLOAT_PASSTHROUGH_BITS = 32
DEFAULT_DISTANCE_CLUSTERS = 12


def num_centroids(bits: int) -> int:
    """Codebook size for a bit-width: 2^(b-1) levels plus a reserved zero."""
    return 2 ** (bits - 1) + 1


def _check_bits(bits: int) -> None:
    if not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bit-width must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")


@dataclass
class Codebook:
    centroids: np.ndarray
    bits: int
    layer_index: int = -1

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 1 or len(c) == 0:
            raise ValueError("codebook needs a 1-D non-empty centroid array")
        if np.any(np.diff(c) <= 0):
            raise ValueError("centroids must be strictly increasing")
        if not np.any(c == 0.0):
            raise ValueError("codebook is missing the reserved zero centroid")
        self.centroids = c

    @property
    def k(self) -> int:
        return len(self.centroids)


def nearest_centroid(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid; an exact tie goes to the smaller centroid."""
    v = np.asarray(values, dtype=np.float64).ravel()
    right = np.clip(np.searchsorted(centroids, v, side="left"), 1, len(centroids) - 1)
    if len(centroids) == 1:
        return np.zeros(len(v), dtype=np.int64)
    left = right - 1
    take_left = (v - centroids[left]) <= (centroids[right] - v)
    return np.where(take_left, left, right).astype(np.int64)


def _sse(v: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    return float(np.sum((v - centroids[assign]) ** 2))


def _f32_distinct(c: np.ndarray, pinned: float = 0.0) -> np.ndarray:
    """Round to float32-representable values and break any collisions.

    Stored codebooks are 32-bit, so centroids live on the float32 grid. The
    pinned value is kept exactly; colliding free centroids are nudged upward
    by one float32 ulp at a time.
    """
    c = np.sort(c.astype(np.float32).astype(np.float64))
    out = []
    for x in c:
        x32 = np.float32(x)
        while out and x32 <= np.float32(out[-1]):
            x32 = np.nextafter(np.float32(out[-1]), np.float32(np.inf))
        out.append(float(x32))
    out = np.array(out)
    if pinned not in out:
        raise AssertionError("pinned centroid lost during rounding")
    return out


def _pinned_lloyd(v: np.ndarray, k: int, pinned: float, max_iter: int):
    free = k - 1
    lo, hi = float(v.min()), float(v.max())
    init = np.linspace(lo, hi, free) if free > 0 else np.empty(0)
    # keep init distinct from each other and from the pinned value
    init = [x if x != pinned else np.nextafter(x, np.inf) for x in init]
    c = np.sort(np.array(init + [pinned], dtype=np.float64))
    for i in range(1, len(c)):
        if c[i] <= c[i - 1]:
            c[i] = np.nextafter(c[i - 1], np.inf)
    history = []
    assign = nearest_centroid(v, c)
    history.append(_sse(v, c, assign))
    for _ in range(max_iter):
        sums = np.bincount(assign, weights=v, minlength=k)
        counts = np.bincount(assign, minlength=k)
        new = c.copy()
        upd = (counts > 0) & (c != pinned)
        new[upd] = sums[upd] / counts[upd]
        order = np.argsort(new, kind="stable")
        new = new[order]
        for i in range(1, len(new)):
            if new[i] <= new[i - 1]:
                new[i] = np.nextafter(new[i - 1], np.inf)
        c = new
        new_assign = nearest_centroid(v, c)
        history.append(_sse(v, c, new_assign))
        converged = np.array_equal(new_assign, order.argsort()[assign])
        assign = new_assign
        if converged:
            break
    return c, assign, history


def kmeans_pinned(values: np.ndarray, k: int, pinned: float = 0.0, max_iter: int = 100):
    """1-D Lloyd k-means where one centroid is fixed at ``pinned``.

    Free centroids start on a linear grid over [min, max]; empty clusters keep
    their centroid. Returns ``(centroids, assignment, sse_history)`` where the
    history holds the within-cluster SSE after every assignment step.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot cluster an empty weight set")
    return _pinned_lloyd(v, k, pinned, max_iter)


def weight_cluster(
    weights: np.ndarray,
    bits: int,
    frozen: Optional[Codebook] = None,
    max_iter: int = 100,
    layer_index: int = -1,
) -> tuple[Codebook, np.ndarray]:
    """Cluster a layer's weights into a ``2^(b-1)+1`` entry codebook.

    With ``frozen`` the centroids are reused and only the assignment is
    recomputed.
    """
    v = np.asarray(weights, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot cluster an empty weight set")
    if frozen is not None:
        return frozen, nearest_centroid(v, frozen.centroids)
    _check_bits(bits)
    c, _, _ = kmeans_pinned(v, num_centroids(bits), 0.0, max_iter)
    c = _f32_distinct(c)
    return Codebook(c, bits, layer_index), nearest_centroid(v, c)


@dataclass
class Triplets:
    """Per-weight (w, w_hat, d) triplets stored column-wise."""

    weight: np.ndarray
    nearest: np.ndarray
    distance: np.ndarray
    assignment: np.ndarray


def compute_distances(weights: np.ndarray, codebook: Codebook) -> Triplets:
    w = np.asarray(weights, dtype=np.float64).ravel()
    idx = nearest_centroid(w, codebook.centroids)
    w_hat = codebook.centroids[idx]
    return Triplets(w, w_hat, np.abs(w - w_hat), idx)


def distance_cluster(distances: np.ndarray, num_clusters: int = DEFAULT_DISTANCE_CLUSTERS, max_iter: int = 100) -> np.ndarray:
    """1-D k-means over quantization distances.

    Returns a cluster id per entry, with id 0 the cluster whose centroid
    distance is largest. Empty clusters are dropped, so fewer than
    ``num_clusters`` ids may appear.
    """
    if num_clusters < 1:
        raise ValueError("need at least one distance cluster")
    d = np.asarray(distances, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("no unquantized weights to cluster")
    uniq = np.unique(d)
    k = min(num_clusters, len(uniq))
    c = np.unique(np.linspace(uniq[0], uniq[-1], k)) if k > 1 else uniq[:1]
    assign = nearest_centroid(d, c)
    for _ in range(max_iter):
        counts = np.bincount(assign, minlength=len(c))
        sums = np.bincount(assign, weights=d, minlength=len(c))
        keep = counts > 0
        c = np.sort(sums[keep] / counts[keep])
        new_assign = nearest_centroid(d, c)
        if len(c) == len(keep) and np.array_equal(new_assign, assign):
            break
        assign = new_assign
    used = np.unique(assign)
    # relabel: descending centroid distance, contiguous ids
    rank = {int(a): i for i, a in enumerate(sorted(used, reverse=True))}
    return np.array([rank[int(a)] for a in assign], dtype=np.int64)


def descending_schedule(sizes: Sequence[int], max_iterations: Optional[int] = None) -> list[int]:
    """Turn distance-ordered cluster sizes into a non-increasing count schedule.

    Adjacent clusters that break the order are merged (pool-adjacent-violators).
    A block that came from merging is then split in halves while the
    remainder stays at least as large as the next block, which keeps the
    iterative character without breaking monotonicity. Order is preserved and
    the counts sum to ``sum(sizes)``.
    """
    blocks: list[list[int]] = []  # [count, number of merged clusters]
    for s in sizes:
        if s <= 0:
            continue
        blocks.append([int(s), 1])
        while len(blocks) > 1 and blocks[-2][0] < blocks[-1][0]:
            s2, m2 = blocks.pop()
            blocks[-1][0] += s2
            blocks[-1][1] += m2
    limit = max_iterations or sum(m for _, m in blocks)
    counts: list[int] = []
    for i, (size, merged) in enumerate(blocks):
        nxt = blocks[i + 1][0] if i + 1 < len(blocks) else 1
        rem = size
        room = limit - len(counts) - (len(blocks) - i)
        while merged > 1 and room > 0 and rem >= 2 * nxt:
            part = (rem + 1) // 2
            counts.append(part)
            rem -= part
            room -= 1
        counts.append(rem)
    return counts


@dataclass
class QuantSchedule:
    num_distance_clusters: int = DEFAULT_DISTANCE_CLUSTERS
    counts: list[int] = field(default_factory=list)
    order: str = "descending-distance"

    def count_at(self, iteration: int) -> int:
        return self.counts[iteration] if iteration < len(self.counts) else 0


@dataclass
class StepRecord:
    iteration: int
    count: int
    selected: np.ndarray
    distance: np.ndarray
    group: np.ndarray
    unquantized: np.ndarray


@dataclass
class LayerQuantState:
    layer_index: int
    bits: int
    mask: np.ndarray
    codebook: Optional[Codebook] = None
    assignment: Optional[np.ndarray] = None
    distance_cluster_id: Optional[np.ndarray] = None
    frozen_centroids: bool = False
    schedule: Optional[QuantSchedule] = None
    iteration: int = 0
    per_cluster_grouping: bool = False
    recompute_distance_clusters: bool = True
    history: list[StepRecord] = field(default_factory=list)

    @classmethod
    def fresh(cls, layer_index: int, bits: int, shape, num_distance_clusters: int = DEFAULT_DISTANCE_CLUSTERS, low_bit_threshold: int = 3):
        _check_bits(bits)
        return cls(
            layer_index=layer_index,
            bits=bits,
            mask=np.ones(shape),
            schedule=QuantSchedule(num_distance_clusters),
            per_cluster_grouping=bits <= low_bit_threshold,
        )

    @property
    def remaining(self) -> int:
        return int(self.mask.sum())

    @property
    def done(self) -> bool:
        return self.remaining == 0


def quantize_step(weights: np.ndarray, state: LayerQuantState) -> LayerQuantState:
    """One quantizer iteration on a single layer; mutates ``weights`` and ``state``.

    At low bit-widths (``state.per_cluster_grouping``) distance clustering is
    run separately inside every weight cluster; selection then walks the
    distance levels of all groups together.
    """
    flat_mask = state.mask.reshape(-1)
    unq = np.flatnonzero(flat_mask)
    if unq.size == 0:
        raise ValueError(f"layer {state.layer_index}: nothing left to quantize")
    codebook, assignment = weight_cluster(
        weights, state.bits, frozen=state.codebook if state.frozen_centroids else None,
        layer_index=state.layer_index,
    )
    state.codebook, state.assignment, state.frozen_centroids = codebook, assignment, True
    trip = compute_distances(weights, codebook)
    d = trip.distance[unq]
    groups = assignment[unq] if state.per_cluster_grouping else np.zeros(len(unq), dtype=np.int64)
    sched = state.schedule
    if state.recompute_distance_clusters or state.distance_cluster_id is None:
        level = np.empty(len(unq), dtype=np.int64)
        for g in np.unique(groups):
            sel = groups == g
            level[sel] = distance_cluster(d[sel], sched.num_distance_clusters)
        ids = np.full(weights.size, -1, dtype=np.int64)
        ids[unq] = level
        state.distance_cluster_id = ids
    else:
        # first-iteration levels are kept; only the within-level order follows the new distances
        level = state.distance_cluster_id[unq]

    if not sched.counts:
        sizes = np.bincount(level)
        sched.counts = descending_schedule(sizes.tolist(), sched.num_distance_clusters)
    count = sched.count_at(state.iteration)
    if count == 0 and state.iteration >= len(sched.counts):
        raise ValueError(
            f"layer {state.layer_index}: schedule exhausted with {unq.size} weights unquantized"
        )
    if count > unq.size:
        raise ValueError(f"layer {state.layer_index}: schedule asks for {count} of {unq.size} weights")
    order = np.lexsort((unq, -d, level))
    chosen = unq[order[:count]]
    w = weights.reshape(-1)
    w[chosen] = codebook.centroids[assignment[chosen]]
    flat_mask[chosen] = 0.0
    state.history.append(StepRecord(state.iteration, count, chosen, trip.distance.copy(), groups, unq))
    state.iteration += 1
    return state


def retrain(
    model: net.NetworkModel,
    masks: Sequence[Optional[np.ndarray]],
    data: net.Dataset,
    steps: int,
    lr: float,
    batch_size: int = 100,
    seed: int = 0,
) -> list[float]:
    """Masked SGD on the float weights; quantized weights and biases stay put."""
    if steps <= 0:
        return []
    return net.train(model, data, steps, lr, batch_size, seed, masks=masks, update_bias=False).losses


def snap_quantize(model: net.NetworkModel, bitwidths: Sequence[int]) -> tuple[net.NetworkModel, dict[int, Codebook]]:
    """One-shot k-means + nearest-centroid quantization, no retraining."""
    q = model.copy()
    books = {}
    for li, bits in zip(model.quantizable_indices(), bitwidths, strict=True):
        if bits >= FLOAT_PASSTHROUGH_BITS:
            continue
        layer = q.layers[li]
        book, assign = weight_cluster(layer.weight, bits, layer_index=li)
        layer.weight[...] = book.centroids[assign].reshape(layer.weight.shape)
        books[li] = book
    return q, books


@dataclass
class QuantizerConfig:
    num_distance_clusters: int = DEFAULT_DISTANCE_CLUSTERS
    retrain_steps: int = 500
    lr: float = 0.01
    batch_size: int = 100
    low_bit_threshold: int = 3
    recompute_distance_clusters: bool = True
    seed: int = 0
    enabled: bool = True
    metrics_path: Optional[str] = None


@dataclass
class IterationMetrics:
    iteration: int
    quantized_fraction: float
    train_loss: float
    eval_accuracy: float


@dataclass
class QuantizeResult:
    model: net.NetworkModel
    states: dict[int, LayerQuantState]
    metrics: list[IterationMetrics]

    @property
    def codebooks(self) -> dict[int, Codebook]:
        return {i: s.codebook for i, s in self.states.items()}


METRICS_FIELDS = ["iteration", "quantized_fraction", "train_loss", "eval_accuracy"]


def write_metrics(metrics: Sequence[IterationMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_FIELDS)
        for m in metrics:
            w.writerow([m.iteration, repr(m.quantized_fraction), repr(m.train_loss), repr(m.eval_accuracy)])


def quantize_network(
    model: net.NetworkModel,
    bitwidths: Sequence[int],
    train_data: net.Dataset,
    eval_data: net.Dataset,
    config: Optional[QuantizerConfig] = None,
) -> QuantizeResult:
    """Quantize every quantizable layer to its bit-width, retraining in between.

    ``bitwidths`` has one entry per quantizable layer; an entry of 32 leaves
    that layer in float. The input model is not modified. All layers advance
    in lock-step: one global iteration quantizes one schedule slot per layer
    and is followed by a single masked retraining phase.
    """
    cfg = config or QuantizerConfig()
    qidx = model.quantizable_indices()
    if len(bitwidths) != len(qidx):
        raise ValueError(f"got {len(bitwidths)} bit-widths for {len(qidx)} quantizable layers")
    q = model.copy()
    states: dict[int, LayerQuantState] = {}
    if cfg.enabled:
        for li, bits in zip(qidx, bitwidths):
            if bits >= FLOAT_PASSTHROUGH_BITS:
                continue
            states[li] = LayerQuantState.fresh(
                li, int(bits), q.layers[li].weight.shape, cfg.num_distance_clusters, cfg.low_bit_threshold
            )
            states[li].recompute_distance_clusters = cfg.recompute_distance_clusters
    total = sum(s.mask.size for s in states.values())
    metrics: list[IterationMetrics] = []
    it = 0
    while any(not s.done for s in states.values()):
        for li, s in states.items():
            if not s.done:
                quantize_step(q.layers[li].weight, s)
        masks = [states[i].mask if i in states else None for i in range(len(q.layers))]
        losses = []
        if any(not s.done for s in states.values()):
            losses = retrain(q, masks, train_data, cfg.retrain_steps, cfg.lr, cfg.batch_size, cfg.seed + it)
        remaining = sum(s.remaining for s in states.values())
        train_loss = float(np.mean(losses)) if losses else net.mean_loss(q, train_data)
        m = IterationMetrics(it, 1.0 - remaining / total, train_loss, net.accuracy(q, eval_data))
        log.info("quantizer iteration %d: %.3f quantized, loss %.4f, acc %.4f", it, m.quantized_fraction, m.train_loss, m.eval_accuracy)
        metrics.append(m)
        it += 1
    if cfg.metrics_path:
        write_metrics(metrics, cfg.metrics_path)
    return QuantizeResult(q, states, metrics)
