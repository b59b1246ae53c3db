import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dnq import net, quantizer as qz


def _brute_force_pinned_sse(values, free):
    """Smallest SSE over every assignment of points to {pinned zero} + ``free`` clusters."""
    v = np.asarray(values)
    best = np.inf
    best_centroids = None
    for labels in itertools.product(range(free + 1), repeat=len(v)):
        labels = np.array(labels)
        sse = float(np.sum(v[labels == 0] ** 2))
        cents = [0.0]
        for c in range(1, free + 1):
            pts = v[labels == c]
            if len(pts):
                cents.append(pts.mean())
                sse += float(np.sum((pts - pts.mean()) ** 2))
        if sse < best - 1e-15:
            best, best_centroids = sse, sorted(cents)
    return best, best_centroids


def test_kmeans_example_matches_brute_force():
    w = np.array([1.0, 1.1, 0.9, 5.0, 5.1, 4.9])
    oracle_sse, oracle_c = _brute_force_pinned_sse(w, 2)
    assert oracle_sse == pytest.approx(0.04, abs=1e-12)
    book, assign = qz.weight_cluster(w, bits=2)
    assert book.k == 3
    np.testing.assert_allclose(book.centroids, oracle_c, atol=1e-7)
    sse = float(np.sum((w - book.centroids[assign]) ** 2))
    assert sse == pytest.approx(oracle_sse, abs=1e-9)


def test_kmeans_all_equal_values():
    c, assign, hist = qz.kmeans_pinned(np.full(10, 2.5), 5)
    used = np.unique(assign)
    assert len(used) == 1 and c[used[0]] == 2.5
    assert hist[-1] == 0.0
    assert len(c) == 5 and 0.0 in c


def test_five_bits_gives_seventeen_centroids():
    w = np.random.default_rng(0).normal(size=500)
    book, _ = qz.weight_cluster(w, 5)
    assert book.k == 17 == qz.num_centroids(5)


def test_codebook_invariants():
    book, _ = qz.weight_cluster(np.random.default_rng(1).normal(size=300), 4)
    assert np.all(np.diff(book.centroids) > 0)
    assert 0.0 in book.centroids
    with pytest.raises(ValueError):
        qz.Codebook(np.array([0.0, 1.0, 1.0]), 2)
    with pytest.raises(ValueError):
        qz.Codebook(np.array([0.5, 1.0, 2.0]), 2)


@pytest.mark.parametrize("bits", [1, 9])
def test_bits_out_of_range_rejected(bits):
    with pytest.raises(ValueError):
        qz.weight_cluster(np.ones(4), bits)


def test_fewer_distinct_values_than_k_is_not_an_error():
    book, assign = qz.weight_cluster(np.array([0.3, 0.3, -0.2]), 5)
    assert book.k == 17
    np.testing.assert_allclose(book.centroids[assign], [0.3, 0.3, -0.2], atol=1e-7)


def test_frozen_codebook_is_returned_unchanged():
    book = qz.Codebook(np.array([-1.0, 0.0, 2.0]), 2)
    out, assign = qz.weight_cluster(np.array([-0.9, 0.4, 1.2, 5.0]), 2, frozen=book)
    assert out is book
    assert assign.tolist() == [0, 1, 2, 2]


def _sse_is_monotone(values, k):
    _, _, hist = qz.kmeans_pinned(values, k)
    scale = max(1.0, float(np.sum(values**2)))
    return all(b <= a + 1e-12 * scale for a, b in zip(hist, hist[1:])) and len(hist) <= 101


@settings(max_examples=60, deadline=None)
@given(
    values=st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=80),
    bits=st.integers(2, 6),
)
def test_kmeans_sse_never_increases(values, bits):
    assert _sse_is_monotone(np.array(values), qz.num_centroids(bits))


def test_distance_examples():
    book = qz.Codebook(np.array([0.0, 0.5, 1.0]), 2)
    t = qz.compute_distances(np.array([0.7, 0.5]), book)
    assert t.nearest.tolist() == [0.5, 0.5]
    assert t.distance[0] == pytest.approx(0.2, abs=1e-15)
    assert t.distance[1] == 0.0


def test_tie_goes_to_smaller_centroid():
    book = qz.Codebook(np.array([0.0, 1.0]), 2)
    t = qz.compute_distances(np.array([0.5]), book)
    assert t.nearest[0] == 0.0 and t.distance[0] == 0.5


@settings(max_examples=50, deadline=None)
@given(
    cents=st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=8, unique=True),
    values=st.lists(st.floats(-6, 6, allow_nan=False), min_size=1, max_size=30),
)
def test_nearest_centroid_is_exhaustive_minimum(cents, values):
    c = np.array(sorted(set(cents) | {0.0}))
    idx = qz.nearest_centroid(np.array(values), c)
    for v, i in zip(values, idx):
        # exact rational distances, so rounding cannot fake or hide a tie
        dists = [abs(Fraction(v) - Fraction(float(x))) for x in c]
        best = min(dists)
        assert i == dists.index(best)


def test_distance_cluster_matches_contiguous_split_oracle():
    d = np.array([0.9, 0.8, 0.1, 0.05])
    order = np.sort(d)
    best = min(
        (float(np.sum((order[:s] - order[:s].mean()) ** 2) + np.sum((order[s:] - order[s:].mean()) ** 2)), s)
        for s in range(1, len(order))
    )
    split = order[best[1]]
    ids = qz.distance_cluster(d, 2)
    expected = np.where(d >= split, 0, 1)
    assert ids.tolist() == expected.tolist() == [0, 0, 1, 1]


def test_distance_cluster_equal_values_form_one_cluster():
    assert set(qz.distance_cluster(np.full(7, 0.3), 12).tolist()) == {0}


def test_distance_cluster_default_is_twelve():
    assert qz.DEFAULT_DISTANCE_CLUSTERS == 12
    assert qz.QuantizerConfig().num_distance_clusters == 12
    assert len(set(qz.distance_cluster(np.arange(100.0)).tolist())) <= 12


def test_distance_cluster_ids_order_by_descending_distance():
    d = np.random.default_rng(2).random(200)
    ids = qz.distance_cluster(d, 5)
    means = [d[ids == i].mean() for i in range(ids.max() + 1)]
    assert means == sorted(means, reverse=True)


def test_schedule_keeps_descending_sizes():
    assert qz.descending_schedule([40, 30, 20, 10], 4) == [40, 30, 20, 10]


@settings(max_examples=100, deadline=None)
@given(sizes=st.lists(st.integers(1, 300), min_size=1, max_size=12))
def test_schedule_is_non_increasing_and_complete(sizes):
    counts = qz.descending_schedule(sizes, 12)
    assert sum(counts) == sum(sizes)
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert len(counts) <= 12 and all(c > 0 for c in counts)


def _fixture_100():
    """100 weights on a fixed 4-bit codebook, 40/30/20/10 at four distinct distances."""
    cents = np.linspace(-1.0, 1.0, 9)
    book = qz.Codebook(cents, 4)
    r = np.random.default_rng(0)
    offsets = np.repeat([0.10, 0.07, 0.04, 0.01], [40, 30, 20, 10])
    offsets = offsets + r.uniform(-0.002, 0.002, 100)
    base = cents[r.integers(0, 9, 100)]
    w = base + offsets * r.choice([-1, 1], 100)
    perm = r.permutation(100)
    return w[perm], offsets[perm], book


def test_forty_thirty_twenty_ten_fixture():
    w, offsets, book = _fixture_100()
    band = np.select([offsets > 0.085, offsets > 0.055, offsets > 0.025], [0, 1, 2], 3)
    state = qz.LayerQuantState.fresh(0, 4, w.shape, num_distance_clusters=4)
    state.codebook, state.frozen_centroids = book, True
    flips = []
    for _ in range(4):
        before = state.mask.copy()
        qz.quantize_step(w, state)
        flipped = np.flatnonzero((before == 1) & (state.mask == 0))
        flips.append(flipped)
    assert state.schedule.counts == [40, 30, 20, 10]
    assert [len(f) for f in flips] == [40, 30, 20, 10]
    for it, f in enumerate(flips):
        assert set(band[f].tolist()) == {it}
    assert state.done
    with pytest.raises(ValueError):
        qz.quantize_step(w, state)


def test_first_iteration_takes_largest_distance_cluster():
    w, offsets, book = _fixture_100()
    state = qz.LayerQuantState.fresh(0, 4, w.shape, num_distance_clusters=4)
    state.codebook, state.frozen_centroids = book, True
    qz.quantize_step(w, state)
    rec = state.history[0]
    ids_before = qz.distance_cluster(rec.distance[rec.unquantized], 4)
    assert set(ids_before[np.isin(rec.unquantized, rec.selected)].tolist()) == {0}


def _mask_value_coherent(weights, state):
    frozen = state.mask.reshape(-1) == 0
    w = weights.reshape(-1)[frozen]
    assert np.all(np.isin(w, state.codebook.centroids))
    np.testing.assert_array_equal(w, state.codebook.centroids[state.assignment[frozen]])


def test_lockstep_loop_freezes_codebook_and_keeps_masks_coherent(trained_small, small_data):
    model = trained_small.copy()
    bits = {0: 3, 1: 2, 2: 4, 3: 5}
    states = {i: qz.LayerQuantState.fresh(i, b, model.layers[i].weight.shape) for i, b in bits.items()}
    books = {}
    it = 0
    while any(not s.done for s in states.values()):
        for i, s in states.items():
            if not s.done:
                qz.quantize_step(model.layers[i].weight, s)
            snap = s.codebook.centroids.tobytes()
            assert books.setdefault(i, snap) == snap
            assert s.frozen_centroids
            _mask_value_coherent(model.layers[i].weight, s)
        frozen_vals = [model.layers[i].weight[s.mask == 0].copy() for i, s in states.items()]
        qz.retrain(model, [states[i].mask for i in range(4)], small_data.train, 20, 0.05, 50, seed=it)
        for (i, s), fv in zip(states.items(), frozen_vals):
            assert model.layers[i].weight[s.mask == 0].tobytes() == fv.tobytes()
            _mask_value_coherent(model.layers[i].weight, s)
        it += 1
    assert it <= 12


def test_retrain_with_zero_masks_changes_nothing(trained_small, small_data):
    model = trained_small.copy()
    before = net.checkpoint_bytes(model)
    qz.retrain(model, [np.zeros_like(l.weight) for l in model.layers], small_data.train, 30, 0.1, 50)
    assert net.checkpoint_bytes(model) == before


def test_retrain_with_ones_masks_follows_plain_sgd(trained_small, small_data):
    a, b = trained_small.copy(), trained_small.copy()
    qz.retrain(a, [np.ones_like(l.weight) for l in a.layers], small_data.train, 25, 0.05, 50, seed=3)
    net.train(b, small_data.train, 25, 0.05, 50, seed=3, update_bias=False)
    assert net.checkpoint_bytes(a) == net.checkpoint_bytes(b)


def test_quantize_network_completes(trained_small, small_data):
    bits = [3, 2, 4, 3]
    res = qz.quantize_network(trained_small, bits, small_data.train, small_data.eval, qz.QuantizerConfig(retrain_steps=30, lr=0.02, batch_size=50))
    for (li, s), b in zip(sorted(res.states.items()), bits):
        w = res.model.layers[li].weight
        assert s.done and np.all(s.mask == 0)
        assert len(np.unique(w)) <= qz.num_centroids(b)
        assert np.all(np.isin(w, s.codebook.centroids))
    fr = [m.quantized_fraction for m in res.metrics]
    assert fr == sorted(fr) and fr[-1] == 1.0
    # the input model is left alone
    assert not np.array_equal(res.model.layers[0].weight, trained_small.layers[0].weight)


def test_preference_order_within_each_snapshot(trained_small, small_data):
    res = qz.quantize_network(trained_small, [2, 3, 5, 6], small_data.train, small_data.eval, qz.QuantizerConfig(retrain_steps=20, batch_size=50))
    for s in res.states.values():
        counts = [r.count for r in s.history]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert sum(counts) == s.mask.size
        for rec in s.history:
            chosen = np.isin(rec.unquantized, rec.selected)
            d = rec.distance[rec.unquantized]
            for g in np.unique(rec.group):
                in_g = rec.group == g
                if (in_g & chosen).any() and (in_g & ~chosen).any():
                    assert d[in_g & chosen].min() >= d[in_g & ~chosen].max()


def test_preference_order_across_iterations_without_retraining(trained_small, small_data):
    cfg = qz.QuantizerConfig(retrain_steps=0, low_bit_threshold=1)
    res = qz.quantize_network(trained_small, [4, 4, 5, 6], small_data.train, small_data.eval, cfg)
    for s in res.states.values():
        for a, b in zip(s.history, s.history[1:]):
            assert a.distance[a.selected].min() >= b.distance[b.selected].max()


def test_float_bypass_is_identity(trained_small, small_data):
    res = qz.quantize_network(trained_small, [32] * 4, small_data.train, small_data.eval)
    assert not res.states
    assert net.checkpoint_bytes(res.model) == net.checkpoint_bytes(trained_small)
    assert net.accuracy(res.model, small_data.eval) == net.accuracy(trained_small, small_data.eval)


def test_disabled_quantizer_is_identity(trained_small, small_data):
    res = qz.quantize_network(trained_small, [3] * 4, small_data.train, small_data.eval, qz.QuantizerConfig(enabled=False))
    assert net.checkpoint_bytes(res.model) == net.checkpoint_bytes(trained_small)


def test_bitwidth_length_mismatch_rejected(trained_small, small_data):
    with pytest.raises(ValueError):
        qz.quantize_network(trained_small, [3, 3], small_data.train, small_data.eval)


def test_metrics_file_has_one_row_per_iteration(tmp_path, trained_small, small_data):
    path = tmp_path / "m.csv"
    cfg = qz.QuantizerConfig(retrain_steps=5, batch_size=50, metrics_path=str(path))
    res = qz.quantize_network(trained_small, [3] * 4, small_data.train, small_data.eval, cfg)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,quantized_fraction,train_loss,eval_accuracy"
    assert len(lines) == 1 + len(res.metrics)


def test_snap_quantize_value_counts(trained_small):
    q, books = qz.snap_quantize(trained_small, [2, 3, 4, 32])
    for li, b in zip(range(3), [2, 3, 4]):
        assert len(np.unique(q.layers[li].weight)) <= qz.num_centroids(b)
    assert q.layers[3].weight.tobytes() == trained_small.layers[3].weight.tobytes()
    assert 3 not in books


def test_distance_criterion_diagnostic(trained_small, small_data, capsys):
    """Report only: loss change from snapping the farthest vs nearest decile."""
    deltas_hi, deltas_lo = [], []
    for seed in range(20):
        r = np.random.default_rng(seed)
        idx = r.choice(len(small_data.train), 200, replace=False)
        batch = net.Dataset(small_data.train.inputs[idx], small_data.train.labels[idx], 4)
        base = net.forward(trained_small, batch)[1]
        for which, out in (("hi", deltas_hi), ("lo", deltas_lo)):
            m = trained_small.copy()
            for layer in m.layers:
                book, _ = qz.weight_cluster(layer.weight, 3)
                t = qz.compute_distances(layer.weight, book)
                order = np.argsort(t.distance, kind="stable")
                n = max(1, len(order) // 10)
                pick = order[-n:] if which == "hi" else order[:n]
                layer.weight.reshape(-1)[pick] = t.nearest[pick]
            out.append(abs(net.forward(m, batch)[1] - base))
    hi, lo = float(np.mean(deltas_hi)), float(np.mean(deltas_lo))
    with capsys.disabled():
        print(f"\n[diagnostic] mean |dloss| farthest decile {hi:.3e}, nearest decile {lo:.3e}, holds={hi >= lo}")


def test_distance_recompute_sensitivity(trained_small, small_data, capsys):
    """Report only: final accuracy with distance levels recomputed each iteration vs kept from the first."""
    accs = {}
    for flag in (True, False):
        cfg = qz.QuantizerConfig(retrain_steps=20, batch_size=50, recompute_distance_clusters=flag)
        res = qz.quantize_network(trained_small, [2, 2, 3, 3], small_data.train, small_data.eval, cfg)
        for s in res.states.values():
            assert s.done
        accs[flag] = res.metrics[-1].eval_accuracy
    with capsys.disabled():
        print(f"\n[diagnostic] 2/3-bit accuracy, recomputed levels {accs[True]:.3f}, first-iteration levels {accs[False]:.3f}")
