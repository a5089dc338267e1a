import itertools
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tpssl.errors import ConfigurationError
from tpssl.evaluate import (
    MetricRecord,
    classification_accuracy,
    cluster_accuracy,
    embed,
    export_embeddings,
    kmeans_cluster,
    miou,
    onehot,
    optimal_permutation,
    read_embeddings,
)
from tpssl.models import build_encoder

from helpers import brute_force_best_permutation


def _random_onehots(rng, n, k):
    return onehot(rng.integers(0, k, n), k), onehot(rng.integers(0, k, n), k)


# -- accuracy / miou --------------------------------------------------------

def test_accuracy_cases():
    assert classification_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert classification_accuracy([0, 0], [1, 1]) == 0.0
    assert classification_accuracy([1, 2, 3, 4, 5], [1, 2, 3, 0, 0]) == 0.6
    with pytest.raises(ValueError):
        classification_accuracy([1, 2], [1])


def test_miou_cases():
    g = np.array([[0, 1], [1, 1]])
    assert miou(g, g, 2) == 1.0
    assert miou(1 - g, g, 2) == 0.0
    with pytest.raises(ValueError):
        miou(np.zeros((2, 2)), np.zeros((2, 3)), 2)


def test_miou_hand_case():
    gt = np.array([[0, 0, 1, 1],
                   [0, 0, 1, 1],
                   [0, 0, 0, 1],
                   [0, 0, 0, 0]])
    pred = np.array([[0, 1, 1, 1],
                     [0, 0, 1, 1],
                     [0, 0, 1, 1],
                     [0, 0, 0, 0]])
    # class 0: gt 11 px, pred 9 px, intersection 9 -> 9/11; class 1: gt 5, pred 7, inter 5 -> 5/7.
    counts = []
    for k in (0, 1):
        inter = int(((pred == k) & (gt == k)).sum())
        union = int(((pred == k) | (gt == k)).sum())
        counts.append(inter / union)
    assert counts == [9 / 11, 5 / 7]
    assert abs(miou(pred, gt, 2) - (9 / 11 + 5 / 7) / 2) < 1e-12


def test_miou_skips_absent_classes():
    gt = np.zeros((3, 3), dtype=int)
    pred = gt.copy()
    pred[0, 0] = 2
    assert abs(miou(pred, gt, 3) - 8 / 9) < 1e-12


def test_relabel_invariance(rng):
    for _ in range(20):
        g = rng.integers(0, 4, (3, 5, 5))
        p = rng.integers(0, 4, (3, 5, 5))
        perm = rng.permutation(4)
        assert abs(miou(perm[p], perm[g], 4) - miou(p, g, 4)) < 1e-12
        assert classification_accuracy(perm[p.ravel()], perm[g.ravel()]) == \
            classification_accuracy(p.ravel(), g.ravel())


# -- permutation ------------------------------------------------------------

def test_permutation_identity_and_swap():
    y = onehot([0, 1, 2, 2, 1, 0, 3], 4)
    p = optimal_permutation(y, y)
    assert np.array_equal(p, np.eye(4, dtype=int))
    assert np.trace(p.T @ y.T @ y) == 7
    swapped = y[:, [1, 0, 2, 3]]
    p = optimal_permutation(swapped, y)
    assert np.array_equal(p, np.eye(4, dtype=int)[[1, 0, 2, 3]])


@pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
def test_hungarian_matches_exhaustive(k):
    rng = np.random.default_rng(100 + k)
    for _ in range(200):
        n = int(rng.integers(k, 12 * k))
        yc, y = _random_onehots(rng, n, k)
        p = optimal_permutation(yc, y)
        c = yc.T @ y
        assert np.trace(p.T @ c) == brute_force_best_permutation(c)
        assert np.all(p.sum(0) == 1) and np.all(p.sum(1) == 1)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        optimal_permutation(onehot([0, 1], 2), onehot([0, 1, 2], 3))
    with pytest.raises(ValueError):
        optimal_permutation(np.array([[1, 1], [0, 1]]), onehot([0, 1], 2))


def test_cluster_accuracy_cases():
    y = onehot([0, 0, 1, 1, 2, 2], 3)
    assert cluster_accuracy(y[:, [2, 0, 1]], y) == 1.0
    balanced = onehot(np.arange(12) % 4, 4)
    assert cluster_accuracy(onehot(np.zeros(12, dtype=int), 4), balanced) == 0.25
    yc = onehot([0, 0, 1, 2, 2, 1], 3)
    y = onehot([1, 1, 1, 0, 0, 2], 3)
    best = max(np.mean(np.array(p)[[0, 0, 1, 2, 2, 1]] == [1, 1, 1, 0, 0, 2])
               for p in itertools.permutations(range(3)))
    assert abs(cluster_accuracy(yc, y) - best) < 1e-12
    assert abs(best - 5 / 6) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_cluster_accuracy_properties(k, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(k, 40))
    yc, y = _random_onehots(rng, n, k)
    acc = cluster_accuracy(yc, y)
    perm = rng.permutation(k)
    assert cluster_accuracy(yc[:, perm], y) == acc
    identity = np.trace(yc.T @ y) / n
    assert acc >= identity - 1e-15


# -- k-means ----------------------------------------------------------------

def test_kmeans_single_cluster(rng):
    a = kmeans_cluster(rng.standard_normal((20, 3)), 1, rng)
    assert np.all(a[:, 0] == 1)


def test_kmeans_separated_clouds():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(0, 0.1, (30, 4)), rng.normal(10, 0.1, (30, 4))])
    labels = np.r_[np.zeros(30, int), np.ones(30, int)]
    a = kmeans_cluster(x, 2, np.random.default_rng(1))
    assert cluster_accuracy(a, onehot(labels, 2)) == 1.0


def test_kmeans_determinism_and_shape(rng):
    x = rng.standard_normal((50, 5))
    a = kmeans_cluster(x, 4, np.random.default_rng(3))
    b = kmeans_cluster(x, 4, np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert a.shape == (50, 4) and np.all(a.sum(1) == 1)


def test_kmeans_too_few_points(rng):
    with pytest.raises(ConfigurationError):
        kmeans_cluster(rng.standard_normal((3, 2)), 4, rng)


def test_kmeans_beats_single_restart_inertia():
    rng = np.random.default_rng(7)
    x = np.concatenate([rng.normal(c, 1.0, (40, 2)) for c in ((0, 0), (6, 0), (0, 6), (6, 6))])

    def inertia(a):
        lab = a.argmax(1)
        return sum(((x[lab == j] - x[lab == j].mean(0)) ** 2).sum() for j in range(4) if (lab == j).any())

    many = inertia(kmeans_cluster(x, 4, np.random.default_rng(0), restarts=10))
    for s in range(5):
        assert many <= inertia(kmeans_cluster(x, 4, np.random.default_rng(100 + s), restarts=1)) + 1e-9


# -- records / embeddings ---------------------------------------------------

def test_metric_record_round_trip():
    r = MetricRecord(step=3, epoch=1, metrics={"loss": 0.25, "acc": 1.0})
    d = json.loads(json.dumps(r.to_json()))
    back = MetricRecord.from_json(d)
    assert (back.step, back.epoch, back.metrics) == (3, 1, {"loss": 0.25, "acc": 1.0})
    assert "timestamp" not in r.to_json() and "timestamp" in r.to_json(with_time=True)


def test_export_round_trip(tmp_path, rng):
    enc = build_encoder(0)
    x = torch.from_numpy(rng.random((7, 3, 32, 32)).astype(np.float32))
    labels = rng.integers(0, 4, 7)
    path = export_embeddings(enc, x, labels, tmp_path / "sub" / "emb.csv", ids=range(10, 17))
    header = path.read_text().splitlines()[0].split(",")
    assert header[:3] == ["id", "label", "e0"] and len(header) == 2 + 128
    ids, lab, z = read_embeddings(path)
    assert ids == list(range(10, 17)) and np.array_equal(lab, labels)
    assert z.shape == (7, enc.out_dim) == (7, 128)
    assert np.abs(z - embed(enc, x)).max() < 1e-6


def test_export_empty(tmp_path):
    enc = build_encoder(0)
    path = export_embeddings(enc, torch.zeros(0, 3, 32, 32), [], tmp_path / "e.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("id,label,e0,")
    ids, labels, z = read_embeddings(path)
    assert ids == [] and z.shape == (0, 128)


def test_export_io_error_has_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        export_embeddings(build_encoder(0), torch.zeros(1, 3, 32, 32), [0], blocker / "e.csv")


def test_export_nine_significant_digits(tmp_path, rng):
    enc = build_encoder(1)
    x = torch.from_numpy(rng.random((2, 3, 32, 32)).astype(np.float32))
    path = export_embeddings(enc, x, [0, 1], tmp_path / "e.csv")
    row = path.read_text().splitlines()[1].split(",")
    z = embed(enc, x)
    assert row[2] == f"{z[0, 0]:.9g}"
