import copy
import struct

import numpy as np
import pytest
import torch

from dsner.corpus import EntitySpan, Sentence
from dsner.errors import DataStoreError
from dsner.knn import DataStore, build_datastore, interpolate_distribution, knn_vote, knn_vote_batch, load_datastore, save_datastore

LABELS = ["O", "LOC", "ORG", "PER"]


def brute_force_vote(keys, values, query, k, num_labels):
    """Exhaustive scan: sort every entry by (-cosine, index), vote, break ties by similarity mass then label."""
    q = query / np.linalg.norm(query)
    sims = []
    for idx, key in enumerate(keys):
        norm = np.linalg.norm(key)
        sims.append((float(np.dot(key / norm if norm else key, q)), idx))
    ranked = sorted(sims, key=lambda t: (-t[0], t[1]))[:k]
    counts, mass = [0] * num_labels, [0.0] * num_labels
    for sim, idx in ranked:
        counts[values[idx]] += 1
        mass[values[idx]] += sim
    return min(range(num_labels), key=lambda lab: (-counts[lab], -mass[lab], lab))


def _store(keys, values, labels=LABELS):
    return DataStore(np.asarray(keys, dtype=np.float32), np.asarray(values), list(labels), "0" * 64)


class TestVote:
    def test_nearest_neighbour(self):
        ds = _store([[1, 0], [0, 1], [-1, 0]], [1, 2, 3])
        assert knn_vote(ds, [0.9, 0.1], 1)[0] == 1
        assert knn_vote(ds, [-0.2, 1.0], 1)[0] == 2

    def test_strict_majority(self):
        ds = _store([[1, 0.1], [1, 0.2], [1, -0.1], [-1, 0]], [3, 3, 1, 2])
        y, o = knn_vote(ds, [1, 0], 3)
        assert y == 3
        np.testing.assert_array_equal(o, [0, 0, 0, 1])

    def test_vote_tie_goes_to_similarity_mass(self):
        # two LOC neighbours with cosine 0.95 each, two PER with 0.85 each
        def at(c):
            return [c, np.sqrt(1 - c * c)]

        ds = _store([at(0.85), at(0.95), at(0.85), at(0.95), [-1, 0]], [3, 1, 3, 1, 2])
        assert knn_vote(ds, [1, 0], 4)[0] == 1

    def test_full_tie_goes_to_lower_label(self):
        ds = _store([[1, 0], [1, 0]], [3, 2])
        assert knn_vote(ds, [1, 0], 2)[0] == 2

    def test_similarity_tie_goes_to_lower_index(self):
        ds = _store([[0, 1], [1, 0], [1, 0], [1, 0]], [1, 3, 2, 1])
        # three identical keys tie; K=1 takes the first of them
        assert knn_vote(ds, [1, 0], 1)[0] == 3

    def test_k_larger_than_store(self):
        ds = _store([[1, 0], [0, 1]], [1, 1])
        assert knn_vote(ds, [1, 1], 64)[0] == 1

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        keys = rng.normal(size=(50, 6))
        values = rng.integers(1, 4, size=50)
        q = rng.normal(size=6)
        a = knn_vote_batch(_store(keys, values), q, 7)
        b = knn_vote_batch(_store(keys * rng.uniform(0.5, 4.0, size=(50, 1)), values), q * 3.0, 7)
        np.testing.assert_array_equal(a, b)

    def test_errors(self):
        ds = _store([[1, 0]], [1])
        with pytest.raises(ValueError):
            knn_vote(ds, [1, 0], 0)
        with pytest.raises(ValueError):
            knn_vote(ds, [1, 0, 0], 1)
        with pytest.raises(ValueError):
            knn_vote(ds, [0, 0], 1)
        with pytest.raises(DataStoreError):
            knn_vote(_store(np.zeros((0, 2)), []), [1, 0], 1)

    def test_values_must_be_entities(self):
        with pytest.raises(DataStoreError):
            _store([[1, 0]], [0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for trial in range(60):
            n = int(rng.integers(1, 400))
            d = int(rng.integers(1, 17))
            if trial % 2:
                keys = rng.integers(-2, 3, size=(n, d)).astype(np.float64)
                keys[np.all(keys == 0, axis=1), 0] = 1.0
            else:
                keys = rng.normal(size=(n, d))
            values = rng.integers(1, 4, size=n)
            ds = _store(keys, values)
            queries = rng.normal(size=(5, d))
            k = int(rng.integers(1, 40))
            got = knn_vote_batch(ds, queries, k)
            for q, y in zip(queries, got):
                assert y == brute_force_vote(ds.keys.astype(np.float64), values, q, k, 4)


class TestInterpolate:
    def test_limits(self):
        o = np.array([0.6, 0.3, 0.1])
        knn = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(interpolate_distribution(o, knn, 0.0), o)
        np.testing.assert_array_equal(interpolate_distribution(o, knn, 1.0), knn)

    def test_hand_arithmetic(self):
        got = interpolate_distribution([0.6, 0.3, 0.1], [0, 1, 0], 0.7)
        np.testing.assert_allclose(got, [0.18, 0.79, 0.03])

    def test_sums_to_one_and_monotone(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            o = rng.dirichlet(np.ones(4))
            knn = np.eye(4)[rng.integers(4)]
            prev = -1.0
            for mu in np.linspace(0, 1, 11):
                out = interpolate_distribution(o, knn, mu)
                np.testing.assert_allclose(out.sum(), 1.0, atol=1e-6)
                voted = float(out[knn.argmax()])
                assert voted >= prev - 1e-12
                prev = voted

    def test_mu_range(self):
        with pytest.raises(ValueError):
            interpolate_distribution([1.0], [1.0], 1.5)


class TestDataStoreFromModel:
    def test_cardinality(self, trained):
        model = trained.model
        corpus = [
            Sentence(["a", "b", "c"], distant_spans=[EntitySpan(1, 1, "LOC"), EntitySpan(2, 3, "PER")]),
            Sentence(["d", "e"], distant_spans=[]),
            Sentence(["f", "g", "h", "i"], distant_spans=[EntitySpan(k, k, "ORG") for k in range(1, 5)]),
            Sentence(["j"], distant_spans=[EntitySpan(1, 1, "MISC")]),
        ]
        ds = build_datastore(model, corpus)
        assert len(ds) == 7
        assert ds.dim == model.rep_dim
        assert ds.values.tolist() == [model.label_index(x) for x in ["LOC", "PER", "ORG", "ORG", "ORG", "ORG", "MISC"]]

    def test_rebuild_bit_identical(self, trained, small_train):
        a = build_datastore(trained.model, small_train)
        b = build_datastore(trained.model, small_train)
        assert a.keys.tobytes() == b.keys.tobytes()
        np.testing.assert_array_equal(a.values, b.values)
        # other batch sizes change padding and summation order, not the result
        c = build_datastore(trained.model, small_train, batch_size=7)
        np.testing.assert_allclose(c.keys, a.keys, atol=1e-5)

    def test_no_entities(self, trained):
        with pytest.raises(DataStoreError):
            build_datastore(trained.model, [Sentence(["a"], distant_spans=[])])

    def test_checkpoint_mismatch(self, trained, small_train):
        ds = build_datastore(trained.model, small_train)
        ds.check_model(trained.model)
        other = copy.deepcopy(trained.model)
        opt = torch.optim.SGD(other.parameters(), lr=0.1)
        _, logits = other(small_train[:2], torch.tensor([0]), torch.tensor([0]), torch.tensor([0]))
        logits.sum().backward()
        opt.step()
        with pytest.raises(DataStoreError):
            ds.check_model(other)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = DataStore(rng.normal(size=(20, 5)).astype(np.float32), rng.integers(1, 4, 20), LABELS, "ab" * 32)
        save_datastore(ds, tmp_path / "ds.bin")
        back = load_datastore(tmp_path / "ds.bin")
        assert back.keys.tobytes() == ds.keys.tobytes()
        np.testing.assert_array_equal(back.values, ds.values)
        assert back.labels == LABELS and back.checkpoint_hash == "ab" * 32

    def test_layout(self, tmp_path):
        ds = DataStore(np.array([[1.5, -2.0]], dtype=np.float32), np.array([2]), LABELS, "cd" * 32)
        save_datastore(ds, tmp_path / "ds.bin")
        raw = (tmp_path / "ds.bin").read_bytes()
        magic, version, dim, count, label_len = struct.unpack_from("<8sIIQI", raw)
        assert (magic, version, dim, count) == (b"DSNRKNN\x00", 1, 2, 1)
        tail = raw[-12:]
        assert struct.unpack("<ffi", tail) == (1.5, -2.0, 2)

    def test_truncated(self, tmp_path):
        ds = DataStore(np.ones((3, 2), dtype=np.float32), np.array([1, 2, 3]), LABELS, "ef" * 32)
        save_datastore(ds, tmp_path / "ds.bin")
        raw = (tmp_path / "ds.bin").read_bytes()
        (tmp_path / "cut.bin").write_bytes(raw[:-3])
        with pytest.raises(DataStoreError):
            load_datastore(tmp_path / "cut.bin")

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"not a datastore at all")
        with pytest.raises(DataStoreError):
            load_datastore(tmp_path / "x.bin")

    def test_bad_hash_length(self, tmp_path):
        ds = DataStore(np.ones((1, 2), dtype=np.float32), np.array([1]), LABELS, "short")
        with pytest.raises(DataStoreError):
            save_datastore(ds, tmp_path / "ds.bin")
