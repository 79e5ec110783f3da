import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lshformer import tensor as tc
from lshformer.hashing import (LshConfig, build_round, chunk_neighborhood, default_chunk_len,
                               hash_vectors, sample_rotation)
from lshformer.tensor import Tensor


def test_sample_rotation_deterministic():
    a = sample_rotation(4, 8, seed=5)
    b = sample_rotation(4, 8, seed=5)
    c = sample_rotation(4, 8, seed=6)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_sample_rotation_shape_is_half_buckets():
    assert sample_rotation(4, 8, seed=0).shape == (4, 4)


def test_sample_rotation_rejects_odd_buckets():
    with pytest.raises(ValueError):
        sample_rotation(4, 7, seed=0)
    with pytest.raises(ValueError):
        LshConfig(n_buckets=3)


def test_hash_sign_symmetry():
    rot = Tensor(np.array([[1.0], [0.0]], dtype=np.float32))
    assert hash_vectors(Tensor(np.array([[1.0, 0.0]], dtype=np.float32)), rot)[0] == 0
    assert hash_vectors(Tensor(np.array([[-1.0, 0.0]], dtype=np.float32)), rot)[0] == 1


def test_hash_zero_vector_ties_to_bucket_zero():
    rot = sample_rotation(3, 8, seed=1)
    assert hash_vectors(Tensor(np.zeros((1, 3), dtype=np.float32)), rot)[0] == 0


@settings(deadline=None, max_examples=40)
@given(st.floats(0.01, 100.0), st.integers(0, 10_000))
def test_hash_positive_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 6)).astype(np.float32)
    rot = sample_rotation(6, 8, seed=seed)
    assert np.array_equal(hash_vectors(Tensor(x), rot), hash_vectors(Tensor(c * x), rot))


def test_hash_matches_brute_force_projection():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((20, 5)).astype(np.float64)
    rot = sample_rotation(5, 4, seed=7)
    got = hash_vectors(Tensor(x), rot)
    for i in range(20):
        proj = [float(x[i] @ rot.data[:, j]) for j in range(2)]
        signed = proj + [-p for p in proj]
        assert got[i] == int(np.argmax(signed))


def test_locality_property():
    rng = np.random.default_rng(11)
    d = 16
    trials = 10_000
    for n_buckets in (4, 16, 64):
        same = rand = 0
        for t in range(0, trials, 100):
            rot = sample_rotation(d, n_buckets, seed=(11, n_buckets, t))
            u = rng.standard_normal((100, d))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            noise = rng.standard_normal((100, d))
            v = u + 0.1 * noise
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            w = rng.standard_normal((100, d))
            hu = hash_vectors(Tensor(u), rot)
            same += int(np.sum(hu == hash_vectors(Tensor(v), rot)))
            rand += int(np.sum(hu == hash_vectors(Tensor(w), rot)))
        assert same > rand, (n_buckets, same, rand)


def test_bucket_coverage_near_uniform():
    rng = np.random.default_rng(13)
    n_buckets, d, n = 8, 32, 10_000
    counts = np.zeros(n_buckets)
    for t in range(0, n, 200):
        rot = sample_rotation(d, n_buckets, seed=(13, t))
        ids = hash_vectors(Tensor(rng.standard_normal((200, d))), rot)
        counts += np.bincount(ids, minlength=n_buckets)
    p = 1.0 / n_buckets
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma), counts


def test_build_round_examples():
    assert build_round(np.zeros(5, dtype=int)).sort_perm.indices.tolist() == [0, 1, 2, 3, 4]
    assert build_round([1, 0]).sort_perm.indices.tolist() == [1, 0]
    rh = build_round([2, 0, 2, 1])
    assert rh.sort_perm.indices.tolist() == [1, 3, 0, 2]
    assert rh.inverse_perm.indices[rh.sort_perm.indices].tolist() == [0, 1, 2, 3]


def test_chunk_neighborhood_examples():
    assert chunk_neighborhood(3, 3, 4)
    assert chunk_neighborhood(4, 3, 4)  # one chunk back
    assert not chunk_neighborhood(0, 5, 4)
    assert not chunk_neighborhood(8, 3, 4)  # two chunks back is out of reach


def test_small_buckets_are_subset_of_chunk_window():
    # if every bucket has fewer than m members, same-bucket pairs are always
    # reachable from the later position
    rng = np.random.default_rng(17)
    for _ in range(50):
        l = int(rng.integers(4, 40))
        n_buckets = int(rng.choice([2, 4, 8]))
        ids = rng.integers(0, n_buckets, size=l)
        m = max(np.bincount(ids, minlength=n_buckets).max() + 1, default_chunk_len(l, n_buckets))
        rh = build_round(ids)
        sr = rh.inverse_perm.indices
        for i in range(l):
            for j in range(i + 1):
                if ids[i] == ids[j]:
                    assert chunk_neighborhood(sr[i], sr[j], int(m))


def test_config_chunk_resolution():
    assert LshConfig(n_buckets=8).resolve_chunk_len(64) == 16
    assert LshConfig(n_buckets=8, chunk_len=4).resolve_chunk_len(64) == 4
    assert LshConfig(n_buckets=8, chunk_len=100).resolve_chunk_len(64) == 64
