import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lshformer import tensor as tc
from lshformer.tensor import MemMeter, Tensor


def test_matmul_identity_exact():
    x = tc.tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = tc.tensor(np.eye(2))
    assert np.array_equal(tc.matmul(eye, x).data, x.data)


def test_matmul_zero_case():
    out = tc.matmul(tc.tensor([[1.0, 2.0]]), tc.tensor([[0.0], [0.0]]))
    assert out.shape == (1, 1) and out.data[0, 0] == 0.0


def test_matmul_hand_oracle():
    a = tc.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = tc.tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_allclose(tc.matmul(a, b).data, [[19, 22], [43, 50]])


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
        tc.matmul(tc.zeros((2, 3)), tc.zeros((2, 2)))


def test_matmul_batch_prefix_broadcast():
    a = tc.zeros((3, 2, 4))
    b = tc.zeros((1, 4, 5))
    assert tc.matmul(a, b).shape == (3, 2, 5)


def test_logsumexp_symmetry_and_single():
    assert abs(tc.logsumexp(tc.tensor([0.0, 0.0]), 0).item() - np.log(2)) < 1e-7
    assert tc.logsumexp(tc.tensor([3.5]), 0).item() == pytest.approx(3.5)


def test_logsumexp_no_overflow():
    got = tc.logsumexp(tc.tensor([1000.0, 1000.0], dtype=np.float64), 0).item()
    assert got == pytest.approx(1000.0 + np.log(2), abs=1e-9)


def test_logsumexp_neg_inf_rows():
    x = tc.tensor(np.array([[-np.inf, -np.inf], [0.0, -np.inf]]))
    out = tc.logsumexp(x, axis=-1).data
    assert out[0] == -np.inf and out[1] == pytest.approx(0.0)


@settings(deadline=None, max_examples=50)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20),
       st.floats(-100, 100))
def test_logsumexp_shift_invariance(xs, c):
    x = np.asarray(xs, dtype=np.float64)
    a = tc.logsumexp(tc.tensor(x), 0).item()
    b = tc.logsumexp(tc.tensor(x - c), 0).item() + c
    assert abs(a - b) <= 1e-6 * max(1.0, abs(a))


def test_stable_sort_perm_examples():
    assert tc.stable_sort_perm([2, 0, 1]).indices.tolist() == [1, 2, 0]
    assert tc.stable_sort_perm([5, 5, 5]).indices.tolist() == [0, 1, 2]
    assert tc.stable_sort_perm([1, 0, 1, 0]).indices.tolist() == [1, 3, 0, 2]


def test_stable_sort_brute_force_stability():
    rng = np.random.default_rng(0)
    for _ in range(50):
        keys = rng.integers(0, 4, size=rng.integers(1, 12))
        perm = tc.stable_sort_perm(keys).indices
        sorted_keys = keys[perm]
        assert np.all(np.diff(sorted_keys) >= 0)
        for val in np.unique(keys):
            positions = perm[sorted_keys == val]
            assert np.all(np.diff(positions) > 0)  # ties keep original order


@settings(deadline=None, max_examples=50)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=30))
def test_sort_perm_is_bijection(keys):
    perm = tc.stable_sort_perm(np.asarray(keys))
    inv = perm.inverse()
    assert np.array_equal(perm.indices[inv.indices], np.arange(len(perm)))
    x = tc.tensor(np.arange(float(len(perm))))
    roundtrip = tc.scatter(tc.gather(x, perm, 0), perm, 0)
    assert np.array_equal(roundtrip.data, x.data)


def test_gather_scatter_roundtrip_exact():
    rng = np.random.default_rng(1)
    x = tc.tensor(rng.standard_normal((5, 7)))
    perm = tc.stable_sort_perm(rng.integers(0, 3, size=5))
    assert np.array_equal(tc.scatter(tc.gather(x, perm, 0), perm, 0).data, x.data)


def test_layer_norm_examples():
    ones = tc.ones(4)
    zeros = tc.zeros(4)
    const = tc.tensor([[2.0, 2.0, 2.0, 2.0]])
    np.testing.assert_allclose(tc.layer_norm(const, ones, zeros).data, np.zeros((1, 4)), atol=1e-5)
    x = tc.tensor([[1.0, -1.0]])
    np.testing.assert_allclose(tc.layer_norm(x, tc.ones(2), tc.zeros(2), eps=0.0).data,
                               [[1.0, -1.0]], rtol=1e-6)
    x = tc.tensor([[0.0, 2.0]])
    got = tc.layer_norm(x, tc.tensor([2.0, 2.0]), tc.tensor([1.0, 1.0]), eps=0.0)
    np.testing.assert_allclose(got.data, [[-1.0, 3.0]], rtol=1e-6)


def test_layer_norm_statistics_fp64():
    rng = np.random.default_rng(2)
    with tc.default_dtype("float64"):
        x = tc.tensor(rng.standard_normal((6, 33)) * 8.0)
        out = tc.layer_norm(x, tc.ones(33), tc.zeros(33), eps=1e-6).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-5


def test_meter_scope_basics():
    meter = MemMeter()

    def one_alloc():
        return tc.zeros((2, 3))

    _, peak = tc.meter_scope(meter, one_alloc)
    assert peak >= 6

    meter = MemMeter()

    def alloc_free_alloc():
        t = tc.zeros(4)
        del t
        return tc.zeros(4)

    _, peak = tc.meter_scope(meter, alloc_free_alloc)
    assert peak == 4

    meter = MemMeter()

    def two_live():
        a, b = tc.zeros(8), tc.zeros(8)
        return a, b

    _, peak = tc.meter_scope(meter, two_live)
    assert peak == 16


def test_meter_peak_monotone_and_unmetered():
    meter = MemMeter()

    def work():
        peaks = []
        a = tc.zeros(10)
        peaks.append(meter.peak_live_floats)
        with tc.unmetered():
            b = tc.zeros(1000)
        peaks.append(meter.peak_live_floats)
        c = tc.zeros(5)
        peaks.append(meter.peak_live_floats)
        return peaks, (a, b, c)

    (peaks, _), final_peak = tc.meter_scope(meter, work)
    assert peaks == sorted(peaks)
    assert final_peak == 15  # unmetered block invisible


def test_int_masks_not_counted():
    meter = MemMeter()
    _, peak = tc.meter_scope(meter, lambda: Tensor(np.arange(100)))
    assert peak == 0


def test_default_dtype_context():
    assert tc.zeros(3).dtype == np.float32
    with tc.default_dtype("float64"):
        assert tc.zeros(3).dtype == np.float64
    assert tc.zeros(3).dtype == np.float32
    with pytest.raises(ValueError):
        tc.set_default_dtype("float16")


def test_rng_stream_reproducible_and_distinct():
    a = tc.rng_stream(3, 1, 2).standard_normal(5)
    b = tc.rng_stream(3, 1, 2).standard_normal(5)
    c = tc.rng_stream(3, 1, 3).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_matmul_rowstable_chunk_invariance():
    rng = np.random.default_rng(3)
    x = tc.tensor(rng.standard_normal((13, 7)))
    w = tc.tensor(rng.standard_normal((7, 9)))
    full = tc.matmul_rowstable(x, w).data
    for split in (1, 3, 13):
        rows = []
        step = -(-13 // split)
        for lo in range(0, 13, step):
            rows.append(tc.matmul_rowstable(Tensor(x.data[lo:lo + step]), w).data)
        assert np.array_equal(np.concatenate(rows, axis=0), full)
