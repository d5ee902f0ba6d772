import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from semlink.codebook import (
    Codebook,
    QuantizerConfig,
    adaptive_sigma,
    andvq_forward,
    andvq_gradients,
    assign,
    avg_offset,
    baseline_forward,
    cur,
    ema_update,
    init_from_batch,
    knn_set,
    load_codebook,
    nearest_quantize,
    new_codebook,
    quantize_batch,
    save_codebook,
)


def cb_from(rows):
    return new_codebook(np.asarray(rows, dtype=float))


class TestNearestQuantize:
    def test_scalar_case(self):
        idx, cw = nearest_quantize(np.array([0.4]), cb_from([[0.0], [1.0]]))
        assert idx == 0
        assert cw == pytest.approx([0.0])

    def test_exact_codeword_hit(self):
        cb = cb_from([[1.0, 0], [0, 1.0], [2, 2], [3, -1.0], [5, 5]])
        z = np.array([3.0, -1.0])
        idx, cw = nearest_quantize(z, cb)
        assert idx == 3
        assert np.linalg.norm(z - cw) == 0.0

    def test_tie_breaks_to_smaller_index(self):
        cb = cb_from([[1.0], [-1.0], [1.0]])
        idx, _ = nearest_quantize(np.array([0.0]), cb)
        assert idx == 0

    def test_matches_full_scan_oracle(self):
        rng = np.random.default_rng(7)
        cb = cb_from(rng.normal(size=(64, 8)))
        zs = rng.normal(size=(200, 8))
        for z in zs:
            idx, _ = nearest_quantize(z, cb)
            # brute-force oracle: scan all K distances
            dists = [np.sqrt(((z - c) ** 2).sum()) for c in cb.entries]
            assert idx == int(np.argmin(dists))

    def test_empty_codebook_rejected(self):
        cb = new_codebook(np.zeros((1, 3)))
        cb.entries = np.zeros((0, 3))
        cb.ema_count = np.zeros(0)
        cb.ema_sum = np.zeros((0, 3))
        with pytest.raises(ValueError, match="empty codebook"):
            nearest_quantize(np.zeros(3), cb)


class TestKnnSet:
    def test_full_set_when_kc_equals_k(self):
        cb = cb_from([[0.0], [1.0], [5.0]])
        got = knn_set(np.array([0.4]), cb, 3)
        assert sorted(got.tolist()) == [0, 1, 2]

    def test_two_nearest(self):
        cb = cb_from([[0.0], [1.0], [5.0]])
        assert set(knn_set(np.array([0.4]), cb, 2).tolist()) == {0, 1}

    def test_sorted_by_distance_then_index(self):
        cb = cb_from([[2.0], [0.0], [2.0], [1.0]])
        got = knn_set(np.array([0.0]), cb, 4)
        assert got.tolist() == [1, 3, 0, 2]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(3)
        cb = cb_from(rng.normal(size=(32, 16)))
        z = rng.normal(size=16)
        got = knn_set(z, cb, 10)
        d = np.linalg.norm(cb.entries - z, axis=1)
        oracle = sorted(range(32), key=lambda j: (d[j], j))[:10]
        assert got.tolist() == oracle

    def test_kc_larger_than_k_rejected(self):
        with pytest.raises(ValueError):
            knn_set(np.zeros(1), cb_from([[0.0]]), 2)


class TestOffsetAndSigma:
    def test_avg_offset_hand_case(self):
        d = avg_offset(np.array([0.4]), np.array([[0.0], [1.0]]))
        assert d == pytest.approx([-0.1])

    def test_single_neighbor_reduces_to_difference(self):
        z = np.array([1.0, 2.0])
        d = avg_offset(z, np.array([[0.5, 0.5]]))
        assert d == pytest.approx([0.5, 1.5])

    def test_centroid_gives_zero_offset(self):
        nb = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        assert avg_offset(np.zeros(2), nb) == pytest.approx([0.0, 0.0])

    def test_sigma_hand_case(self):
        s = adaptive_sigma(np.array([0.4]), np.array([[0.0], [1.0]]))
        assert s == pytest.approx(0.5)

    def test_sigma_zero_on_exact_hit(self):
        assert adaptive_sigma(np.array([2.0, 3.0]), np.array([[2.0, 3.0]])) == 0.0

    def test_sigma_scales_homogeneously(self):
        rng = np.random.default_rng(11)
        z = rng.normal(size=4)
        nb = rng.normal(size=(3, 4))
        s1 = adaptive_sigma(z, nb)
        s2 = adaptive_sigma(2.5 * z, 2.5 * nb)
        assert s2 == pytest.approx(2.5 * s1)


class TestAndvqGradients:
    def test_complementarity(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            gz, gc = andvq_gradients(rng.normal(size=6))
            assert np.max(np.abs(gz + gc - 1.0)) < 1e-12

    def test_axis_aligned_offset(self):
        gz, gc = andvq_gradients(np.array([3.0, 0.0, 0.0]))
        assert gc == pytest.approx([1.0, 0.0, 0.0])
        assert gz == pytest.approx([0.0, 1.0, 1.0])

    def test_zero_offset_convention(self):
        gz, gc = andvq_gradients(np.zeros(4))
        assert not gz.any() and not gc.any()

    def test_finite_difference_oracle(self):
        # Differentiate the surrogate z -> z + |d_avg(z)| * sg[dir] with the
        # K-NN set frozen and the noise frozen at zero, so the stopped
        # direction is the deterministic centroid pull.
        rng = np.random.default_rng(9)
        neighbors = rng.normal(size=(5, 6))
        z0 = rng.normal(size=6)
        d0 = avg_offset(z0, neighbors)
        direction = -d0 / np.linalg.norm(d0)

        def surrogate(z):
            return z + np.linalg.norm(avg_offset(z, neighbors)) * direction

        h = 1e-6
        fd = np.empty(6)
        for i in range(6):
            zp, zm = z0.copy(), z0.copy()
            zp[i] += h
            zm[i] -= h
            fd[i] = (surrogate(zp)[i] - surrogate(zm)[i]) / (2 * h)
        gz, _ = andvq_gradients(d0)
        assert np.max(np.abs(fd - gz) / np.maximum(np.abs(gz), 1e-3)) < 1e-4


class TestAndvqForward:
    def setup_method(self):
        rng = np.random.default_rng(21)
        self.cb = cb_from(rng.normal(size=(16, 4)))
        self.cfg = QuantizerConfig(k_neighbors=5, surrogate="andvq", rng_seed=0)

    def test_step_magnitude_equals_offset_norm(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            z = rng.normal(size=4)
            res = andvq_forward(z, self.cb, self.cfg, rng)
            assert np.linalg.norm(res.z_q - z) == pytest.approx(np.linalg.norm(res.d_avg))

    def test_index_is_hard_nearest(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=4)
        res = andvq_forward(z, self.cb, self.cfg, rng)
        assert res.index == nearest_quantize(z, self.cb)[0]

    def test_degenerate_input_returns_input(self):
        cb = cb_from([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        cfg = QuantizerConfig(k_neighbors=3, surrogate="andvq")
        res = andvq_forward(np.array([1.0, 0.0]), cb, cfg, np.random.default_rng(0))
        assert np.array_equal(res.z_q, [1.0, 0.0])
        assert not res.grad_z_diag.any() and not res.grad_c_diag.any()
        assert res.sigma_q == 0.0

    def test_hard_vq_reduction(self):
        # sigma_q = 0 with K_c = 1 only happens when z coincides with its
        # nearest codeword; the surrogate must then return exactly that codeword.
        cb = cb_from([[2.0, -1.0], [0.0, 0.0]])
        cfg = QuantizerConfig(k_neighbors=1, surrogate="andvq")
        z = np.array([2.0, -1.0])
        res = andvq_forward(z, cb, cfg, np.random.default_rng(4))
        assert res.sigma_q == 0.0
        assert res.index == 0
        assert np.array_equal(res.z_q, nearest_quantize(z, cb)[1])

    def test_mean_concentrates_on_centroid_pull(self):
        # Monte Carlo: the expected surrogate drifts from z toward the
        # K-NN centroid, and the zero-noise limit lands on z - d_avg exactly.
        rng = np.random.default_rng(77)
        z = np.array([0.9, 0.4, -0.2, 1.4])
        draws = np.array([
            andvq_forward(z, self.cb, self.cfg, rng).z_q for _ in range(10_000)
        ])
        res = andvq_forward(z, self.cb, self.cfg, np.random.default_rng(0))
        drift = draws.mean(axis=0) - z
        d_hat = res.d_avg / np.linalg.norm(res.d_avg)
        assert drift @ (-d_hat) > 3 * draws.std() / np.sqrt(10_000)

    def test_zero_noise_limit_is_centroid_step(self):
        class ZeroNoise:
            def normal(self, loc, scale, size=None):
                return np.zeros(size)

        z = np.array([0.9, 0.4, -0.2, 1.4])
        res = andvq_forward(z, self.cb, self.cfg, ZeroNoise())
        assert res.z_q == pytest.approx(z - res.d_avg, abs=1e-12)

    def test_determinism(self):
        rng = np.random.default_rng(123)
        a = [andvq_forward(np.full(4, 0.3), self.cb, self.cfg, rng).z_q for _ in range(5)]
        rng = np.random.default_rng(123)
        b = [andvq_forward(np.full(4, 0.3), self.cb, self.cfg, rng).z_q for _ in range(5)]
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestBaselines:
    def setup_method(self):
        rng = np.random.default_rng(31)
        self.cb = cb_from(rng.normal(size=(8, 3)))

    def test_ste_on_codeword_is_identity(self):
        z = self.cb.entries[5].copy()
        res = baseline_forward(z, self.cb, "ste")
        assert np.array_equal(res.z_q, z)
        assert np.array_equal(res.grad_z_diag, np.ones(3))
        assert np.array_equal(res.grad_c_diag, np.zeros(3))

    def test_ste_returns_nearest_codeword(self):
        z = np.array([0.1, 0.2, 0.3])
        res = baseline_forward(z, self.cb, "ste")
        idx, cw = nearest_quantize(z, self.cb)
        assert res.index == idx
        assert np.array_equal(res.z_q, cw)

    def test_nsvq_magnitude_matches_quantization_error(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            z = rng.normal(size=3)
            res = baseline_forward(z, self.cb, "nsvq", rng)
            _, cw = nearest_quantize(z, self.cb)
            assert np.linalg.norm(res.z_q - z) == pytest.approx(np.linalg.norm(z - cw))

    def test_nsvq_is_isotropic(self):
        # E[z_q] = z because the direction is uniform on the sphere.
        rng = np.random.default_rng(8)
        z = np.array([0.5, -0.3, 0.8])
        _, cw = nearest_quantize(z, self.cb)
        err = np.linalg.norm(z - cw)
        n = 100_000
        draws = rng.normal(size=(n, 3))
        draws /= np.linalg.norm(draws, axis=1, keepdims=True)
        mean = (z + err * draws).mean(axis=0)
        se = err / np.sqrt(n)
        assert np.all(np.abs(mean - z) < 3 * se)

    def test_gradient_complementarity(self):
        rng = np.random.default_rng(10)
        for s in ("ste", "nsvq"):
            res = baseline_forward(rng.normal(size=3), self.cb, s, rng)
            assert res.grad_z_diag + res.grad_c_diag == pytest.approx(np.ones(3))


class TestEmaUpdate:
    def test_count_decay_hand_case(self):
        # decay 0.9, prior count 10, epoch count 20 -> 11
        cb = Codebook(np.zeros((1, 2)), np.array([10.0]), np.zeros((1, 2)), decay=0.9)
        out = ema_update(cb, np.zeros(20, dtype=int), np.zeros((20, 2)))
        assert out.ema_count[0] == pytest.approx(11.0)

    def test_decay_free_reduction_is_batch_mean(self):
        rng = np.random.default_rng(12)
        cb = Codebook(np.zeros((4, 3)), np.zeros(4), np.zeros((4, 3)), decay=0.0, eps=1e-15)
        vals = rng.normal(size=(40, 3))
        asg = rng.integers(0, 4, size=40)
        out = ema_update(cb, asg, vals)
        for k in range(4):
            sel = asg == k
            assert out.entries[k] == pytest.approx(vals[sel].mean(axis=0), abs=1e-12)

    def test_quotient_invariant_exact(self):
        rng = np.random.default_rng(13)
        cb = init_from_batch(rng.normal(size=(50, 4)), 8, rng)
        for _ in range(3):
            cb = ema_update(cb, rng.integers(0, 8, size=30), rng.normal(size=(30, 4)))
            assert np.array_equal(cb.entries, cb.ema_sum / (cb.ema_count + cb.eps)[:, None])

    def test_unused_entry_decays_geometrically(self):
        # never-assigned entry: sums decay by gamma each epoch, so the entry
        # norm follows |c| * (g*S)/(g*C + eps) -> closed-form geometric decay
        cb = new_codebook(np.array([[4.0, 0.0], [0.0, 1.0]]), decay=0.9, eps=1e-5)
        g, eps = 0.9, 1e-5
        s0 = cb.ema_sum[1].copy()
        c0 = cb.ema_count[1]
        for e in range(1, 30):
            cb = ema_update(cb, np.zeros(5, dtype=int), np.ones((5, 2)) * 4.0)
            expect = (g ** e * s0) / (g ** e * c0 + eps)
            assert cb.entries[1] == pytest.approx(expect, rel=1e-12)

    def test_fixed_point_convergence(self):
        # identical assignments + surrogates every epoch: entries approach the
        # surrogate means; residual bounded by the geometric tail of the decay
        rng = np.random.default_rng(14)
        cb = init_from_batch(rng.normal(size=(100, 4)), 8, rng, decay=0.9)
        asg = rng.integers(0, 8, size=100)
        vals = rng.normal(size=(100, 4))
        means = np.stack([vals[asg == k].mean(axis=0) for k in range(8)])
        gap0 = np.abs(cb.entries - means).max()
        for _ in range(50):
            cb = ema_update(cb, asg, vals)
        tol = 0.9 ** 50 / (1 - 0.9) * gap0
        assert np.abs(cb.entries - means).max() < max(tol, 1e-3)


class TestCur:
    def test_half_used(self):
        cb = new_codebook(np.zeros((4, 1)))
        assert cur(cb, np.array([0, 2, 2, 0])) == 0.5

    def test_all_used(self):
        cb = new_codebook(np.zeros((3, 1)))
        assert cur(cb, np.array([0, 1, 2, 0])) == 1.0

    def test_empty_assignments(self):
        cb = new_codebook(np.zeros((3, 1)))
        assert cur(cb, np.array([], dtype=int)) == 0.0


class TestBatchOps:
    def test_assign_matches_scalar(self):
        rng = np.random.default_rng(15)
        cb = cb_from(rng.normal(size=(12, 5)))
        zs = rng.normal(size=(64, 5))
        got = assign(zs, cb)
        for z, idx in zip(zs, got):
            assert idx == nearest_quantize(z, cb)[0]

    @pytest.mark.parametrize("surrogate", ["andvq", "nsvq", "ste"])
    def test_batch_magnitude_contract(self, surrogate):
        rng = np.random.default_rng(16)
        cb = cb_from(rng.normal(size=(12, 5)))
        zs = rng.normal(size=(64, 5))
        cfg = QuantizerConfig(k_neighbors=4, surrogate=surrogate)
        idx, zq = quantize_batch(zs, cb, cfg, rng)
        assert np.array_equal(idx, assign(zs, cb))
        if surrogate == "ste":
            assert np.array_equal(zq, cb.entries[idx])
        elif surrogate == "nsvq":
            err = np.linalg.norm(zs - cb.entries[idx], axis=1)
            assert np.linalg.norm(zq - zs, axis=1) == pytest.approx(err)
        else:
            for z, out in zip(zs, zq):
                nb = cb.entries[knn_set(z, cb, 4)]
                assert np.linalg.norm(out - z) == pytest.approx(
                    np.linalg.norm(avg_offset(z, nb)))


class TestTrainingDynamics:
    """Epoch-level behavior of the surrogate + EMA loop on a mixture corpus."""

    @staticmethod
    def corpus(seed, n=4096, dim=8, comps=8, spread=1.0, sep=0.8):
        rng = np.random.default_rng(seed)
        centers = rng.normal(0, sep, size=(comps, dim))
        lab = rng.integers(0, comps, size=n)
        return centers[lab] + rng.normal(0, spread, size=(n, dim))

    @staticmethod
    def run_epochs(x, cb, cfg, epochs, seed):
        rng = np.random.default_rng(seed)
        curs = []
        for _ in range(epochs):
            idx, zq = quantize_batch(x, cb, cfg, rng)
            curs.append(cur(cb, idx))
            cb = ema_update(cb, assign(zq, cb), zq)
        return cb, np.array(curs)

    @staticmethod
    def quant_mse(x, entries):
        return float((cdist(x, entries).min(axis=1) ** 2).mean())

    def test_andvq_tracks_lloyd_oracle(self):
        x = self.corpus(201)
        cb0 = init_from_batch(x, 8, np.random.default_rng(2), decay=0.9, eps=1e-5)
        cfg = QuantizerConfig(k_neighbors=3, surrogate="andvq")
        cb, curs = self.run_epochs(x, cb0, cfg, 50, seed=1)

        entries = cb0.entries.copy()  # independent Lloyd oracle, same init
        for _ in range(50):
            idx = cdist(x, entries).argmin(axis=1)
            for k in range(8):
                if (idx == k).any():
                    entries[k] = x[idx == k].mean(axis=0)

        assert self.quant_mse(x, cb.entries) <= 1.1 * self.quant_mse(x, entries)
        smooth = np.convolve(curs, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(smooth) >= -1e-9)

    def test_determinism_bitwise(self):
        x = self.corpus(202, n=512)
        cfg = QuantizerConfig(k_neighbors=5, surrogate="andvq", rng_seed=3)
        out = []
        for _ in range(2):
            cb = init_from_batch(x, 16, np.random.default_rng(cfg.rng_seed))
            cb, _ = self.run_epochs(x, cb, cfg, 10, seed=cfg.rng_seed)
            out.append(cb.entries)
        assert np.array_equal(out[0], out[1])


class TestCodebookIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(17)
        cb = init_from_batch(rng.normal(size=(40, 6)).astype(np.float32), 10, rng)
        cb = ema_update(cb, rng.integers(0, 10, size=30), rng.normal(size=(30, 6)))
        path = tmp_path / "cb.sqc"
        save_codebook(cb, path)
        back = load_codebook(path, decay=cb.decay, eps=cb.eps)
        assert back.entries == pytest.approx(cb.entries, abs=1e-6)
        assert back.ema_count == pytest.approx(cb.ema_count, abs=1e-6)
        assert back.ema_sum == pytest.approx(cb.ema_sum, abs=1e-5)

    def test_layout_is_explicit_little_endian(self, tmp_path):
        cb = new_codebook(np.array([[1.0, 2.0], [3.0, 4.0]]))
        path = tmp_path / "cb.sqc"
        save_codebook(cb, path)
        raw = path.read_bytes()
        assert raw[:4] == b"SQC1"
        assert np.frombuffer(raw[4:12], dtype="<u4").tolist() == [2, 2]
        assert np.frombuffer(raw[12:28], dtype="<f4").tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.sqc"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_codebook(path)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(min_value=1, max_value=12),
    st.integers(min_value=2, max_value=30),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_knn_prefix_consistency(k_c, k, seed):
    """The K_c-NN set is always a prefix of the full distance ordering."""
    rng = np.random.default_rng(seed)
    cb = new_codebook(rng.normal(size=(k, 3)))
    z = rng.normal(size=3)
    k_c = min(k_c, k)
    full = knn_set(z, cb, k)
    assert knn_set(z, cb, k_c).tolist() == full[:k_c].tolist()


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_gradient_complementarity_property(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=rng.integers(1, 16))
    gz, gc = andvq_gradients(d)
    if np.linalg.norm(d) > 0:
        assert np.max(np.abs(gz + gc - 1.0)) < 1e-12
