"""Sparse propagation blocks vs brute-force oracles, plus invariants."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clickseg.autodiff import Tensor
from clickseg.errors import DimensionError, EmptyClickSetError
from clickseg.graph import (
    BenchmarkReport, ClickIndexSet, HsgmParams, SgmParams, benchmark_scaling,
    dense_nonlocal_oracle, hsgm_forward, sgm_attention, sgm_forward,
)


def random_sgm_params(rng, c, with_embed=False):
    return SgmParams(
        w_c=Tensor(rng.standard_normal((c, c)) * 0.6),
        theta=Tensor(rng.standard_normal((c, c)) * 0.6),
        phi=Tensor(rng.standard_normal((c, c)) * 0.6),
        polarity_embed=Tensor(rng.standard_normal((2, c)) * 0.4) if with_embed else None,
    )


def random_clicks(rng, n, m, all_positive=False):
    idx = rng.choice(n, size=m, replace=False)
    pol = np.ones(m, dtype=int) if all_positive else rng.integers(0, 2, size=m)
    return ClickIndexSet.from_flat(idx, pol, n)


def sgm_loop_oracle(f, clicks, p):
    """Per-location scalar computation of the residual message passing."""
    c, h, w = f.shape
    rows = f.reshape(c, h * w).T
    out = rows.copy()
    keys = []
    for i, u in enumerate(clicks.indices):
        kf = rows[u].copy()
        if p.polarity_embed is not None:
            kf = kf + p.polarity_embed.data[clicks.polarities[i]]
        keys.append(p.phi.data @ kf)
    for n in range(h * w):
        q = p.theta.data @ rows[n]
        logits = np.array([q @ k for k in keys])
        e = np.exp(logits - logits.max())
        att = e / e.sum()
        msg = np.zeros(c)
        for j, u in enumerate(clicks.indices):
            msg += att[j] * (p.w_c.data.T @ rows[u])
        out[n] = rows[n] + msg
    return out.T.reshape(c, h, w)


class TestSgmAttention:
    def test_single_click_rows_are_one(self):
        rng = np.random.default_rng(0)
        f = Tensor(rng.standard_normal((4, 3, 3)))
        p = random_sgm_params(rng, 4)
        att = sgm_attention(f, random_clicks(rng, 9, 1), p).data
        np.testing.assert_allclose(att, np.ones((9, 1)), atol=0)

    def test_zero_transforms_give_uniform(self):
        rng = np.random.default_rng(1)
        f = Tensor(rng.standard_normal((4, 2, 3)))
        p = SgmParams(w_c=Tensor(np.zeros((4, 4))), theta=Tensor(np.zeros((4, 4))),
                      phi=Tensor(np.zeros((4, 4))))
        att = sgm_attention(f, random_clicks(rng, 6, 3), p).data
        np.testing.assert_allclose(att, 1.0 / 3.0, atol=1e-15)

    def test_matches_direct_computation(self):
        rng = np.random.default_rng(2)
        f = Tensor(rng.standard_normal((4, 2, 2)))
        p = random_sgm_params(rng, 4)
        clicks = random_clicks(rng, 4, 2)
        att = sgm_attention(f, clicks, p).data
        rows = f.data.reshape(4, 4).T
        for n in range(4):
            logits = np.array([(p.theta.data @ rows[n]) @ (p.phi.data @ rows[u])
                               for u in clicks.indices])
            e = np.exp(logits)
            np.testing.assert_allclose(att[n], e / e.sum(), atol=1e-12)

    def test_empty_clicks_rejected(self):
        rng = np.random.default_rng(3)
        f = Tensor(rng.standard_normal((4, 2, 2)))
        with pytest.raises(EmptyClickSetError):
            sgm_attention(f, ClickIndexSet((), ()), random_sgm_params(rng, 4))

    def test_rows_sum_to_one_many_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            c = int(rng.integers(1, 6))
            h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            m = int(rng.integers(1, min(h * w, 4) + 1))
            f = Tensor(rng.standard_normal((c, h, w)) * 3)
            p = random_sgm_params(rng, c, with_embed=bool(rng.integers(0, 2)))
            att = sgm_attention(f, random_clicks(rng, h * w, m), p).data
            np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-9)
            assert (att > 0).all() and (att <= 1.0).all()


class TestSgmForward:
    def test_no_clicks_identity_bit_exact(self):
        rng = np.random.default_rng(5)
        f = Tensor(rng.standard_normal((3, 4, 4)))
        out = sgm_forward(f, ClickIndexSet((), ()), random_sgm_params(rng, 3))
        assert out is f

    def test_zero_message_transform_identity(self):
        rng = np.random.default_rng(6)
        f = Tensor(rng.standard_normal((3, 4, 4)))
        p = random_sgm_params(rng, 3)
        p.w_c.data[:] = 0.0
        out = sgm_forward(f, random_clicks(rng, 16, 3), p)
        np.testing.assert_allclose(out.data, f.data, atol=1e-15)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        f = Tensor(rng.standard_normal((3, 3, 3)))
        p = random_sgm_params(rng, 3)
        clicks = random_clicks(rng, 9, 2)
        np.testing.assert_allclose(sgm_forward(f, clicks, p).data,
                                   sgm_loop_oracle(f.data, clicks, p), atol=1e-12)

    def test_matches_loop_oracle_with_polarity_embed(self):
        rng = np.random.default_rng(8)
        f = Tensor(rng.standard_normal((4, 2, 3)))
        p = random_sgm_params(rng, 4, with_embed=True)
        clicks = random_clicks(rng, 6, 3)
        np.testing.assert_allclose(sgm_forward(f, clicks, p).data,
                                   sgm_loop_oracle(f.data, clicks, p), atol=1e-12)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 5))
        f = Tensor(rng.standard_normal((c, 3, 4)))
        p = random_sgm_params(rng, c, with_embed=True)
        m = int(rng.integers(2, 5))
        idx = rng.choice(12, size=m, replace=False)
        pol = rng.integers(0, 2, size=m)
        fwd = sgm_forward(f, ClickIndexSet.from_flat(idx, pol, 12), p).data
        perm = rng.permutation(m)
        fwd_p = sgm_forward(f, ClickIndexSet.from_flat(idx[perm], pol[perm], 12), p).data
        np.testing.assert_allclose(fwd, fwd_p, atol=1e-12)

    def test_duplicate_cells_deduplicated(self):
        cs = ClickIndexSet.from_flat([3, 3, 5], [1, 0, 1], 9)
        assert cs.indices == (3, 5)
        assert cs.polarities == (1, 1)

    def test_out_of_range_index_rejected(self):
        with pytest.raises(ValueError):
            ClickIndexSet.from_flat([9], [1], 9)


class TestHsgm:
    def _params(self, rng, cl, ch, embed=False):
        return HsgmParams(
            sigma_w=Tensor(rng.standard_normal((cl, cl + ch)) * 0.5),
            sigma_b=Tensor(rng.standard_normal(cl) * 0.2),
            w_f=Tensor(rng.standard_normal((cl, cl)) * 0.5),
            theta_g=Tensor(rng.standard_normal((ch, ch)) * 0.5),
            phi_g=Tensor(rng.standard_normal((ch, ch)) * 0.5),
            polarity_embed=Tensor(rng.standard_normal((2, ch)) * 0.4) if embed else None,
        )

    @staticmethod
    def _fusion(f_low, g_up, p):
        cl = p.w_f.shape[0]
        n = f_low.shape[1] * f_low.shape[2]
        stacked = np.concatenate([f_low.reshape(f_low.shape[0], n),
                                  g_up.reshape(g_up.shape[0], n)], axis=0).T
        return np.maximum(stacked @ p.sigma_w.data.T + p.sigma_b.data, 0.0)

    def test_zero_message_transform_is_fusion_only(self):
        rng = np.random.default_rng(10)
        f_low = Tensor(rng.standard_normal((3, 4, 4)))
        g_up = Tensor(rng.standard_normal((5, 4, 4)))
        p = self._params(rng, 3, 5)
        p.w_f.data[:] = 0.0
        out = hsgm_forward(f_low, g_up, random_clicks(rng, 16, 3), p).data
        fusion = self._fusion(f_low.data, g_up.data, p).T.reshape(3, 4, 4)
        np.testing.assert_allclose(out, fusion, atol=1e-12)

    def test_single_click_message_is_uniform(self):
        rng = np.random.default_rng(11)
        f_low = Tensor(rng.standard_normal((3, 3, 3)))
        g_up = Tensor(rng.standard_normal((4, 3, 3)))
        p = self._params(rng, 3, 4)
        clicks = random_clicks(rng, 9, 1)
        out = hsgm_forward(f_low, g_up, clicks, p).data
        fusion = self._fusion(f_low.data, g_up.data, p)
        msg = p.w_f.data.T @ fusion[clicks.indices[0]]
        diff = (out.reshape(3, 9).T - fusion)
        np.testing.assert_allclose(diff, np.tile(msg, (9, 1)), atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(12)
        f_low = Tensor(rng.standard_normal((3, 6, 6)))
        g_up = Tensor(rng.standard_normal((4, 6, 6)))
        p = self._params(rng, 3, 4, embed=True)
        clicks = random_clicks(rng, 36, 3)
        out = hsgm_forward(f_low, g_up, clicks, p).data

        fusion = self._fusion(f_low.data, g_up.data, p)
        g_rows = g_up.data.reshape(4, 36).T
        expected = np.empty((36, 3))
        for n in range(36):
            logits = []
            for j, u in enumerate(clicks.indices):
                kf = g_rows[u] + p.polarity_embed.data[clicks.polarities[j]]
                logits.append((p.theta_g.data @ g_rows[n]) @ (p.phi_g.data @ kf))
            logits = np.array(logits)
            e = np.exp(logits - logits.max())
            att = e / e.sum()
            msg = sum(att[j] * (p.w_f.data.T @ fusion[u])
                      for j, u in enumerate(clicks.indices))
            expected[n] = fusion[n] + msg
        np.testing.assert_allclose(out.reshape(3, 36).T, expected, atol=1e-12)

    def test_grid_mismatch_rejected(self):
        rng = np.random.default_rng(13)
        with pytest.raises(DimensionError, match="grids"):
            hsgm_forward(Tensor(rng.standard_normal((3, 4, 4))),
                         Tensor(rng.standard_normal((4, 5, 4))),
                         ClickIndexSet((), ()), self._params(rng, 3, 4))

    def test_attention_ignores_low_level_perturbations(self):
        # Perturbing the low-level map away from every click changes the
        # output only through the fusion at the perturbed location; the
        # message field (attention * click messages) is untouched.
        rng = np.random.default_rng(14)
        f_low = Tensor(rng.standard_normal((3, 4, 4)))
        g_up = Tensor(rng.standard_normal((4, 4, 4)))
        p = self._params(rng, 3, 4)
        clicks = ClickIndexSet.from_flat([0, 5], [1, 0], 16)
        out_a = hsgm_forward(f_low, g_up, clicks, p).data.reshape(3, 16).T
        fus_a = self._fusion(f_low.data, g_up.data, p)

        perturbed = f_low.data.copy()
        perturbed[:, 2, 3] += 1.5          # flat index 11, not a click
        out_b = hsgm_forward(Tensor(perturbed), g_up, clicks, p).data.reshape(3, 16).T
        fus_b = self._fusion(perturbed, g_up.data, p)
        np.testing.assert_allclose(out_a - fus_a, out_b - fus_b, atol=1e-12)

    def test_no_clicks_is_fusion_only(self):
        rng = np.random.default_rng(15)
        f_low = Tensor(rng.standard_normal((3, 4, 4)))
        g_up = Tensor(rng.standard_normal((4, 4, 4)))
        p = self._params(rng, 3, 4)
        out = hsgm_forward(f_low, g_up, ClickIndexSet((), ()), p).data
        fusion = self._fusion(f_low.data, g_up.data, p).T.reshape(3, 4, 4)
        np.testing.assert_allclose(out, fusion, atol=1e-15)


class TestDenseOracle:
    def test_full_columns_match_hand_computation(self):
        rng = np.random.default_rng(20)
        f = rng.standard_normal((2, 2, 2))
        p = random_sgm_params(rng, 2)
        out = dense_nonlocal_oracle(f, p)
        rows = f.reshape(2, 4).T
        for n in range(4):
            logits = np.array([(p.theta.data @ rows[n]) @ (p.phi.data @ rows[m])
                               for m in range(4)])
            e = np.exp(logits - logits.max())
            att = e / e.sum()
            expected = rows[n] + sum(att[m] * (p.w_c.data.T @ rows[m]) for m in range(4))
            np.testing.assert_allclose(out.reshape(2, 4).T[n], expected, atol=1e-12)

    @pytest.mark.parametrize("with_embed", [False, True])
    def test_restricted_equals_sparse(self, with_embed):
        rng = np.random.default_rng(21)
        for _ in range(20):
            f = rng.standard_normal((4, 8, 8))
            p = random_sgm_params(rng, 4, with_embed=with_embed)
            clicks = random_clicks(rng, 64, 3)
            sparse = sgm_forward(Tensor(f), clicks, p).data
            dense = dense_nonlocal_oracle(f, p, restrict_cols=clicks)
            assert np.abs(sparse - dense).max() <= 1e-9

    def test_uniform_features_single_channel(self):
        p = SgmParams(w_c=Tensor([[2.0]]), theta=Tensor([[1.0]]), phi=Tensor([[1.0]]))
        f = np.full((1, 3, 3), 0.7)
        out = dense_nonlocal_oracle(f, p)
        np.testing.assert_allclose(out, 0.7 + 2.0 * 0.7, atol=1e-12)

    def test_blocking_matches_unblocked(self):
        rng = np.random.default_rng(22)
        f = rng.standard_normal((3, 5, 7))
        p = random_sgm_params(rng, 3)
        np.testing.assert_allclose(dense_nonlocal_oracle(f, p, block=4),
                                   dense_nonlocal_oracle(f, p, block=10_000),
                                   atol=1e-12)


class TestBenchmark:
    def test_report_shape_and_outputs(self, tmp_path):
        report = benchmark_scaling(c=8, m=3, sizes=[128, 256], runs=2, warmup=1)
        assert len(report.rows) == 2
        assert all(r.sparse_ms > 0 and r.dense_ms > 0 for r in report.rows)
        csv = tmp_path / "bench.csv"
        js = tmp_path / "bench.json"
        report.to_csv(csv)
        report.to_json(js)
        header = csv.read_text().splitlines()[0]
        assert header == "n,m,c,sparse_ms,dense_ms"
        import json
        payload = json.loads(js.read_text())
        assert "log_log_slopes" in payload and len(payload["points"]) == 2

    def test_zero_clicks_identity_fast_path(self):
        report = benchmark_scaling(c=4, m=0, sizes=[64, 128], runs=2, warmup=0)
        assert all(r.sparse_ms >= 0 for r in report.rows)

    def test_unsorted_sizes_rejected(self):
        with pytest.raises(ValueError):
            benchmark_scaling(c=4, m=2, sizes=[256, 128], runs=1)

    def test_doubling_ratio_picks_largest_pair(self):
        report = BenchmarkReport(rows=[], sparse_slope=1.0, dense_slope=None, runs=1)
        from clickseg.graph import BenchmarkRow
        report.rows = [BenchmarkRow(100, 1, 1, 1.0, None),
                       BenchmarkRow(200, 1, 1, 2.0, None),
                       BenchmarkRow(400, 1, 1, 5.0, None)]
        assert report.doubling_ratio("sparse") == 2.5
