from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import iamnn.block as block_mod
import oracle
from iamnn import ops
from iamnn.block import BlockConfig, act_score, block_forward, halting_rule, init_block_params
from iamnn.errors import ConfigError, ContractError, NumericOverflowError
from iamnn.tensor import Tensor, backward, no_grad


def randomize(p, rng, halt_bias=(-2.0, 2.0)):
    """Random affine and running statistics everywhere, random halting bias."""
    bns = [p.entry_bn] + [bn for sets in p.bn for bn in sets]
    for bn in bns:
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, bn.channels)
        bn.beta.data[:] = rng.normal(0, 0.3, bn.channels)
        bn.running_mean[:] = rng.normal(0, 0.5, bn.channels)
        bn.running_var[:] = rng.uniform(0.5, 2.0, bn.channels)
    p.act[-1][1].data[:] = rng.uniform(*halt_bias)
    return p


def make_block(rng, C=4, M=3, cin=3, **kw):
    cfg = BlockConfig(C, M, **kw)
    return cfg, init_block_params(cfg, cin, rng, np.float64)


class TestHaltingRule:
    def test_halts_on_threshold(self):
        t = halting_rule([0.6, 0.5, 0.9], 3, 0.01)
        assert t.n_iters == 2
        assert t.weights == pytest.approx([0.6, 0.4])
        assert t.remainder == pytest.approx(0.4)
        assert t.ponder == pytest.approx(2.4)

    def test_cap(self):
        t = halting_rule([0.3, 0.3, 0.3], 3, 0.01)
        assert t.n_iters == 3
        assert t.weights == pytest.approx([0.3, 0.3, 0.4])
        assert t.remainder == pytest.approx(0.4)
        assert t.ponder == pytest.approx(3.4)

    def test_first_score_halts(self):
        t = halting_rule([0.995, 0.5], 4, 0.01)
        assert (t.n_iters, t.weights, t.remainder, t.ponder) == (1, [1.0], 1.0, 2.0)

    def test_reads_only_what_it_needs(self):
        def stream():
            yield 0.7
            yield 0.7
            raise AssertionError("read past the halting point")

        assert halting_rule(stream(), 5).n_iters == 2

    def test_empty_stream(self):
        with pytest.raises(ContractError):
            halting_rule([], 3)

    def test_single_iteration_cap_ignores_scores(self):
        assert halting_rule([0.01], 1).weights == [1.0]

    @settings(max_examples=1000, deadline=None)
    @given(M=st.integers(1, 8), scores=st.lists(st.floats(1e-6, 1 - 1e-6), min_size=8, max_size=8),
           eps=st.sampled_from([0.01, 0.05, 0.1]))
    def test_simplex(self, M, scores, eps):
        t = halting_rule(scores, M, eps)
        assert abs(sum(t.weights) - 1.0) <= 1e-6
        assert all(0.0 <= w <= 1.0 for w in t.weights)
        assert 1 <= t.n_iters <= M and len(t.weights) == t.n_iters
        assert t.weights[-1] == t.remainder


class TestConfig:
    def test_defaults(self):
        cfg = BlockConfig(64, 3)
        assert cfg.bottleneck_channels == 16 and cfg.act_hidden == 64 and cfg.act_epsilon == 0.01

    @pytest.mark.parametrize("kw", [dict(max_iterations=0), dict(act_epsilon=1.0), dict(act_epsilon=0.0),
                                    dict(bottleneck_channels=0), dict(act_activation="gelu")])
    def test_invalid(self, kw):
        base = dict(channels=8, max_iterations=2)
        base.update(kw)
        with pytest.raises(ConfigError):
            BlockConfig(**base)

    def test_param_layout(self, rng):
        cfg, p = make_block(rng, C=8, M=5)
        assert p.conv1.shape == (2, 16, 1, 1) and p.conv2.shape == (2, 2, 3, 3) and p.conv3.shape == (8, 2, 1, 1)
        assert len(p.bn) == 5 and all(len(sets) == 3 for sets in p.bn)
        assert [w.shape for w, _ in p.act] == [(64, 24), (64, 64), (1, 64)]


class TestActScore:
    def test_zero_head_gives_half(self, rng):
        cfg, p = make_block(rng)
        for w, b in p.act:
            w.data[:] = 0
            b.data[:] = 0
        x = Tensor(rng.normal(size=(5, 4, 3, 3)))
        np.testing.assert_array_equal(act_score(x, x, x, p.act).data, 0.5)

    def test_saturated_bias(self, rng):
        cfg, p = make_block(rng)
        for w, b in p.act:
            w.data[:] = 0
        p.act[-1][1].data[:] = 20.0
        x = Tensor(rng.normal(size=(2, 4, 3, 3)))
        assert (act_score(x, x, x, p.act).data > 0.999999).all()

    def test_strictly_inside_unit_interval(self, rng):
        cfg, p = make_block(rng)
        for _ in range(1000 // 50):
            x0, s, f = (Tensor(rng.normal(0, 3, size=(50, 4, 2, 2))) for _ in range(3))
            h = act_score(x0, s, f, p.act).data
            assert ((h > 0) & (h < 1)).all()

    def test_uses_previous_state_first(self, rng):
        """The pooled vector is (state, input, update) in that order."""
        cfg, p = make_block(rng)
        w1 = p.act[0][0]
        w1.data[:] = 0
        w1.data[0, 0] = 1.0  # only the first channel of s_prev reaches the head
        p.act[1][0].data[:] = np.eye(64)
        p.act[1][1].data[:] = 0
        p.act[0][1].data[:] = 0
        p.act[2][0].data[:] = 0
        p.act[2][0].data[0, 0] = 1.0
        p.act[2][1].data[:] = 0
        zero = Tensor(np.zeros((1, 4, 2, 2)))
        s = Tensor(np.full((1, 4, 2, 2), 2.0))
        assert act_score(zero, s, zero, p.act).data[0] == pytest.approx(1 / (1 + np.exp(-2.0)))
        assert act_score(s, zero, s, p.act).data[0] == 0.5


class TestBlockForward:
    def test_single_iteration(self, rng):
        cfg, p = make_block(rng, M=1)
        randomize(p, rng)
        x = Tensor(rng.normal(size=(3, 3, 5, 5)))
        y, tr = block_forward(x, p, cfg)
        assert [t.n_iters for t in tr.samples] == [1, 1, 1]
        assert all(t.weights == [1.0] for t in tr.samples)
        x0 = block_mod.entry(x, p, False)
        f = block_mod.processing(ops.concat_channels([x0, Tensor(np.zeros(x0.shape))]), p, 0, False)
        np.testing.assert_allclose(y.data, x0.data + f.data, rtol=1e-12)

    @pytest.mark.parametrize("train", [False, True])
    def test_zero_residual_returns_input_projection(self, rng, train):
        cfg, p = make_block(rng, M=3)
        for w in p.shared_weights():
            w.data[:] = 0
        p.act[-1][1].data[:] = 20.0
        x = Tensor(rng.normal(size=(4, 3, 5, 5)))
        y, tr = block_forward(x, p, cfg, train=train)
        x0 = block_mod.entry(x, p, train)
        np.testing.assert_array_equal(y.data, x0.data)
        assert tr.n_iters.tolist() == [1, 1, 1, 1]

    def test_matches_straight_line_oracle(self, rng):
        seen = set()
        for trial in range(50):
            C, M = int(rng.integers(2, 7)), int(rng.integers(1, 5))
            cin, H = int(rng.integers(1, 5)), int(rng.integers(3, 8))
            cfg, p = make_block(rng, C=C, M=M, cin=cin, bottleneck_channels=int(rng.integers(1, 4)))
            randomize(p, rng)
            x = rng.normal(size=(4, cin, H, H))
            y, tr = block_forward(Tensor(x), p, cfg)
            seen.update(tr.n_iters.tolist())
            for b in range(4):
                y_ref, scores, weights = oracle.block(x[b], p, cfg)
                np.testing.assert_allclose(y.data[b], y_ref, rtol=1e-5, atol=1e-9)
                assert tr.samples[b].scores == pytest.approx(scores, rel=1e-9)
                assert tr.samples[b].weights == pytest.approx(weights, rel=1e-9)
        assert seen == {1, 2, 3, 4}

    def test_train_mode_single_sample_matches_oracle(self, rng):
        for trial in range(10):
            cfg, p = make_block(rng, C=4, M=3)
            randomize(p, rng)
            x = rng.normal(size=(1, 3, 6, 6))
            y, _ = block_forward(Tensor(x), p, cfg, train=True)
            y_ref, _, _ = oracle.block(x[0], p, cfg, batch_stats=True)
            np.testing.assert_allclose(y.data[0], y_ref, rtol=1e-5, atol=1e-9)

    def test_mixed_halting_in_one_batch(self, rng):
        """Samples that stop early are unaffected by the ones that keep going (eval mode)."""
        cfg, p = make_block(rng, C=4, M=4)
        randomize(p, rng, halt_bias=(0.0, 0.0))
        x = rng.normal(0, 2, size=(16, 3, 5, 5))
        y, tr = block_forward(Tensor(x), p, cfg)
        y_alone = np.stack([block_forward(Tensor(x[b : b + 1]), p, cfg)[0].data[0] for b in range(16)])
        np.testing.assert_allclose(y.data, y_alone, rtol=1e-12)

    def test_trace_invariants(self, rng):
        cfg, p = make_block(rng, C=4, M=5)
        randomize(p, rng, halt_bias=(-3, 1))
        _, tr = block_forward(Tensor(rng.normal(size=(32, 3, 4, 4))), p, cfg, train=True)
        for t in tr.samples:
            assert abs(sum(t.weights) - 1) < 1e-6
            assert 1 <= t.n_iters <= 5 and len(t.weights) == t.n_iters
            assert all(w >= 0 for w in t.weights)
            assert t.weights[-1] == t.remainder
        np.testing.assert_allclose(tr.remainder.data, [t.remainder for t in tr.samples], rtol=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflow_reports_iteration(self, rng):
        cfg, p = make_block(rng, M=3)
        p.act[-1][1].data[:] = -5.0
        p.bn[1][2].beta.data[:] = np.inf
        with pytest.raises(NumericOverflowError) as exc:
            block_forward(Tensor(rng.normal(size=(2, 3, 4, 4))), p, cfg)
        assert exc.value.iteration == 2

    def test_eval_skips_halted_work(self, rng):
        cfg, p = make_block(rng, C=4, M=4)
        p.act[-1][1].data[:] = 20.0
        with ops.count_macs() as counts, no_grad():
            block_forward(Tensor(rng.normal(size=(2, 3, 4, 4))), p, cfg)
        one_iter = 2 * 16 * (8 * 1 + 9 * 1 + 1 * 4)
        assert counts["conv"] == 2 * 16 * 3 * 4 + one_iter


class TestWeightSharing:
    def test_shared_weights_independent_of_cap(self):
        blobs = []
        for M in (1, 2, 7):
            cfg = BlockConfig(8, M)
            p = init_block_params(cfg, 4, np.random.default_rng(5))
            blobs.append(b"".join(w.data.tobytes() for w in p.shared_weights()))
            assert len(p.bn) == M
        assert blobs[0] == blobs[1] == blobs[2]

    def test_gradient_is_sum_of_iteration_contributions(self, rng, monkeypatch):
        cfg, p = make_block(rng, C=4, M=2)
        randomize(p, rng)
        p.act[-1][1].data[:] = -3.0  # both iterations run
        x = Tensor(rng.normal(size=(3, 3, 5, 5)))
        r = rng.normal(size=(3, 4, 5, 5))

        def loss():
            y, tr = block_forward(x, p, cfg, train=True)
            assert tr.n_iters.tolist() == [2, 2, 2]
            return (y * r).sum()

        backward(loss())
        tied = p.conv2.grad.copy()
        assert np.linalg.norm(tied) > 0

        copies = [Tensor(p.conv2.data.copy(), requires_grad=True) for _ in range(2)]
        original = block_mod.processing
        monkeypatch.setattr(
            block_mod, "processing", lambda x, params, i, train: original(x, replace(params, conv2=copies[i]), i, train)
        )
        backward(loss())
        per_iter = [c.grad for c in copies]
        assert all(np.linalg.norm(g) > 0 for g in per_iter)
        np.testing.assert_allclose(tied, per_iter[0] + per_iter[1], rtol=1e-10, atol=1e-14)


def test_block_gradients_match_finite_differences(rng):
    from iamnn.gradcheck import check_gradients_piecewise
    from iamnn.tensor import precision

    cfg, p = make_block(rng, C=4, M=2)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    tensors = dict(p.named_tensors("block"))
    target = rng.normal(size=(2, 4, 8, 8))

    def loss():
        y, tr = block_forward(x, p, cfg, train=True)
        return (y * Tensor(target)).sum() + tr.remainder.sum()

    # a one-channel bottleneck leaves some BN gammas with gradients near 1e-9, where
    # relative error only measures finite-difference roundoff: below a norm of 1e-6
    # the check is effectively absolute (1e-10)
    with precision(np.float64):
        report = check_gradients_piecewise(loss, tensors, floor=1e-6)
    assert sum(report.unresolved.values()) == 0
    assert report.worst[1] < 1e-4
