"""Network assembly: shape trace, parameter accounting, determinism,
checkpoints."""

import numpy as np
import pytest

from cellsearch.genotype import Genotype
from cellsearch.layers import ParamStore
from cellsearch.network import (FIXED, RELAXED, CheckpointError, NetworkConfig,
                                SuperNet, count_parameters, default_reduce_positions,
                                load_checkpoint, save_checkpoint)
from cellsearch.search_space import AlphaParams, ConvTriplet, OperatorKind
from cellsearch.tensor import Tensor

ALL_SKIP = Genotype(
    normal=tuple(((0, "skip"), (1, "skip")) for _ in range(4)),
    reduce=tuple(((0, "skip"), (1, "skip")) for _ in range(4)),
)


def tiny_config(**kw):
    defaults = dict(num_cells=3, init_channels=2, num_classes=4, input_size=16)
    defaults.update(kw)
    return NetworkConfig(**defaults)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestConfig:
    def test_default_reduce_positions_are_thirds(self):
        assert default_reduce_positions(6) == (2, 4)
        assert NetworkConfig(num_cells=6, num_classes=4).reduce_positions == (2, 4)

    def test_bounds_checks(self):
        NetworkConfig(num_cells=3, num_classes=4, reduce_positions=(1, 2))
        with pytest.raises(ValueError):
            NetworkConfig(num_cells=3, num_classes=4, reduce_positions=(1, 3))
        with pytest.raises(ValueError):
            NetworkConfig(num_cells=2, num_classes=4)
        with pytest.raises(ValueError):
            NetworkConfig(num_cells=3, num_classes=4, input_size=20)
        with pytest.raises(ValueError):
            NetworkConfig(num_cells=3, num_classes=4, reduce_positions=(1, 1))


class TestShapes:
    def test_feature_map_is_input_over_eight(self):
        cfg = NetworkConfig(num_cells=6, init_channels=2, num_classes=4,
                            reduce_positions=(2, 4), input_size=32)
        net = SuperNet(cfg, rng=rng(1), dtype=np.float64).eval()
        alphas = AlphaParams(rng(2), dtype=np.float64)
        feats = net.features(np.zeros((1, 3, 32, 32)), alphas)
        assert feats.shape[2:] == (4, 4)

    @pytest.mark.parametrize("positions", [(0, 1), (1, 2), (0, 2)])
    def test_adjacent_and_leading_reduce_positions_align(self, positions):
        cfg = tiny_config(reduce_positions=positions)
        net = SuperNet(cfg, rng=rng(3), dtype=np.float64).eval()
        alphas = AlphaParams(rng(4), dtype=np.float64)
        feats = net.features(np.zeros((2, 3, 16, 16)), alphas)
        assert feats.shape[2:] == (2, 2)

    def test_logits_shape(self):
        net = SuperNet(tiny_config(), rng=rng(5), dtype=np.float64).eval()
        alphas = AlphaParams(rng(6), dtype=np.float64)
        logits = net.forward(np.zeros((2, 3, 16, 16)), alphas)
        assert logits.shape == (2, 4)

    def test_wrong_input_size_rejected(self):
        net = SuperNet(tiny_config(), rng=rng(7), dtype=np.float64)
        alphas = AlphaParams(rng(8), dtype=np.float64)
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 3, 32, 32)), alphas)

    def test_mode_argument_contracts(self):
        net = SuperNet(tiny_config(), rng=rng(9), dtype=np.float64)
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 3, 16, 16)))  # relaxed without alphas
        fixed = SuperNet(tiny_config(), mode=FIXED, genotype=ALL_SKIP, rng=rng(10),
                         dtype=np.float64)
        with pytest.raises(ValueError):
            fixed.forward(np.zeros((1, 3, 16, 16)), AlphaParams(rng(11), dtype=np.float64))
        with pytest.raises(ValueError):
            SuperNet(tiny_config(), mode=FIXED)  # fixed requires genotype
        with pytest.raises(ValueError):
            SuperNet(tiny_config(), mode=RELAXED, genotype=ALL_SKIP)


class TestDeterminism:
    def test_eval_forward_is_pure(self):
        net = SuperNet(tiny_config(), rng=rng(12), dtype=np.float64).eval()
        alphas = AlphaParams(rng(13), dtype=np.float64)
        x = rng(14).normal(size=(2, 3, 16, 16))
        a = net.forward(x, alphas).data
        b = net.forward(x, alphas).data
        assert np.array_equal(a, b)

    def test_duplicate_images_get_identical_logits(self):
        net = SuperNet(tiny_config(), mode=FIXED, genotype=ALL_SKIP, rng=rng(15),
                       dtype=np.float64).eval()
        img = rng(16).normal(size=(1, 3, 16, 16))
        batch = np.concatenate([img, img], axis=0)
        logits = net.forward(batch).data
        np.testing.assert_array_equal(logits[0], logits[1])

    def test_relaxed_composition_matches_manual_stacking(self):
        cfg = tiny_config()
        net = SuperNet(cfg, rng=rng(17), dtype=np.float64).eval()
        alphas = AlphaParams(rng(18), dtype=np.float64)
        x = rng(19).normal(size=(1, 3, 16, 16))
        want = net.forward(x, alphas).data

        from cellsearch import ops
        from cellsearch.search_space import NORMAL, REDUCE
        xt = Tensor(np.asarray(x))
        s0 = net.stem1_norm(net.stem1_conv(xt))
        s1 = net.stem2_norm(net.stem2_conv(s0))
        rows = {k: alphas.coefficient_rows(k) for k in (NORMAL, REDUCE)}
        for (pre0, pre1), cell in zip(net.adapters, net.cells):
            s0, s1 = s1, cell(pre0(s0), pre1(s1), rows[cell.cell_kind])
        got = net.classifier(ops.global_avg_pool(s1)).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_alpha_gradient_is_nonzero(self):
        from cellsearch import ops
        net = SuperNet(tiny_config(), rng=rng(20), dtype=np.float64).train()
        alphas = AlphaParams(rng(21), dtype=np.float64)
        x = rng(22).normal(size=(2, 3, 16, 16))
        loss = ops.cross_entropy(net.forward(x, alphas), np.array([0, 1]))
        loss.backward()
        assert np.abs(alphas.normal.grad).max() > 0
        assert np.abs(alphas.reduce.grad).max() > 0


class TestParameterCounting:
    def test_linear_head_closed_form(self):
        cfg = tiny_config()
        net = SuperNet(cfg, rng=rng(23))
        head = [p for n, p in net.store.params() if n.startswith("head.")]
        got = sum(p.data.size for p in head)
        assert got == net.feature_channels * cfg.num_classes + cfg.num_classes

    def test_separable_triplet_conv_weight_count(self):
        store = ParamStore()
        trip = ConvTriplet(store, "t", OperatorKind.SEP_CONV_3, 16, 16, stride=1,
                           rng=rng(24), dtype=np.float32, affine=True)
        conv_weights = sum(p.data.size for n, p in store.params() if n.endswith(".weight"))
        norm_params = sum(p.data.size for n, p in store.params()
                          if n.endswith(".gamma") or n.endswith(".beta"))
        assert conv_weights == 16 * 9 + 16 * 16 == 400
        assert norm_params == 2 * 16
        assert store.num_parameters() == 400 + 32

    def test_same_build_same_count(self):
        cfg = tiny_config()
        a = SuperNet(cfg, mode=FIXED, genotype=ALL_SKIP, rng=rng(25))
        b = SuperNet(cfg, mode=FIXED, genotype=ALL_SKIP, rng=rng(99))
        assert count_parameters(a) == count_parameters(b)

    def test_fixed_strictly_below_relaxed(self):
        cfg = tiny_config()
        relaxed = SuperNet(cfg, rng=rng(26))
        fixed = SuperNet(cfg, mode=FIXED, genotype=ALL_SKIP, rng=rng(27))
        assert count_parameters(fixed) < count_parameters(relaxed)

    def test_all_skip_fixed_count_is_analytic(self):
        cfg = tiny_config(reduce_positions=(1, 2))
        net = SuperNet(cfg, mode=FIXED, genotype=ALL_SKIP, rng=rng(28))
        c0 = cfg.init_channels
        c_stem = 3 * c0

        expected = 27 * c_stem + 2 * c_stem          # stem conv1 + norm1
        expected += 9 * c_stem * c_stem + 2 * c_stem  # stem conv2 + norm2
        # channel plan: cell0 normal C=2, cell1 reduce C=4, cell2 reduce C=8
        plan = []
        c_pp = c_p = c_stem
        c = c0
        for i in range(cfg.num_cells):
            is_red = i in cfg.reduce_positions
            if is_red:
                c *= 2
            plan.append((c_pp, c_p, c, is_red))
            c_pp, c_p = c_p, 4 * c
        for c_pp, c_p, c, is_red in plan:
            expected += c_pp * c + 2 * c              # pre0: 1x1 conv + affine norm
            expected += c_p * c + 2 * c               # pre1
            if is_red:
                # all-skip genotype: every branch reads a cell input, so each
                # of the 8 branches is a stride-2 1x1 conv + norm
                expected += 8 * (c * c + 2 * c)
        expected += net.feature_channels * cfg.num_classes + cfg.num_classes
        assert count_parameters(net) == expected

    def test_normal_cells_of_all_skip_net_have_only_adapter_params(self):
        cfg = tiny_config(reduce_positions=(1, 2))  # cell 0 is normal
        net = SuperNet(cfg, mode=FIXED, genotype=ALL_SKIP, rng=rng(29))
        stray = [n for n, _ in net.store.params()
                 if n.startswith("cells.00") and ".pre" not in n]
        assert stray == []


class TestCheckpoint:
    def test_round_trip_restores_exactly(self, tmp_path):
        cfg = tiny_config()
        net = SuperNet(cfg, mode=FIXED, genotype=ALL_SKIP, rng=rng(30), dtype=np.float32)
        # touch running stats so buffers are non-trivial
        net.train()
        net.forward(rng(31).normal(size=(2, 3, 16, 16)).astype(np.float32))
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        before_params = {n: p.data.copy() for n, p in net.store.params()}
        before_buffers = {n: b.copy() for n, b in net.store.buffers()}

        other = SuperNet(cfg, mode=FIXED, genotype=ALL_SKIP, rng=rng(77), dtype=np.float32)
        load_checkpoint(other, path)
        for n, p in other.store.params():
            assert np.array_equal(p.data, before_params[n]), n
        for n, b in other.store.buffers():
            assert np.array_equal(b, before_buffers[n]), n

    def test_header_and_shape_mismatch_errors(self, tmp_path):
        cfg = tiny_config()
        net = SuperNet(cfg, mode=FIXED, genotype=ALL_SKIP, rng=rng(32))
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not-a-checkpoint\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(net, bad)

        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        bigger = SuperNet(tiny_config(init_channels=4), mode=FIXED, genotype=ALL_SKIP,
                          rng=rng(33))
        with pytest.raises(CheckpointError):
            load_checkpoint(bigger, path)
