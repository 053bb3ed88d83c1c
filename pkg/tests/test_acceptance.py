"""Acceptance suite: one test per criterion, each at its stated tolerance.

The desk-scale end-to-end run executes once (module fixture); the overfit and
replace-ablation criteria reuse its derived genotype.  A summary hook in
conftest prints one PASS/FAIL line per criterion at the end of the session.
"""

import json
import time

import numpy as np
import pytest

from cellsearch import ops
from cellsearch.cli import main
from cellsearch.config import RunConfig, config_to_dict
from cellsearch.data import SplitSpec, channel_stats, split, synthetic_shapes
from cellsearch.genotype import read_alphas, read_genotype, derive, AlphaSnapshot
from cellsearch.layers import ParamStore
from cellsearch.network import FIXED, NetworkConfig, SuperNet, count_parameters
from cellsearch.optim import WeightOptConfig, exponential_lr, train_fixed
from cellsearch.search_space import (FULL_OPERATOR_SET, NORMAL, AlphaParams,
                                     ConvTriplet, EdgeId, MixedEdge, OperatorKind,
                                     RelaxedCell, softmax_coefficients)
from cellsearch.tensor import Tensor

from oracles import derive_reference, fd_max_rel_err, zero_inserted_kernel

DESK_SEED = 11
DESK_NET = ["--set", "network.num_cells=4", "--set", "network.init_channels=8",
            "--set", "network.num_classes=4", "--set", "network.input_size=16"]
DESK_DATA = ["--set",
             'data.source={"kind":"synthetic","num_classes":4,"per_class":256}']


@pytest.fixture(scope="module")
def desk_search(tmp_path_factory):
    """The end-to-end desk-scale search: 512+512 synthetic images, 4 cells,
    base width 8, batch 16, 5 epochs."""
    out = tmp_path_factory.mktemp("desk") / "search"
    start = time.perf_counter()
    code = main(["search", "--out-dir", str(out), "--seed", str(DESK_SEED),
                 *DESK_NET, *DESK_DATA,
                 "--set", "search.epochs=5", "--set", "search.batch_size=16"])
    elapsed = time.perf_counter() - start
    assert code == 0
    return {"out": out, "seconds": elapsed}


# -- criterion: gradient correctness ------------------------------------------


def test_gradient_correctness():
    """FD vs analytic: each operator, the triplet, the mixed edge, one cell,
    the full tiny network."""
    start = time.perf_counter()
    worst = {}

    # every candidate operator (stride 1, then the stride-2 reduce variants)
    for kind in FULL_OPERATOR_SET:
        for stride, edge in ((1, EdgeId(NORMAL, 0, 0)), (2, EdgeId("reduce", 0, 0))):
            store = ParamStore()
            rng = np.random.default_rng(1000 + 10 * int(kind) + stride)
            from cellsearch.search_space import make_operator
            op = make_operator(store, "op", kind, 3, stride, rng, np.float64,
                               affine=False)
            x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
            r = rng.normal(size=op(x).shape)
            tensors = [x] + [p for _, p in store.params()]
            err = fd_max_rel_err(lambda: (op(x) * r).sum(), tensors,
                                 np.random.default_rng(2), samples_per_tensor=3)
            worst[f"{kind.name}/s{stride}"] = err
            assert err < 1e-4, (kind, stride, err)

    # conv triplet with affine norm and residual shortcut
    store = ParamStore()
    rng = np.random.default_rng(30)
    trip = ConvTriplet(store, "t", OperatorKind.SEP_CONV_5, 3, 3, stride=1,
                       rng=rng, dtype=np.float64, affine=True)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    r = rng.normal(size=(2, 3, 6, 6))
    err = fd_max_rel_err(lambda: (trip(x) * r).sum(),
                         [x] + [p for _, p in store.params()],
                         np.random.default_rng(31), samples_per_tensor=3)
    worst["triplet"] = err
    assert err < 1e-4

    # mixed edge w.r.t. input and coefficients
    store = ParamStore()
    edge = MixedEdge(store, "e", EdgeId(NORMAL, 0, 0), 3,
                     np.random.default_rng(32), np.float64)
    rng = np.random.default_rng(33)
    x = Tensor(rng.normal(size=(1, 3, 6, 6)), requires_grad=True)
    alphas = Tensor(rng.normal(size=(1, 7)), requires_grad=True)
    r = rng.normal(size=(1, 3, 6, 6))

    def edge_loss():
        coeffs = ops.row(ops.softmax(alphas, axis=1), 0)
        return (edge(x, coeffs) * r).sum()

    err = fd_max_rel_err(edge_loss, [x, alphas], np.random.default_rng(34),
                         samples_per_tensor=6)
    worst["mixed_edge"] = err
    assert err < 1e-4

    # one full relaxed cell, including operator parameters
    store = ParamStore()
    cell = RelaxedCell(store, "c", 2, NORMAL, np.random.default_rng(35), np.float64)
    rng = np.random.default_rng(36)
    a = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    cell_alphas = Tensor(rng.normal(size=(14, 7)), requires_grad=True)
    r = rng.normal(size=(1, 8, 6, 6))

    def cell_loss():
        coeff = ops.softmax(cell_alphas, axis=1)
        rows = [ops.row(coeff, i) for i in range(14)]
        return (cell(a, b, rows) * r).sum()

    params = [p for _, p in store.params()]
    sampled = [a, b, cell_alphas] + params[::9]
    err = fd_max_rel_err(cell_loss, sampled, np.random.default_rng(37),
                         samples_per_tensor=3)
    worst["cell"] = err
    assert err < 1e-4

    # full tiny supernet loss
    cfg = NetworkConfig(num_cells=3, init_channels=2, num_classes=3, input_size=16)
    net = SuperNet(cfg, rng=np.random.default_rng(38), dtype=np.float64).train()
    net_alphas = AlphaParams(np.random.default_rng(39), dtype=np.float64)
    rng = np.random.default_rng(40)
    images = Tensor(rng.normal(size=(2, 3, 16, 16)), requires_grad=True)
    labels = np.array([0, 2])

    def net_loss():
        return ops.cross_entropy(net.forward(images, net_alphas), labels)

    named = dict(net.store.params())
    sampled = [images, net_alphas.normal, net_alphas.reduce,
               named["stem.conv1.weight"],
               named["cells.01.edge02.op0.dw.weight"],
               named["head.linear.weight"]]
    err = fd_max_rel_err(net_loss, sampled, np.random.default_rng(41),
                         samples_per_tensor=2)
    worst["full_net"] = err
    assert err < 1e-3

    elapsed = time.perf_counter() - start
    assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"


# -- criterion: coefficient (mixture-weight) contract --------------------------


def test_softmax_coefficient_contract():
    """10^4 random rows: sums within 1e-12 of one, shift invariant within
    1e-12, in under 5 seconds."""
    start = time.perf_counter()
    rng = np.random.default_rng(50)
    for _ in range(10_000):
        row = rng.normal(scale=rng.uniform(0.01, 50.0), size=7)
        out = softmax_coefficients(row)
        assert abs(out.sum() - 1.0) < 1e-12
        shifted = softmax_coefficients(row + rng.uniform(-100, 100))
        assert np.abs(out - shifted).max() < 1e-12
    assert time.perf_counter() - start < 5.0


# -- criterion: mixed-edge weighted-sum contract -------------------------------


def test_mixed_edge_weighted_sum_contract():
    """Mixed edge equals the brute-force weighted sum of its 7 branches
    within 1e-12 on 100 random cases, in under a minute."""
    start = time.perf_counter()
    store = ParamStore()
    edge = MixedEdge(store, "e", EdgeId(NORMAL, 0, 0), 4,
                     np.random.default_rng(60), np.float64)
    store.train()
    rng = np.random.default_rng(61)
    for _ in range(100):
        x = Tensor(rng.normal(size=(1, 4, 8, 8)))
        coeffs = softmax_coefficients(rng.normal(size=7))
        got = edge(x, Tensor(coeffs)).data
        want = np.zeros_like(got)
        for c, op in zip(coeffs, edge.candidates):
            want = want + c * op(x).data
        assert np.abs(got - want).max() <= 1e-12
    assert time.perf_counter() - start < 60.0


# -- criterion: atrous identity -------------------------------------------------


def test_atrous_zero_insertion_identity():
    """3x3 rate-2 convolution equals the zero-inserted 5x5 convolution within
    1e-12 on 100 random cases, in under 30 seconds."""
    start = time.perf_counter()
    rng = np.random.default_rng(70)
    for _ in range(100):
        channels = int(rng.integers(1, 4))
        size = int(rng.integers(5, 9))
        x = Tensor(rng.normal(size=(1, channels, size, size)))
        w = rng.normal(size=(2, channels, 3, 3))
        dilated = ops.conv2d(x, Tensor(w), dilation=2).data
        expanded = ops.conv2d(x, Tensor(zero_inserted_kernel(w, 2))).data
        assert np.abs(dilated - expanded).max() <= 1e-12
    assert time.perf_counter() - start < 30.0


# -- criterion: discretization oracle -------------------------------------------


def test_discretization_matches_bruteforce_oracle():
    """derive() agrees with the scalar-loop argmax/top-2 oracle on 1000
    random draws plus tie fixtures, in under 30 seconds."""
    start = time.perf_counter()
    names = [  # canonical order
        "sep_conv_3x3", "sep_conv_5x5", "atr_conv_3x3", "atr_conv_5x5",
        "avg_pool_3x3", "max_pool_3x3", "skip"]
    rng = np.random.default_rng(80)
    agreements = 0
    for _ in range(1000):
        normal = rng.normal(scale=rng.uniform(0.001, 3.0), size=(14, 7))
        reduce = rng.normal(scale=rng.uniform(0.001, 3.0), size=(14, 7))
        got = derive(AlphaSnapshot(normal=normal, reduce=reduce))
        ref_normal, ref_reduce = derive_reference(normal, reduce, names)
        agreements += (got.normal == ref_normal and got.reduce == ref_reduce)
    assert agreements == 1000

    # tie fixtures: all-equal rows, duplicated strongest sources
    flat = derive(AlphaSnapshot(normal=np.zeros((14, 7)), reduce=np.zeros((14, 7))))
    for cell in (flat.normal, flat.reduce):
        for node in cell:
            assert node == ((0, "sep_conv_3x3"), (1, "sep_conv_3x3"))
    tied = np.zeros((14, 7))
    tied[2:5, OperatorKind.MAX_POOL_3] = 1.0  # node 1: all three sources tie
    g = derive(AlphaSnapshot(normal=tied, reduce=np.zeros((14, 7))))
    assert g.normal[1] == ((0, "max_pool_3x3"), (1, "max_pool_3x3"))
    assert time.perf_counter() - start < 30.0


# -- criterion: parameter counting ----------------------------------------------


def test_parameter_counting():
    """Analytic counts for the triplets and head match enumerated totals
    exactly; discretized networks strictly undercount the relaxed one."""
    c = 16
    cases = {
        OperatorKind.SEP_CONV_3: c * 9 + c * c,
        OperatorKind.SEP_CONV_5: c * 25 + c * c,
        OperatorKind.ATROUS_CONV_3: c * c * 9,
        OperatorKind.ATROUS_CONV_5: c * c * 25,
    }
    for kind, conv_weights in cases.items():
        store = ParamStore()
        ConvTriplet(store, "t", kind, c, c, stride=1,
                    rng=np.random.default_rng(90), dtype=np.float32, affine=True)
        enumerated = store.num_parameters()
        assert enumerated == conv_weights + 2 * c, kind

    cfg = NetworkConfig(num_cells=4, init_channels=8, num_classes=4, input_size=16)
    relaxed = SuperNet(cfg, rng=np.random.default_rng(91))
    head = sum(p.data.size for n, p in relaxed.store.params() if n.startswith("head."))
    assert head == relaxed.feature_channels * 4 + 4

    rng = np.random.default_rng(92)
    genotype = derive(AlphaSnapshot(normal=rng.normal(size=(14, 7)),
                                    reduce=rng.normal(size=(14, 7))))
    fixed = SuperNet(cfg, mode=FIXED, genotype=genotype, rng=np.random.default_rng(93))
    assert count_parameters(fixed) < count_parameters(relaxed)


# -- criterion: end-to-end search ------------------------------------------------


def test_end_to_end_search(desk_search):
    """Desk-scale search reaches validation accuracy > 0.60 (chance 0.25)
    within 30 CPU-minutes."""
    out = desk_search["out"]
    assert desk_search["seconds"] < 1800, f"search took {desk_search['seconds']:.0f}s"
    rows = (out / "curves.csv").read_text().splitlines()[1:]
    assert len(rows) == 5
    best_val = max(float(r.split(",")[4]) for r in rows)
    assert best_val > 0.60, f"best validation accuracy {best_val}"
    for name in ("best.alphas.json", "best.genotype.json", "manifest.json"):
        assert (out / name).exists()


# -- criterion: overfit check ------------------------------------------------------


def test_overfit_64_samples(desk_search):
    """The derived genotype's fixed network memorizes a 64-sample subset
    (train accuracy >= 0.99) within 200 epochs and 15 minutes."""
    start = time.perf_counter()
    genotype = read_genotype(desk_search["out"] / "best.genotype.json")
    data = synthetic_shapes(4, 32, 16, seed=123)
    subset, _ = split(data, SplitSpec("search_half", seed=7))
    assert len(subset) == 64
    cfg = NetworkConfig(num_cells=4, init_channels=8, num_classes=4, input_size=16)
    net = SuperNet(cfg, mode=FIXED, genotype=genotype,
                   rng=np.random.default_rng(124), dtype=np.float32)
    wcfg = WeightOptConfig(lr0=0.1, epochs=200, schedule="exponential", decay=0.97,
                           batch_size=16, grad_clip=5.0)
    records = train_fixed(net, subset, wcfg, shuffle_seed=8,
                          stats=channel_stats(subset), stop_at_train_acc=0.99)
    elapsed = time.perf_counter() - start
    assert records[-1].train_acc >= 0.99, f"reached {records[-1].train_acc}"
    assert len(records) <= 200
    assert elapsed < 900, f"overfit check took {elapsed:.0f}s"


# -- criterion: ablation harness ----------------------------------------------------


def test_ablation_harness(desk_search, tmp_path):
    """Replace mode emits zero atrous operators; exclude mode never selects
    one in any epoch; both leave comparable accuracy reports."""
    atrous = {"atr_conv_3x3", "atr_conv_5x5"}
    fast_train = ["--num-runs", "1",
                  "--set", "train.epochs=2", "--set", "train.batch_size=16"]
    small_data = ["--set",
                  'data.source={"kind":"synthetic","num_classes":4,"per_class":16}']

    replace_out = tmp_path / "replace"
    code = main(["ablate", "--mode", "replace",
                 "--genotype", str(desk_search["out"] / "best.genotype.json"),
                 "--out-dir", str(replace_out), "--seed", "21",
                 *DESK_NET, *small_data, *fast_train])
    assert code == 0
    ablated = read_genotype(replace_out / "ablated.genotype.json")
    assert not (ablated.operator_names() & atrous)

    exclude_out = tmp_path / "exclude"
    code = main(["ablate", "--mode", "exclude",
                 "--out-dir", str(exclude_out), "--seed", "22",
                 *DESK_NET, *small_data, *fast_train,
                 "--set", "search.epochs=3", "--set", "search.batch_size=16"])
    assert code == 0
    # scan the operator argmax of every edge in every per-epoch snapshot
    snapshots = sorted((exclude_out / "search" / "alphas").glob("epoch_*.alphas.json"))
    assert len(snapshots) == 3
    for snap_path in snapshots:
        g = derive(read_alphas(snap_path))
        assert not (g.operator_names() & atrous), snap_path

    reports = [json.loads((replace_out / "train" / "oa_report.json").read_text()),
               json.loads((exclude_out / "train" / "oa_report.json").read_text())]
    for report in reports:
        assert set(report) == {"oa_per_run", "oa_mean", "oa_std", "num_runs"}
        assert 0.0 <= report["oa_mean"] <= 1.0


# -- criterion: schedule fidelity ------------------------------------------------------


def test_schedule_fidelity(tmp_path):
    """Final-training lr decays exactly as 0.1 * 0.97^epoch; the reference
    hyperparameters appear verbatim in the default config and in a run
    manifest."""
    for epoch in range(150):
        assert abs(exponential_lr(0.1, 0.97, epoch) - 0.1 * 0.97 ** epoch) < 1e-12

    defaults = config_to_dict(RunConfig())
    assert defaults["search"]["lr0"] == 0.025
    assert defaults["search"]["momentum"] == 0.9
    assert defaults["search"]["weight_decay"] == 3e-4
    assert defaults["search"]["batch_size"] == 64
    assert defaults["search"]["epochs"] == 50
    assert defaults["train"]["lr0"] == 0.1
    assert defaults["train"]["decay"] == 0.97
    assert defaults["train"]["epochs"] == 150
    assert defaults["arch"]["lr"] == 3e-4
    assert defaults["arch"]["weight_decay"] == 1e-3

    # a real manifest with all optimizer values left at their defaults
    out = tmp_path / "defaults"
    code = main(["search", "--out-dir", str(out), "--seed", "1",
                 "--set", "network.num_cells=3", "--set", "network.init_channels=2",
                 "--set", "network.num_classes=2", "--set", "network.input_size=16",
                 "--set", 'data.source={"kind":"synthetic","num_classes":2,"per_class":4}'])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["search"] == defaults["search"]
    assert manifest["config"]["arch"] == defaults["arch"]
    assert manifest["config"]["train"] == defaults["train"]


# -- criterion: reproducibility ----------------------------------------------------------


def test_reproducible_genotype_bytes(tmp_path):
    """Two searches with identical config and seed at 64-bit emit
    byte-identical genotype files."""
    args = ["--seed", "33", "--precision", "f64",
            "--set", "network.num_cells=3", "--set", "network.init_channels=2",
            "--set", "network.num_classes=2", "--set", "network.input_size=16",
            "--set", 'data.source={"kind":"synthetic","num_classes":2,"per_class":8}',
            "--set", "search.epochs=2", "--set", "search.batch_size=8"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["search", "--out-dir", str(a), *args]) == 0
    assert main(["search", "--out-dir", str(b), *args]) == 0
    assert (a / "best.genotype.json").read_bytes() == (b / "best.genotype.json").read_bytes()
    assert (a / "best.alphas.json").read_bytes() == (b / "best.alphas.json").read_bytes()
