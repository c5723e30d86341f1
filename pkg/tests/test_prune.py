from __future__ import annotations

import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kdprune.data import LabeledArrays
from kdprune.errors import ConfigError, ContractError
from kdprune.prune import (
    DEFAULT_GRID,
    PruneSpec,
    SweepResult,
    SweepRow,
    build_masks,
    default_exclude,
    parse_grid,
    percentile_threshold,
    prune_model,
    select_optimal,
    sweep_prune,
)
from kdprune.zoo import ModelSpec, build_model


def oracle_percentile(v, p):
    return float(np.percentile(np.abs(np.asarray(v, dtype=np.float64)), p, method="linear"))


def test_percentile_hand_value():
    assert percentile_threshold([0.1, 0.2, 0.3, 0.4], 50) == pytest.approx(0.25, abs=1e-15)
    assert percentile_threshold([-0.4, 0.1, -0.3, 0.2], 0) == pytest.approx(0.1)


@given(st.integers(0, 2**31), st.floats(0, 99.999))
def test_percentile_matches_linear_oracle_on_1000(seed, p):
    v = np.random.default_rng(seed).standard_normal(1000).astype(np.float32)
    assert abs(percentile_threshold(v, p) - oracle_percentile(v, p)) <= 1e-9


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-5, 5, width=64)), st.floats(0, 99.9))
def test_percentile_arbitrary_vectors(v, p):
    assert percentile_threshold(v, p) == pytest.approx(oracle_percentile(v, p), abs=1e-12)


def test_percentile_empty_and_range_errors():
    with pytest.raises(ContractError):
        percentile_threshold([], 10)
    with pytest.raises(ConfigError):
        PruneSpec(100)
    with pytest.raises(ConfigError):
        PruneSpec(-1)


def test_default_exclusions():
    assert default_exclude("head.weight") and default_exclude("features.stem.conv.bias")
    assert default_exclude("features.block1.layer1.norm1.gamma") and default_exclude("x.bn.beta")
    assert not default_exclude("features.block1.layer1.conv1x1.weight")


def test_p50_on_random_layer_keeps_half():
    from kdprune import nn

    layer = nn.Linear(40, 25, rng=np.random.default_rng(0))
    masks = build_masks(layer, PruneSpec(50, exclude=lambda n: n.endswith("bias")))
    frac = masks["weight"].mask.mean()
    assert 0.49 <= frac <= 0.51


@pytest.fixture(scope="module")
def small_model():
    return build_model(ModelSpec("hybrid_densenet", 3, 32, 2), seed=0)


@pytest.fixture(scope="module")
def small_data():
    r = np.random.default_rng(0)
    return LabeledArrays(r.standard_normal((12, 3, 32, 32)).astype(np.float32), np.arange(12) % 3)


@pytest.mark.parametrize("p", [10, 25, 50, 75, 90])
def test_per_layer_zero_fraction(small_model, p):
    res = prune_model(small_model, PruneSpec(p))
    params = dict(res.model.named_parameters())
    for name, lm in res.masks.items():
        n = lm.mask.size
        zero_frac = 1 - np.count_nonzero(params[name].data) / n
        # one interpolation step = one order statistic; ties at tau are kept
        assert abs(zero_frac - p / 100) <= 1.0 / (n - 1) + 1.0 / n + 1e-12, name


def test_excluded_params_untouched_and_input_not_mutated(small_model):
    before = copy.deepcopy(small_model.state_dict())
    res = prune_model(small_model, PruneSpec(90))
    after = dict(res.model.named_parameters())
    for name, p in small_model.named_parameters():
        np.testing.assert_array_equal(p.data, before[name])
        if default_exclude(name):
            assert after[name].data.tobytes() == before[name].tobytes()
            assert name not in res.masks
        else:
            assert name in res.masks


def test_p0_is_bitwise_noop(small_model):
    res = prune_model(small_model, PruneSpec(0))
    orig = small_model.state_dict()
    for k, v in res.model.state_dict().items():
        assert v.tobytes() == orig[k].tobytes()


def test_mask_keeps_ties_at_threshold():
    from kdprune import nn

    layer = nn.Linear(4, 1, bias=False)
    layer.weight.data = np.array([[0.5, 0.5, 0.5, 0.5]], np.float32)
    masks = build_masks(layer, PruneSpec(50))
    assert masks["weight"].mask.all()


def test_sweep_monotone_and_consistent(small_model, small_data):
    grid = parse_grid("0:95:5,99")
    rows = []
    sweep = sweep_prune(small_model, small_data, grid, batch_size=6, progress=rows.append)
    assert [r.p_percent for r in sweep.rows] == grid and len(rows) == len(grid)
    nz = [r.nonzero_params for r in sweep.rows]
    assert all(a >= b for a, b in zip(nz, nz[1:]))
    sp = [r.global_sparsity for r in sweep.rows]
    assert all(a <= b for a, b in zip(sp, sp[1:]))
    for r in sweep.rows:
        assert 0 <= r.accuracy <= 1 and 0 <= r.f1_macro <= 1


def test_sweep_csv_roundtrip(tmp_path, small_model, small_data):
    sweep = sweep_prune(small_model, small_data, [0, 50], batch_size=6)
    sweep.to_csv(tmp_path / "s.csv")
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header == "p_percent,accuracy,precision_macro,recall_macro,f1_macro,mean_batch_latency_s,global_sparsity,nonzero_params"
    again = SweepResult.from_csv(tmp_path / "s.csv")
    assert again.rows == sweep.rows


def test_parse_grid():
    assert parse_grid("0:95:5,99") == list(DEFAULT_GRID)
    assert parse_grid("10,0:2") == [0, 1, 2, 10]
    for bad in ("0:10:0", "50:100:50", "1:2:3:4"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def _sweep(accs):
    return SweepResult([SweepRow(p, a, a, a, a, 0.0, p / 100, 0) for p, a in accs])


def test_select_optimal():
    s = _sweep([(0, 0.95), (10, 0.948), (20, 0.94), (30, 0.96), (40, 0.90)])
    assert select_optimal(s, 1.0) == 30
    assert select_optimal(s, 0.0) == 30
    assert select_optimal(s, 10.0) == 40
    with pytest.raises(ContractError):
        select_optimal(SweepResult())
    with pytest.raises(ContractError):
        select_optimal(_sweep([(10, 0.9)]))


def test_finetune_keeps_masks(small_model, small_data):
    res = prune_model(small_model, PruneSpec(60, finetune_epochs=1), small_data, batch_size=6, train_data=small_data)
    params = dict(res.model.named_parameters())
    for name, lm in res.masks.items():
        assert not np.any(params[name].data[lm.mask == 0])
