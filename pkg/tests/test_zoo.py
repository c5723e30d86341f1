from __future__ import annotations

import numpy as np
import pytest

from kdprune import nn
from kdprune.errors import ConfigError, DimensionError
from kdprune.profiler import count_macs, count_params
from kdprune.tensor import Tensor
from kdprune.zoo import ARCHITECTURES, STUDENTS, TEACHERS, ModelSpec, build_model, forward_classify


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_forward_shape_and_profile_consistency(arch):
    model = build_model(ModelSpec(arch, 5, input_size=32), seed=0)
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32)
    logits = forward_classify(model, x)
    assert logits.shape == (2, 5)
    assert np.isfinite(logits.data).all()
    rep = count_macs(model)
    assert rep.flops == 2 * rep.macs
    assert sum(r.params for r in rep.layers) == rep.total_params == sum(p.size for p in model.parameters())
    assert rep.layers[-1].name == "head" and rep.layers[-1].out_shape == (1, 5)


def test_classifier_is_named_head():
    for arch in ARCHITECTURES:
        model = build_model(ModelSpec(arch, 3, input_size=32))
        names = [n for n, _ in model.named_parameters()]
        assert "head.weight" in names and names[-2:] == ["head.weight", "head.bias"]


def test_build_is_seeded():
    a = build_model(ModelSpec("hybrid_densenet", 4, 64), seed=3)
    b = build_model(ModelSpec("hybrid_densenet", 4, 64), seed=3)
    c = build_model(ModelSpec("hybrid_densenet", 4, 64), seed=4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert not all(np.array_equal(sa[k], sc[k]) for k in sa)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec("alexnet", 4)
    with pytest.raises(ConfigError):
        ModelSpec("vgg16", 0)
    with pytest.raises(ConfigError):
        ModelSpec("vgg16", 4, input_size=100)
    with pytest.raises(ConfigError):
        ModelSpec("hybrid_densenet", 4, hybrid_involution_count=4)


def test_wrong_input_size_is_rejected():
    model = build_model(ModelSpec("densenet_student", 4, 64))
    with pytest.raises(DimensionError):
        model(Tensor(np.zeros((1, 3, 32, 32), np.float32)))


def test_build_accepts_dict_spec():
    model = build_model({"arch": "densenet_student", "num_classes": 7, "input_size": 64})
    assert model.spec == ModelSpec("densenet_student", 7, 64)


@pytest.mark.parametrize("n,params,macs", [(1, 306_302, 0.339e9), (2, 320_342, 0.3555e9), (3, 329_470, 0.401e9)])
def test_hybrid_involution_count(n, params, macs):
    rep = count_macs(build_model(ModelSpec("hybrid_densenet", 38, 224, n)))
    assert rep.total_params == params
    assert rep.macs == pytest.approx(macs, rel=2e-3)
    assert sum(1 for r in rep.layers if r.kind == "InvolutionApply") == n


def test_hybrid_places_involutions_on_last_blocks():
    model = build_model(ModelSpec("hybrid_densenet", 4, 64, 1))
    names = {n.split(".")[1] for n, _ in model.named_parameters() if n.startswith("features.involution")}
    assert names == {"involution3"}


def test_densenet_student_exact_count():
    # stem 3*16*49 + BN + 3 dense blocks/transitions + head 16*38+38
    assert count_params(build_model(ModelSpec("densenet_student", 38))).total_params == 286_326


def test_conv_mac_hand_count():
    m = nn.Sequential(("c", nn.Conv2d(3, 8, 3, stride=2, padding=1, groups=1)))
    rows = []
    m.profile((1, 3, 16, 16), rows)
    assert rows[0].macs == 8 * 3 * 9 * 8 * 8


def test_depthwise_and_linear_mac_hand_count():
    rows = []
    nn.Conv2d(6, 6, 3, padding=1, groups=6).profile((1, 6, 10, 10), rows, "dw")
    nn.Linear(20, 7).profile((1, 20), rows, "fc")
    assert [r.macs for r in rows] == [6 * 9 * 100, 140]


def test_teacher_and_student_lists_partition_architectures():
    assert set(TEACHERS) | set(STUDENTS) == set(ARCHITECTURES)
    assert not set(TEACHERS) & set(STUDENTS)


def test_hybrid_counts_monotone_and_near_ablation_table():
    counts = [count_params(build_model(ModelSpec("hybrid_densenet", 38, 224, n))).total_params for n in (1, 2, 3)]
    assert counts[0] < counts[1] < counts[2]
    for n, target in zip(counts, (0.29e6, 0.30e6, 0.32e6)):
        assert abs(n - target) <= 0.15 * target


@pytest.mark.parametrize("arch,lo,hi", [("hybrid_densenet", 0.30e6, 0.34e6), ("densenet_student", 0.282e6, 0.292e6),
                                        ("resnet50_student", 3.7e6, 4.5e6), ("vgg16_student", 25.5e6, 26.1e6)])
def test_student_count_bands(arch, lo, hi):
    assert lo <= count_params(build_model(ModelSpec(arch, 38))).total_params <= hi


def test_vgg16_student_linear_dominates():
    params = dict(build_model(ModelSpec("vgg16_student", 4)).named_parameters())
    assert params["features.fc1.weight"].size == 64 * 28 * 28 * 512 == 25_690_112


@pytest.mark.parametrize("arch", ["hybrid_densenet", "resnet50_student", "mobilenetv2_student", "efficientnet_b0"])
def test_eval_batching_invariance(arch):
    model = build_model(ModelSpec(arch, 4, 32), seed=2)
    x = np.random.default_rng(2).standard_normal((5, 3, 32, 32)).astype(np.float32)
    full = forward_classify(model, x).data
    single = forward_classify(model, x[2:3]).data
    # untrained eval-mode logits can be large (identity BN stats), so compare relative to their scale
    scale = max(1.0, float(np.abs(full[2]).max()))
    assert float(np.abs(single[0] - full[2]).max()) <= 1e-5 * scale


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_one_adam_step_decreases_loss(arch):
    from kdprune import ops
    from kdprune.distill import Adam

    # Adam's first step moves every weight by ~lr, so the step is kept small for the large teachers
    decreased = 0
    for seed in range(10):
        r = np.random.default_rng(seed)
        model = build_model(ModelSpec(arch, 4, 32), seed=seed)
        model.train()
        x = Tensor(r.standard_normal((8, 3, 32, 32)).astype(np.float32))
        y = r.integers(0, 4, 8)
        opt = Adam(model.parameters(), lr=1e-5)
        loss = ops.cross_entropy(model(x), y)
        loss.backward()
        opt.step()
        after = ops.cross_entropy(model(x), y)
        decreased += float(after.data) < float(loss.data)
    assert decreased >= 9


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_whole_model_directional_derivative(arch):
    """Backprop through the full graph agrees with a central difference along a random direction."""
    from kdprune import ops
    from kdprune.tensor import float64_mode

    with float64_mode():
        r = np.random.default_rng(1)
        model = build_model(ModelSpec(arch, 4, 32), seed=1).astype(np.float64)
        model.train()
        x = Tensor(r.standard_normal((4, 3, 32, 32)))
        y = r.integers(0, 4, 4)
        params = model.parameters()
        ops.cross_entropy(model(x), y).backward()
        direction = [r.standard_normal(p.shape) for p in params]
        analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, direction))
        base = [p.data.copy() for p in params]

        def loss_at(eps):
            for p, b, d in zip(params, base, direction):
                p.data = b + eps * d
            return float(ops.cross_entropy(model(x), y).data)

        # a tiny step keeps the probe away from ReLU/max-pool kinks
        numeric = (loss_at(1e-9) - loss_at(-1e-9)) / 2e-9
    assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric))
