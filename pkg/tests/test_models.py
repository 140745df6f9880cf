import math

import numpy as np
import pytest

from metaprune import models as M
from metaprune import tensor as T


def all_archs(num_classes=3):
    return [
        M.mlp_arch(hidden=(10, 8), num_classes=num_classes),
        M.convnet_arch(filters=(4, 5, 4), num_classes=num_classes, image_hw=8),
        M.transformer_arch(blocks=2, heads=4, head_dim=4, mlp_width=8, num_classes=num_classes),
    ]


def random_batch(arch, n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, arch.in_channels, arch.image_hw, arch.image_hw))


def random_mask(arch, seed=0, keep_frac=0.5):
    rng = np.random.default_rng(seed)
    kept = {}
    for name, size in M.layer_sizes(arch).items():
        k = max(1, int(round(keep_frac * size)))
        kept[name] = np.sort(rng.choice(size, size=k, replace=False))
    return M.make_mask(arch, kept)


def test_build_model_deterministic():
    arch = M.mlp_arch()
    a = M.build_model(arch, seed=42)
    b = M.build_model(arch, seed=42)
    for k in a.arrays:
        np.testing.assert_array_equal(a.arrays[k], b.arrays[k])


def test_mlp_classifier_shape():
    params = M.build_model(M.mlp_arch(hidden=(8, 8), num_classes=5), seed=0)
    assert params.arrays["head_w"].shape == (8, 5)


def test_transformer_projection_width():
    arch = M.transformer_arch(heads=4, head_dim=4)
    params = M.build_model(arch, seed=0)
    assert params.arrays["blk0_wq"].shape == (16, 16)
    assert arch.embed_dim == 16


@pytest.mark.parametrize("arch", all_archs(), ids=lambda a: a.kind)
def test_full_mask_is_identity(arch):
    params = M.build_model(arch, seed=1)
    x = random_batch(arch, 4)
    plain = M.forward(params, x).data
    masked = M.masked_forward(params, M.full_mask(arch), None, x).data
    np.testing.assert_allclose(masked, plain, rtol=0, atol=1e-12)


@pytest.mark.parametrize("arch", all_archs(), ids=lambda a: a.kind)
def test_unit_gates_are_identity(arch):
    params = M.build_model(arch, seed=2)
    x = random_batch(arch, 4)
    mask = M.full_mask(arch)
    gated = M.masked_forward(params, mask, M.init_gates(mask), x).data
    np.testing.assert_allclose(gated, M.forward(params, x).data, rtol=0, atol=1e-12)


@pytest.mark.parametrize("arch", all_archs(), ids=lambda a: a.kind)
def test_zero_gate_equals_mask_removal(arch):
    params = M.build_model(arch, seed=3)
    x = random_batch(arch, 3)
    rng = np.random.default_rng(5)
    for layer in M.prunable_layers(arch):
        n = M.layer_sizes(arch)[layer]
        drop = int(rng.integers(0, n))
        full = M.full_mask(arch)
        gates = M.init_gates(full)
        gates.layers[layer].data[drop] = 0.0
        via_gate = M.masked_forward(params, full, gates, x).data
        kept = {k: v for k, v in full.layers.items()}
        kept[layer] = np.delete(np.arange(n), drop)
        via_mask = M.masked_forward(params, M.make_mask(arch, kept), None, x).data
        np.testing.assert_allclose(via_gate, via_mask, rtol=0, atol=1e-12)


def test_shrink_full_mask_keeps_count():
    arch = M.mlp_arch(hidden=(6, 6), num_classes=4)
    params = M.build_model(arch, seed=0)
    compact = M.shrink_to_mask(params, M.full_mask(arch))
    assert M.param_count(compact) == M.param_count(params)


def test_shrink_two_of_twenty_filters():
    arch = M.convnet_arch(filters=(20, 6), num_classes=3, image_hw=8)
    params = M.build_model(arch, seed=0)
    mask = M.make_mask(arch, {"conv1": [3, 17], "conv2": np.arange(6)})
    compact = M.shrink_to_mask(params, mask)
    assert compact.arrays["conv1_w"].shape == (2, 1, 3, 3)
    assert compact.arrays["conv2_w"].shape == (6, 2, 3, 3)


@pytest.mark.parametrize("arch", all_archs(), ids=lambda a: a.kind)
def test_shrink_matches_masked_forward(arch):
    params = M.build_model(arch, seed=4)
    for trial in range(4):
        mask = random_mask(arch, seed=100 + trial)
        x = random_batch(arch, 5, seed=trial)
        masked = M.masked_forward(params, mask, None, x).data
        compact = M.shrink_to_mask(params, mask)
        np.testing.assert_allclose(M.forward(compact, x).data, masked, rtol=0, atol=1e-9)


@pytest.mark.parametrize("arch", all_archs(), ids=lambda a: a.kind)
def test_parameter_accounting(arch):
    params = M.build_model(arch, seed=5)
    mask = random_mask(arch, seed=6)
    compact = M.shrink_to_mask(params, mask)
    assert M.param_count(compact) == M.analytic_param_count(arch, mask)


def test_masked_forward_rejects_bad_mask():
    arch = M.mlp_arch(hidden=(8, 8), num_classes=3)
    bigger = M.mlp_arch(hidden=(12, 12), num_classes=3)
    params = M.build_model(arch, seed=0)
    with pytest.raises(ValueError, match="outside"):
        M.masked_forward(params, M.full_mask(bigger), None, random_batch(arch, 2))
    conv = M.convnet_arch(filters=(8, 8), num_classes=3)
    with pytest.raises(ValueError, match="layers"):
        M.masked_forward(params, M.full_mask(conv), None, random_batch(arch, 2))


def test_masked_forward_rejects_compact_params():
    arch = M.mlp_arch(hidden=(8, 8), num_classes=3)
    params = M.build_model(arch, seed=0)
    compact = M.shrink_to_mask(params, random_mask(arch, seed=1))
    with pytest.raises(ValueError, match="compact"):
        M.masked_forward(compact, M.full_mask(arch), None, random_batch(arch, 2))


def test_activation_importance_known_mean():
    arch = M.mlp_arch(hidden=(2, 2), num_classes=2, image_hw=2)
    params = M.build_model(arch, seed=0)
    params.arrays["dense1_w"][:] = 0.0
    params.arrays["dense1_b"][:] = 0.0
    params.arrays["dense1_w"][0, 0] = 1.0  # unit 0 reads pixel 0
    x = np.zeros((3, 1, 2, 2))
    x[:, 0, 0, 0] = [0.0, 2.0, 4.0]
    scores = M.unit_activation_importance(params, M.full_mask(arch), (x, np.zeros(3, dtype=int)))
    assert scores["dense1"][0] == pytest.approx(2.0)
    assert scores["dense1"][1] == 0.0  # dead unit


@pytest.mark.parametrize("arch", all_archs(), ids=lambda a: a.kind)
def test_activation_importance_nonnegative(arch):
    params = M.build_model(arch, seed=7)
    x = random_batch(arch, 6)
    scores = M.unit_activation_importance(params, M.full_mask(arch), (x, np.zeros(6, dtype=int)))
    for name, s in scores.items():
        assert (s >= 0).all(), name


def test_importance_rejects_empty_dataset():
    arch = M.mlp_arch(hidden=(2, 2), num_classes=2, image_hw=2)
    params = M.build_model(arch, seed=0)
    empty = (np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        M.unit_activation_importance(params, M.full_mask(arch), empty)
    with pytest.raises(ValueError):
        M.unit_taylor_importance(params, M.full_mask(arch), empty)


def test_taylor_importance_closed_form():
    # unit 0 outputs a=2 into logit z0 = a, label 1: dL/da = sigmoid(2)
    arch = M.mlp_arch(hidden=(2, 2), num_classes=2, image_hw=2)
    params = M.build_model(arch, seed=0)
    for name in params.arrays:
        params.arrays[name][:] = 0.0
    params.arrays["dense1_w"][0, 0] = 1.0
    params.arrays["dense2_w"][0, 0] = 1.0
    params.arrays["head_w"][0, 0] = 1.0
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 0, 0] = 2.0
    scores = M.unit_taylor_importance(params, M.full_mask(arch), (x, np.array([1])))
    sig = 1.0 / (1.0 + math.exp(-2.0))
    assert scores["dense2"][0] == pytest.approx(sig * 2.0, rel=1e-12)
    assert scores["dense2"][1] == 0.0  # zero gradient and zero activation


def test_taylor_matches_leave_one_out_ranking():
    arch = M.mlp_arch(hidden=(16, 16), num_classes=3, image_hw=4)
    params = M.build_model(arch, seed=11)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(64, 1, 4, 4))
    y = rng.integers(0, 3, size=64)
    taylor = M.unit_taylor_importance(params, M.full_mask(arch), (x, y))

    def loss_of(mask):
        with T.no_grad():
            logits = M.masked_forward(params, mask, None, x)
            return T.cross_entropy_with_logits(logits, y).item()

    base_layers = M.full_mask(arch).layers
    agree = []
    for layer in M.prunable_layers(arch):
        n = M.layer_sizes(arch)[layer]
        deltas = np.zeros(n)
        base = loss_of(M.full_mask(arch))
        for u in range(n):
            kept = {k: v for k, v in base_layers.items()}
            kept[layer] = np.delete(np.arange(n), u)
            deltas[u] = abs(loss_of(M.make_mask(arch, kept)) - base)
        q = n // 4
        top_taylor = set(np.argsort(-taylor[layer])[:q])
        top_oracle = set(np.argsort(-deltas)[:q])
        agree.append(len(top_taylor & top_oracle) / q)
    assert np.mean(agree) >= 0.6


def test_importance_permutation_equivariant():
    arch = M.mlp_arch(hidden=(8, 8), num_classes=3, image_hw=4)
    params = M.build_model(arch, seed=13)
    rng = np.random.default_rng(14)
    x = rng.normal(size=(10, 1, 4, 4))
    y = rng.integers(0, 3, size=10)
    perm = rng.permutation(8)
    permuted = params.copy()
    permuted.arrays["dense1_w"] = params.arrays["dense1_w"][:, perm]
    permuted.arrays["dense1_b"] = params.arrays["dense1_b"][perm]
    permuted.arrays["dense2_w"] = params.arrays["dense2_w"][perm, :]
    for fn in (M.unit_activation_importance, M.unit_taylor_importance):
        base = fn(params, M.full_mask(arch), (x, y))
        after = fn(permuted, M.full_mask(arch), (x, y))
        np.testing.assert_allclose(after["dense1"], base["dense1"][perm], rtol=0, atol=1e-12)


def test_reinit_classifier_changes_only_head():
    arch = M.mlp_arch(hidden=(8, 8), num_classes=5)
    params = M.build_model(arch, seed=0)
    out = M.reinit_classifier(params, num_classes=3, seed=9)
    assert out.arrays["head_w"].shape == (8, 3)
    np.testing.assert_array_equal(out.arrays["dense1_w"], params.arrays["dense1_w"])


def test_scatter_to_full_round_trip():
    for arch in all_archs():
        params = M.build_model(arch, seed=21)
        mask = random_mask(arch, seed=22)
        compact = M.shrink_to_mask(params, mask)
        full = M.scatter_to_full(compact)
        for name in M.donor_param_names(arch):
            have = ~np.isnan(full[name])
            np.testing.assert_array_equal(full[name][have], params.arrays[name][have])


def test_arch_fingerprint_ignores_classifier_width():
    a = M.mlp_arch(hidden=(8, 8), num_classes=5)
    b = M.mlp_arch(hidden=(8, 8), num_classes=7)
    c = M.mlp_arch(hidden=(8, 4), num_classes=5)
    assert M.arch_fingerprint(a) == M.arch_fingerprint(b)
    assert M.arch_fingerprint(a) != M.arch_fingerprint(c)
