"""Network tests: shape contracts, impulse-response footprints, bridge
oracles, topology audit against the ablation variants, parameter parity,
translation covariance, determinism, preprocessing, and the end-to-end
gradient check."""

import numpy as np
import pytest

from docseg import autodiff as ad
from docseg import gradcheck
from docseg.autodiff import Tensor
from docseg.errors import ConfigError, ContractViolation, InputError
from docseg.losses import LossWeights
from docseg.model import (
    ArchitectureConfig,
    architecture_digest,
    bridge_merge,
    decode_auxiliary,
    decode_main,
    dilated_block,
    encode,
    forward,
    init_model,
    parameter_names,
    preprocess,
    receptive_field,
    topology_summary,
)
from docseg.optim import Adadelta

TINY = ArchitectureConfig(
    num_classes=3, stage_channels=(4, 4), dilation=1,
    upsampling="unpooling", skip_connections=True, embedding_dim=0,
)


def tiny_forward(seed=0, h=16, w=16, config=TINY, mode="train"):
    state = init_model(config, seed=seed)
    rng = np.random.default_rng(seed)
    image = Tensor(rng.uniform(-1, 1, size=(3, h, w)))
    emap = None
    if config.embedding_dim:
        emap = rng.uniform(-0.5, 0.5, size=(config.embedding_dim, h, w)).astype(np.float32)
    return forward(image, emap, config, state, mode=mode), state, image


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        ArchitectureConfig(stage_channels=(8,))
    with pytest.raises(ConfigError):
        ArchitectureConfig(stage_channels=(8, 0))
    with pytest.raises(ConfigError):
        ArchitectureConfig(dilation=0)
    with pytest.raises(ConfigError):
        ArchitectureConfig(upsampling="nearest")
    with pytest.raises(ConfigError):
        ArchitectureConfig(bridge_stage=9)
    with pytest.raises(ConfigError):
        ArchitectureConfig(num_classes=1)


def test_config_digest_tracks_fields():
    a = ArchitectureConfig()
    b = ArchitectureConfig(skip_connections=False)
    assert architecture_digest(a) != architecture_digest(b)
    assert architecture_digest(a) == architecture_digest(ArchitectureConfig())
    assert len(architecture_digest(a)) == 64


def test_init_is_deterministic():
    s1 = init_model(TINY, seed=3)
    s2 = init_model(TINY, seed=3)
    assert list(s1.params) == list(s2.params)
    for name in s1.params:
        np.testing.assert_array_equal(s1.params[name].data, s2.params[name].data)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def test_encode_halves_spatial_dims():
    config = ArchitectureConfig(num_classes=3, stage_channels=(4, 8), embedding_dim=0)
    state = init_model(config, seed=0)
    image = Tensor(np.random.default_rng(0).uniform(-1, 1, size=(3, 64, 64)))
    arts = encode(image, config, state)
    assert [a.data.shape[1] for a in arts.activations] == [64, 32, 16]
    assert arts.activations[1].data.shape[0] == 4
    assert arts.activations[2].data.shape[0] == 8


def test_encode_rejects_indivisible_dims():
    state = init_model(TINY, seed=0)
    with pytest.raises(ContractViolation):
        encode(Tensor(np.zeros((3, 18, 16))), TINY, state)


def test_encode_pool_index_roundtrip():
    arts, _, _ = tiny_forward(seed=1)
    for pooled, skip, idx in zip(arts.activations[1:], arts.skips, arts.pool_indices):
        restored = ad.unpool2d(pooled, idx)
        mask = restored.data != 0
        np.testing.assert_array_equal(restored.data[mask], skip.data[mask])


def test_encode_constant_offset_removed_by_batch_norm():
    # a constant input offset shifts pre-norm activations by offset times the
    # kernel sum wherever the kernel sees no zero padding, and train-mode
    # batch norm cancels any constant per-channel shift
    config = ArchitectureConfig(num_classes=3, stage_channels=(4, 4), embedding_dim=0)
    state = init_model(config, seed=5)
    rng = np.random.default_rng(2)
    image = rng.uniform(-1, 1, size=(3, 16, 16)).astype(np.float32)
    offset = 2.0

    w = state.params["enc1/conv/w"]
    b = state.params["enc1/conv/b"]
    base = ad.conv2d(Tensor(image), w, b).data
    moved = ad.conv2d(Tensor(image + offset), w, b).data
    expected_shift = offset * w.data.sum(axis=(1, 2, 3))
    interior = (moved - base)[:, 1:-1, 1:-1]
    np.testing.assert_allclose(
        interior, expected_shift[:, None, None] * np.ones_like(interior), atol=1e-4
    )

    gamma, beta = state.params["enc1/bn/gamma"], state.params["enc1/bn/beta"]
    shift = np.array([0.5, -1.0, 2.0, 0.0], dtype=np.float32)[:, None, None]
    n1 = ad.batch_norm(Tensor(base), gamma, beta, ad.BatchNormStats(4), mode="train")
    n2 = ad.batch_norm(Tensor(base + shift), gamma, beta, ad.BatchNormStats(4),
                       mode="train")
    np.testing.assert_allclose(n1.data, n2.data, atol=1e-5)


# ---------------------------------------------------------------------------
# dilated block
# ---------------------------------------------------------------------------

def _identity_stats(state):
    for st in state.stats.values():
        st.mean[:] = 0.0
        st.var[:] = 1.0


def _positive_weights(state):
    for name, p in state.params.items():
        if name.endswith("/w"):
            p.data = np.abs(p.data) + 0.01


def test_dilated_block_zero_input_zero_output():
    config = ArchitectureConfig(num_classes=3, stage_channels=(8, 8),
                                dilation="block", embedding_dim=0)
    state = init_model(config, seed=0)
    out = dilated_block(Tensor(np.zeros((3, 40, 40))), 1, config, state, bn_mode="eval")
    _identity_stats(state)
    out = dilated_block(Tensor(np.zeros((3, 40, 40))), 1, config, state, bn_mode="eval")
    assert np.all(out.data == 0)


def test_dilated_block_impulse_footprint_33():
    config = ArchitectureConfig(num_classes=3, stage_channels=(8, 8),
                                dilation="block", embedding_dim=0)
    state = init_model(config, seed=0)
    _identity_stats(state)
    _positive_weights(state)
    x = np.zeros((3, 40, 40), dtype=np.float32)
    x[:, 20, 20] = 1.0
    out = dilated_block(Tensor(x), 1, config, state, bn_mode="eval")
    nz = np.argwhere(np.abs(out.data).sum(axis=0) > 0)
    ys, xs = nz[:, 0], nz[:, 1]
    assert ys.max() - ys.min() + 1 == 33
    assert xs.max() - xs.min() + 1 == 33


def test_single_dilation8_impulse_footprint_17():
    config = ArchitectureConfig(num_classes=3, stage_channels=(8, 8),
                                dilation=8, embedding_dim=0)
    state = init_model(config, seed=0)
    _identity_stats(state)
    _positive_weights(state)
    x = np.zeros((3, 40, 40), dtype=np.float32)
    x[:, 20, 20] = 1.0
    arts_like = ad.conv2d(Tensor(x), state.params["enc1/conv/w"],
                          state.params["enc1/conv/b"], dilation=8)
    nz = np.argwhere(np.abs(arts_like.data).sum(axis=0) > 0)
    assert nz[:, 0].max() - nz[:, 0].min() + 1 == 17
    assert nz[:, 1].max() - nz[:, 1].min() + 1 == 17


def test_dilated_block_branches_match_standalone_convs():
    config = ArchitectureConfig(num_classes=3, stage_channels=(8, 8),
                                dilation="block", embedding_dim=0)
    state = init_model(config, seed=4)
    _identity_stats(state)
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(-1, 1, size=(3, 12, 12)))
    out = dilated_block(x, 1, config, state, bn_mode="eval")

    width = config.branch_channels(1)
    for k, d in enumerate((1, 2, 4, 8, 16)):
        w = state.params[f"enc1/d{d}/conv/w"]
        b = state.params[f"enc1/d{d}/conv/b"]
        gamma = state.params[f"enc1/d{d}/bn/gamma"]
        beta = state.params[f"enc1/d{d}/bn/beta"]
        conv = ad.conv2d(x, w, b, dilation=d)
        ref = ad.relu(ad.batch_norm(conv, gamma, beta, state.stats[f"enc1/d{d}"],
                                    mode="eval"))
        np.testing.assert_allclose(out.data[k * width:(k + 1) * width], ref.data,
                                   atol=1e-6)


# ---------------------------------------------------------------------------
# bridge
# ---------------------------------------------------------------------------

def test_bridge_zero_map_appends_zero_channels():
    visual = Tensor(np.random.default_rng(5).standard_normal((4, 8, 8)))
    merged = bridge_merge(visual, np.zeros((6, 32, 32), dtype=np.float32))
    assert merged.shape == (10, 8, 8)
    np.testing.assert_array_equal(merged.data[:4], visual.data)
    assert np.all(merged.data[4:] == 0)


def test_bridge_constant_map_broadcasts_vector():
    visual = Tensor(np.zeros((2, 4, 4)))
    vec = np.array([1.5, -2.0, 0.5], dtype=np.float32)
    emap = np.broadcast_to(vec[:, None, None], (3, 16, 16)).copy()
    merged = bridge_merge(visual, emap)
    for c, v in enumerate(vec):
        np.testing.assert_allclose(merged.data[2 + c], v, atol=1e-6)


def test_bridge_half_page_area_average_oracle():
    u, v = 2.0, -1.0
    emap = np.zeros((1, 8, 8), dtype=np.float32)
    emap[:, :, :3] = u   # left 3 columns
    emap[:, :, 3:] = v   # right 5 columns
    visual = Tensor(np.zeros((1, 2, 2)))
    merged = bridge_merge(visual, emap)  # factor 4: cells cover 4 columns each
    left = (3 * u + 1 * v) / 4
    np.testing.assert_allclose(merged.data[1, :, 0], left, atol=1e-6)
    np.testing.assert_allclose(merged.data[1, :, 1], v, atol=1e-6)


def test_bridge_rejects_non_integer_ratio():
    with pytest.raises(ContractViolation):
        bridge_merge(Tensor(np.zeros((2, 3, 3))), np.zeros((1, 8, 8), dtype=np.float32))


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------

def test_decode_main_output_shape():
    config = ArchitectureConfig(num_classes=7, stage_channels=(4, 8), embedding_dim=0)
    state = init_model(config, seed=0)
    image = Tensor(np.random.default_rng(0).uniform(-1, 1, size=(3, 64, 64)))
    arts = forward(image, None, config, state, mode="eval")
    assert arts.logits.shape == (7, 64, 64)


def test_decode_main_zero_weights_uniform_softmax():
    config = ArchitectureConfig(num_classes=5, stage_channels=(4, 4), embedding_dim=0)
    state = init_model(config, seed=0)
    for p in state.params.values():
        p.data[:] = 0.0
    image = Tensor(np.random.default_rng(1).uniform(-1, 1, size=(3, 16, 16)))
    arts = forward(image, None, config, state, mode="eval")
    probs = ad.softmax_channels(arts.logits.data)
    np.testing.assert_allclose(probs, 1.0 / 5.0, atol=1e-6)


def test_forward_requires_embedding_map_when_configured():
    config = ArchitectureConfig(num_classes=3, stage_channels=(4, 4), embedding_dim=4)
    state = init_model(config, seed=0)
    image = Tensor(np.zeros((3, 16, 16)))
    with pytest.raises(ContractViolation):
        forward(image, None, config, state, mode="eval")


def test_forward_rejects_embedding_map_when_disabled():
    state = init_model(TINY, seed=0)
    image = Tensor(np.zeros((3, 16, 16)))
    with pytest.raises(ContractViolation):
        forward(image, np.zeros((4, 16, 16), dtype=np.float32), TINY, state)


def test_decode_before_encode_rejected():
    from docseg.model import ForwardArtifacts
    state = init_model(TINY, seed=0)
    with pytest.raises(ContractViolation):
        decode_main(ForwardArtifacts(), TINY, state)


def test_auxiliary_shapes_match_encoder_hierarchy():
    config = ArchitectureConfig(num_classes=3, stage_channels=(4, 8),
                                dilation="block", embedding_dim=0)
    state = init_model(config, seed=0)
    image = Tensor(np.random.default_rng(2).uniform(-1, 1, size=(3, 32, 32)))
    arts = forward(image, None, config, state, mode="train")
    assert arts.reconstructions is not None
    for a, recon in zip(arts.activations, arts.reconstructions):
        assert recon.shape == a.shape
        assert np.all(np.isfinite(recon.data))


def test_auxiliary_rejected_in_eval_mode():
    arts, state, _ = tiny_forward(seed=0)
    with pytest.raises(ContractViolation):
        decode_auxiliary(arts, TINY, state, mode="eval")


def test_eval_forward_skips_auxiliary():
    arts, _, _ = tiny_forward(seed=0, mode="eval")
    assert arts.reconstructions is None


def test_auxiliary_single_image_overfit():
    # training only the auxiliary path on one image must cut the summed
    # reconstruction error by at least 90% within 500 steps
    from docseg.losses import reconstruction_loss

    config = ArchitectureConfig(num_classes=3, stage_channels=(8, 16), embedding_dim=0)
    state = init_model(config, seed=7)
    rng = np.random.default_rng(7)
    image = Tensor(rng.uniform(-1, 1, size=(3, 32, 32)))
    aux_params = {n: p for n, p in state.params.items() if n.startswith("aux")}
    opt = Adadelta(aux_params)

    def rec_total():
        arts = forward(image, None, config, state, mode="train")
        total = None
        for a, r in zip(arts.activations, arts.reconstructions):
            term = reconstruction_loss(a, r)
            total = term if total is None else ad.add(total, term)
        return total

    initial = rec_total().item()
    final = initial
    for step in range(500):
        state.zero_grad()
        with ad.ComputationGraph() as g:
            loss = rec_total()
        g.backward(loss)
        opt.step()
        final = loss.item()
        if final <= 0.1 * initial:
            break
    assert final <= 0.1 * initial, f"reconstruction only fell {initial} -> {final}"


# ---------------------------------------------------------------------------
# topology audit and parameter parity
# ---------------------------------------------------------------------------

def _variant(dilation, upsampling, skip):
    return ArchitectureConfig(num_classes=7, stage_channels=(8, 16),
                              dilation=dilation, upsampling=upsampling,
                              skip_connections=skip, embedding_dim=4)


def test_ablation_variant_topologies():
    model1 = _variant(1, "bilinear", False)
    model2 = _variant(1, "bilinear", True)
    model3 = _variant(1, "unpooling", True)
    model4 = _variant(8, "unpooling", True)
    model5 = _variant("block", "unpooling", True)

    n1, n2, n3 = parameter_names(model1), parameter_names(model2), parameter_names(model3)
    n4, n5 = parameter_names(model4), parameter_names(model5)

    # skips add fusion width: decoder conv shapes differ between 1 and 2
    s1 = init_model(model1, seed=0)
    s2 = init_model(model2, seed=0)
    assert s1.params["dec1/conv/w"].shape != s2.params["dec1/conv/w"].shape
    # 2 vs 3 differ only in the upsampling operator, names and shapes equal
    assert n2 == n3
    assert topology_summary(model2) != topology_summary(model3)
    # 3 vs 4 differ only in dilation
    assert n3 == n4
    assert topology_summary(model3) != topology_summary(model4)
    # the block variant has per-branch parameters
    assert any("/d16/" in n for n in n5)
    assert len(n5) > len(n3)
    for names in (n1, n2, n3, n4, n5):
        assert len(names) == len(set(names))


def test_block_and_single_dilation_parameter_parity():
    # single-dilation stage widths set to the block's realized widths make
    # the parameter totals agree (per-branch width = ceil(c/4), 5 branches)
    block = ArchitectureConfig(num_classes=7, stage_channels=(16, 32),
                               dilation="block", embedding_dim=8)
    realized = tuple(block.realized_channels(l) for l in (1, 2))
    single = ArchitectureConfig(num_classes=7, stage_channels=realized,
                                dilation=1, embedding_dim=8)
    nb = init_model(block, seed=0).parameter_count()
    ns = init_model(single, seed=0).parameter_count()
    assert abs(nb - ns) / max(nb, ns) < 0.05


# ---------------------------------------------------------------------------
# covariance / determinism / receptive field
# ---------------------------------------------------------------------------

def test_translation_covariance_in_interior():
    config = ArchitectureConfig(num_classes=4, stage_channels=(4, 8), dilation=1,
                                upsampling="unpooling", skip_connections=True,
                                embedding_dim=0)
    state = init_model(config, seed=9)
    rng = np.random.default_rng(9)
    shift = 2 ** config.num_stages  # one full pooling period
    field = rng.uniform(-1, 1, size=(3, 64 + shift, 64 + shift)).astype(np.float32)

    base = forward(Tensor(field[:, :64, :64]), None, config, state, mode="eval")
    moved = forward(Tensor(field[:, shift:, shift:]), None, config, state, mode="eval")

    band = receptive_field(config) + shift
    inner_base = base.logits.data[:, band + shift:64 - band, band + shift:64 - band]
    inner_moved = moved.logits.data[:, band:64 - band - shift, band:64 - band - shift]
    assert inner_base.shape[1] > 8
    np.testing.assert_allclose(inner_base, inner_moved, atol=1e-4)


def test_forward_is_deterministic():
    a1, _, _ = tiny_forward(seed=11)
    a2, _, _ = tiny_forward(seed=11)
    assert np.array_equal(a1.logits.data, a2.logits.data)


def test_receptive_field_reasonable():
    assert receptive_field(TINY) < 64
    block = ArchitectureConfig(num_classes=3, stage_channels=(4, 4),
                               dilation="block", embedding_dim=0)
    assert receptive_field(block) > receptive_field(TINY)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def test_preprocess_resizes_longer_side():
    config = ArchitectureConfig(num_classes=3, stage_channels=(4, 4, 4, 4),
                                embedding_dim=0)
    raster = np.random.default_rng(0).integers(0, 255, size=(768, 384, 3), dtype=np.uint8)
    result = preprocess(raster, config, max_side=384)
    assert result.content_size == (384, 192)
    assert result.scale == pytest.approx(0.5)
    h, w = result.tensor.data.shape[1:]
    assert h % 16 == 0 and w % 16 == 0
    assert result.valid[:384, :192].all()
    assert not result.valid[:, 192:].any()


def test_preprocess_small_image_only_padded():
    config = ArchitectureConfig(num_classes=3, stage_channels=(4, 4), embedding_dim=0)
    raster = np.random.default_rng(1).integers(0, 255, size=(30, 50, 3), dtype=np.uint8)
    result = preprocess(raster, config, max_side=384)
    assert result.scale == 1.0
    assert result.content_size == (30, 50)
    assert result.tensor.data.shape[1:] == (32, 52)


def test_preprocess_mean_subtraction_centers_content():
    config = ArchitectureConfig(num_classes=3, stage_channels=(4, 4), embedding_dim=0)
    raster = np.random.default_rng(2).uniform(0, 1, size=(32, 32, 3)).astype(np.float32)
    means = tuple(raster.mean(axis=(0, 1)))
    result = preprocess(raster, config, max_side=384, channel_means=means)
    content = result.tensor.data[:, result.valid]
    np.testing.assert_allclose(content.mean(axis=1), 0.0, atol=1e-5)


def test_preprocess_rejects_empty_image():
    config = ArchitectureConfig(num_classes=3, stage_channels=(4, 4), embedding_dim=0)
    with pytest.raises(InputError):
        preprocess(np.zeros((0, 10, 3)), config)


# ---------------------------------------------------------------------------
# end-to-end gradient check
# ---------------------------------------------------------------------------

def test_end_to_end_gradients_match_finite_differences():
    result = gradcheck.run_end_to_end_check(seed=0)
    assert result.passed, str(result)
