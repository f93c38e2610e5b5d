import numpy as np
import pytest

from posedistill import autodiff as ad
from posedistill.config import TrainConfig
from posedistill.errors import ConfigError
from posedistill.model import ModelConfig, PoseModel, TokenSet, attention_matrix, token_distill_losses

SMALL = ModelConfig(num_layers=2, embed_dim=16, num_heads=2, stem_channels=(4, 8))


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(size=(3, 64, 48)).astype(np.float32)


def test_default_geometry():
    cfg = ModelConfig()
    assert cfg.grid_hw == (16, 12)
    assert cfg.patch_grid == (4, 4) and cfg.num_patches == 16
    assert (cfg.heatmap_grid.height, cfg.heatmap_grid.width) == (16, 12)


def test_student_and_teacher_share_token_geometry():
    cfg = TrainConfig()
    s, t = cfg.student_model(13), cfg.teacher_model(13)
    assert (s.num_keypoints, s.num_patches, s.embed_dim) == (t.num_keypoints, t.num_patches, t.embed_dim)
    assert t.stem_channels[1] > s.stem_channels[1] and t.stem_extra > s.stem_extra


def test_token_shapes_and_head_outputs(images):
    m = PoseModel(SMALL, seed=1)
    tokens, pred = m(images)
    assert tokens.kpt_tokens.shape == (3, 13, 16)
    assert tokens.vis_tokens.shape == (3, 16, 16)
    assert pred.mu.shape == (3, 13, 2) and pred.sigma.shape == (3, 13, 2) and pred.conf.shape == (3, 13)
    teacher = PoseModel(ModelConfig(num_layers=2, embed_dim=16, num_heads=2, head="heatmap"), seed=1)
    _, hm = teacher(images)
    assert hm.shape == (3, 13, 16, 12)
    ad.clear_tape()


def test_prediction_ranges(images):
    _, pred = PoseModel(SMALL, seed=2)(images)
    assert np.all(pred.sigma.data > 0)
    assert np.all((pred.conf.data >= 0) & (pred.conf.data <= 1))
    assert np.all((pred.mu.data >= 0) & (pred.mu.data <= 1))
    ad.clear_tape()


def test_initial_sigma_near_two():
    cfg = ModelConfig(num_layers=1, embed_dim=8, num_heads=2, stem_channels=(2, 4))
    m = PoseModel(cfg, seed=3)
    with ad.no_grad():
        _, pred = m(np.zeros((1, 64, 48), np.float32))
    # fc2 weights are small, so the bias dominates the raw deviation
    assert np.all(np.abs(pred.sigma.data - 2.0) < 0.5)


def test_zero_image_is_finite():
    for head in ("regression", "heatmap"):
        m = PoseModel(ModelConfig(num_layers=2, embed_dim=16, num_heads=2, head=head), seed=4)
        with ad.no_grad():
            tokens, out = m(np.zeros((2, 64, 48), np.float32))
        arrays = [tokens.kpt_tokens.data, tokens.vis_tokens.data]
        arrays += [out.data] if head == "heatmap" else [out.mu.data, out.sigma.data, out.conf.data]
        assert all(np.all(np.isfinite(a)) for a in arrays)


def test_isotropic_sigma_ties_axes(images):
    cfg = ModelConfig(num_layers=1, embed_dim=16, num_heads=2, isotropic_sigma=True)
    with ad.no_grad():
        _, pred = PoseModel(cfg, seed=5)(images)
    assert np.array_equal(pred.sigma.data[..., 0], pred.sigma.data[..., 1])


def test_forward_deterministic(images):
    m = PoseModel(SMALL, seed=6)
    with ad.no_grad():
        a = m(images)[1].mu.data.copy()
        b = m(images)[1].mu.data.copy()
    assert a.tobytes() == b.tobytes()
    with ad.no_grad():
        c = PoseModel(SMALL, seed=6)(images)[1].mu.data
    assert a.tobytes() == c.tobytes()


def test_swapping_keypoint_tokens_swaps_outputs(images):
    m = PoseModel(SMALL, seed=7, dtype=np.float64)
    x = images.astype(np.float64)
    with ad.no_grad():
        tokens, pred = m(x)
        m.kpt_tokens.data[[2, 5]] = m.kpt_tokens.data[[5, 2]]
        tokens2, pred2 = m(x)
    perm = np.arange(13)
    perm[[2, 5]] = [5, 2]
    np.testing.assert_allclose(pred2.mu.data, pred.mu.data[:, perm], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(pred2.conf.data, pred.conf.data[:, perm], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(tokens2.vis_tokens.data, tokens.vis_tokens.data, rtol=1e-12, atol=1e-14)


def test_image_size_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        PoseModel(SMALL)(np.zeros((1, 32, 48), np.float32))


@pytest.mark.parametrize("kwargs", [
    dict(embed_dim=30, num_heads=4),
    dict(patch_h=5),
    dict(image_height=62),
    dict(head="soft-argmax"),
    dict(stem_channels=(4,)),
])
def test_bad_model_config(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_state_dict_round_trip():
    a, b = PoseModel(SMALL, seed=8), PoseModel(SMALL, seed=9)
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


def test_state_dict_mismatch_is_config_error():
    state = PoseModel(SMALL).state_dict()
    del state["pos_embed"]
    with pytest.raises(ConfigError):
        PoseModel(SMALL).load_state_dict(state)
    other = PoseModel(ModelConfig(num_layers=2, embed_dim=32, num_heads=2, stem_channels=(4, 8))).state_dict()
    with pytest.raises(ConfigError):
        PoseModel(SMALL).load_state_dict(other)


# --- token distillation ------------------------------------------------------------
def tokens64(k, v):
    return TokenSet(ad.Tensor(np.asarray(k, np.float64)), ad.Tensor(np.asarray(v, np.float64)))


def test_token_losses_examples():
    rng = np.random.default_rng(10)
    k, v = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4))
    kt, vt = token_distill_losses(tokens64(k, v), tokens64(k, v))
    assert kt.item() == 0.0 and vt.item() == 0.0
    kt, vt = token_distill_losses(tokens64(np.zeros((1, 3, 4)), np.zeros((1, 5, 4))),
                                  tokens64(np.ones((1, 3, 4)), np.ones((1, 5, 4))))
    assert kt.item() == 1.0 and vt.item() == 1.0


def loop_mse(a, b):
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    return total / a.size


def test_token_losses_match_element_loop():
    rng = np.random.default_rng(11)
    sk, sv = rng.integers(-16, 16, (2, 3, 4)) / 8, rng.integers(-16, 16, (2, 5, 4)) / 8
    tk, tv = rng.integers(-16, 16, (2, 3, 4)) / 8, rng.integers(-16, 16, (2, 5, 4)) / 8
    kt, vt = token_distill_losses(tokens64(sk, sv), tokens64(tk, tv))
    assert kt.item() == loop_mse(sk, tk) and vt.item() == loop_mse(sv, tv)


def test_token_losses_positive_iff_different():
    rng = np.random.default_rng(12)
    k, v = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 5, 4))
    k2 = k.copy()
    k2[0, 1, 2] += 1e-3
    kt, vt = token_distill_losses(tokens64(k2, v), tokens64(k, v))
    assert kt.item() > 0 and vt.item() == 0


def test_token_losses_shape_mismatch():
    with pytest.raises(ConfigError):
        token_distill_losses(tokens64(np.zeros((1, 3, 4)), np.zeros((1, 5, 4))),
                             tokens64(np.zeros((1, 3, 4)), np.zeros((1, 6, 4))))


def test_teacher_receives_no_gradient_from_distillation(images):
    student = PoseModel(SMALL, seed=13)
    teacher = PoseModel(ModelConfig(num_layers=2, embed_dim=16, num_heads=2, head="heatmap",
                                    stem_channels=(8, 16)), seed=14)
    t_tokens, _ = teacher(images)  # teacher params require grad here on purpose
    s_tokens, _ = student(images)
    kt, vt = token_distill_losses(s_tokens, t_tokens)
    ad.backward(kt + vt)
    assert all(p.grad is None for p in teacher.parameters())
    assert any(p.grad is not None and np.abs(p.grad).sum() > 0 for p in student.parameters())


# --- attention ----------------------------------------------------------------------
def test_attention_row_properties(images):
    m = PoseModel(SMALL, seed=15, dtype=np.float64)
    row = attention_matrix(m, images[0].astype(np.float64), 1, 4)
    assert row.shape == (16,)
    assert np.all(row >= 0) and np.all(row <= 1) and row.sum() <= 1 + 1e-12
    rec = m.attention_records(images[:1].astype(np.float64))[1]
    full = rec["attn"][0, :, 4, :]
    np.testing.assert_allclose(full.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_matches_recomputation_from_q_k(images):
    m = PoseModel(SMALL, seed=16, dtype=np.float64)
    x = images[:1].astype(np.float64)
    rec = m.attention_records(x)[0]
    q, k = rec["q"][0], rec["k"][0]  # (heads, N, dh)
    s = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    a = np.exp(s - s.max(axis=-1, keepdims=True))
    a /= a.sum(axis=-1, keepdims=True)
    expected = a[:, 7, 13:].mean(axis=0)
    np.testing.assert_allclose(attention_matrix(m, x[0], 0, 7), expected, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("layer,kp", [(-1, 0), (2, 0), (0, 13), (0, -1)])
def test_attention_out_of_range(images, layer, kp):
    with pytest.raises(IndexError):
        attention_matrix(PoseModel(SMALL), images[0], layer, kp)
