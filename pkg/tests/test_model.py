import numpy as np
import pytest

from gazefuse import layers as L
from gazefuse import tensor as T
from gazefuse.data import GazeArrays
from gazefuse.gradcheck import grad_check
from gazefuse.layers import LayerParams
from gazefuse.model import (
    GazeModelConfig,
    ModelParams,
    eye_encoder_forward,
    eye_path_names,
    face_encoder_forward,
    init_parameters,
    model_forward,
)
from gazefuse.tensor import Tensor
from gazefuse.training import TrainConfig, adam_step, gaze_loss

TINY = dict(feature_dim=8, heads=2, face_widths=(4, 4, 8, 8), eye_widths=(4, 4, 8, 8))


def tiny(fusion="xattn", seed=0, **kw):
    return GazeModelConfig(fusion=fusion, seed=seed, **{**TINY, **kw})


def images(rng, b=2):
    return [rng.uniform(-1, 1, size=(b, 3, 64, 64)).astype(np.float32) for _ in range(3)]


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        GazeModelConfig(fusion="concat")
    with pytest.raises(ValueError):
        GazeModelConfig(feature_dim=64)
    with pytest.raises(ValueError):
        GazeModelConfig(heads=3)
    with pytest.raises(ValueError):
        GazeModelConfig(query_mode="cls")
    # attention fields are ignored without attention
    GazeModelConfig(fusion="none", heads=3)
    GazeModelConfig(fusion="fcn", heads=3)


def test_config_dict_roundtrip():
    c = tiny("fcn", seed=4)
    assert GazeModelConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------- parameters

def shape_walk_count(fusion, d=128, fw=(16, 32, 64, 128), ew=(16, 32, 64, 128)):
    """Parameter count derived by hand from the architecture description."""
    def conv(ci, co, k, bias=False):
        return co * ci * k * k + (co if bias else 0)

    def conv_block(ci, co, k):
        return conv(ci, co, k) + 2 * co

    def mb(c):
        b = max(c // 2, 1)
        return (conv_block(c, b, 1) + conv_block(c, b, 3) + conv_block(c, b, 3)
                + conv_block(b, b, 3) + conv(3 * b, c, 1, bias=True))

    total = conv_block(3, fw[0], 3)
    for i in range(4):
        total += mb(fw[i])
        if i < 3:
            total += conv_block(fw[i], fw[i + 1], 3)
    if fusion != "none":
        total += conv_block(3, ew[0], 3)
        prev = ew[0]
        for i, s in enumerate((1, 2, 2, 1)):
            total += conv_block(prev, ew[i], 3) + conv(ew[i], ew[i], 3, bias=True)
            if prev != ew[i] or s != 1:
                total += conv(prev, ew[i], 1)
            prev = ew[i]
        total += 2 * d
    if fusion == "fcn":
        total += (2 * d * d + d) + (d * d + d)
    if fusion == "xattn":
        total += 4 * d * d + 2 * d
    total += (d * (d // 2) + d // 2) + ((d // 2) * 3 + 3)
    return total


@pytest.mark.parametrize("fusion", ["none", "fcn", "xattn"])
def test_parameter_count_shape_walk(fusion):
    assert init_parameters(GazeModelConfig(fusion=fusion)).count() == shape_walk_count(fusion)


def test_parameter_count_pure_function_of_config():
    a = init_parameters(tiny(seed=1)).count()
    assert a == init_parameters(tiny(seed=2)).count()
    assert a == shape_walk_count("xattn", 8, (4, 4, 8, 8), (4, 4, 8, 8))


def test_same_seed_bit_identical():
    a, b = init_parameters(tiny(seed=3)), init_parameters(tiny(seed=3))
    assert list(a.params) == list(b.params)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    c = init_parameters(tiny(seed=4))
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


def test_init_conventions():
    p = init_parameters(GazeModelConfig()).params
    for k in p:
        if k.endswith(".gamma"):
            assert np.all(p[k].data == 1)
        if k.endswith(".beta"):
            assert np.all(p[k].data == 0)
        if k.endswith(("conv2.w", "conv2.b", "project.w", "project.b")):
            assert not p[k].data.any(), k
    assert p["eye_enc.identity"].shape == (2, 128)


def test_residual_paths_identity_at_init(rng):
    mp = init_parameters(tiny())
    x = rng.normal(size=(2, 8, 8, 4)).astype(np.float32)
    out = L.residual_block(Tensor(x), mp.params, "eye_enc.stage0.res", training=True).data
    np.testing.assert_array_equal(out, np.maximum(x, 0))
    out = L.multi_branch_block(Tensor(x), mp.params, "face_enc.stage0.mb", training=True).data
    np.testing.assert_array_equal(out, np.maximum(x, 0))


# ---------------------------------------------------------------- encoders

def test_default_shapes(rng):
    mp = init_parameters(GazeModelConfig())
    face, left, right = images(rng)
    tokens, pooled = face_encoder_forward(face, mp)
    assert tokens.shape == (2, 16, 128) and pooled.shape == (2, 128)
    assert eye_encoder_forward(left, right, mp).shape == (2, 8, 128)
    assert model_forward(face, left, right, mp).shape == (2, 3)


def test_wrong_input_shape(rng):
    mp = init_parameters(tiny())
    with pytest.raises(ValueError):
        face_encoder_forward(np.zeros((2, 3, 32, 32), np.float32), mp)
    with pytest.raises(ValueError):
        eye_encoder_forward(np.zeros((2, 3, 64, 64), np.float32), np.zeros((2, 1, 64, 64), np.float32), mp)


def test_identical_faces_identical_tokens(rng):
    mp = init_parameters(tiny())
    face = np.repeat(images(rng, 1)[0], 2, axis=0)
    tokens, _ = face_encoder_forward(face, mp, training=False)
    np.testing.assert_array_equal(tokens.data[0], tokens.data[1])


def test_pooled_is_token_mean(rng):
    mp = init_parameters(tiny())
    tokens, pooled = face_encoder_forward(images(rng)[0], mp)
    np.testing.assert_allclose(pooled.data, tokens.data.mean(axis=1), atol=1e-6)


def test_swapping_eyes_is_not_a_permutation(rng):
    mp = init_parameters(tiny())
    _, left, right = images(rng)
    a = eye_encoder_forward(left, right, mp).data
    b = eye_encoder_forward(right, left, mp).data
    swapped = np.concatenate([b[:, 4:], b[:, :4]], axis=1)
    assert not np.allclose(a, swapped)
    # without identity embeddings the swap is exactly a token permutation
    mp.params["eye_enc.identity"].data[:] = 0
    a = eye_encoder_forward(left, right, mp).data
    b = eye_encoder_forward(right, left, mp).data
    np.testing.assert_array_equal(a, np.concatenate([b[:, 4:], b[:, :4]], axis=1))


def test_left_tokens_come_first(rng):
    mp = init_parameters(tiny())
    _, left, right = images(rng)
    full = eye_encoder_forward(left, right, mp).data
    same = eye_encoder_forward(left, left, mp).data
    np.testing.assert_array_equal(full[:, :4], same[:, :4])


def _f64_model(cfg, rng):
    mp = init_parameters(cfg).astype(np.float64)
    for k, t in mp.params.items():
        t.data = (1.0 if k.endswith(".gamma") else 0.0) + rng.normal(0, 0.3, t.shape)
    return mp


def _model_gradcheck(mp, fn, rng, coords=3):
    # a bias moves thousands of relu inputs at once; a smaller step keeps them off kinks
    names = sorted(mp.params)

    def f(*ps):
        q = ModelParams(mp.config, LayerParams(dict(zip(names, ps)), mp.params.buffers))
        return fn(q)

    return grad_check(f, [mp.params[k] for k in names], eps=1e-6, coords_per_tensor=coords, seed=1)


def test_face_encoder_gradcheck(rng):
    mp = _f64_model(tiny("none"), rng)
    face = rng.uniform(-1, 1, size=(2, 3, 64, 64))
    err = _model_gradcheck(mp, lambda q: face_encoder_forward(face, q, training=True)[1].sum(), rng)
    assert err < 1e-5


def test_eye_encoder_gradcheck(rng):
    mp = _f64_model(tiny("fcn"), rng)
    left, right = rng.uniform(-1, 1, size=(2, 2, 3, 64, 64))
    probe = Tensor(rng.normal(size=(2, 8, 8)))
    err = _model_gradcheck(mp, lambda q: (eye_encoder_forward(left, right, q, training=True) * probe).sum(), rng)
    assert err < 1e-5


@pytest.mark.parametrize("fusion", ["fcn", "xattn"])
def test_full_model_gradcheck(rng, fusion):
    mp = _f64_model(tiny(fusion), rng)
    face, left, right = rng.uniform(-1, 1, size=(3, 2, 3, 64, 64))
    truth = np.array([[0.0, 0.0, -1.0], [0.6, 0.0, -0.8]])
    err = _model_gradcheck(mp, lambda q: gaze_loss(model_forward(face, left, right, q, True), truth), rng, 2)
    assert err < 1e-5


# ---------------------------------------------------------------- model_forward

def test_none_ignores_eyes(rng):
    mp = init_parameters(tiny("none"))
    face, left, right = images(rng)
    a = model_forward(face, left, right, mp).data
    b = model_forward(face, None, None, mp).data
    assert a.tobytes() == b.tobytes()


def test_none_is_function_of_face_only(rng):
    mp = init_parameters(tiny("none"))
    face, left, right = images(rng)
    _, l2, r2 = images(rng)
    assert model_forward(face, left, right, mp).data.tobytes() == \
        model_forward(face, l2, r2, mp).data.tobytes()


@pytest.mark.parametrize("fusion", ["none", "fcn", "xattn"])
def test_output_finite_and_deterministic(rng, fusion):
    mp = init_parameters(tiny(fusion))
    face, left, right = images(rng, 3)
    a = model_forward(face, left, right, mp).data
    b = model_forward(face, left, right, mp).data
    assert a.shape == (3, 3) and np.all(np.isfinite(a))
    assert a.tobytes() == b.tobytes()


def test_eye_fusions_need_eyes(rng):
    face = images(rng)[0]
    with pytest.raises(ValueError):
        model_forward(face, None, None, init_parameters(tiny("fcn")))


def test_params_config_mismatch(rng):
    face, left, right = images(rng)
    mp = init_parameters(tiny("fcn"))
    with pytest.raises(ValueError, match="does not match"):
        model_forward(face, left, right, ModelParams(tiny("xattn"), mp.params))
    small = init_parameters(tiny("none"))
    with pytest.raises(ValueError):
        model_forward(face, left, right, ModelParams(tiny("none", face_widths=(4, 8, 8, 8)), small.params))


def _zero_eye_path(mp):
    for k in eye_path_names(mp.params):
        mp.params[k].data[:] = 0


def test_fcn_with_zero_eye_path_is_fixed_function_of_face(rng):
    mp = init_parameters(tiny("fcn"))
    mp.params = mp.params  # keep the same object
    for k in mp.params:
        if k.startswith("fusion.") or k.startswith("head."):
            mp.params[k].data = rng.normal(0, 0.5, mp.params[k].shape).astype(np.float32)
    _zero_eye_path(mp)
    face, left, right = images(rng)
    _, l2, r2 = images(rng)
    out = model_forward(face, left, right, mp).data
    assert out.tobytes() == model_forward(face, l2, r2, mp).data.tobytes()
    _, pooled = face_encoder_forward(face, mp)
    zero = Tensor(np.zeros_like(pooled.data))
    ref = L.mlp_head(L.fcn_fusion(pooled, zero, mp.params, "fusion"), mp.params, "head").data
    np.testing.assert_allclose(out, ref, atol=1e-6)
    # fc1 sees [face, 0], an affine map of the face features alone
    w1 = mp.params["fusion.fc1.w"].data
    pre = pooled.data @ w1[:8] + mp.params["fusion.fc1.b"].data
    np.testing.assert_allclose(L.linear(T.concat([pooled, zero], axis=-1), mp.params, "fusion.fc1").data,
                               pre, atol=1e-6)


def test_xattn_zero_eye_path_matches_single_token_oracle(rng):
    mp = init_parameters(tiny("xattn"))
    for k in mp.params:
        if k.startswith("fusion.w"):
            mp.params[k].data = rng.normal(0, 0.5, mp.params[k].shape).astype(np.float32)
    _zero_eye_path(mp)
    face, left, right = images(rng)
    eye_tokens = eye_encoder_forward(left, right, mp).data
    assert np.all(eye_tokens == eye_tokens[:, :1])
    tokens, _ = face_encoder_forward(face, mp)
    single = Tensor(eye_tokens[:, :1])
    attended = L.cross_attention(tokens, single, mp.config.attention, mp.params, "fusion")
    ref = L.mlp_head(T.reduce("mean", attended, axes=1), mp.params, "head").data
    np.testing.assert_allclose(model_forward(face, left, right, mp).data, ref, atol=1e-6)


def test_pooled_query_mode(rng):
    mp = init_parameters(tiny("xattn", query_mode="pooled"))
    face, left, right = images(rng)
    assert model_forward(face, left, right, mp).shape == (2, 3)


def test_every_parameter_participates(rng, small_dataset):
    for fusion in ("none", "fcn", "xattn"):
        mp = init_parameters(tiny(fusion))
        face, left, right = images(rng)
        loss = gaze_loss(model_forward(face, left, right, mp, training=True), np.tile([0.0, 0.0, -1.0], (2, 1)))
        T.backward(loss)
        missing = [k for k, t in mp.params.items() if t.grad is None]
        assert not missing, (fusion, missing)


def test_single_step_decreases_batch_loss(small_dataset):
    data = GazeArrays.from_manifest(small_dataset)
    cfg_t = TrainConfig(epochs=1, batch_size=4, seed=0)
    wins = {f: 0 for f in ("none", "fcn", "xattn")}
    trials = 100
    for fusion in wins:
        for trial in range(trials):
            mp = init_parameters(tiny(fusion, seed=trial))
            batch = data.take(np.random.default_rng(trial).choice(len(data), 4, replace=False))
            eyes = (batch.left_eye, batch.right_eye) if fusion != "none" else (None, None)

            def loss_value():
                return gaze_loss(model_forward(batch.face, *eyes, mp, training=True), batch.gaze)

            before = loss_value()
            T.backward(before)
            arrays = {k: t.data for k, t in mp.params.items()}
            grads = {k: t.grad for k, t in mp.params.items()}
            from gazefuse.training import AdamState
            adam_step(arrays, grads, AdamState(), cfg_t)
            with T.no_grad():
                after = loss_value()
            wins[fusion] += after.item() < before.item()
    assert all(w >= 95 for w in wins.values()), wins
