import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bagstorm import autodiff as ad
from bagstorm import data, model
from bagstorm.errors import FormatError, UsageError

from conftest import TINY, tiny_bundle, tiny_slide


def mlp_by_hand(enc, patch):
    """Plain-python encoder: tanh hidden layer, linear output."""
    x = [float(v) for v in np.asarray(patch).reshape(-1)]
    hidden = []
    for j in range(enc.W1.shape[1]):
        s = float(enc.b1[j]) + sum(x[i] * float(enc.W1[i, j]) for i in range(len(x)))
        hidden.append(math.tanh(s))
    out = []
    for k in range(enc.W2.shape[1]):
        out.append(float(enc.b2[k]) + sum(hidden[j] * float(enc.W2[j, k]) for j in range(len(hidden))))
    return out


def attention_by_hand(agg, feats):
    scores = []
    for f in feats:
        s = 0.0
        for m in range(agg.V.shape[1]):
            v = sum(float(f[i]) * float(agg.V[i, m]) for i in range(len(f)))
            u = sum(float(f[i]) * float(agg.U[i, m]) for i in range(len(f)))
            s += math.tanh(v) * (1.0 / (1.0 + math.exp(-u))) * float(agg.w[m, 0])
        scores.append(s)
    top = max(scores)
    e = [math.exp(s - top) for s in scores]
    a = [v / sum(e) for v in e]
    pooled = [sum(a[n] * float(feats[n][i]) for n in range(len(feats))) for i in range(len(feats[0]))]
    z = [sum(pooled[i] * float(agg.P[i, k]) for i in range(len(pooled))) for k in range(agg.P.shape[1])]
    return a, z


# --- encoder / aggregator ----------------------------------------------------------

def test_zero_weight_encoder_returns_bias(bundle):
    enc = model.EncoderParams(
        np.zeros_like(bundle.encoder.W1), np.ones(TINY.enc_hidden),
        np.zeros_like(bundle.encoder.W2), np.arange(TINY.feature_dim, dtype=float),
    )
    out = model.encode_patch(enc, np.random.default_rng(0).random(TINY.patch_shape))
    np.testing.assert_array_equal(out, np.arange(TINY.feature_dim, dtype=float))


def test_identical_patches_identical_features(bundle):
    p = tiny_slide(1)[0]
    assert model.encode_patch(bundle.encoder, p).tobytes() == model.encode_patch(bundle.encoder, p.copy()).tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_encoder_matches_hand_rolled_mlp(seed):
    b = tiny_bundle(seed)
    patch = tiny_slide(seed + 10)[0]
    np.testing.assert_allclose(model.encode_patch(b.encoder, patch), mlp_by_hand(b.encoder, patch), rtol=1e-12, atol=1e-13)


def test_encoder_rejects_wrong_shape(bundle):
    with pytest.raises(UsageError):
        model.encode_patch(bundle.encoder, np.zeros((2, 2, 2)))


def test_single_patch_attention(bundle):
    f = np.random.default_rng(0).normal(size=TINY.feature_dim)
    res = model.aggregate(bundle.aggregator, [f])
    np.testing.assert_array_equal(res.attention, [1.0])
    np.testing.assert_allclose(res.z, f @ bundle.aggregator.P, rtol=1e-14)


def test_identical_features_uniform_attention(bundle):
    f = np.random.default_rng(1).normal(size=TINY.feature_dim)
    res = model.aggregate(bundle.aggregator, [f] * 5)
    np.testing.assert_allclose(res.attention, [0.2] * 5, rtol=0, atol=1e-15)
    np.testing.assert_allclose(res.z, f @ bundle.aggregator.P, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_aggregate_matches_brute_force(seed):
    b = tiny_bundle(seed)
    feats = np.random.default_rng(seed).normal(size=(3, TINY.feature_dim))
    res = model.aggregate(b.aggregator, list(feats))
    a, z = attention_by_hand(b.aggregator, feats)
    np.testing.assert_allclose(res.attention, a, rtol=1e-12)
    np.testing.assert_allclose(res.z, z, rtol=1e-12, atol=1e-14)


def test_empty_bag_rejected(bundle):
    with pytest.raises(UsageError):
        model.aggregate(bundle.aggregator, [])
    with pytest.raises(UsageError):
        model.forward_slide(bundle, np.zeros((0, *TINY.patch_shape)))


def test_slide_of_one_patch(bundle):
    p = tiny_slide(2, n=1)
    out = model.forward_slide(bundle, p)
    np.testing.assert_allclose(out.z, model.encode_patch(bundle.encoder, p[0]) @ bundle.aggregator.P, rtol=1e-12, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_permutation_invariance(seed, n):
    b = tiny_bundle(seed % 7)
    pixels = tiny_slide(seed, n=n)
    perm = np.random.default_rng(seed).permutation(n)
    z1 = model.forward_slide(b, pixels).z
    z2 = model.forward_slide(b, pixels[perm]).z
    np.testing.assert_allclose(z1, z2, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_attention_sums_to_one(seed, n):
    out = model.forward_slide(tiny_bundle(seed % 5), tiny_slide(seed, n=n, low=0.0, high=1.0))
    assert abs(out.attention.sum() - 1.0) <= 1e-9
    assert np.all(np.isfinite(out.features)) and np.all(np.isfinite(out.z))


def test_cached_features_equal_recomputed(bundle, slide):
    out = model.forward_slide(bundle, slide)
    for i, p in enumerate(slide):
        assert out.features[i].tobytes() == model.encode_rows(bundle, p[None]).tobytes()


def test_unfrozen_forward_needs_training_flag():
    b = model.init_bundle(TINY, {"A": 2}, 0)
    with pytest.raises(UsageError):
        model.forward_slide(b, tiny_slide(0))
    model.forward_slide(b, tiny_slide(0), training=True)


# --- heads and prediction ------------------------------------------------------------

def _head(logits):
    """Head whose output equals ``logits`` for z = 0."""
    k = len(logits)
    return model.HeadParams(np.zeros((3, 2)), np.zeros(2), np.zeros((2, k)), np.array(logits, dtype=float))


def test_predict_tie_breaks_to_lowest_index():
    assert model.predict(_head([2.0, 2.0]), np.zeros(3)).label == 0


def test_predict_argmax():
    pred = model.predict(_head([0.1, 5.0]), np.zeros(3))
    assert pred.label == 1
    assert abs(pred.scores.sum() - 1.0) < 1e-15


def test_predict_dimension_mismatch():
    with pytest.raises(UsageError):
        model.predict(_head([0.0, 1.0]), np.zeros(4))


def test_head_output_matches_class_count(bundle):
    assert model.predict_logits(bundle.heads["B"], np.zeros(TINY.rep_dim)).shape == (1, 3)


# --- training ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    return data.generate_dataset(n_slides=8, n_patches=4, patch_shape=(3, 3, 2), texture_families=3)


def test_pretrain_zero_lr_leaves_parameters(tiny_data):
    b = model.init_bundle(TINY, tiny_data.task_classes, 0)
    res = model.pretrain(b, tiny_data.slides, "A", epochs=2, lr=0.0)
    for (k, v), (k2, v2) in zip(b.named_tensors().items(), res.bundle.named_tensors().items()):
        assert k == k2 and v.tobytes() == v2.tobytes()
    assert res.bundle.frozen


def test_pretrain_single_sample_descends(tiny_data):
    b = model.init_bundle(TINY, tiny_data.task_classes, 3)
    one = tiny_data.slides[:1]

    def loss_of(bundle):
        tape = ad.Tape()
        flat = {k: tape.constant(v) for k, v in bundle.named_tensors().items()}
        labels = {"A": np.array([one[0].labels["A"]])}
        return float(model.pretrain_loss(flat, np.stack([one[0].pixels]), labels, tape).value)

    after = model.pretrain(b, one, "A", epochs=1, lr=1e-3).bundle
    assert loss_of(after) < loss_of(b)


def test_pretrain_rejects_empty_and_frozen(tiny_data):
    b = model.init_bundle(TINY, tiny_data.task_classes, 0)
    with pytest.raises(UsageError):
        model.pretrain(b, [], "A", epochs=1)
    with pytest.raises(UsageError):
        model.pretrain(b.freeze(), tiny_data.slides, "A", epochs=1)


def test_train_head_zero_epochs_returns_init(tiny_data):
    b = model.init_bundle(TINY, tiny_data.task_classes, 0).freeze()
    head = model.train_head(b, tiny_data.slides, "B", epochs=0, seed=5)
    ref = model.init_head(model.ModelDims(rep_dim=TINY.rep_dim, head_hidden=TINY.head_hidden), 3, np.random.default_rng(5))
    for k in ("W1", "b1", "W2", "b2"):
        assert getattr(head, k).tobytes() == getattr(ref, k).tobytes()


def test_train_head_keeps_backbone(tiny_data):
    b = model.init_bundle(TINY, tiny_data.task_classes, 0).freeze()
    before = b.backbone_checksum()
    model.train_head(b, tiny_data.slides, "A", epochs=3, seed=1)
    assert b.backbone_checksum() == before


def test_train_head_requires_frozen(tiny_data):
    with pytest.raises(UsageError):
        model.train_head(model.init_bundle(TINY, tiny_data.task_classes, 0), tiny_data.slides, "A", epochs=1)


def test_frozen_backbone_is_read_only(bundle):
    with pytest.raises(ValueError):
        bundle.encoder.W1[0, 0] = 1.0


# --- persistence ------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path, bundle):
    path = tmp_path / "w.json"
    model.save_weights(bundle, path)
    back = model.load_weights(path)
    assert back.frozen and back.patch_shape == bundle.patch_shape
    a, b = bundle.named_tensors(), back.named_tensors()
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_truncated_file_is_format_error(tmp_path, bundle):
    path = tmp_path / "w.json"
    model.save_weights(bundle, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(FormatError):
        model.load_weights(path)


def test_version_mismatch_names_both_versions(tmp_path, bundle):
    path = tmp_path / "w.json"
    model.save_weights(bundle, path)
    doc = json.loads(path.read_text())
    doc["format_version"] = "9"
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="'9'.*'1'"):
        model.load_weights(path)


def test_missing_tensor_is_format_error(tmp_path, bundle):
    path = tmp_path / "w.json"
    model.save_weights(bundle, path)
    doc = json.loads(path.read_text())
    doc["tensors"] = [t for t in doc["tensors"] if t["name"] != "aggregator.P"]
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        model.load_weights(path)
