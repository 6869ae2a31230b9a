import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmforge.errors import EmptyDataset, ShapeMismatch
from mmforge.qbn import QBN, QbnTrainConfig, build_qbn, decode, distinct_codes, encode, train_qbn


def widths(mlp):
    return [layer.out_dim for layer in mlp.layers]


@pytest.mark.parametrize("d,b,kind,enc,last", [
    (4, 4, "observation", [32, 16, 4], "relu6"),
    (16, 8, "hidden", [64, 32, 8], "tanh"),
    (3, 1, "hidden", [8, 4, 1], "tanh"),
])
def test_width_schedule(d, b, kind, enc, last):
    q = build_qbn(d, b, kind)
    assert widths(q.encoder) == enc
    assert widths(q.decoder) == [4 * b, 8 * b, d]
    assert q.encoder.layers[-1].activation == "ternary_tanh"
    assert q.decoder.layers[-1].activation == last


def test_zero_weights_encode_to_zero():
    q = QBN(3, 2, "hidden")
    code, z = encode(q, np.array([1.0, -2.0, 3.0]))
    assert np.array_equal(z, np.zeros(2)) and np.array_equal(code, [0, 0])


def test_zero_weights_decode_to_activated_bias():
    for kind, act in (("observation", lambda b: np.clip(b, 0, 6)), ("hidden", np.tanh)):
        q = QBN(3, 2, kind)
        q.decoder.layers[-1].params["b"] = np.array([-1.0, 0.5, 9.0])
        assert np.allclose(decode(q, np.array([1, -1])), act(np.array([-1.0, 0.5, 9.0])))


def test_encode_is_deterministic_and_ternary():
    q = build_qbn(5, 3, "observation", seed=4)
    x = np.random.default_rng(0).normal(scale=3.0, size=(1000, 5))
    c1, _ = q.encode(x)
    c2, _ = q.encode(x)
    assert np.array_equal(c1, c2)
    assert set(np.unique(c1)) <= {-1, 0, 1}


@settings(max_examples=50)
@given(st.integers(0, 10_000), arrays(float, (6, 4), elements=st.floats(-1, 1)))
def test_decoder_ranges(seed, codes):
    codes = np.round(codes)
    qo = build_qbn(3, 4, "observation", seed)
    qh = build_qbn(3, 4, "hidden", seed)
    assert np.all((decode(qo, codes) >= 0) & (decode(qo, codes) <= 6))
    assert np.all(np.abs(decode(qh, codes)) <= 1)


def test_shape_errors():
    q = build_qbn(3, 2, "hidden")
    with pytest.raises(ShapeMismatch):
        q.encode(np.zeros(4))
    with pytest.raises(ShapeMismatch):
        q.decode(np.zeros(3))


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train_qbn(build_qbn(3, 2, "hidden"), np.zeros((0, 3)))


def test_repeated_vector_memorized():
    data = np.tile([0.3, -0.6, 0.1], (64, 1))
    q, _ = train_qbn(build_qbn(3, 2, "hidden"), data,
                     QbnTrainConfig(lr=1e-2, epochs=400, patience=400))
    assert q.reconstruction_loss(data) <= 1e-4


def test_zero_lr_constant_history():
    data = np.random.default_rng(0).uniform(-1, 1, (40, 3))
    _, hist = train_qbn(build_qbn(3, 2, "hidden"), data,
                        QbnTrainConfig(lr=0.0, epochs=5, patience=50))
    assert len(hist) == 6 and len(set(hist)) == 1


def four_clusters(n=400, seed=0):
    centers = np.array([[1, 1, 0], [-1, 1, 0], [1, -1, 0], [-1, -1, 0]]) * 0.7
    rng = np.random.default_rng(seed)
    return centers[rng.integers(4, size=n)] + rng.normal(scale=0.05, size=(n, 3))


def test_bigger_bottleneck_fits_clusters_better():
    data = four_clusters()
    cfg = QbnTrainConfig(lr=1e-3, epochs=300, patience=50)
    q1, h1 = train_qbn(build_qbn(3, 1, "hidden"), data, cfg)
    q2, h2 = train_qbn(build_qbn(3, 2, "hidden"), data, cfg)
    assert h1[-1] <= h1[0] and h2[-1] <= h2[0]
    assert q2.reconstruction_loss(data) * 2 <= q1.reconstruction_loss(data)
    assert 1 <= distinct_codes(q1, data) <= 3
    assert 1 <= distinct_codes(q2, data) <= 9


def test_checkpoint_round_trip():
    q = build_qbn(4, 3, "observation", seed=9)
    back = QBN.from_bytes(q.to_bytes())
    assert back.kind == q.kind and back.bottleneck == 3
    x = np.random.default_rng(1).standard_normal((20, 4))
    assert np.array_equal(back.forward(x)[0], q.forward(x)[0])
    assert back.to_bytes() == q.to_bytes()


@pytest.mark.parametrize("seed", range(4))
def test_observation_qbn_memorizes_positive_singleton(seed):
    # ReLU6 outputs that start switched off everywhere would otherwise never move
    target = np.array([0.0, 0.08, 0.0, 0.6, 0.24, 0.93, 0.23, 0.52])
    q, _ = train_qbn(build_qbn(8, 2, "observation", seed), np.tile(target, (8, 1)),
                     QbnTrainConfig(lr=1e-2, epochs=600, patience=600, batch=8))
    assert q.reconstruction_loss(target[None]) <= 1e-6
