"""Layer stacks and losses: finite-difference gradients, distill edge cases, weight IO."""
from __future__ import annotations

import struct

import numpy as np
import pytest

from kfuse.models import (
    Architecture,
    Batch,
    CrossEntropyLoss,
    DistillLoss,
    ModelWeights,
    SquaredLoss,
    ema_update,
    forward,
    grad,
    init_weights,
    load_weights,
    loss_and_grad,
    loss_value,
    save_weights,
    sgd_step,
    softmax,
    weights_from_matrices,
)


def fd_gradient(w: ModelWeights, batch: Batch, kind, h: float = 1e-6) -> np.ndarray:
    base = np.array(w.vector)
    out = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        out[i] = (loss_value(ModelWeights(w.arch, plus), batch, kind)
                  - loss_value(ModelWeights(w.arch, minus), batch, kind)) / (2 * h)
    return out


def sample_instance(rng: np.random.Generator, kind_name: str):
    relu = rng.random() < 0.5
    c = int(rng.integers(2, 5))
    d = int(rng.integers(2, 5))
    if relu:
        arch = Architecture((d, int(rng.integers(3, 7)), c), activation="relu")
    else:
        sizes = (d,) + tuple(int(rng.integers(2, 5))
                             for _ in range(int(rng.integers(1, 3)))) + (c,)
        arch = Architecture(sizes, activation="identity")
    w = init_weights(arch, int(rng.integers(0, 2 ** 31)))
    b = int(rng.integers(2, 7))
    while True:
        inputs = rng.standard_normal((b, d))
        if not relu:
            break
        # keep every pre-activation away from the relu kink so the central
        # difference sees a locally smooth function
        pre = inputs @ w.matrices()[0].T
        if np.abs(pre).min() > 1e-3:
            break
    labels = rng.integers(0, c, size=b)
    if kind_name == "squared":
        kind = SquaredLoss()
    elif kind_name == "cross_entropy":
        kind = CrossEntropyLoss()
    else:
        t_logits = rng.standard_normal((b, c))
        kind = DistillLoss(temperature=float(rng.uniform(0.5, 4.0)),
                           alpha=float(rng.uniform(0.0, 1.0)),
                           teacher_logits=t_logits)
    return w, Batch(inputs, labels), kind


@pytest.mark.parametrize("kind_name", ["squared", "cross_entropy", "distill"])
def test_gradients_match_finite_differences(kind_name):
    rng = np.random.default_rng(hash(kind_name) % (2 ** 32))
    for _ in range(8):
        w, batch, kind = sample_instance(rng, kind_name)
        analytic = grad(w, batch, kind)
        numeric = fd_gradient(w, batch, kind)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-12)
        assert err <= 1e-4, f"{kind_name}: relative error {err:.3e}"


def test_identity_stack_collapses_to_matrix_product():
    rng = np.random.default_rng(15)
    arch = Architecture((4, 3, 5, 2), activation="identity")
    mats = [rng.standard_normal((3, 4)), rng.standard_normal((5, 3)),
            rng.standard_normal((2, 5))]
    w = weights_from_matrices(arch, mats)
    x = rng.standard_normal((7, 4))
    collapsed = mats[2] @ mats[1] @ mats[0]
    assert np.allclose(forward(w, x), x @ collapsed.T, atol=1e-12)


def test_softmax_rows_and_shift_invariance():
    rng = np.random.default_rng(16)
    z = rng.standard_normal((5, 4)) * 10
    p = softmax(z)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(softmax(z + 100.0), p, atol=1e-12)


def test_tempered_teacher_limits():
    rng = np.random.default_rng(17)
    logits = rng.standard_normal((4, 3))
    cold = DistillLoss(temperature=1.0, alpha=1.0, teacher_logits=logits)
    assert np.allclose(cold.tempered_teacher(), softmax(logits), atol=1e-12)
    hot = DistillLoss(temperature=1e6, alpha=1.0, teacher_logits=logits)
    assert np.allclose(hot.tempered_teacher(), 1.0 / 3.0, atol=1e-4)
    # probability input tempers through its log, so both teacher forms agree
    via_probs = DistillLoss(temperature=2.5, alpha=1.0, teacher_probs=softmax(logits))
    via_logits = DistillLoss(temperature=2.5, alpha=1.0, teacher_logits=logits)
    assert np.allclose(via_probs.tempered_teacher(), via_logits.tempered_teacher(),
                       atol=1e-12)


def test_distill_zero_when_teacher_equals_student():
    rng = np.random.default_rng(18)
    arch = Architecture((3, 4, 3), activation="relu")
    w = init_weights(arch, 5)
    inputs = rng.standard_normal((6, 3))
    labels = rng.integers(0, 3, size=6)
    teacher = softmax(forward(w, inputs))
    kind = DistillLoss(temperature=2.5, alpha=1.0, teacher_probs=teacher)
    loss, g = loss_and_grad(w, Batch(inputs, labels), kind)
    assert abs(loss) < 1e-10
    assert np.linalg.norm(g) < 1e-8


def test_distill_alpha_zero_is_exactly_cross_entropy():
    rng = np.random.default_rng(19)
    arch = Architecture((4, 5, 3), activation="relu")
    w = init_weights(arch, 2)
    batch = Batch(rng.standard_normal((8, 4)), rng.integers(0, 3, size=8))
    teacher = np.full((8, 3), 1.0 / 3.0)
    dl, dg = loss_and_grad(w, batch, DistillLoss(temperature=3.0, alpha=0.0,
                                                 teacher_probs=teacher))
    cl, cg = loss_and_grad(w, batch, CrossEntropyLoss())
    assert dl == cl
    assert np.array_equal(dg, cg)


def test_distill_alpha_one_temperature_one_onehot_is_cross_entropy():
    rng = np.random.default_rng(20)
    arch = Architecture((4, 3), activation="identity")
    w = init_weights(arch, 9)
    labels = rng.integers(0, 3, size=10)
    batch = Batch(rng.standard_normal((10, 4)), labels)
    onehot = np.eye(3)[labels]
    dl, dg = loss_and_grad(w, batch, DistillLoss(temperature=1.0, alpha=1.0,
                                                 teacher_probs=onehot))
    cl, cg = loss_and_grad(w, batch, CrossEntropyLoss())
    assert dl == pytest.approx(cl, abs=1e-8)
    assert np.allclose(dg, cg, atol=1e-8)


def test_distill_loss_nonnegative():
    rng = np.random.default_rng(21)
    arch = Architecture((3, 4), activation="identity")
    for seed in range(10):
        w = init_weights(arch, seed)
        raw = rng.random((5, 4)) + 0.01
        teacher = raw / raw.sum(axis=1, keepdims=True)
        batch = Batch(rng.standard_normal((5, 3)), rng.integers(0, 4, size=5))
        kind = DistillLoss(temperature=2.0, alpha=1.0, teacher_probs=teacher)
        assert loss_value(w, batch, kind) >= -1e-12


def test_distill_validation():
    probs = np.full((2, 3), 1.0 / 3.0)
    with pytest.raises(ValueError):
        DistillLoss(temperature=0.0, alpha=0.5, teacher_probs=probs)
    with pytest.raises(ValueError):
        DistillLoss(temperature=1.0, alpha=1.1, teacher_probs=probs)
    with pytest.raises(ValueError):
        DistillLoss(temperature=1.0, alpha=0.5)
    with pytest.raises(ValueError):
        DistillLoss(temperature=1.0, alpha=0.5, teacher_probs=probs,
                    teacher_logits=probs)


def test_squared_loss_binary_and_onehot():
    arch = Architecture((2, 1), activation="identity")
    w = weights_from_matrices(arch, [np.array([[1.0, 0.0]])])
    batch = Batch(np.array([[0.5, 0.0], [-2.0, 0.0]]), np.array([1, 0]))
    # logits 0.5 and -2 against targets +1 and -1
    expect = ((0.5 - 1.0) ** 2 + (-2.0 + 1.0) ** 2) / 2
    assert loss_value(w, batch, SquaredLoss()) == pytest.approx(expect, abs=1e-12)

    arch3 = Architecture((3, 3), activation="identity")
    w3 = weights_from_matrices(arch3, [np.eye(3)])
    batch3 = Batch(np.array([[1.0, 0.0, 0.0]]), np.array([2]))
    # logits (1,0,0) against one-hot (0,0,1)
    assert loss_value(w3, batch3, SquaredLoss()) == pytest.approx(2.0, abs=1e-12)


def test_ema_update_hand_case():
    arch = Architecture((1, 1), activation="identity")
    ema = ModelWeights(arch, np.array([0.1]))
    cur = ModelWeights(arch, np.array([1.0]))
    out = ema_update(ema, cur, 0.9)
    assert out.vector[0] == pytest.approx(0.19, abs=1e-15)
    with pytest.raises(ValueError):
        ema_update(ema, cur, 1.0)
    with pytest.raises(ValueError):
        ema_update(ema, ModelWeights(Architecture((2, 1)), np.array([1.0, 2.0])), 0.5)


def test_architecture_limits():
    Architecture((512, 512), activation="relu")
    with pytest.raises(ValueError):
        Architecture((2, 2, 2, 2, 2, 2, 2))  # six layers
    with pytest.raises(ValueError):
        Architecture((2, 513))
    with pytest.raises(ValueError):
        Architecture((2, 0))
    with pytest.raises(ValueError):
        Architecture((4,))
    with pytest.raises(ValueError):
        Architecture((2, 2), activation="tanh")
    arch = Architecture((3, 5, 2), activation="relu")
    assert arch.layers == 2
    assert arch.in_width == 3
    assert arch.out_width == 2
    assert arch.param_count() == 15 + 10


def test_weights_io_round_trip(tmp_path):
    arch = Architecture((4, 6, 3), activation="relu")
    w = init_weights(arch, 77)
    path = tmp_path / "model.weights"
    save_weights(w, path)
    back = load_weights(path)
    assert back.arch == arch
    assert np.array_equal(back.vector, w.vector)
    # writing the same weights twice is byte-identical
    path2 = tmp_path / "model2.weights"
    save_weights(w, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_weights_io_rejects_bad_files(tmp_path):
    short = tmp_path / "short.weights"
    short.write_bytes(b"\x01")
    with pytest.raises(ValueError):
        load_weights(short)
    desc = b'{"activation":"identity","layer_sizes":[2,2]}'
    lying = tmp_path / "lying.weights"
    lying.write_bytes(struct.pack("<I", len(desc)) + desc + np.zeros(3).tobytes())
    with pytest.raises(ValueError):
        load_weights(lying)


def test_init_weights_bounds_and_determinism():
    arch = Architecture((10, 20, 5), activation="relu")
    w1 = init_weights(arch, 123)
    w2 = init_weights(arch, 123)
    w3 = init_weights(arch, 124)
    assert np.array_equal(w1.vector, w2.vector)
    assert not np.array_equal(w1.vector, w3.vector)
    mats = w1.matrices()
    assert np.abs(mats[0]).max() <= np.sqrt(6.0 / 30)
    assert np.abs(mats[1]).max() <= np.sqrt(6.0 / 25)


def test_sgd_step_and_shape_guard():
    arch = Architecture((2, 1), activation="identity")
    w = ModelWeights(arch, np.array([1.0, -1.0]))
    out = sgd_step(w, np.array([0.5, 0.5]), 0.1)
    assert np.allclose(out.vector, [0.95, -1.05], atol=1e-15)
    with pytest.raises(ValueError):
        sgd_step(w, np.zeros(3), 0.1)


def test_forward_checks_input_width():
    w = init_weights(Architecture((3, 2)), 0)
    with pytest.raises(ValueError):
        forward(w, np.zeros((4, 5)))


def test_batch_and_weights_validation():
    with pytest.raises(ValueError):
        Batch(np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        Batch(np.zeros((3, 2)), np.zeros(2, dtype=np.int64))
    with pytest.raises(ValueError):
        ModelWeights(Architecture((2, 2)), np.zeros(3))


def test_cross_entropy_label_range():
    w = init_weights(Architecture((2, 3)), 1)
    with pytest.raises(ValueError):
        loss_value(w, Batch(np.zeros((1, 2)), np.array([3])), CrossEntropyLoss())
