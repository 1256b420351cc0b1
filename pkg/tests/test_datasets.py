import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matrain.datasets import MASK_TOKEN, generate_dataset, mask_count, tiny_token_mask
from matrain.errors import ConfigError


@pytest.mark.parametrize("kind", ["TeacherStudent", "SpiralClassify", "TinyTokenMask"])
def test_deterministic_and_disjoint(kind):
    a = generate_dataset(kind, {}, seed=4)
    b = generate_dataset(kind, {}, seed=4)
    for field in ("train_inputs", "train_targets", "val_inputs", "val_targets"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    assert not set(a.train_index) & set(a.val_index)
    c = generate_dataset(kind, {}, seed=5)
    assert not np.array_equal(a.train_inputs, c.train_inputs)


def test_teacher_student_noise_free_is_reproducible():
    a = generate_dataset("TeacherStudent", {"n_train": 64, "noise": 0.0}, seed=1)
    b = generate_dataset("TeacherStudent", {"n_train": 64, "noise": 0.0}, seed=1)
    np.testing.assert_array_equal(a.train_targets, b.train_targets)
    assert a.train_inputs.shape == (64, 4)


def test_linear_teacher_is_linear():
    d = generate_dataset("TeacherStudent", {"linear": True}, seed=0)
    x = np.vstack([d.train_inputs, d.val_inputs])
    y = np.vstack([d.train_targets, d.val_targets])
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    np.testing.assert_allclose(x @ w, y, atol=1e-10)


def test_spiral_balanced():
    d = generate_dataset("SpiralClassify", {"n": 100}, seed=0)
    labels = np.concatenate([d.train_targets, d.val_targets]).ravel()
    assert set(labels) == {-1.0, 1.0}
    assert (labels == 1).sum() == (labels == -1).sum() == 50
    with pytest.raises(ConfigError):
        generate_dataset("SpiralClassify", {"n": 101}, seed=0)


def test_token_mask_structure():
    d = tiny_token_mask(n=64, seq_len=8, vocab=10, seed=2)
    x = np.vstack([d.train_inputs, d.val_inputs])
    y = np.vstack([d.train_targets, d.val_targets]).reshape(-1, 8, 10)
    masked = x == MASK_TOKEN
    # exactly one target per masked position and none elsewhere
    np.testing.assert_array_equal(y.sum(axis=2), masked.astype(float))
    assert not y[..., MASK_TOKEN].any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_mask_count_for_length_16(seed):
    d = tiny_token_mask(n=40, seq_len=16, mask_rate=0.15, seed=seed)
    counts = (np.vstack([d.train_inputs, d.val_inputs]) == MASK_TOKEN).sum(axis=1)
    assert set(counts) <= {2, 3}


def test_mask_count_mean():
    rng = np.random.default_rng(0)
    counts = [mask_count(16, 0.15, rng) for _ in range(4000)]
    assert set(counts) == {2, 3}
    assert np.mean(counts) == pytest.approx(2.4, abs=0.05)


@pytest.mark.parametrize(
    "kind,params",
    [
        ("TeacherStudent", {"n_train": 2}),
        ("TinyTokenMask", {"seq_len": 17}),
        ("TinyTokenMask", {"vocab": 40}),
        ("TinyTokenMask", {"mask_rate": 0.0}),
        ("TinyTokenMask", {"bogus": 1}),
        ("Nope", {}),
    ],
)
def test_invalid_params(kind, params):
    with pytest.raises(ConfigError):
        generate_dataset(kind, params, seed=0)
