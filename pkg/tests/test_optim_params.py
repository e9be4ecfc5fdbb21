import numpy as np
import pytest

from dddr.optim import adam, apply_gradient_step, sgd
from dddr.params import (
    CheckpointError,
    ParamSet,
    add_params,
    load_checkpoint,
    mean_params,
    params_checksum,
    save_checkpoint,
    scale_params,
    weighted_mean_params,
)


def ps(**kw):
    return ParamSet({k: np.asarray(v, dtype=np.float32) for k, v in kw.items()})


def test_sgd_direct_formula():
    out = apply_gradient_step(ps(p=[1.0]), ps(p=[2.0]), sgd(lr=0.1))
    assert out["p"] == pytest.approx([0.8])


def test_sgd_zero_gradient_is_identity():
    params = ps(a=[1.5, -2.0], b=[[0.5]])
    out = apply_gradient_step(params, ps(a=[0.0, 0.0], b=[[0.0]]), sgd(lr=0.3))
    for name in params:
        assert np.array_equal(out[name], params[name])


def test_adam_first_step_hand_evaluated():
    # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    out = apply_gradient_step(ps(p=[0.0]), ps(p=[1.0]), adam(lr=0.1))
    assert out["p"] == pytest.approx([-0.1], abs=1e-6)


def test_adam_two_steps_match_recurrence():
    # with a constant unit gradient the bias-corrected ratio stays 1, so
    # each step moves by exactly -lr (up to eps)
    opt = adam(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    params, grads = ps(p=[0.0]), ps(p=[1.0])
    params = apply_gradient_step(params, grads, opt)
    params = apply_gradient_step(params, grads, opt)
    assert params["p"] == pytest.approx([-0.2], abs=1e-6)
    assert opt.step == 2


def test_mismatched_names_list_symmetric_difference():
    with pytest.raises(KeyError) as exc:
        apply_gradient_step(ps(a=[1.0]), ps(b=[1.0]), sgd(lr=0.1))
    assert "a" in str(exc.value) and "b" in str(exc.value)


def test_paramset_orders_names():
    p = ParamSet({"z": np.zeros(1, np.float32), "a": np.zeros(1, np.float32), "m": np.zeros(1, np.float32)})
    assert p.names() == ["a", "m", "z"]


def test_param_arithmetic():
    a, b = ps(x=[1.0, 2.0]), ps(x=[3.0, 4.0])
    assert np.array_equal(add_params(a, b)["x"], [4.0, 6.0])
    assert np.array_equal(scale_params(a, 2.0)["x"], [2.0, 4.0])
    assert np.array_equal(mean_params([a, b])["x"], [2.0, 3.0])


def test_weighted_mean_matches_hand_example():
    out = weighted_mean_params([ps(x=[0.0]), ps(x=[4.0])], [1.0, 3.0])
    assert out["x"] == pytest.approx([3.0])


def test_checkpoint_round_trip(tmp_path):
    p = ps(alpha=[[1.0, 2.0], [3.0, 4.0]], beta=[5.0])
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, p, extra={"note": "x"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    assert loaded.names() == p.names()
    for name in p:
        assert np.array_equal(loaded[name], p[name])
    assert params_checksum(loaded) == params_checksum(p)


def test_checkpoint_magic_is_stable(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ps(a=[1.0]))
    assert path.read_bytes()[:8] == b"DDDRCKPT"


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated_payload(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ps(a=[1.0, 2.0, 3.0]))
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checksum_sensitive_to_values():
    a, b = ps(x=[1.0]), ps(x=[1.0000001])
    assert params_checksum(a) != params_checksum(b)
