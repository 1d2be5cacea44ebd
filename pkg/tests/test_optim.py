"""Adadelta update rule and checkpoint round-trip tests."""

import numpy as np
import pytest

from docseg.autodiff import Tensor
from docseg.checkpoint import load_checkpoint, save_checkpoint
from docseg.errors import ContractViolation, InputError
from docseg.optim import Adadelta, adadelta_step


def test_zero_gradient_leaves_params_and_decays_accumulators():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adadelta({"p": p}, rho=0.9)
    opt.sq_grad["p"][:] = 4.0
    opt.sq_update["p"][:] = 1.0
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    np.testing.assert_allclose(opt.sq_grad["p"], 3.6, rtol=1e-6)
    np.testing.assert_allclose(opt.sq_update["p"], 0.9, rtol=1e-6)


def test_missing_gradient_treated_as_zero():
    p = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adadelta({"p": p})
    opt.step()
    np.testing.assert_array_equal(p.data, [5.0])


def test_first_step_hand_value():
    # fresh accumulators, g=1, rho=0.9: delta = -sqrt(eps)/sqrt(0.1+eps)
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adadelta({"p": p}, rho=0.9, eps=1e-6)
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    expected = -np.sqrt(1e-6) / np.sqrt(0.1 * 1.0 + 1e-6)
    assert p.data[0] == pytest.approx(expected, rel=1e-5)


def test_repeated_gradient_matches_scalar_simulation():
    rho, eps = 0.95, 1e-6
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adadelta({"p": p}, rho=rho, eps=eps)

    value, eg, ed = 0.0, 0.0, 0.0
    deltas = []
    for _ in range(200):
        g = 0.5
        eg = rho * eg + (1 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        value += delta
        ed = rho * ed + (1 - rho) * delta * delta
        deltas.append(delta)

        p.grad = np.array([g], dtype=np.float32)
        opt.step()
        p.zero_grad()

    assert p.data[0] == pytest.approx(value, rel=1e-3)
    # step sizes approach a fixed point: per-step change keeps shrinking,
    # though the approach is slow under a constant gradient
    early = abs(deltas[20] - deltas[19])
    late = abs(deltas[-1] - deltas[-2])
    assert late < 0.75 * early


def test_update_is_elementwise_shape_invariant():
    rng = np.random.default_rng(0)
    data = rng.standard_normal(24).astype(np.float32)
    grad = rng.standard_normal(24).astype(np.float32)

    shaped = Tensor(data.reshape(2, 3, 4), requires_grad=True)
    shaped.grad = grad.reshape(2, 3, 4).copy()
    flat = Tensor(data.copy(), requires_grad=True)
    flat.grad = grad.copy()

    for t in (shaped, flat):
        opt = Adadelta({"p": t})
        for _ in range(3):
            opt.step()

    np.testing.assert_array_equal(shaped.data.ravel(), flat.data)


def test_step_rejects_shape_mismatch():
    with pytest.raises(ContractViolation):
        adadelta_step(np.zeros(3), np.zeros(4), np.zeros(3), np.zeros(3), 0.95, 1e-6)


def test_bad_hyperparameters_rejected():
    p = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ContractViolation):
        Adadelta({"p": p}, rho=1.0)
    with pytest.raises(ContractViolation):
        Adadelta({"p": p}, eps=0.0)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

DIGEST = "ab" * 32


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    entries = {
        "enc1/conv/w": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "enc1/conv/b": rng.standard_normal(4).astype(np.float32),
        "meta/step": np.array([17.0], dtype=np.float32),
    }
    path = tmp_path / "model.dskt"
    save_checkpoint(path, entries, DIGEST)
    loaded, digest = load_checkpoint(path)
    assert digest == DIGEST
    assert set(loaded) == set(entries)
    for name in entries:
        np.testing.assert_array_equal(loaded[name], entries[name])


def test_checkpoint_bytes_deterministic(tmp_path):
    entries = {"b": np.ones(2, dtype=np.float32), "a": np.zeros(3, dtype=np.float32)}
    p1, p2 = tmp_path / "one.dskt", tmp_path / "two.dskt"
    save_checkpoint(p1, entries, DIGEST)
    save_checkpoint(p2, dict(reversed(entries.items())), DIGEST)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "m.dskt"
    save_checkpoint(path, {"x": np.array([1.0], dtype=np.float32)}, DIGEST)
    raw = path.read_bytes()
    assert raw[:4] == b"DSKT"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert raw[8:72].decode("ascii") == DIGEST


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.dskt"
    path.write_bytes(b"NOPE" + b"\x00" * 80)
    with pytest.raises(InputError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "m.dskt"
    save_checkpoint(path, {"x": np.arange(10, dtype=np.float32)}, DIGEST)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(InputError):
        load_checkpoint(path)


def test_checkpoint_rejects_missing_file(tmp_path):
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "absent.dskt")


def test_optimizer_state_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    p = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    opt = Adadelta({"w": p})
    for _ in range(4):
        p.grad = rng.standard_normal((3, 3)).astype(np.float32)
        opt.step()
        p.zero_grad()

    path = tmp_path / "opt.dskt"
    save_checkpoint(path, opt.state_entries(), DIGEST)
    loaded, _ = load_checkpoint(path)

    fresh = Adadelta({"w": p})
    fresh.load_state_entries(loaded)
    np.testing.assert_array_equal(fresh.sq_grad["w"], opt.sq_grad["w"])
    np.testing.assert_array_equal(fresh.sq_update["w"], opt.sq_update["w"])
