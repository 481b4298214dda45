import math

import numpy as np
import pytest
import torch

from gavn.checkpoint import (
    Checkpoint,
    CheckpointError,
    from_bytes,
    load_checkpoint,
    load_module,
    module_arrays,
    read_header,
    save_checkpoint,
    to_bytes,
)
from gavn.optim import Adam, AdamState, NonFiniteGradient, adam_step, charbonnier_loss


def sample_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(
        {"stage": "stage1", "epoch": 3, "seed": 0},
        {"b/w": rng.normal(size=(4, 3)).astype(np.float32), "a/bias": rng.normal(size=(5,)).astype(np.float32),
         "c/scalar": np.array(1.5, dtype=np.float32)},
    )


def test_save_load_save_byte_identical(tmp_path):
    p1 = save_checkpoint(sample_ckpt(), tmp_path / "a.ckpt")
    back = load_checkpoint(p1)
    p2 = save_checkpoint(back, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    for k, v in sample_ckpt().arrays.items():
        assert np.array_equal(back.arrays[k], v)
    assert back.stage == "stage1" and back.header["epoch"] == 3


def test_manifest_tiles_payload(tmp_path):
    save_checkpoint(sample_ckpt(), tmp_path / "a.ckpt")
    h = read_header(tmp_path / "a.ckpt")
    offset = 0
    for entry in h["manifest"]:
        assert entry["offset"] == offset
        offset += entry["size"]
    assert offset == h["payload_bytes"] == (12 + 5 + 1) * 4
    assert [e["name"] for e in h["manifest"]] == sorted(sample_ckpt().arrays)


def test_truncated_payload_names_first_missing():
    data = to_bytes(sample_ckpt())
    # arrays are stored sorted by name: a/bias (20 B), b/w (48 B), c/scalar (4 B)
    with pytest.raises(CheckpointError, match="'b/w'"):
        from_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="'c/scalar'"):
        from_bytes(data[:-2])


def test_extra_payload_rejected():
    with pytest.raises(CheckpointError, match="expected"):
        from_bytes(to_bytes(sample_ckpt()) + b"\0\0\0\0")


def test_bad_magic_and_header():
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"NOTACKPT" + bytes(16))
    data = bytearray(to_bytes(sample_ckpt()))
    data[20] = 0xFF
    with pytest.raises(CheckpointError):
        from_bytes(bytes(data))


def test_little_endian_float32_payload():
    data = to_bytes(Checkpoint({}, {"x": np.array([1.0], dtype=np.float32)}))
    assert data[-4:] == np.array([1.0], dtype="<f4").tobytes() == b"\x00\x00\x80\x3f"


def test_load_module_roundtrip_and_errors():
    torch.manual_seed(0)
    a, b = torch.nn.Linear(3, 2), torch.nn.Linear(3, 2)
    ck = Checkpoint({}, module_arrays(a, "m/"))
    load_module(b, ck, "m/")
    assert torch.equal(a.weight, b.weight) and torch.equal(a.bias, b.bias)
    extra = Checkpoint({}, dict(ck.arrays, **{"m/ghost": np.zeros(1, np.float32)}))
    with pytest.raises(CheckpointError, match="unknown"):
        load_module(b, extra, "m/")
    partial = Checkpoint({}, {"m/weight": ck.arrays["m/weight"]})
    with pytest.raises(CheckpointError, match="lacks"):
        load_module(b, partial, "m/")
    wrong = Checkpoint({}, {"m/weight": np.zeros((2, 2), np.float32), "m/bias": ck.arrays["m/bias"]})
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_module(b, wrong, "m/")


# -- loss and optimiser ----------------------------------------------------------------------


def test_charbonnier_examples():
    x = torch.rand(2, 3, 4, 4)
    assert charbonnier_loss(x, x).item() == pytest.approx(1e-3, rel=1e-6)
    assert charbonnier_loss(x + 0.003, x).item() == pytest.approx(math.sqrt(9e-6 + 1e-6), rel=1e-4)
    assert charbonnier_loss(torch.randn(50), torch.randn(50)).item() >= 1e-3
    with pytest.raises(ValueError):
        charbonnier_loss(x, x[0])


def test_first_adam_step_is_signed_lr():
    p = {"w": torch.zeros(5, dtype=torch.float64)}
    g = torch.tensor([0.3, -2.0, 1e-3, -1e-2, 5.0], dtype=torch.float64)
    adam_step(p, {"w": g}, AdamState(), lr=4e-4)
    # m_hat = g, v_hat = g^2, so the update is -lr * g / (|g| + eps)
    expected = -4e-4 * g / (g.abs() + 1e-8)
    torch.testing.assert_close(p["w"], expected, rtol=1e-12, atol=0)
    np.testing.assert_allclose(p["w"].numpy(), -4e-4 * np.sign(g.numpy()), rtol=1e-5)


def test_adam_zero_grad_no_move():
    p = {"w": torch.ones(3)}
    adam_step(p, {"w": torch.zeros(3)}, AdamState(), lr=1e-2)
    assert torch.equal(p["w"], torch.ones(3))


def test_adam_matches_closed_form_two_steps():
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    p = {"w": torch.tensor([1.0], dtype=torch.float64)}
    st = AdamState()
    g1, g2 = 0.5, -0.25
    adam_step(p, {"w": torch.tensor([g1], dtype=torch.float64)}, st, lr)
    adam_step(p, {"w": torch.tensor([g2], dtype=torch.float64)}, st, lr)
    m = (1 - b1) * (b1 * g1 + g2)
    v = (1 - b2) * (b2 * g1 * g1 + g2 * g2)
    step2 = lr * (m / (1 - b1**2)) / (math.sqrt(v / (1 - b2**2)) + eps)
    expected = 1.0 - lr * g1 / (abs(g1) + eps) - step2
    assert p["w"].item() == pytest.approx(expected, rel=1e-14)


def test_adam_nonfinite_names_param_and_leaves_params():
    p = {"good": torch.ones(2), "bad": torch.ones(2)}
    with pytest.raises(NonFiniteGradient, match="'bad'"):
        adam_step(p, {"good": torch.ones(2), "bad": torch.tensor([1.0, float("nan")])}, AdamState(), 1e-3)
    assert torch.equal(p["good"], torch.ones(2))


def test_adam_deterministic_trajectory():
    def run():
        torch.manual_seed(0)
        lin = torch.nn.Linear(4, 1)
        opt = Adam(dict(lin.named_parameters()), lr=1e-2)
        x, y = torch.randn(16, 4), torch.randn(16, 1)
        for _ in range(5):
            opt.zero_grad()
            ((lin(x) - y) ** 2).mean().backward()
            opt.step()
        return lin.weight.detach().clone()

    assert torch.equal(run(), run())
