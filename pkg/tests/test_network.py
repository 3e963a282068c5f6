import itertools

import numpy as np
import pytest
import torch
from torch import nn

from glam.exceptions import ValidationError
from glam.network import (
    DynamicKernels,
    NetworkConfig,
    apply_dynamic_head,
    concat_kernels,
    encode_task,
    generate_kernels,
    global_average_pool,
    init_params,
    kernel_length,
    load_checkpoint,
    save_checkpoint,
    split_kernels,
)

from .conftest import TINY_NET


def test_encode_task_examples():
    assert encode_task(3, 6).tolist() == [0, 0, 1, 0, 0, 0]
    assert encode_task(1, 1).tolist() == [1]
    with pytest.raises(ValidationError):
        encode_task(7, 6)
    with pytest.raises(ValidationError):
        encode_task(0, 6)


def test_gap_examples():
    f = torch.tensor([[[1.0, 2.0], [3.0, 4.0]], [[7.0, 7.0], [7.0, 7.0]], [[0.0, 0.0], [0.0, 0.0]]])
    assert global_average_pool(f).tolist() == [2.5, 7.0, 0.0]
    assert global_average_pool(f[None]).shape == (1, 3)


def test_kernel_length_153():
    assert kernel_length(8, 8) == 64 + 8 + 64 + 8 + 8 + 1 == 153
    model = init_params(NetworkConfig(base_channels=4, depth=2, decoder_channels=8, head_channels=8))
    assert model.controller.out_features == 153


@pytest.mark.parametrize("c_m,c_h", [(1, 1), (4, 8), (8, 4), (16, 16)])
def test_split_concat_round_trip(c_m, c_h):
    flat = torch.randn(3, kernel_length(c_m, c_h), dtype=torch.float64)
    k = split_kernels(flat, c_m, c_h)
    assert k.w1.shape == (3, c_h, c_m) and k.w2.shape == (3, c_h, c_h) and k.w3.shape == (3, 1, c_h)
    assert torch.equal(concat_kernels(k), flat)
    with pytest.raises(ValidationError):
        split_kernels(flat[:, :-1], c_m, c_h)


def test_zero_controller_gives_zero_kernels():
    ctrl = nn.Linear(10, kernel_length(4, 4))
    nn.init.zeros_(ctrl.weight)
    nn.init.zeros_(ctrl.bias)
    k = generate_kernels(torch.randn(8), encode_task(2, 2), ctrl, 4, 4)
    assert all(torch.count_nonzero(t) == 0 for t in k)


def test_generate_kernels_dimension_mismatch():
    ctrl = nn.Linear(10, kernel_length(4, 4))
    with pytest.raises(ValidationError):
        generate_kernels(torch.randn(7), encode_task(2, 2), ctrl, 4, 4)


def test_generate_kernels_matches_explicit_affine(rng):
    ctrl = nn.Linear(9, kernel_length(3, 2)).double()
    pooled = torch.as_tensor(rng.normal(size=6))
    t = encode_task(2, 3)
    k = generate_kernels(pooled, t, ctrl, 3, 2)
    W, b = ctrl.weight.detach().numpy(), ctrl.bias.detach().numpy()
    expected = W @ np.concatenate([pooled.numpy(), t]) + b
    assert np.allclose(concat_kernels(k).detach().numpy()[0], expected, atol=1e-12)


def _head_reference(m, kernels):
    """Numpy per-pixel MLP: the 1x1 convolution chain evaluated pixel by pixel."""
    w1, b1, w2, b2, w3, b3 = (t.detach().numpy()[0] for t in kernels)
    c, h, w = m.shape
    out = np.empty((h, w))
    for i, j in itertools.product(range(h), range(w)):
        x = m[:, i, j]
        x = np.maximum(w1 @ x + b1, 0)
        x = np.maximum(w2 @ x + b2, 0)
        out[i, j] = (w3 @ x + b3)[0]
    return out


def test_zero_kernels_give_zero_logits():
    k = split_kernels(torch.zeros(kernel_length(4, 4)), 4, 4)
    assert torch.count_nonzero(apply_dynamic_head(torch.randn(1, 4, 5, 5), k)) == 0


def test_constant_map_closed_form(rng):
    c_m, c_h = 4, 3
    flat = torch.as_tensor(rng.normal(size=kernel_length(c_m, c_h)))
    k = split_kernels(flat, c_m, c_h)
    k = k._replace(b1=k.b1.abs() + 0.1, b2=k.b2.abs() + 0.1)
    out = apply_dynamic_head(torch.zeros(1, c_m, 6, 7, dtype=torch.float64), k)
    # Zero input: layer outputs reduce to the biases pushed through the layers.
    w1, b1, w2, b2, w3, b3 = (t.numpy()[0] for t in k)
    h1 = np.maximum(b1, 0)
    h2 = np.maximum(w2 @ h1 + b2, 0)
    expected = (w3 @ h2 + b3)[0]
    assert torch.allclose(out, torch.full_like(out, expected), atol=1e-12)


def test_head_matches_pixelwise_reference(rng):
    c_m, c_h = 3, 4
    k = split_kernels(torch.as_tensor(rng.normal(size=kernel_length(c_m, c_h))), c_m, c_h)
    m = rng.normal(size=(c_m, 5, 6))
    out = apply_dynamic_head(torch.as_tensor(m)[None], k)[0].numpy()
    assert np.allclose(out, _head_reference(m, k), atol=1e-12)


def test_head_locality(rng):
    c_m, c_h = 4, 4
    k = split_kernels(torch.as_tensor(rng.normal(size=kernel_length(c_m, c_h))), c_m, c_h)
    m = torch.as_tensor(rng.normal(size=(1, c_m, 8, 8)))
    base = apply_dynamic_head(m, k)
    m2 = m.clone()
    m2[0, :, 3, 5] += torch.as_tensor(rng.normal(size=c_m)) * 5
    diff = (apply_dynamic_head(m2, k) - base).abs()[0]
    diff[3, 5] = 0
    assert torch.count_nonzero(diff) == 0


def test_head_channel_mismatch():
    k = split_kernels(torch.zeros(kernel_length(4, 4)), 4, 4)
    with pytest.raises(ValidationError):
        apply_dynamic_head(torch.zeros(1, 3, 4, 4), k)


def test_backbone_shapes_full_size():
    model = init_params(NetworkConfig())
    with torch.no_grad():
        F, M = model.backbone(torch.rand(1, 3, 512, 512))
    assert F.shape == (1, 512, 32, 32)
    assert M.shape == (1, 8, 512, 512)


def test_backbone_divisibility_error():
    model = init_params(NetworkConfig(base_channels=4, depth=3))
    with pytest.raises(ValidationError, match="divisible by 4"):
        model.backbone(torch.rand(1, 3, 18, 16))


def test_zero_weights_zero_input_give_zero_map():
    model = init_params(NetworkConfig(base_channels=4, depth=3, init="zeros"))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        _, M = model.backbone(torch.zeros(1, 3, 16, 16))
    assert torch.count_nonzero(M) == 0


def test_forward_contract(rng):
    model = init_params(TINY_NET)
    x = torch.as_tensor(rng.random((2, 3, 16, 16)), dtype=torch.float32)
    with torch.no_grad():
        p = model.predict_proba(x, [1, 4])
        p1 = model.predict_proba(x, 1)
        p2 = model.predict_proba(x, 2)
    assert p.shape == (2, 16, 16)
    assert ((p > 0) & (p < 1)).all()
    assert (p1 - p2).abs().max() > 0
    assert torch.equal(p[0], p1[0])


def test_forward_deterministic(rng):
    x = torch.as_tensor(rng.random((1, 3, 16, 16)), dtype=torch.float32)
    a = init_params(TINY_NET)
    b = init_params(TINY_NET)
    with torch.no_grad():
        assert torch.equal(a(x, 2), b(x, 2))
        assert torch.equal(a(x, 2), a(x, 2))


def test_init_params_seeded():
    a, b = init_params(TINY_NET), init_params(TINY_NET)
    c = init_params(NetworkConfig(**{**TINY_NET.__dict__, "seed": 1}))
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))
    biases = [p for n, p in a.named_parameters() if n.endswith("bias")]
    assert all(torch.count_nonzero(p) == 0 for p in biases)


def _expected_names(depth, base, blocks, in_ch=3):
    names = set()

    def block(prefix, cin, cout):
        for layer in ("conv1", "norm1", "conv2", "norm2") + (("skip",) if cin != cout else ()):
            names.update({f"{prefix}.{layer}.weight", f"{prefix}.{layer}.bias"})

    ch = [base * 2**lvl for lvl in range(depth)]
    for lvl in range(depth):
        for b in range(blocks):
            cin = (in_ch if lvl == 0 else ch[lvl - 1]) if b == 0 else ch[lvl]
            block(f"encoder.{lvl}.{b}", cin, ch[lvl])
    for lvl in range(depth - 1):
        names.update({f"up.{lvl}.weight", f"up.{lvl}.bias"})
        for b in range(blocks):
            block(f"decoder.{lvl}.{b}", 2 * ch[lvl] if b == 0 else ch[lvl], ch[lvl])
    names.update({"out_norm.weight", "out_norm.bias", "out_conv.weight", "out_conv.bias", "controller.weight", "controller.bias"})
    return names


def test_parameter_layout_depth5_base32():
    model = init_params(NetworkConfig(depth=5, base_channels=32))
    assert {n for n, _ in model.named_parameters()} == _expected_names(5, 32, 2)
    assert model.controller.in_features == 512 + 6
    assert model.get_parameter("encoder.4.0.conv1.weight").shape == (512, 256, 3, 3)
    assert model.get_parameter("up.0.weight").shape == (64, 32, 2, 2)


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    model = init_params(TINY_NET)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.as_tensor(rng.normal(size=tuple(p.shape)), dtype=p.dtype) * 1e-3)
    save_checkpoint(model, tmp_path / "ck", epoch=3, scores={"mouse": 0.5})
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta["epoch"] == 3 and meta["class_order"] == ["GS", "HN", "ML", "MA", "NS", "SS"]
    assert meta["config"]["base_channels"] == TINY_NET.base_channels
    x = torch.as_tensor(rng.random((2, 3, 16, 16)), dtype=torch.float32)
    with torch.no_grad():
        assert torch.equal(model.predict_proba(x, [2, 5]), back.predict_proba(x, [2, 5]))
    raw = (tmp_path / "ck" / "arrays" / "controller.weight.f32").read_bytes()
    assert raw == model.controller.weight.detach().numpy().astype("<f4").tobytes()


def test_dynamic_kernels_fields():
    assert DynamicKernels._fields == ("w1", "b1", "w2", "b2", "w3", "b3")
