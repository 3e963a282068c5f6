"""Class-conditional segmentation network: residual U-Net, kernel controller, dynamic head.

A query is an (image, class) pair. The backbone yields a bottleneck feature ``F``
and a decoder map ``M``. The controller maps ``GAP(F) || onehot(class)`` to a flat
kernel vector which is split into three 1x1 convolutions applied to ``M``.

Parameter names (``depth`` levels ``l = 0..depth-1``, ``blocks_per_level`` blocks ``b``)::

    encoder.{l}.{b}.conv1.{weight,bias}   3x3 conv
    encoder.{l}.{b}.norm1.{weight,bias}   group norm
    encoder.{l}.{b}.conv2.{weight,bias}
    encoder.{l}.{b}.norm2.{weight,bias}
    encoder.{l}.{b}.skip.{weight,bias}    1x1 conv, only where channels change
    up.{l}.{weight,bias}                  2x2 transposed conv, level l+1 -> l, l < depth-1
    decoder.{l}.{b}.*                     as encoder blocks, l < depth-1
    out_norm.{weight,bias}
    out_conv.{weight,bias}                1x1 conv to decoder_channels
    controller.{weight,bias}              affine map, (C_F + m) -> kernel_length
"""

import json
import math
from collections import namedtuple
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import CLASS_NAMES
from .exceptions import DataError, ValidationError
from .validation import check_class_id, check_divisible

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int = 6
    in_channels: int = 3
    base_channels: int = 32
    depth: int = 5
    decoder_channels: int = 8
    head_channels: int = 8
    blocks_per_level: int = 2
    init: str = "he_normal"
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "in_channels", "base_channels", "decoder_channels", "head_channels", "blocks_per_level"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.depth < 2:
            raise ValidationError("depth must be >= 2")
        if self.init not in ("he_normal", "zeros"):
            raise ValidationError(f"unknown init scheme {self.init!r}")

    @property
    def feature_channels(self):
        return self.base_channels * 2 ** (self.depth - 1)

    @property
    def downsample_factor(self):
        return 2 ** (self.depth - 1)

    @property
    def kernel_length(self):
        return kernel_length(self.decoder_channels, self.head_channels)


def kernel_length(decoder_channels, head_channels):
    c_m, c_h = decoder_channels, head_channels
    return c_h * c_m + c_h + c_h * c_h + c_h + c_h + 1


DynamicKernels = namedtuple("DynamicKernels", ["w1", "b1", "w2", "b2", "w3", "b3"])
DynamicKernels.__doc__ = """Per-query head weights; leading batch dimension on every field.

w1 (B, c_h, C_M), b1 (B, c_h), w2 (B, c_h, c_h), b2 (B, c_h), w3 (B, 1, c_h), b3 (B, 1).
"""


def encode_task(class_id, num_classes):
    """One-hot class vector with a 1 at 1-based position ``class_id``."""
    check_class_id(class_id, num_classes)
    t = np.zeros(num_classes, dtype=np.float32)
    t[class_id - 1] = 1.0
    return t


def global_average_pool(features):
    """Per-channel spatial mean of a (B, C, h, w) or (C, h, w) feature map."""
    if features.ndim < 3 or features.shape[-1] * features.shape[-2] == 0:
        raise ValidationError(f"cannot pool feature map of shape {tuple(features.shape)}")
    return features.mean(dim=(-2, -1))


def split_kernels(flat, decoder_channels, head_channels):
    """Cut a (B, W) or (W,) kernel vector into the three head layers."""
    c_m, c_h = decoder_channels, head_channels
    flat = torch.as_tensor(flat)
    single = flat.ndim == 1
    if single:
        flat = flat[None]
    if flat.shape[-1] != kernel_length(c_m, c_h):
        raise ValidationError(f"kernel vector has length {flat.shape[-1]}, expected {kernel_length(c_m, c_h)}")
    sizes = [c_h * c_m, c_h, c_h * c_h, c_h, c_h, 1]
    w1, b1, w2, b2, w3, b3 = torch.split(flat, sizes, dim=-1)
    b = flat.shape[0]
    return DynamicKernels(
        w1.reshape(b, c_h, c_m), b1, w2.reshape(b, c_h, c_h), b2, w3.reshape(b, 1, c_h), b3
    )


def concat_kernels(kernels):
    b = kernels.w1.shape[0]
    return torch.cat([k.reshape(b, -1) for k in kernels], dim=-1)


def generate_kernels(pooled, class_vector, controller, decoder_channels, head_channels):
    """Kernel vector = controller(pooled || class_vector), split into head layers.

    ``controller`` is an ``nn.Linear`` (or anything with ``weight`` and ``bias``).
    ``pooled`` is (B, C_F) or (C_F,); ``class_vector`` is (B, m) or (m,).
    """
    pooled = torch.as_tensor(pooled)
    t = torch.as_tensor(class_vector, dtype=pooled.dtype)
    if pooled.ndim == 1:
        pooled = pooled[None]
    if t.ndim == 1:
        t = t[None].expand(pooled.shape[0], -1)
    weight, bias = controller.weight, controller.bias
    if pooled.shape[0] != t.shape[0] or pooled.shape[1] + t.shape[1] != weight.shape[1]:
        raise ValidationError(
            f"controller expects input length {weight.shape[1]}, got pooled {tuple(pooled.shape)} and task {tuple(t.shape)}"
        )
    flat = F.linear(torch.cat([pooled, t], dim=1), weight, bias)
    return split_kernels(flat, decoder_channels, head_channels)


def apply_dynamic_head(decoder_map, kernels):
    """Three per-query 1x1 convolutions, ReLU after the first two. Returns (B, h, w) logits."""
    m = decoder_map
    if m.ndim == 3:
        m = m[None]
    if m.shape[1] != kernels.w1.shape[2] or m.shape[0] != kernels.w1.shape[0]:
        raise ValidationError(
            f"decoder map {tuple(m.shape)} does not match kernels for {kernels.w1.shape[0]} queries "
            f"of {kernels.w1.shape[2]} channels"
        )
    x = torch.einsum("boc,bchw->bohw", kernels.w1, m) + kernels.b1[:, :, None, None]
    x = F.relu(x)
    x = torch.einsum("boc,bchw->bohw", kernels.w2, x) + kernels.b2[:, :, None, None]
    x = F.relu(x)
    x = torch.einsum("boc,bchw->bohw", kernels.w3, x) + kernels.b3[:, :, None, None]
    return x[:, 0]


def _groups(channels, max_groups=8):
    return max(g for g in range(1, max_groups + 1) if channels % g == 0)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x):
        identity = x if self.skip is None else self.skip(x)
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + identity)


def _stage(in_ch, out_ch, n_blocks):
    return nn.Sequential(*[ResidualBlock(in_ch if b == 0 else out_ch, out_ch) for b in range(n_blocks)])


class GLAMNet(nn.Module):
    """Residual U-Net with a class-aware controller and dynamic head."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        c = [config.base_channels * 2**lvl for lvl in range(config.depth)]
        n = config.blocks_per_level
        self.encoder = nn.ModuleList(
            [_stage(config.in_channels if lvl == 0 else c[lvl - 1], c[lvl], n) for lvl in range(config.depth)]
        )
        self.up = nn.ModuleList([nn.ConvTranspose2d(c[lvl + 1], c[lvl], 2, stride=2) for lvl in range(config.depth - 1)])
        self.decoder = nn.ModuleList([_stage(2 * c[lvl], c[lvl], n) for lvl in range(config.depth - 1)])
        self.out_norm = nn.GroupNorm(_groups(c[0]), c[0])
        self.out_conv = nn.Conv2d(c[0], config.decoder_channels, 1)
        self.controller = nn.Linear(config.feature_channels + config.num_classes, config.kernel_length)

    def backbone(self, x):
        """Return (F, M): bottleneck features and full-resolution decoder output."""
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValidationError(f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}")
        factor = self.config.downsample_factor
        check_divisible(x.shape[-2], factor)
        check_divisible(x.shape[-1], factor)
        skips = []
        for lvl, stage in enumerate(self.encoder):
            if lvl > 0:
                x = F.max_pool2d(x, 2)
            x = stage(x)
            skips.append(x)
        features = x
        for lvl in reversed(range(self.config.depth - 1)):
            x = self.up[lvl](x)
            x = self.decoder[lvl](torch.cat([x, skips[lvl]], dim=1))
        decoder_map = self.out_conv(F.relu(self.out_norm(x)))
        return features, decoder_map

    def task_vectors(self, class_ids, batch, dtype):
        ids = [class_ids] * batch if np.isscalar(class_ids) else list(class_ids)
        if len(ids) != batch:
            raise ValidationError(f"got {len(ids)} class ids for a batch of {batch}")
        return torch.as_tensor(np.stack([encode_task(int(i), self.config.num_classes) for i in ids]), dtype=dtype)

    def kernels(self, features, class_ids):
        t = self.task_vectors(class_ids, features.shape[0], features.dtype)
        return generate_kernels(
            global_average_pool(features), t, self.controller, self.config.decoder_channels, self.config.head_channels
        )

    def forward(self, x, class_ids):
        """Logits (B, H, W) for images ``x`` (B, 3, H, W) and one class id per image (or one for all)."""
        features, decoder_map = self.backbone(x)
        return apply_dynamic_head(decoder_map, self.kernels(features, class_ids))

    def predict_proba(self, x, class_ids):
        return torch.sigmoid(self.forward(x, class_ids))


def init_params(config, dtype=torch.float32):
    """Build a network with fan-in scaled normal conv/linear weights and zero biases.

    Deterministic in ``config.seed``; independent of the global torch RNG.
    """
    model = GLAMNet(config)
    gen = torch.Generator().manual_seed(int(config.seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif p.ndim == 1:  # group-norm scale
                p.fill_(1.0)
            elif config.init == "zeros":
                p.zero_()
            else:
                if isinstance(_owner(model, name), nn.ConvTranspose2d):
                    fan_in = p.shape[0]  # stride == kernel: one tap per output pixel
                else:
                    fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
    return model.to(dtype)


def _owner(model, param_name):
    return model.get_submodule(param_name.rsplit(".", 1)[0])


def to_tensor(images, dtype=torch.float32):
    """(N, H, W, 3) or (H, W, 3) array -> (N, 3, H, W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model, path, epoch=None, scores=None, class_order=CLASS_NAMES, extra=None):
    """Write ``checkpoint.json`` plus one little-endian float32 file per parameter array."""
    path = Path(path)
    (path / "arrays").mkdir(parents=True, exist_ok=True)
    arrays = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        (path / "arrays" / f"{name}.f32").write_bytes(arr.tobytes(order="C"))
        arrays.append({"name": name, "shape": list(arr.shape), "file": f"arrays/{name}.f32"})
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "class_order": list(class_order)[: model.config.num_classes],
        "epoch": epoch,
        "scores": scores or {},
        "dtype": "float32-le",
        "arrays": arrays,
    }
    if extra:
        meta.update(extra)
    (path / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path):
    """Return (model, metadata). Float32 arrays are restored bit-exactly."""
    path = Path(path)
    try:
        meta = json.loads((path / "checkpoint.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint at {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('version')!r}")
    model = GLAMNet(NetworkConfig(**meta["config"]))
    state = {}
    for item in meta["arrays"]:
        raw = np.frombuffer((path / item["file"]).read_bytes(), dtype="<f4")
        state[item["name"]] = torch.from_numpy(raw.reshape(item["shape"]).astype(np.float32))
    model.load_state_dict(state, strict=True)
    return model, meta
