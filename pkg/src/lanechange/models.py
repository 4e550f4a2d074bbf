"""Residual lane-change networks: image-only and image+IMU fusion.

Layer layout with the default spec (width multiplier 1, 278 x 692 input)::

    conv_1          3 -> 16        278 x 692   (+ relu)
    conv_2_1..2_4   16 -> 32       278 x 692   two residual blocks, then pool
    conv_3_x        32 -> 64       139 x 346
    conv_4_x        64 -> 128       70 x 173
    conv_5_x        128 -> 256      35 x 87
    conv_6_x        256 -> 512      18 x 44
    conv_7_x        512 -> 1024      9 x 22    no pool, global average instead
    fc_1            1024 (+6 IMU for fusion) -> 1024  (+ relu)
    fc_2            1024 -> 3, softmax

Each residual block is ``pad(X) + relu(conv(relu(conv(X))))``; the last block
of a group doubles the channel count and the skip path is zero padded.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tape, Tensor

IMU_DIM = 6
NUM_CLASSES = 3
# class index -> label (Table-1 representation): left, right, keep
INDEX_TO_LABEL = (-1, 1, 0)
LABEL_TO_INDEX = {-1: 0, 1: 1, 0: 2}
CLASS_NAMES = ("lane departure to the left", "lane departure to the right", "keep in lane")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = "image"  # "image" or "fusion"
    height: int = 278
    width: int = 692
    width_mult: float = 1.0
    groups: int = 6
    blocks_per_group: int = 2

    def __post_init__(self):
        if self.variant not in ("image", "fusion"):
            raise SpecError(f"unknown variant {self.variant!r}")
        if self.groups < 1 or self.blocks_per_group < 1:
            raise SpecError("groups and blocks_per_group must be >= 1")
        if self.width_mult <= 0:
            raise SpecError("width_mult must be positive")

    @property
    def base_channels(self) -> int:
        return max(1, int(round(16 * self.width_mult)))

    @property
    def feature_channels(self) -> int:
        return self.base_channels * 2**self.groups

    @property
    def min_size(self) -> int:
        return 2 ** (self.groups - 1)

    def conv_layers(self) -> list[tuple[str, int, int]]:
        """(name, in_channels, out_channels) for every convolution, in forward order."""
        layers = [("conv_1", 3, self.base_channels)]
        c = self.base_channels
        for g in range(self.groups):
            for j in range(2 * self.blocks_per_group):
                last = j == 2 * self.blocks_per_group - 1
                layers.append((f"conv_{g + 2}_{j + 1}", c, 2 * c if last else c))
            c *= 2
        return layers

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for name, cin, cout in self.conv_layers():
            shapes[f"{name}.weight"] = (cout, cin, 3, 3)
            shapes[f"{name}.bias"] = (cout,)
        f = self.feature_channels
        fc_in = f + IMU_DIM if self.variant == "fusion" else f
        shapes["fc_1.weight"] = (f, fc_in)
        shapes["fc_1.bias"] = (f,)
        shapes["fc_2.weight"] = (NUM_CLASSES, f)
        shapes["fc_2.bias"] = (NUM_CLASSES,)
        return dict(sorted(shapes.items()))

    def parameter_count(self) -> int:
        return sum(math.prod(s) for s in self.parameter_shapes().values())


NamedParameters = dict  # name -> np.ndarray, built in lexicographic order


@dataclass
class Prediction:
    probabilities: np.ndarray
    class_index: int
    label: int


def build(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> NamedParameters:
    """He-normal weights (variance 2 / fan_in), zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.parameter_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = math.prod(shape[1:])
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
    return params


def infer_spec(params: NamedParameters, height: int = 278, width: int = 692) -> NetworkSpec:
    """Recover the architecture from parameter shapes."""
    try:
        base = params["conv_1.weight"].shape[0]
        fc_in = params["fc_1.weight"].shape[1]
    except KeyError as exc:
        raise SpecError(f"parameter set lacks {exc.args[0]}") from None
    groups = len({n.split("_")[1] for n in params if n.startswith("conv_") and n.count("_") == 2})
    convs_in_group = len({n.split(".")[0] for n in params if n.startswith("conv_2_")})
    feature = base * 2**groups
    if fc_in == feature:
        variant = "image"
    elif fc_in == feature + IMU_DIM:
        variant = "fusion"
    else:
        raise SpecError(f"fc_1 input width {fc_in} fits neither variant (features {feature})")
    spec = NetworkSpec(variant, height, width, base / 16, groups, max(1, convs_in_group // 2))
    expected = spec.parameter_shapes()
    for name, shape in expected.items():
        if name not in params or tuple(params[name].shape) != shape:
            raise SpecError(f"parameter {name} does not fit inferred spec {spec}")
    return spec


def residual_block(x, w1, b1, w2, b2) -> Tensor:
    """``pad_channels(x) + relu(conv2(relu(conv1(x))))``."""
    x = T.as_tensor(x)
    c_in = x.shape[-3]
    c_out = T.as_tensor(w2).shape[0]
    if c_out < c_in:
        raise SpecError(f"residual block cannot shrink channels {c_in} -> {c_out}")
    branch = T.relu(T.conv2d_same(T.relu(T.conv2d_same(x, w1, b1)), w2, b2))
    return T.add(T.pad_channels(x, c_out), branch)


def _check_input(spec: NetworkSpec, h: int, w: int) -> None:
    if h < spec.min_size or w < spec.min_size:
        raise SpecError(
            f"input {h}x{w} is smaller than {spec.min_size} pixels and cannot pass {spec.groups - 1} poolings"
        )


def logits(spec: NetworkSpec, params: dict, images, imus=None) -> Tensor:
    """Batched forward pass up to the pre-softmax scores.

    ``params`` values may be arrays or tape-watched tensors; ``images`` is
    N x 3 x H x W (or 3 x H x W), ``imus`` N x 6 for the fusion variant.
    """
    images = T.as_tensor(images)
    _check_input(spec, *images.shape[-2:])
    if spec.variant == "fusion" and imus is None:
        raise SpecError("fusion network needs an IMU vector")
    if spec.variant == "image" and imus is not None:
        raise SpecError("image-only network takes no IMU input")

    def p(name):
        return params[name]

    x = T.relu(T.conv2d_same(images, p("conv_1.weight"), p("conv_1.bias")))
    convs = spec.conv_layers()[1:]
    per_group = 2 * spec.blocks_per_group
    for g in range(spec.groups):
        group = convs[g * per_group : (g + 1) * per_group]
        for j in range(0, per_group, 2):
            a, b = group[j][0], group[j + 1][0]
            x = residual_block(x, p(f"{a}.weight"), p(f"{a}.bias"), p(f"{b}.weight"), p(f"{b}.bias"))
        if g < spec.groups - 1:
            x = T.maxpool_2x2_ceil(x)
    feat = T.global_avg_pool(x)
    if spec.variant == "fusion":
        imus = T.as_tensor(np.asarray(T.as_tensor(imus).data, dtype=feat.dtype))
        if imus.shape[-1] != IMU_DIM:
            raise ShapeError(f"IMU vector must have {IMU_DIM} entries, got {imus.shape}")
        feat = T.concat(feat, imus)
    h = T.relu(T.dense(feat, p("fc_1.weight"), p("fc_1.bias")))
    return T.dense(h, p("fc_2.weight"), p("fc_2.bias"))


def forward(
    params: NamedParameters,
    image,
    imu=None,
    tape: Tape | None = None,
    spec: NetworkSpec | None = None,
) -> Prediction:
    """Classify one 3 x H x W image (plus the 6-entry IMU vector for fusion).

    With a tape, parameters are watched on it so the pass can be differentiated.
    """
    spec = spec or infer_spec(params)
    if tape is not None:
        params = {k: tape.watch(k, v) for k, v in params.items()}
    z = logits(spec, params, image, imu)
    probs = T.softmax(z).data
    return to_prediction(probs)


def to_prediction(probs: np.ndarray) -> Prediction:
    idx = int(np.argmax(probs))  # first maximum wins ties
    return Prediction(np.asarray(probs), idx, INDEX_TO_LABEL[idx])


def predict_batch(spec: NetworkSpec, params: NamedParameters, images, imus=None) -> np.ndarray:
    """Class probabilities for a batch, N x 3."""
    return T.softmax(logits(spec, params, images, imus)).data


def shape_report(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Output shape of every layer, computed without touching any data."""
    h, w = spec.height, spec.width
    _check_input(spec, h, w)
    rows: list[tuple[str, tuple[int, ...]]] = [("input", (3, h, w))]
    convs = spec.conv_layers()
    rows.append(("conv_1", (convs[0][2], h, w)))
    per_group = 2 * spec.blocks_per_group
    for g in range(spec.groups):
        for name, _, cout in convs[1 + g * per_group : 1 + (g + 1) * per_group]:
            rows.append((name, (cout, h, w)))
        if g < spec.groups - 1:
            h, w = -(-h // 2), -(-w // 2)
            rows.append((f"pool_{g + 2}", (convs[(g + 1) * per_group][2], h, w)))
    f = spec.feature_channels
    rows.append(("avg_pool", (f,)))
    if spec.variant == "fusion":
        rows.append(("concat_imu", (f + IMU_DIM,)))
    rows.append(("fc_1", (f,)))
    rows.append(("fc_2", (NUM_CLASSES,)))
    rows.append(("softmax", (NUM_CLASSES,)))
    return rows


def group_output_sizes(spec: NetworkSpec) -> dict[str, tuple[int, int]]:
    """Spatial size at each ``Conv_i_x`` group, i.e. the Output Size column of the layer table."""
    sizes = {}
    for name, shape in shape_report(spec):
        if name.startswith("conv_"):
            key = "conv_1" if name == "conv_1" else name.rsplit("_", 1)[0] + "_x"
            sizes[key] = shape[1:]
    return sizes


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"LWNC"
VERSION = 1


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(params: NamedParameters, path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expected: NetworkSpec | None = None) -> NamedParameters:
    """Read a checkpoint; with ``expected``, verify every tensor shape against it."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedCheckpointError(f"{path}: truncated at byte {pos} (needed {n} more)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {VERSION}")
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = math.prod(shape)
        params[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    if expected is not None:
        check_shapes(params, expected)
    return dict(sorted(params.items()))


def check_shapes(params: NamedParameters, spec: NetworkSpec) -> None:
    want = spec.parameter_shapes()
    for name in sorted(set(want) | set(params)):
        if name not in params:
            raise CheckpointShapeError(f"tensor {name} missing from checkpoint")
        if name not in want:
            raise CheckpointShapeError(f"tensor {name} not part of the expected network")
        if tuple(params[name].shape) != want[name]:
            raise CheckpointShapeError(
                f"tensor {name} has shape {tuple(params[name].shape)}, expected {want[name]}"
            )


def with_size(spec: NetworkSpec, height: int, width: int) -> NetworkSpec:
    return replace(spec, height=height, width=width)
