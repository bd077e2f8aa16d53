"""Tiny plain/residual segmentation nets, the EMA teacher and checkpoint IO."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

ARCHS = ("plain", "residual")
CHECKPOINT_MAGIC = "SDCLNET"
CHECKPOINT_VERSION = 1


class NetError(ValueError):
    pass


@dataclass
class SegNet:
    """Stack of same-padded convolutions ending in a K-way channel softmax.

    ``residual`` nets add an identity skip around every interior conv block;
    layer count and widths are identical to the plain variant.
    """

    arch: str
    num_classes: int
    in_channels: int
    widths: tuple[int, ...]
    kernel: tuple[int, int, int]
    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def layout(self) -> list[tuple[int, ...]]:
        return [p.shape for p in self.parameters()]


@dataclass
class TeacherNet:
    """Non-trainable copy of student A, updated only by :func:`ema_update`."""

    net: SegNet
    momentum: float = 0.99

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()


def init_params(
    arch: str,
    num_classes: int,
    seed: int,
    *,
    in_channels: int = 1,
    width: int = 8,
    depth: int = 4,
    spatial_dims: int = 3,
) -> SegNet:
    """Build a net with He-normal weights (std sqrt(2/fan_in)) and zero biases.

    ``spatial_dims=2`` uses 3x3x1 kernels so depth-1 volumes are handled as
    images.
    """
    if arch not in ARCHS:
        raise NetError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    if num_classes < 2:
        raise NetError(f"class count must be >= 2, got {num_classes}")
    if depth < 2:
        raise NetError(f"depth must be >= 2, got {depth}")
    if spatial_dims not in (2, 3):
        raise NetError(f"spatial_dims must be 2 or 3, got {spatial_dims}")
    kernel = (3, 3, 3) if spatial_dims == 3 else (3, 3, 1)
    rng = np.random.default_rng(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    channels = [in_channels] + [width] * (depth - 1) + [num_classes]
    weights, biases = [], []
    for c_in, c_out in zip(channels[:-1], channels[1:]):
        fan_in = c_in * int(np.prod(kernel))
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in) + kernel)
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(c_out), requires_grad=True))
    return SegNet(arch, num_classes, in_channels, tuple(channels[1:-1]), kernel, weights, biases)


def logits(net: SegNet, x: Tensor) -> Tensor:
    if x.ndim != 5:
        raise NetError(f"expected input of shape (batch, channel, W, H, D), got {x.shape}")
    if x.shape[1] != net.in_channels:
        raise NetError(f"input has {x.shape[1]} channels, net expects {net.in_channels}")
    last = net.depth - 1
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = T.add_bias(T.conv(h, w), b)
        if i == last:
            return z
        z = T.relu(z)
        h = h + z if net.arch == "residual" and 0 < i else z
    raise AssertionError("unreachable")


def forward(net: SegNet | TeacherNet, x: Tensor | np.ndarray) -> Tensor:
    """Channel-softmaxed class probabilities, shape (batch, K, W, H, D).

    Teacher forwards run without recording a tape.
    """
    x = T.as_tensor(x)
    if isinstance(net, TeacherNet):
        with T.no_grad():
            return T.softmax(logits(net.net, x), axis=1)
    return T.softmax(logits(net, x), axis=1)


def predict(net: SegNet | TeacherNet, x: np.ndarray) -> np.ndarray:
    """Hard labels (batch, W, H, D) without building a tape."""
    with T.no_grad():
        probs = forward(net, x)
    return probs.data.argmax(axis=1)


def copy_net(net: SegNet, requires_grad: bool = True) -> SegNet:
    clone = copy.copy(net)
    clone.weights = [Tensor(w.data.copy(), requires_grad=requires_grad) for w in net.weights]
    clone.biases = [Tensor(b.data.copy(), requires_grad=requires_grad) for b in net.biases]
    return clone


def make_teacher(student_a: SegNet, momentum: float = 0.99) -> TeacherNet:
    if not 0.0 < momentum < 1.0:
        raise NetError(f"EMA momentum must lie in (0, 1), got {momentum}")
    return TeacherNet(copy_net(student_a, requires_grad=False), momentum)


def ema_update(teacher: TeacherNet, student_a: SegNet, m: float | None = None) -> TeacherNet:
    """theta_t <- m * theta_t + (1 - m) * theta_s for every parameter, in place."""
    m = teacher.momentum if m is None else m
    if not 0.0 < m < 1.0:
        raise NetError(f"EMA momentum must lie in (0, 1), got {m}")
    t_net = teacher.net
    if t_net.arch != student_a.arch or t_net.layout() != student_a.layout():
        raise NetError(
            f"teacher ({t_net.arch}, {t_net.layout()}) does not mirror student "
            f"({student_a.arch}, {student_a.layout()})"
        )
    for pt, ps in zip(t_net.parameters(), student_a.parameters()):
        pt.data = m * pt.data + (1.0 - m) * ps.data
        pt.grad = None
    return teacher


# ---------------------------------------------------------------------------
# Checkpoints: a text header followed by raw little-endian float64 values.
# ---------------------------------------------------------------------------


def _header_lines(net: SegNet, iteration: int, n_values: int) -> list[str]:
    return [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"arch={net.arch}",
        f"K={net.num_classes}",
        f"in_channels={net.in_channels}",
        f"widths={','.join(map(str, net.widths))}",
        f"kernel={','.join(map(str, net.kernel))}",
        f"iteration={iteration}",
        f"n_values={n_values}",
        "end_header",
    ]


def flatten_params(net: SegNet) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1) for p in net.parameters()])


def checkpoint_bytes(net: SegNet, iteration: int = 0) -> bytes:
    flat = flatten_params(net)
    header = "\n".join(_header_lines(net, iteration, flat.size)) + "\n"
    return header.encode("ascii") + flat.astype("<f8").tobytes()


def save_checkpoint(net: SegNet, path: str | Path, iteration: int = 0) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, iteration))


def parse_header(blob: bytes, magic: str, version: int) -> tuple[dict[str, str], int]:
    """Split ``key=value`` header lines from the payload; returns (fields, payload offset)."""
    end_marker = b"end_header\n"
    end = blob.find(end_marker)
    if end < 0:
        raise NetError(f"header terminator not found (offset 0, {len(blob)} bytes scanned)")
    lines = blob[:end].decode("ascii").splitlines()
    if not lines or lines[0].split(" ")[0] != magic:
        raise NetError(f"bad magic at offset 0: expected {magic!r}")
    try:
        found = int(lines[0].split(" ")[1])
    except (IndexError, ValueError):
        raise NetError("malformed version field at offset 0") from None
    if found != version:
        raise NetError(f"unsupported version {found} at offset {len(magic) + 1} (expected {version})")
    fields = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise NetError(f"malformed header line {line!r}")
        fields[key] = value
    return fields, end + len(end_marker)


def load_checkpoint(path: str | Path, requires_grad: bool = True) -> tuple[SegNet, int]:
    blob = Path(path).read_bytes()
    return checkpoint_from_bytes(blob, requires_grad)


def checkpoint_from_bytes(blob: bytes, requires_grad: bool = True) -> tuple[SegNet, int]:
    fields, offset = parse_header(blob, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    widths = tuple(int(v) for v in fields["widths"].split(",") if v)
    kernel = tuple(int(v) for v in fields["kernel"].split(","))
    net = SegNet(
        arch=fields["arch"],
        num_classes=int(fields["K"]),
        in_channels=int(fields["in_channels"]),
        widths=widths,
        kernel=kernel,  # type: ignore[arg-type]
    )
    channels = [net.in_channels, *widths, net.num_classes]
    n_values = int(fields["n_values"])
    expected = offset + 8 * n_values
    if len(blob) != expected:
        raise NetError(f"payload length mismatch at offset {offset}: expected {expected} bytes total, got {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f8", offset=offset).astype(np.float64)
    pos = 0
    for c_in, c_out in zip(channels[:-1], channels[1:]):
        shape = (c_out, c_in) + kernel
        size = int(np.prod(shape))
        net.weights.append(Tensor(flat[pos : pos + size].reshape(shape), requires_grad=requires_grad))
        pos += size
        net.biases.append(Tensor(flat[pos : pos + c_out].copy(), requires_grad=requires_grad))
        pos += c_out
    if pos != n_values:
        raise NetError(f"header describes {pos} values but n_values={n_values}")
    return net, int(fields["iteration"])
