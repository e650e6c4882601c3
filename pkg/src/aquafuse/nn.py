"""Enhancement network definitions over the tensor module.

The generator fuses two encoder branches (raw image and its
fusion-enhanced counterpart), refines through inception-style residual
blocks, and decodes back to image resolution with transposed
convolutions. The discriminator is a five-layer patch critic whose
kernels are spectrally normalized before every use.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import numpy as np

from . import tensor as tz
from .tensor import Tensor

LEAKY_SLOPE = 0.2
# kernel init scale: with the pinned 1e-4 learning rate, desk-scale runs
# need this much initial gradient flow to move visibly in a few hundred steps
INIT_STD = 0.12
SN_EPS = 1e-12


class WeightArchiveError(Exception):
    """Base class for weight archive failures."""


class ArchiveFormatError(WeightArchiveError):
    """Magic bytes or header descriptor are corrupt."""


class ArchiveShapeError(WeightArchiveError):
    """Archived entry does not match the current architecture."""


class ArchiveTruncatedError(WeightArchiveError):
    """Payload ends before the declared entries are satisfied."""


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, stride: int,
                 padding: int, rng: np.random.Generator, dtype=np.float32):
        shape = (out_ch, in_ch, kernel_size, kernel_size)
        self.kernel = Tensor(rng.normal(0.0, INIT_STD, shape), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True, dtype=dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return tz.conv2d(x, self.kernel, self.bias, self.stride, self.padding)

    def parameters(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def buffers(self):
        return []


class ConvTranspose2d:
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, stride: int,
                 padding: int, rng: np.random.Generator, dtype=np.float32):
        shape = (in_ch, out_ch, kernel_size, kernel_size)
        self.kernel = Tensor(rng.normal(0.0, INIT_STD, shape), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True, dtype=dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return tz.conv_transpose2d(x, self.kernel, self.bias, self.stride, self.padding)

    def parameters(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def buffers(self):
        return []


class BatchNorm2d:
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.9,
                 epsilon: float = 1e-5):
        self.gamma = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return tz.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training, self.momentum, self.epsilon)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------


class SpectralNormResult(NamedTuple):
    kernel: Tensor
    u_state: np.ndarray
    sigma: float
    clamped: bool


def init_u_state(rows: int, cols: int, rng: np.random.Generator, block: int = 8,
                 dtype=np.float64) -> np.ndarray:
    b = min(block, rows, cols)
    u = rng.standard_normal((rows, b))
    q, _ = np.linalg.qr(u)
    return q.astype(dtype, copy=False)


def power_iteration(mat: np.ndarray, u_state: np.ndarray, iters: int):
    """Estimate the top singular value by simultaneous (block) power iteration.

    A single column degrades to the classic u/v scheme; the default block
    of 8 orthonormal columns converges fast enough that 50 sweeps resolve
    sigma to ~1e-6 even on matrices with a crowded top spectrum.
    Returns (sigma, updated u_state).
    """
    if iters < 1:
        raise tz.ArgumentError(f"power iteration count must be positive, got {iters}")
    u = u_state if u_state.ndim == 2 else u_state.reshape(-1, 1)
    if u.shape[0] != mat.shape[0]:
        raise tz.DimensionError(f"u_state has {u.shape[0]} rows, matrix has {mat.shape[0]}")
    v = None
    for _ in range(iters):
        v, _ = np.linalg.qr(mat.T @ u)
        u, _ = np.linalg.qr(mat @ v)
    core = u.T @ mat @ v
    sigma = float(np.linalg.svd(core, compute_uv=False)[0])
    return sigma, u


def spectral_normalize(kernel: Tensor, u_state: Optional[np.ndarray], iters: int,
                       rng: Optional[np.random.Generator] = None) -> SpectralNormResult:
    """Divide ``kernel`` by its top singular value (rows=outC, cols=inC*kH*kW).

    sigma is treated as a constant in the graph, so gradients flow through
    the division as a fixed 1/sigma scaling. An all-zero kernel cannot be
    normalized; sigma is clamped to a tiny epsilon and flagged.
    """
    outc = kernel.shape[0]
    cols = kernel.numel() // outc
    mat = kernel.data.reshape(outc, cols)
    if u_state is None:
        u_state = init_u_state(outc, cols, rng or np.random.default_rng(0))
    if not np.any(mat):
        return SpectralNormResult(kernel, u_state, SN_EPS, True)
    sigma, u_state = power_iteration(mat, u_state, iters)
    if sigma < SN_EPS:
        return SpectralNormResult(kernel, u_state, SN_EPS, True)
    return SpectralNormResult(tz.scale(kernel, 1.0 / sigma), u_state, sigma, False)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    encoder_channels: tuple = (32, 64, 128)
    block_count: int = 2
    block_branch_channels: int = 64
    block_kernel_sizes: tuple = (1, 3, 5)
    decoder_channels: tuple = (64, 32, 16)
    dtype: type = np.float32


class BasicBlock:
    """Parallel convolutions of different kernel sizes, concatenated,
    reduced back to the input channel count, plus a residual skip."""

    def __init__(self, channels: int, branch_channels: int, kernel_sizes,
                 rng: np.random.Generator, dtype=np.float32):
        self.channels = channels
        self.branches = [
            Conv2d(channels, branch_channels, k, stride=1, padding=k // 2, rng=rng, dtype=dtype)
            for k in kernel_sizes
        ]
        self.reduce = Conv2d(branch_channels * len(self.branches), channels, 1,
                             stride=1, padding=0, rng=rng, dtype=dtype)

    def __call__(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.channels:
            raise tz.DimensionError(f"block expects {self.channels} channels, got {f.shape[1]}")
        mixed = self.reduce(tz.concat_channels([branch(f) for branch in self.branches]))
        return tz.add(f, mixed)

    def parameters(self):
        out = []
        for i, branch in enumerate(self.branches):
            out += [(f"branch{i}.{n}", p) for n, p in branch.parameters()]
        out += [(f"reduce.{n}", p) for n, p in self.reduce.parameters()]
        return out

    def buffers(self):
        return []


class GeneratorNet:
    """Two-branch encoder, residual blocks, transposed-conv decoder.

    Both inputs are N x 3 x H x W in [-1, 1] with H, W divisible by 8;
    the output has the same shape and lands in [-1, 1] through the final
    tanh.
    """

    def __init__(self, seed: int = 0, config: Optional[GeneratorConfig] = None):
        self.config = config or GeneratorConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        dt = cfg.dtype

        def encoder():
            convs, norms = [], []
            prev = 3
            for ch in cfg.encoder_channels:
                convs.append(Conv2d(prev, ch, 3, stride=2, padding=1, rng=rng, dtype=dt))
                norms.append(BatchNorm2d(ch, dtype=dt))
                prev = ch
            return convs, norms

        self.raw_convs, self.raw_norms = encoder()
        self.fe_convs, self.fe_norms = encoder()
        feat = cfg.encoder_channels[-1]
        self.blocks = [
            BasicBlock(feat, cfg.block_branch_channels, cfg.block_kernel_sizes, rng, dt)
            for _ in range(cfg.block_count)
        ]
        self.deconvs, self.dec_norms = [], []
        prev = feat
        for ch in cfg.decoder_channels:
            self.deconvs.append(ConvTranspose2d(prev, ch, 4, stride=2, padding=1, rng=rng, dtype=dt))
            self.dec_norms.append(BatchNorm2d(ch, dtype=dt))
            prev = ch
        self.out_proj = Conv2d(prev, 3, 3, stride=1, padding=1, rng=rng, dtype=dt)
        self.training = True

    def train(self, mode: bool = True) -> "GeneratorNet":
        self.training = mode
        return self

    def _validate(self, t: Tensor, name: str) -> None:
        factor = 2 ** len(self.config.encoder_channels)
        n, c, h, w = t.shape
        if c != 3:
            raise tz.DimensionError(f"{name} must have 3 channels, got {c}")
        if h % factor or w % factor:
            raise tz.DimensionError(f"{name} extents must divide by {factor}, got {h}x{w}")
        lo, hi = float(t.data.min()), float(t.data.max())
        if lo < -1.0 - 1e-4 or hi > 1.0 + 1e-4:
            raise tz.ArgumentError(f"{name} values outside [-1, 1]: [{lo:.4f}, {hi:.4f}]")

    def _encode(self, convs, norms, x: Tensor) -> Tensor:
        h = x
        for conv, norm in zip(convs, norms):
            h = tz.leaky_relu(norm(conv(h), self.training), LEAKY_SLOPE)
        return h

    def forward(self, y: Tensor, x_fe: Tensor) -> Tensor:
        self._validate(y, "raw input")
        self._validate(x_fe, "fusion-enhanced input")
        if y.shape != x_fe.shape:
            raise tz.DimensionError(f"input shapes differ: {y.shape} vs {x_fe.shape}")
        h = tz.add(self._encode(self.raw_convs, self.raw_norms, y),
                   self._encode(self.fe_convs, self.fe_norms, x_fe))
        for block in self.blocks:
            h = block(h)
        for deconv, norm in zip(self.deconvs, self.dec_norms):
            h = tz.leaky_relu(norm(deconv(h), self.training), LEAKY_SLOPE)
        return tz.tanh(self.out_proj(h))

    __call__ = forward

    def named_parameters(self) -> Iterator[tuple]:
        for i, (conv, norm) in enumerate(zip(self.raw_convs, self.raw_norms)):
            yield from ((f"raw.{i}.conv.{n}", p) for n, p in conv.parameters())
            yield from ((f"raw.{i}.norm.{n}", p) for n, p in norm.parameters())
        for i, (conv, norm) in enumerate(zip(self.fe_convs, self.fe_norms)):
            yield from ((f"fe.{i}.conv.{n}", p) for n, p in conv.parameters())
            yield from ((f"fe.{i}.norm.{n}", p) for n, p in norm.parameters())
        for i, block in enumerate(self.blocks):
            yield from ((f"block.{i}.{n}", p) for n, p in block.parameters())
        for i, (deconv, norm) in enumerate(zip(self.deconvs, self.dec_norms)):
            yield from ((f"dec.{i}.deconv.{n}", p) for n, p in deconv.parameters())
            yield from ((f"dec.{i}.norm.{n}", p) for n, p in norm.parameters())
        yield from ((f"out.{n}", p) for n, p in self.out_proj.parameters())

    def named_buffers(self) -> Iterator[tuple]:
        groups = [("raw", self.raw_norms), ("fe", self.fe_norms), ("dec", self.dec_norms)]
        for prefix, norms in groups:
            for i, norm in enumerate(norms):
                yield from ((f"{prefix}.{i}.norm.{n}", b) for n, b in norm.buffers())


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------


@dataclass
class DiscriminatorConfig:
    channels: tuple = (64, 128, 256, 512)
    strides: tuple = (2, 2, 2, 1, 1)
    kernel_size: int = 4
    sn_iters: int = 1
    sn_block: int = 8
    dtype: type = np.float32


class DiscriminatorNet:
    """Five-layer patch critic; each logit covers a 70x70 input window.

    Kernels are divided by a power-iteration estimate of their top
    singular value before use. ``refresh_spectral_norm`` advances the
    persistent estimates once per training step; forward itself never
    mutates state, so inference stays pure.
    """

    LAYERS = 5

    def __init__(self, seed: int = 0, config: Optional[DiscriminatorConfig] = None):
        self.config = config or DiscriminatorConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        widths = (3,) + cfg.channels + (1,)
        self.convs = [
            Conv2d(widths[i], widths[i + 1], cfg.kernel_size, cfg.strides[i], 1, rng, cfg.dtype)
            for i in range(self.LAYERS)
        ]
        self.u_states = []
        self.sigma_buf = np.ones(self.LAYERS, dtype=cfg.dtype)
        for conv in self.convs:
            outc = conv.kernel.shape[0]
            cols = conv.kernel.numel() // outc
            self.u_states.append(init_u_state(outc, cols, rng, cfg.sn_block, cfg.dtype))
        self.training = True
        self.refresh_spectral_norm(iters=cfg.sn_iters)

    def train(self, mode: bool = True) -> "DiscriminatorNet":
        self.training = mode
        return self

    def refresh_spectral_norm(self, iters: Optional[int] = None) -> list:
        """Advance the persistent power-iteration state; returns the sigmas."""
        iters = iters if iters is not None else self.config.sn_iters
        for i, conv in enumerate(self.convs):
            outc = conv.kernel.shape[0]
            mat = conv.kernel.data.reshape(outc, -1)
            if not np.any(mat):
                self.sigma_buf[i] = SN_EPS
                continue
            sigma, u = power_iteration(mat, self.u_states[i], iters)
            self.u_states[i][...] = u
            self.sigma_buf[i] = max(sigma, SN_EPS)
        return [float(s) for s in self.sigma_buf]

    def forward(self, img: Tensor) -> Tensor:
        if img.shape[1] != 3:
            raise tz.DimensionError(f"discriminator expects 3 channels, got {img.shape[1]}")
        h = img
        for i, conv in enumerate(self.convs):
            kernel = tz.scale(conv.kernel, 1.0 / float(self.sigma_buf[i]))
            h = tz.conv2d(h, kernel, conv.bias, conv.stride, conv.padding)
            if i < self.LAYERS - 1:
                h = tz.leaky_relu(h, LEAKY_SLOPE)
        return h

    __call__ = forward

    def named_parameters(self) -> Iterator[tuple]:
        for i, conv in enumerate(self.convs):
            yield from ((f"conv.{i}.{n}", p) for n, p in conv.parameters())

    def named_buffers(self) -> Iterator[tuple]:
        for i, u in enumerate(self.u_states):
            yield (f"conv.{i}.sn_u", u)
        yield ("sn_sigma", self.sigma_buf)


# ---------------------------------------------------------------------------
# parameter counting and the weight archive
# ---------------------------------------------------------------------------


def count_parameters(net) -> int:
    """Exact count of trainable scalars (buffers excluded)."""
    return sum(p.numel() for _, p in net.named_parameters())


ARCHIVE_MAGIC = b"FGW1"


def write_archive(path, entries) -> bytes:
    """Serialize (name, array) pairs: magic, u32 header length, JSON
    descriptor, then float32 little-endian payloads in descriptor order."""
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise WeightArchiveError(f"duplicate archive entry names: {names}")
    header = json.dumps({
        "format": 1,
        "dtype": "<f4",
        "entries": [[name, list(np.asarray(arr).shape)] for name, arr in entries],
    }).encode("utf-8")
    blob = bytearray()
    blob += ARCHIVE_MAGIC
    blob += struct.pack("<I", len(header))
    blob += header
    for _, arr in entries:
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    data = bytes(blob)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def read_archive(path) -> dict:
    """Parse an archive into an ordered name -> float32 array mapping."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != ARCHIVE_MAGIC:
        raise ArchiveFormatError(f"{path}: bad magic bytes, not a weight archive")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise ArchiveTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
        entries = [(str(name), tuple(int(s) for s in shape)) for name, shape in header["entries"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ArchiveFormatError(f"{path}: corrupt header descriptor: {exc}") from exc
    out = {}
    offset = 8 + header_len
    for name, shape in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if offset + nbytes > len(raw):
            raise ArchiveTruncatedError(f"{path}: payload truncated at entry '{name}'")
        out[name] = np.frombuffer(raw[offset:offset + nbytes], dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ArchiveFormatError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return out


def _archive_entries(net):
    for name, p in net.named_parameters():
        yield name, p.data
    for name, b in net.named_buffers():
        yield name, b


def save_weights(net, path) -> bytes:
    return write_archive(path, list(_archive_entries(net)))


def load_weights(net, path) -> None:
    """Fill ``net`` from an archive; every entry must match by name and shape."""
    archive = read_archive(path)
    for name, target in _archive_entries(net):
        if name not in archive:
            raise ArchiveShapeError(f"{path}: missing entry '{name}'")
        arr = archive.pop(name)
        if arr.shape != target.shape:
            raise ArchiveShapeError(
                f"{path}: entry '{name}' has shape {arr.shape}, expected {target.shape}")
        target[...] = arr.astype(target.dtype)
    if archive:
        raise ArchiveShapeError(f"{path}: unexpected entries {sorted(archive)}")
