"""Adversarial training: relativistic-average losses, the L1 content
terms, Adam, and a seeded desk-scale training loop.

The discriminator takes several update steps per generator step; both
nets, the optimizer states, and the synthetic data are derived from one
seed, so whole runs replay bit-for-bit.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import fusion
from . import imaging
from . import tensor as tz
from .nn import DiscriminatorConfig, DiscriminatorNet, GeneratorConfig, GeneratorNet
from .tensor import Tensor

LOG_CLAMP = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingBatch:
    y: Tensor      # raw degraded input
    x: Tensor      # ground truth
    x_fe: Tensor   # fusion-enhanced counterpart of y

    def __post_init__(self):
        if not (self.y.shape == self.x.shape == self.x_fe.shape):
            raise tz.DimensionError(
                f"batch tensors must share shape: {self.y.shape}, {self.x.shape}, {self.x_fe.shape}")


@dataclass
class LossWeights:
    lambda_gt: float = 10.0
    lambda_fe: float = 0.5

    def __post_init__(self):
        if self.lambda_gt < 0 or self.lambda_fe < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass
class LogitPair:
    c_real: Tensor
    c_fake: Tensor

    def __post_init__(self):
        if self.c_real.shape != self.c_fake.shape:
            raise tz.DimensionError(
                f"logit maps must share shape: {self.c_real.shape} vs {self.c_fake.shape}")


def rasgan_d_loss(pair: LogitPair, clamp: float = LOG_CLAMP) -> Tensor:
    """Discriminator side of the relativistic-average sigmoid objective.

    Expectations run jointly over batch and patch positions. log(1-sigmoid(z))
    is evaluated as log(sigmoid(-z)), the same value without the cancellation.
    """
    shifted_real = tz.subtract(pair.c_real, tz.mean(pair.c_fake))
    shifted_fake = tz.subtract(pair.c_fake, tz.mean(pair.c_real))
    real_term = tz.mean(tz.clamped_log(tz.sigmoid(shifted_real), clamp))
    fake_term = tz.mean(tz.clamped_log(tz.sigmoid(tz.scale(shifted_fake, -1.0)), clamp))
    return tz.scale(tz.add(real_term, fake_term), -1.0)


def rasgan_g_loss(pair: LogitPair, clamp: float = LOG_CLAMP) -> Tensor:
    """Generator side: the same expression with the real/fake roles swapped."""
    return rasgan_d_loss(LogitPair(c_real=pair.c_fake, c_fake=pair.c_real), clamp)


def ground_truth_l1(x: Tensor, g_y: Tensor) -> Tensor:
    return tz.l1_distance(x, g_y)


def fusion_guide_l1(x_fe: Tensor, g_y: Tensor) -> Tensor:
    return tz.l1_distance(x_fe, g_y)


def total_generator_loss(pair: LogitPair, batch: TrainingBatch, g_y: Tensor,
                         weights: LossWeights, clamp: float = LOG_CLAMP) -> tuple:
    """Adversarial term plus weighted L1 pulls toward the ground truth and
    the fusion-enhanced reference. Returns (total, l_gt, l_fe)."""
    l_gt = ground_truth_l1(batch.x, g_y)
    l_fe = fusion_guide_l1(batch.x_fe, g_y)
    total = tz.add(rasgan_g_loss(pair, clamp),
                   tz.add(tz.scale(l_gt, weights.lambda_gt), tz.scale(l_fe, weights.lambda_fe)))
    return total, l_gt, l_fe


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over named parameter lists."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient on '{name}' at optimizer step {self.t}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= (self.lr * update).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# synthetic desk-scale data
# ---------------------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random low-frequency color field in [0, 1]; kept very smooth so a
    few hundred optimizer steps at the pinned learning rate can fit it."""
    coarse = rng.uniform(0.15, 0.85, (2, 2, 3))
    reps = size // 2
    up = np.repeat(np.repeat(coarse, reps, axis=0), reps, axis=1)
    for _ in range(5):
        up = np.stack([imaging.binomial_blur(up[..., c]) for c in range(3)], axis=-1)
    return np.clip(up, 0.0, 1.0)


def _degrade(rng: np.random.Generator, clean: np.ndarray) -> np.ndarray:
    """Channel attenuation plus a veil, the usual color-cast recipe."""
    attenuation = np.array([
        rng.uniform(0.2, 0.45),   # red dies first
        rng.uniform(0.75, 0.95),
        rng.uniform(0.5, 0.8),
    ])
    veil = np.array([0.08, 0.35, 0.45]) + rng.uniform(-0.04, 0.04, 3)
    transmission = rng.uniform(0.55, 0.8)
    return np.clip(transmission * clean * attenuation + (1 - transmission) * veil, 0.0, 1.0)


def to_signed(img: np.ndarray, dtype=np.float32) -> Tensor:
    """[0,1] image (H,W,3) -> network-range tensor (1,3,H,W) in [-1,1]."""
    chw = np.transpose(img * 2.0 - 1.0, (2, 0, 1))[None]
    return Tensor(chw, dtype=dtype)


def to_unit(t: Tensor) -> np.ndarray:
    """Network-range tensor (N,3,H,W) -> list-like array of [0,1] images."""
    arr = (np.asarray(t.data, dtype=np.float64) + 1.0) / 2.0
    return np.clip(np.transpose(arr, (0, 2, 3, 1)), 0.0, 1.0)


def make_toy_batches(pair_count: int, batch_size: int, size: int, seed: int,
                     dtype=np.float32) -> List[TrainingBatch]:
    """Synthetic (y, x, x_fe) triples: x is a smooth color field, y its
    degraded version, x_fe the fusion enhancement of y."""
    rng = np.random.default_rng(seed)
    triples = []
    for _ in range(pair_count):
        x = _smooth_field(rng, size)
        y = _degrade(rng, x)
        x_fe = fusion.fusion_enhance(y)
        triples.append((y, x, x_fe))
    batches = []
    for start in range(0, pair_count, batch_size):
        chunk = triples[start:start + batch_size]
        if not chunk:
            break
        ys = np.concatenate([to_signed(t[0], dtype).data for t in chunk])
        xs = np.concatenate([to_signed(t[1], dtype).data for t in chunk])
        fes = np.concatenate([to_signed(t[2], dtype).data for t in chunk])
        batches.append(TrainingBatch(y=Tensor(ys), x=Tensor(xs), x_fe=Tensor(fes)))
    return batches


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 300
    d_steps_per_g: int = 5
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    pair_count: int = 4
    batch_size: int = 4
    image_size: int = 32
    seed: int = 0
    log_clamp: float = LOG_CLAMP

    def to_json_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "steps", "d_steps_per_g", "lr", "beta1", "beta2", "adam_eps",
            "pair_count", "batch_size", "image_size", "seed", "log_clamp")}
        d["lambda_gt"] = self.weights.lambda_gt
        d["lambda_fe"] = self.weights.lambda_fe
        return d


@dataclass
class TrainResult:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    curves: dict  # step -> lists: loss_d, loss_g, loss_gt, loss_fe
    config: TrainConfig

    def curves_csv(self) -> str:
        out = io.StringIO()
        out.write("# schema=1\n")
        out.write("step,loss_d,loss_g,loss_gt,loss_fe\n")
        for i in range(len(self.curves["step"])):
            row = (self.curves["step"][i], self.curves["loss_d"][i],
                   self.curves["loss_g"][i], self.curves["loss_gt"][i],
                   self.curves["loss_fe"][i])
            out.write("{},{:.17g},{:.17g},{:.17g},{:.17g}\n".format(*row))
        return out.getvalue()


def _check_finite(value: float, what: str, step: int) -> float:
    if not np.isfinite(value):
        raise TrainingError(f"{what} became non-finite at step {step}")
    return value


def train_toy(config: TrainConfig, data: Optional[List[TrainingBatch]] = None,
              progress: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Alternating schedule: several discriminator updates per generator
    update. Emits one curve row per generator step; loss_d is the final
    discriminator loss of that step's inner updates."""
    if data is None:
        data = make_toy_batches(config.pair_count, config.batch_size,
                                config.image_size, config.seed)
    if not data:
        raise TrainingError("training needs at least one batch")
    gen = GeneratorNet(seed=config.seed)
    disc = DiscriminatorNet(seed=config.seed + 1)
    g_opt = Adam(gen.named_parameters(), lr=config.lr, beta1=config.beta1,
                 beta2=config.beta2, eps=config.adam_eps)
    d_opt = Adam(disc.named_parameters(), lr=config.lr, beta1=config.beta1,
                 beta2=config.beta2, eps=config.adam_eps)
    curves = {"step": [], "loss_d": [], "loss_g": [], "loss_gt": [], "loss_fe": []}

    for step in range(config.steps):
        batch = data[step % len(data)]

        with tz.no_grad():
            fake_fixed = gen(batch.y, batch.x_fe)
        loss_d_value = float("nan")
        for _ in range(config.d_steps_per_g):
            disc.refresh_spectral_norm()
            pair = LogitPair(c_real=disc(batch.x), c_fake=disc(fake_fixed))
            loss_d = rasgan_d_loss(pair, config.log_clamp)
            loss_d_value = _check_finite(loss_d.item(), "discriminator loss", step)
            d_opt.zero_grad()
            tz.backward(loss_d)
            d_opt.step()

        disc.refresh_spectral_norm()
        g_y = gen(batch.y, batch.x_fe)
        pair = LogitPair(c_real=disc(batch.x), c_fake=disc(g_y))
        total, l_gt, l_fe = total_generator_loss(pair, batch, g_y, config.weights,
                                                 config.log_clamp)
        loss_g_value = _check_finite(total.item(), "generator loss", step)
        g_opt.zero_grad()
        d_opt.zero_grad()  # D logits sit in the graph; discard their grads
        tz.backward(total)
        g_opt.step()

        curves["step"].append(step)
        curves["loss_d"].append(loss_d_value)
        curves["loss_g"].append(loss_g_value)
        curves["loss_gt"].append(_check_finite(l_gt.item(), "ground-truth L1", step))
        curves["loss_fe"].append(_check_finite(l_fe.item(), "fusion-guide L1", step))
        if progress is not None:
            progress(step, {k: curves[k][-1] for k in curves})

    return TrainResult(generator=gen, discriminator=disc, curves=curves, config=config)


def held_out_fusion_distance(result: TrainResult, batches: List[TrainingBatch]) -> float:
    """Mean L1 distance between generator output and the fusion reference
    on batches the training never saw."""
    gen = result.generator
    was_training = gen.training
    gen.train(False)
    total = 0.0
    with tz.no_grad():
        for batch in batches:
            g_y = gen(batch.y, batch.x_fe)
            total += tz.l1_distance(g_y, batch.x_fe).item()
    gen.train(was_training)
    return total / len(batches)


# ---------------------------------------------------------------------------
# gradient-check suite
# ---------------------------------------------------------------------------


@dataclass
class GradcheckEntry:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradient_check_suite(seed: int = 0, tolerance: float = 1e-4,
                         include_full_generator: bool = True) -> List[GradcheckEntry]:
    """Finite-difference audit of every differentiable op, plus the total
    generator objective through a full float64 generator on toy inputs."""
    rng = np.random.default_rng(seed)
    entries = []

    def check(name, build, leaves, samples=6):
        worst, _ = tz.finite_difference_check(build, leaves, samples_per_leaf=samples,
                                              rng=np.random.default_rng(seed + len(entries)))
        entries.append(GradcheckEntry(name, worst, tolerance))

    def t(shape, grad=True, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=grad, dtype=np.float64)

    x, k, b = t((2, 3, 6, 6)), t((4, 3, 3, 3)), t((1, 4, 1, 1))
    check("conv2d", lambda: tz.mean(tz.mul(h := tz.conv2d(x, k, b, 2, 1), h)), [x, k, b])
    xt, kt, bt = t((2, 3, 4, 4)), t((3, 2, 4, 4)), t((1, 2, 1, 1))
    check("conv_transpose2d",
          lambda: tz.mean(tz.tanh(tz.conv_transpose2d(xt, kt, bt, 2, 1))), [xt, kt, bt])
    xb = t((4, 2, 3, 3))
    gb = Tensor(1.0 + 0.1 * rng.standard_normal((1, 2, 1, 1)), requires_grad=True, dtype=np.float64)
    bb = t((1, 2, 1, 1))
    check("batch_norm",
          lambda: tz.mean(tz.sigmoid(tz.batch_norm(xb, gb, bb, np.zeros(2), np.ones(2), True))),
          [xb, gb, bb])
    xe, ye = t((2, 2, 4, 4)), t((2, 2, 4, 4))
    check("leaky_relu", lambda: tz.mean(tz.mul(tz.leaky_relu(xe, 0.2), xe)), [xe])
    check("sigmoid", lambda: tz.mean(tz.mul(tz.sigmoid(xe), xe)), [xe])
    check("tanh", lambda: tz.mean(tz.mul(tz.tanh(xe), xe)), [xe])
    check("add_subtract_scale",
          lambda: tz.mean(tz.mul(tz.add(xe, tz.scale(ye, 0.7)), tz.subtract(xe, ye))), [xe, ye])
    check("clamped_log_sigmoid", lambda: tz.mean(tz.clamped_log(tz.sigmoid(xe))), [xe])
    ca, cb = t((1, 2, 3, 3)), t((1, 3, 3, 3))
    check("concat_slice",
          lambda: tz.mean(tz.mul(tz.slice_channels(tz.concat_channels([ca, cb]), 1, 4),
                                 tz.slice_channels(tz.concat_channels([ca, cb]), 0, 3))),
          [ca, cb])
    check("mean", lambda: tz.mean(tz.mul(xe, xe)), [xe])
    check("l1_distance", lambda: tz.l1_distance(xe, ye), [xe, ye])

    if include_full_generator:
        gen = GeneratorNet(seed=seed, config=GeneratorConfig(dtype=np.float64))
        # gentler strides: the 16x16 gradcheck extent cannot feed the
        # standard 32px-minimum patch critic, and this check audits
        # autodiff composition, not patch geometry
        disc = DiscriminatorNet(seed=seed + 1, config=DiscriminatorConfig(
            dtype=np.float64, strides=(2, 2, 1, 1, 1)))
        disc.refresh_spectral_norm(iters=10)
        y = Tensor(rng.uniform(-0.9, 0.9, (4, 3, 16, 16)), dtype=np.float64)
        x = Tensor(rng.uniform(-0.9, 0.9, (4, 3, 16, 16)), dtype=np.float64)
        x_fe = Tensor(rng.uniform(-0.9, 0.9, (4, 3, 16, 16)), dtype=np.float64)
        batch = TrainingBatch(y=y, x=x, x_fe=x_fe)
        weights = LossWeights(lambda_gt=10.0, lambda_fe=0.5)

        def build():
            g_y = gen(batch.y, batch.x_fe)
            pair = LogitPair(c_real=disc(batch.x), c_fake=disc(g_y))
            total, _, _ = total_generator_loss(pair, batch, g_y, weights)
            return total

        leaves = [p for _, p in gen.named_parameters()]
        worst, _ = tz.finite_difference_check(build, leaves, samples_per_leaf=2,
                                              rng=np.random.default_rng(seed + 100))
        entries.append(GradcheckEntry("total_generator_loss/full_generator", worst, tolerance))
    return entries


def gradcheck_table(entries: List[GradcheckEntry]) -> str:
    lines = ["{:<36s} {:>14s} {:>10s}".format("operation", "max_rel_error", "status")]
    for e in entries:
        lines.append("{:<36s} {:>14.3e} {:>10s}".format(
            e.name, e.max_rel_error, "pass" if e.passed else "FAIL"))
    return "\n".join(lines)
