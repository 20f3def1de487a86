"""U-Net generator, PatchGAN discriminator, pix2pix objective and training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .nn import Tensor

log = logging.getLogger(__name__)


class InvalidConfig(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class SizeMismatch(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, checkpoint: Optional[Path]):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


def _channels(base: int, i: int) -> int:
    return base * min(2**i, 8)


@dataclass(frozen=True)
class UNetConfig:
    input_size: int = 256
    base_channels: int = 64
    depth: int = 8
    dropout_rate: float = 0.5
    dropout_blocks: int = 3
    in_channels: int = 3
    out_channels: int = 1

    @classmethod
    def desk(cls, **overrides) -> "UNetConfig":
        return cls(**{"input_size": 64, "base_channels": 8, "depth": 4, **overrides})

    def validate(self) -> None:
        if self.depth < 1 or self.base_channels < 1:
            raise InvalidConfig("depth and base_channels must be >= 1")
        s = self.input_size
        if s < 1 or s & (s - 1):
            raise InvalidConfig(f"input_size {s} is not a power of two")
        if s < 2**self.depth:
            raise InvalidConfig(f"input_size {s} < 2**depth = {2 ** self.depth}")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidConfig("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class PatchGANConfig:
    layers: int = 3
    base_channels: int = 64
    in_channels: int = 4

    @classmethod
    def desk(cls, **overrides) -> "PatchGANConfig":
        return cls(**{"base_channels": 8, **overrides})

    def validate(self, input_size: Optional[int] = None) -> None:
        if self.layers < 1 or self.base_channels < 1:
            raise InvalidConfig("layers and base_channels must be >= 1")
        if input_size is not None and patch_grid_size(input_size, self.layers) < 1:
            raise InvalidConfig(f"input {input_size} too small for {self.layers} discriminator layers")


def patch_grid_size(input_size: int, layers: int) -> int:
    """Side length of the PatchGAN logit grid (k4 s2 p1 blocks, then two k4 s1 p1 convs)."""
    s = input_size
    for _ in range(layers):
        s = (s + 2 - 4) // 2 + 1
        if s < 1:
            return 0
    return s - 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    lam: float = 100.0
    steps: int = 32000
    batch: int = 1
    seed: int = 42
    checkpoint_every: int = 1000
    log_every: int = 1

    def validate(self) -> None:
        if self.steps < 1:
            raise InvalidConfig("steps must be >= 1")
        if self.lam < 0:
            raise InvalidConfig("lambda must be >= 0")
        if self.batch != 1:
            raise InvalidConfig("only batch size 1 is supported")


class DownBlock(nn.Module):
    def __init__(self, c_in, c_out, norm, rng):
        self.conv = nn.Conv2d(c_in, c_out, 4, 2, 1, rng, bias=not norm)
        self.norm = nn.BatchNorm2d(c_out) if norm else None

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return nn.leaky_relu(x, 0.2)


class UpBlock(nn.Module):
    def __init__(self, c_in, c_out, dropout, rng):
        self.conv = nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, rng, bias=False)
        self.norm = nn.BatchNorm2d(c_out)
        self.dropout = dropout

    def forward(self, x, rng):
        x = self.norm(self.conv(x))
        x = nn.dropout(x, self.dropout, rng, self.training)
        return nn.relu(x)


class UNetGenerator(nn.Module):
    def __init__(self, cfg: UNetConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        init = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng([seed, 1])
        chans = [_channels(cfg.base_channels, i) for i in range(cfg.depth)]
        self.down = []
        c_prev = cfg.in_channels
        for i, c in enumerate(chans):
            # outermost and innermost blocks are unnormalised; innermost may be 1x1
            self.down.append(DownBlock(c_prev, c, 0 < i < cfg.depth - 1, init))
            c_prev = c
        self.up = []
        for j in range(cfg.depth - 1):
            c_out = chans[cfg.depth - 2 - j]
            drop = cfg.dropout_rate if j < cfg.dropout_blocks else 0.0
            self.up.append(UpBlock(c_prev, c_out, drop, init))
            c_prev = 2 * c_out
        self.last = nn.ConvTranspose2d(c_prev, cfg.out_channels, 4, 2, 1, init, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.in_channels or x.shape[2:] != (self.cfg.input_size,) * 2:
            raise SizeMismatch(f"generator expects (N, {self.cfg.in_channels}, {self.cfg.input_size}, "
                               f"{self.cfg.input_size}), got {x.shape}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        for j, block in enumerate(self.up):
            x = block(x, self.dropout_rng)
            x = nn.concat([x, skips[-2 - j]], axis=1)
        return nn.tanh(self.last(x))


class PatchGANDiscriminator(nn.Module):
    def __init__(self, cfg: PatchGANConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        init = np.random.default_rng([seed, 2])
        self.blocks = [DownBlock(cfg.in_channels, cfg.base_channels, False, init)]
        c_prev = cfg.base_channels
        for i in range(1, cfg.layers):
            c = _channels(cfg.base_channels, i)
            self.blocks.append(DownBlock(c_prev, c, True, init))
            c_prev = c
        c = _channels(cfg.base_channels, cfg.layers)
        self.penult = nn.Conv2d(c_prev, c, 4, 1, 1, init, bias=False)
        self.penult_norm = nn.BatchNorm2d(c)
        self.out = nn.Conv2d(c, 1, 4, 1, 1, init, bias=True)

    def forward(self, condition: Tensor, candidate: Tensor) -> Tensor:
        if condition.shape[2:] != candidate.shape[2:]:
            raise SizeMismatch(f"condition {condition.shape} and candidate {candidate.shape} differ in size")
        grid = patch_grid_size(condition.shape[2], self.cfg.layers)
        if grid < 1 or patch_grid_size(condition.shape[3], self.cfg.layers) < 1:
            raise SizeMismatch(f"input {condition.shape[2:]} too small for {self.cfg.layers} layers")
        x = nn.concat([condition, candidate], axis=1)
        for block in self.blocks:
            x = block(x)
        x = nn.leaky_relu(self.penult_norm(self.penult(x)), 0.2)
        return self.out(x)


def build_generator(cfg: UNetConfig, seed: int = 0) -> UNetGenerator:
    return UNetGenerator(cfg, seed)


def build_discriminator(cfg: PatchGANConfig, seed: int = 0) -> PatchGANDiscriminator:
    return PatchGANDiscriminator(cfg, seed)


def generator_loss(disc_fake_logits: Tensor, gen_out: Tensor, target: Tensor, lam: float = 100.0):
    """Returns ``(total, adversarial, l1)`` with ``total = adversarial + lam * l1``."""
    if gen_out.shape != target.shape:
        raise nn.ShapeMismatch(f"generator output {gen_out.shape} vs target {target.shape}")
    adv = nn.bce_with_logits(disc_fake_logits, 1.0)
    l1 = nn.mean(nn.abs_(nn.sub(gen_out, target)))
    return nn.add(adv, nn.mul(l1, lam)), adv, l1


def discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    if real_logits.shape != fake_logits.shape:
        raise nn.ShapeMismatch(f"real logits {real_logits.shape} vs fake logits {fake_logits.shape}")
    return nn.add(nn.bce_with_logits(real_logits, 1.0), nn.bce_with_logits(fake_logits, 0.0))


def to_network(image01: np.ndarray) -> np.ndarray:
    """(H, W, C) or (H, W) in [0, 1] -> (1, C, H, W) in [-1, 1]."""
    a = np.asarray(image01, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    return (a.transpose(2, 0, 1)[None] * 2.0 - 1.0).astype(nn.default_dtype())


def from_network(out: np.ndarray) -> np.ndarray:
    """(1, 1, H, W) tanh output -> (H, W) in [0, 1]."""
    return np.clip((np.asarray(out, dtype=np.float64)[0, 0] + 1.0) / 2.0, 0.0, 1.0)


def infer(generator: UNetGenerator, image01: np.ndarray) -> np.ndarray:
    """Visibility map for one input image (dropout off, batch statistics)."""
    s = generator.cfg.input_size
    if np.shape(image01)[:2] != (s, s):
        raise SizeMismatch(f"input is {np.shape(image01)[:2]}, network expects {(s, s)}")
    was_training = generator.training
    generator.eval()
    try:
        with nn.no_grad():
            out = generator(Tensor(to_network(image01)))
    finally:
        generator.train(was_training)
    return from_network(out.data)


def checkpoint_params(gen: UNetGenerator, disc: Optional[PatchGANDiscriminator] = None) -> dict:
    params = {f"generator.{k}": v for k, v in gen.state_dict().items()}
    if disc is not None:
        params.update({f"discriminator.{k}": v for k, v in disc.state_dict().items()})
    return params


def checkpoint_metadata(unet: UNetConfig, disc: PatchGANConfig, train: TrainConfig, step: int,
                        extra: Optional[dict] = None) -> dict:
    meta = {"unet": asdict(unet), "patchgan": asdict(disc), "train": asdict(train), "step": step}
    if extra:
        meta["extra"] = extra
    return meta


def save_models(path, gen, disc, unet, dcfg, tcfg, step, extra: Optional[dict] = None) -> None:
    nn.save_checkpoint(path, checkpoint_params(gen, disc), checkpoint_metadata(unet, dcfg, tcfg, step, extra))


def load_generator(path) -> UNetGenerator:
    return load_generator_with_metadata(path)[0]


def load_generator_with_metadata(path) -> tuple[UNetGenerator, dict]:
    params, meta = nn.load_checkpoint(path)
    cfg = UNetConfig(**meta["unet"])
    gen = UNetGenerator(cfg)
    prefix = "generator."
    gen.load_state_dict({k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)})
    return gen, meta


@dataclass
class TrainResult:
    generator: UNetGenerator
    discriminator: PatchGANDiscriminator
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def train(
    samples: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    unet: UNetConfig,
    disc: PatchGANConfig,
    checkpoint_dir=None,
    log_path=None,
    on_step: Optional[Callable[[dict], None]] = None,
    extra_metadata: Optional[dict] = None,
) -> TrainResult:
    """Alternating discriminator / generator Adam steps over ``(input01, target01)`` pairs.

    Inputs are (H, W, 3) images and targets (H, W) maps, both in [0, 1]; they are scaled
    to [-1, 1] for the network. No crop/flip augmentation.
    """
    cfg.validate()
    unet.validate()
    disc.validate(unet.input_size)
    if len(samples) == 0:
        raise EmptyDataset("no training samples")
    s = unet.input_size
    data = []
    for x, y in samples:
        if np.shape(x)[:2] != (s, s) or np.shape(y)[:2] != (s, s):
            raise SizeMismatch(f"sample of size {np.shape(x)[:2]} does not match input_size {s}")
        data.append((Tensor(to_network(x)), Tensor(to_network(y))))

    gen = UNetGenerator(unet, cfg.seed)
    dis = PatchGANDiscriminator(disc, cfg.seed)
    order_rng = np.random.default_rng([cfg.seed, 3])
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w") if log_path is not None else None
    result = TrainResult(gen, dis)
    last_good: Optional[Path] = None
    snapshot = (checkpoint_params(gen, dis), 0)
    order: list[int] = []

    def adam(params):
        for p in params:
            nn.adam_step(p, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_epsilon)

    try:
        for step in range(1, cfg.steps + 1):
            if not order:
                order = list(order_rng.permutation(len(data)))
            x, y = data[order.pop()]

            fake = gen(x)
            d_loss = discriminator_loss(dis(x, y), dis(x, fake.detach()))
            d_loss.backward()
            adam(dis.parameters())

            g_total, g_adv, g_l1 = generator_loss(dis(x, fake), fake, y, cfg.lam)
            g_total.backward()
            dis.zero_grad()

            losses = (d_loss.item(), g_total.item(), g_adv.item(), g_l1.item())
            if not all(math.isfinite(v) for v in losses):
                if ckpt_dir is not None:
                    last_good = ckpt_dir / f"checkpoint_{snapshot[1]:06d}.ckpt"
                    meta = checkpoint_metadata(unet, disc, cfg, snapshot[1], extra_metadata)
                    nn.save_checkpoint(last_good, snapshot[0], meta)
                raise NonFiniteLoss(step, last_good)
            adam(gen.parameters())

            rec = {"step": step, "d_loss": losses[0], "g_total": losses[1], "g_adv": losses[2], "g_l1": losses[3]}
            if step % cfg.log_every == 0 or step == cfg.steps:
                result.log.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                snapshot = (checkpoint_params(gen, dis), step)
                if ckpt_dir is not None:
                    path = ckpt_dir / f"checkpoint_{step:06d}.ckpt"
                    save_models(path, gen, dis, unet, disc, cfg, step, extra_metadata)
                    result.checkpoints.append(path)
                    last_good = path
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
