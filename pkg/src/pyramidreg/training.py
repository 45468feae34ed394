"""Unsupervised training loop, pair sampling and inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint, save_checkpoint
from .losses import LossConfig, total_loss
from .pyramid import MODES, RegistrationNet, RegistrationOutput

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    iterations: int = 2000
    seed: int = 0
    mode: str = "pyramid"
    loss: LossConfig = field(default_factory=LossConfig)
    encoder_channels: tuple = (8, 16, 16, 16)
    decoder_channels: int = 8
    input_shape: tuple = (32, 32, 32)
    checkpoint_every: int = 0
    augment: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def enumerate_pairs(subjects) -> list:
    """All ordered (moving, fixed) pairs of distinct subjects: n * (n - 1) of them."""
    subjects = list(subjects)
    if len(subjects) < 2:
        raise ValueError(f"need at least 2 subjects to form pairs, got {len(subjects)}")
    return [
        (subjects[i], subjects[j])
        for i in range(len(subjects))
        for j in range(len(subjects))
        if i != j
    ]


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Dataset indices used at ``step``: a pure function of (seed, epoch, position).

    Pairs are drawn without replacement from a per-epoch shuffle; a batch may
    straddle an epoch boundary.
    """
    out = []
    for t in range(step * batch_size, (step + 1) * batch_size):
        epoch, k = divmod(t, n)
        out.append(int(epoch_permutation(n, seed, epoch)[k]))
    return out


def symmetry_transform(seed: int, step: int, slot: int):
    """One of the 48 axis permutations/flips of the cube, fixed by (seed, step, slot)."""
    rng = np.random.default_rng([seed, step, slot, 7])
    return tuple(int(a) for a in rng.permutation(3)), tuple(bool(f) for f in rng.integers(0, 2, 3))


def apply_symmetry(vol: np.ndarray, transform) -> np.ndarray:
    perm, flips = transform
    vol = np.asarray(vol)
    # only swap axes of equal extent so the shape never changes
    if tuple(vol.shape[a] for a in perm) != vol.shape:
        perm = (0, 1, 2)
    out = np.transpose(vol, perm)
    axes = tuple(a for a in range(3) if flips[a])
    return np.ascontiguousarray(np.flip(out, axes) if axes else out)


def init_params(config: TrainConfig) -> RegistrationNet:
    """Fresh network: fan-in scaled backbone convolutions, zero field heads."""
    model = RegistrationNet(config.encoder_channels, config.decoder_channels, config.mode)
    gen = torch.Generator().manual_seed(int(config.seed))
    for module in model.backbone.modules():
        if isinstance(module, nn.Conv3d):
            nn.init.kaiming_normal_(module.weight, nonlinearity="relu", generator=gen)
            nn.init.zeros_(module.bias)
    return model


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0
    )


def _stack(volumes) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(v, dtype=np.float32) for v in volumes]))[:, None]


@dataclass
class TrainState:
    config: TrainConfig
    model: RegistrationNet
    optimizer: torch.optim.Adam
    iteration: int = 0
    history: list = field(default_factory=list)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config.to_dict(),
            model_state=self.model.state_dict(),
            optimizer_state=self.optimizer.state_dict(),
            iteration=self.iteration,
            history=list(self.history),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: TrainConfig | None = None) -> "TrainState":
        stored = TrainConfig.from_dict(ckpt.config)
        config = config or stored
        model = RegistrationNet(stored.encoder_channels, stored.decoder_channels, stored.mode)
        model.load_state_dict(ckpt.model_state)
        optimizer = make_optimizer(model, config)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        return cls(config, model, optimizer, ckpt.iteration, list(ckpt.history))


def train(pairs, config: TrainConfig, *, state: TrainState | None = None, on_step=None,
          checkpoint_path=None) -> TrainState:
    """Run Adam on the registration loss until ``config.iterations`` steps are done.

    ``pairs`` is a sequence of ``(moving, fixed)`` arrays shaped like
    ``config.input_shape``. Passing ``state`` resumes from it. ``on_step``
    receives each history record ``{"step", "loss", "nlcc", "smooth"}``.
    """
    if len(pairs) == 0:
        raise ValueError("training needs at least one pair")
    for moving, fixed in pairs:
        if tuple(np.shape(moving)) != config.input_shape or tuple(np.shape(fixed)) != config.input_shape:
            raise ValueError(
                f"pair shapes {np.shape(moving)}, {np.shape(fixed)} do not match input_shape {config.input_shape}"
            )
    deepest = [-(-s // 16) for s in config.input_shape]
    if config.batch_size * int(np.prod(deepest)) < 2:
        raise ValueError(
            "batch normalisation needs more than one value per channel at the coarsest level; "
            f"use batch_size >= 2 for input_shape {config.input_shape}"
        )
    if state is None:
        model = init_params(config)
        state = TrainState(config, model, make_optimizer(model, config))
    model, optimizer = state.model, state.optimizer
    model.train()
    while state.iteration < config.iterations:
        step = state.iteration
        idx = batch_indices(len(pairs), config.batch_size, config.seed, step)
        batch = [pairs[i] for i in idx]
        if config.augment:
            # the same symmetry on both volumes keeps every pair a valid registration problem
            tfs = [symmetry_transform(config.seed, step, k) for k in range(len(batch))]
            batch = [(apply_symmetry(m, t), apply_symmetry(f, t)) for (m, f), t in zip(batch, tfs)]
        moving = _stack(m for m, _ in batch)
        fixed = _stack(f for _, f in batch)
        out = model(moving, fixed)
        loss, sim, smooth = total_loss(out, fixed, config.loss)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss at step {step}: nlcc={sim.item()}, smooth={smooth.item()}"
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        record = {"step": step, "loss": loss.item(), "nlcc": sim.item(), "smooth": smooth.item()}
        state.history.append(record)
        state.iteration += 1
        if on_step is not None:
            on_step(record)
        every = config.checkpoint_every
        if checkpoint_path is not None and every and state.iteration % every == 0:
            save_checkpoint(state.checkpoint(), checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(state.checkpoint(), checkpoint_path)
    return state


def model_from_checkpoint(ckpt: Checkpoint) -> RegistrationNet:
    config = TrainConfig.from_dict(ckpt.config)
    model = RegistrationNet(config.encoder_channels, config.decoder_channels, config.mode)
    model.load_state_dict(ckpt.model_state)
    return model.eval()


@torch.no_grad()
def register(moving, fixed, model: RegistrationNet) -> RegistrationOutput:
    """Inference on one pair of (D, H, W) arrays; outputs are unbatched tensors."""
    if np.shape(moving) != np.shape(fixed):
        raise ValueError(f"shape mismatch: moving {np.shape(moving)} vs fixed {np.shape(fixed)}")
    model.eval()
    out = model(_stack([moving]), _stack([fixed]))

    def first(t):
        return None if t is None else t[0]

    return RegistrationOutput(
        level_fields=[first(t) for t in out.level_fields],
        accumulated=[first(t) for t in out.accumulated],
        final_field=out.final_field[0],
        warped=out.warped[0, 0],
    )


def field_magnitude(u: torch.Tensor) -> float:
    return float(u.pow(2).sum(0).sqrt().mean())

