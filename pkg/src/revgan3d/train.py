"""Alternating least-squares GAN training for the paired and unpaired objectives."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import (DegradeSpec, NormSpec, PatchSpec, crop_to_multiple, degrade, list_volumes,
                   load_volume, normalize, sample_pair, smooth)
from .errors import ConfigError, NumericFault, RevGANError
from .loss import (DEFAULT_LAMBDA, LossWeights, gan_loss_discriminator,
                   gan_loss_generator, l1_loss, paired_total, unpaired_total)
from .model import ModelConfig, RevGANModel
from .tensor import Tape, Tensor, backward, last_op_id, no_grad

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
LOG_COLUMNS = ("step", "epoch", "d_x_loss", "d_y_loss", "gan_g", "l1_or_cyc", "total")


class NonFiniteLoss(NumericFault):
    """A training loss became NaN or Inf; carries the step and the last op id."""

    def __init__(self, message, op_id=None, step=None):
        super().__init__(message, op_id)
        self.step = step


@dataclass
class TrainConfig:
    config_version: int = CONFIG_VERSION
    mode: str = "paired"
    task: str = "domain-adaptation"
    epochs: int = 125
    patch_size: int = 64
    depth: int = 2
    lam: float | None = None
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1
    memory: str = "reversible"
    patches_per_volume: int = 1
    base_channels: int = 32
    core_channels: int = 64
    disc_channels: list = field(default_factory=lambda: [32, 64, 128])
    dtype: str = "float32"
    source_dir: str | None = None
    target_dir: str | None = None
    smooth_sigma: float = 1.0
    out_dir: str = "runs/revgan3d"

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {self.config_version}")
        if self.mode not in ("paired", "unpaired"):
            raise ConfigError(f"mode must be 'paired' or 'unpaired', got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.lam is not None and not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.memory not in ("reversible", "naive"):
            raise ConfigError(f"memory must be 'reversible' or 'naive', got {self.memory!r}")
        if self.patches_per_volume < 1 or self.checkpoint_every < 1:
            raise ConfigError("patches_per_volume and checkpoint_every must be >= 1")
        self.disc_channels = [int(c) for c in self.disc_channels]
        self.model_config()

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)

    @property
    def weights(self):
        return LossWeights(DEFAULT_LAMBDA[self.mode] if self.lam is None else self.lam)

    def model_config(self):
        return ModelConfig(task=self.task, depth=self.depth, base_channels=self.base_channels,
                           core_channels=self.core_channels,
                           disc_channels=tuple(self.disc_channels), dtype=self.dtype)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: OptimizerState, lr=2e-4, beta1=0.5, beta2=0.999,
              eps=1e-8):
    """One bias-corrected adaptive-moment update, in place. ``None`` grads count as zero."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params, lr=2e-4, betas=(0.5, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = OptimizerState.zeros_like(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                  self.betas[0], self.betas[1], self.eps)

    def blobs(self, prefix):
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            yield f"{prefix}/m/{i}", m
            yield f"{prefix}/v/{i}", v

    def load_blobs(self, prefix, blobs, step):
        for i in range(len(self.params)):
            self.state.m[i] = blobs[f"{prefix}/m/{i}"].astype(self.params[i].dtype)
            self.state.v[i] = blobs[f"{prefix}/v/{i}"].astype(self.params[i].dtype)
        self.state.step = step


# ---------------------------------------------------------------------------
# steps


@dataclass
class LossRecord:
    step: int
    d_x_loss: float
    d_y_loss: float
    gan_g_x: float
    gan_g_y: float
    rec_x: float
    rec_y: float
    lam: float
    total: float
    epoch: int = 0

    @property
    def gan_g(self):
        return self.gan_g_x + self.gan_g_y

    @property
    def l1_or_cyc(self):
        return self.rec_x + self.rec_y

    def row(self):
        return [self.step, self.epoch] + [repr(float(v)) for v in (
            self.d_x_loss, self.d_y_loss, self.gan_g, self.l1_or_cyc, self.total)]


def make_optimizers(model, config: TrainConfig | None = None):
    c = config or TrainConfig()
    kw = dict(lr=c.lr, betas=(c.beta1, c.beta2), eps=c.adam_eps)
    return Adam(model.generator_parameters(), **kw), Adam(model.discriminator_parameters(), **kw)


def _discriminator_step(model, x, y, fake_x, fake_y, opt_d, update, step=None):
    if not update:
        with no_grad():
            d_y = gan_loss_discriminator(model.d_y(y), model.d_y(fake_y.detach()))
            d_x = gan_loss_discriminator(model.d_x(x), model.d_x(fake_x.detach()))
        return float(d_x.data), float(d_y.data)
    opt_d.zero_grad()
    with Tape():
        d_y = gan_loss_discriminator(model.d_y(y), model.d_y(fake_y.detach()))
        d_x = gan_loss_discriminator(model.d_x(x), model.d_x(fake_x.detach()))
        total = d_x + d_y
    _require_finite(total, "discriminator", step)
    backward(total)
    opt_d.step()
    return float(d_x.data), float(d_y.data)


def _require_finite(loss, what, step=None):
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteLoss(f"{what} loss is {float(loss.data)} at step {step} "
                            f"(last op {last_op_id()})", last_op_id(), step)


def train_step_paired(model: RevGANModel, x: Tensor, y: Tensor, w: LossWeights, opt_g, opt_d,
                      step=0, update_d=True) -> LossRecord:
    """Discriminators first, then the generators (and shared core) on the paired objective."""
    tape = Tape()
    with tape:
        fake_y = model.translate_xy(x)
        fake_x = model.translate_yx(y)
    d_x, d_y = _discriminator_step(model, x, y, fake_x, fake_y, opt_d, update_d, step)

    opt_g.zero_grad()
    with tape:
        gan_g_y = gan_loss_generator(model.d_y(fake_y))
        gan_g_x = gan_loss_generator(model.d_x(fake_x))
        l1_g = l1_loss(fake_y, y)
        l1_f = l1_loss(fake_x, x)
        total = paired_total(gan_g_x, gan_g_y, l1_f, l1_g, w)
    _require_finite(total, "generator", step)
    backward(total)
    opt_g.step()
    return LossRecord(step, d_x, d_y, float(gan_g_x.data), float(gan_g_y.data),
                      float(l1_f.data), float(l1_g.data), w.lam, float(total.data))


def train_step_unpaired(model: RevGANModel, x: Tensor, y: Tensor, w: LossWeights, opt_g, opt_d,
                        step=0, update_d=True) -> LossRecord:
    """As :func:`train_step_paired` but with both cycle terms in place of L1."""
    tape = Tape()
    with tape:
        fake_y = model.translate_xy(x)
        fake_x = model.translate_yx(y)
    d_x, d_y = _discriminator_step(model, x, y, fake_x, fake_y, opt_d, update_d, step)

    opt_g.zero_grad()
    with tape:
        gan_g_y = gan_loss_generator(model.d_y(fake_y))
        gan_g_x = gan_loss_generator(model.d_x(fake_x))
        cyc_x = l1_loss(model.translate_yx(fake_y), x)
        cyc_y = l1_loss(model.translate_xy(fake_x), y)
        total = unpaired_total(gan_g_x, gan_g_y, cyc_x + cyc_y, w)
    _require_finite(total, "generator", step)
    backward(total)
    opt_g.step()
    return LossRecord(step, d_x, d_y, float(gan_g_x.data), float(gan_g_y.data),
                      float(cyc_x.data), float(cyc_y.data), w.lam, float(total.data))


STEP_FNS = {"paired": train_step_paired, "unpaired": train_step_unpaired}


# ---------------------------------------------------------------------------
# data and fit loop


@dataclass
class VolumeSet:
    """Normalised source (X) and target (Y) volumes, index-aligned."""

    sources: list
    targets: list
    names: list

    def __len__(self):
        return len(self.names)


def synthesize_pairs(volumes, task, smooth_sigma=1.0, norm=NormSpec()):
    """Build a VolumeSet from HU volumes alone.

    Super-resolution: the volumes are the high-res targets and the sources
    are their block-mean degradations.  Domain adaptation: the volumes are
    the sharp sources and the targets their Gaussian-smoothed versions.
    """
    sources, targets = [], []
    for v in volumes:
        hu = v.voxels if hasattr(v, "voxels") else np.asarray(v)
        if task == "super-resolution":
            spec = DegradeSpec()
            hr = crop_to_multiple(normalize(hu, norm), spec.factors)
            sources.append(degrade(hr, spec))
            targets.append(hr)
        else:
            sources.append(normalize(hu, norm))
            targets.append(normalize(smooth(hu, smooth_sigma), norm))
    return VolumeSet(sources, targets, [f"vol{i:03d}" for i in range(len(sources))])


def load_dataset(config: TrainConfig, norm=NormSpec()) -> VolumeSet:
    if config.source_dir and config.target_dir:
        src = list_volumes(config.source_dir)
        tgt = list_volumes(config.target_dir)
        if [p.stem for p in src] != [p.stem for p in tgt]:
            raise RevGANError("source and target directories hold different volume names")
        return VolumeSet([normalize(load_volume(p), norm) for p in src],
                         [normalize(load_volume(p), norm) for p in tgt], [p.stem for p in src])
    directory = config.target_dir if config.task == "super-resolution" else config.source_dir
    directory = directory or config.source_dir or config.target_dir
    if not directory:
        raise ConfigError("config needs source_dir and/or target_dir")
    paths = list_volumes(directory)
    vs = synthesize_pairs([load_volume(p) for p in paths], config.task, config.smooth_sigma, norm)
    vs.names = [p.stem for p in paths]
    return vs


def _as_input(a, dtype):
    return Tensor(np.ascontiguousarray(a, dtype=dtype)[None, None])


@dataclass
class FitResult:
    model: RevGANModel
    records: list
    checkpoints: list
    log_path: Path


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        w.writerows(rows)


def fit(config: TrainConfig, dataset: VolumeSet, out_dir=None, resume=False,
        on_step=None) -> FitResult:
    """Train for ``config.epochs`` epochs of ``len(dataset) * patches_per_volume`` steps.

    Checkpoints (model, optimiser moments, RNG position) are written every
    ``checkpoint_every`` epochs as ``epoch_NNNN.rg3d`` plus ``latest.rg3d``.
    With ``resume=True`` training continues from ``latest.rg3d`` and the run
    is bit-identical to an uninterrupted one.
    """
    if len(dataset) == 0:
        raise RevGANError("dataset is empty")
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.csv"
    latest = out / "latest.rg3d"

    rng = np.random.default_rng(config.seed)
    model = RevGANModel(config.model_config(), rng=rng, memory=config.memory)
    opt_g, opt_d = make_optimizers(model, config)
    w = config.weights
    dtype = model.config.np_dtype
    scale = model.config.y_scale
    spec = PatchSpec(config.patch_size, paired=config.mode == "paired")
    step_fn = STEP_FNS[config.mode]

    start_epoch, step, rows = 0, 0, []
    if resume and latest.exists():
        _, header, blobs = checkpoint.load_model(latest, memory=config.memory)
        for name, p in model.named_parameters():
            p.data = blobs[f"param/{name}"].astype(p.dtype)
        st = header["state"]
        opt_g.load_blobs("opt_g", blobs, st["opt_g_step"])
        opt_d.load_blobs("opt_d", blobs, st["opt_d_step"])
        rng.bit_generator.state = st["rng"]
        start_epoch, step = st["epoch"], st["step"]
        if log_path.exists():
            with open(log_path, newline="") as fh:
                rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) <= step]
        log.info("resumed from %s at epoch %d, step %d", latest, start_epoch, step)
    _write_log(log_path, rows)

    records, ckpts = [], []
    n = len(dataset)
    try:
        for epoch in range(start_epoch, config.epochs):
            order = np.repeat(rng.permutation(n), config.patches_per_volume)
            for idx in order:
                step += 1
                if spec.paired:
                    xp, yp, _ = sample_pair(dataset.sources[idx], dataset.targets[idx], spec,
                                            rng, scale)
                else:
                    j = int(rng.integers(n))
                    xp, yp, _ = sample_pair(dataset.sources[idx], dataset.targets[j], spec,
                                            rng, scale)
                rec = step_fn(model, _as_input(xp, dtype), _as_input(yp, dtype), w, opt_g,
                              opt_d, step=step)
                rec.epoch = epoch + 1
                records.append(rec)
                with open(log_path, "a", newline="") as fh:
                    csv.writer(fh).writerow(rec.row())
                if on_step is not None:
                    on_step(rec, model)
            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
                state = {"epoch": epoch + 1, "step": step, "rng": rng.bit_generator.state,
                         "opt_g_step": opt_g.state.step, "opt_d_step": opt_d.state.step,
                         "train_config": config.to_dict()}
                extra = list(opt_g.blobs("opt_g")) + list(opt_d.blobs("opt_d"))
                path = checkpoint.save_model(out / f"epoch_{epoch + 1:04d}.rg3d", model, state,
                                             extra)
                checkpoint.save_model(latest, model, state, extra)
                ckpts.append(path)
    except KeyboardInterrupt:
        checkpoint.save_model(out / "interrupted.rg3d", model,
                              {"step": step, "train_config": config.to_dict()})
        log.warning("interrupted at step %d; weights saved to interrupted.rg3d", step)
        raise
    return FitResult(model, records, ckpts, log_path)
