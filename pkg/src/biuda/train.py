"""Training orchestration: decompose-recompose data flow, alternating
generator/discriminator updates, polynomial learning-rate decay, ablation
variants, upper-bound supervised training, checkpointing, and inference.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from . import data as data_mod
from .errors import ConfigurationError, NumericalError
from .losses import (
    LossParts,
    LossReport,
    LossWeights,
    cpc_loss,
    cycle_loss,
    gan_loss_d,
    gan_loss_g,
    lc_loss,
    one_hot,
    seg_loss,
    total_loss,
)
from .networks import NetworkConfig, Networks, build_networks

VARIANTS = ("source_only", "drpl", "drpl_cpc", "drpl_cpc_lc", "full")

LOG_COLUMNS = (
    "iteration",
    "cpc_s",
    "cpc_t",
    "lc",
    "cycle_s",
    "cycle_t",
    "gan_s2t",
    "gan_t2s",
    "total",
    "d_loss",
    "lr_content",
    "lr_pattern",
    "lr_generator",
    "lr_discriminator",
)


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr_content: float = 2.5e-4
    momentum: float = 0.9
    lr_pattern: float = 1.0e-3
    lr_generator: float = 1.0e-3
    lr_discriminator: float = 1.0e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    poly_power: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "full"
    augment: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        for name in ("lr_content", "lr_pattern", "lr_generator", "lr_discriminator"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}"
            )
        self.weights.validate()


def _scalar(value: torch.Tensor | float) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def poly_decay(lr0: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """lr0 * (1 - iteration/max_iter)**power, clamped to 0 past max_iter."""
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    if iteration >= max_iter:
        return 0.0
    return lr0 * (1.0 - iteration / max_iter) ** power


def _variant_flags(variant: str) -> tuple[bool, bool, bool, bool]:
    """(adversarial, use_cpc, use_lc, domain_aware) for a variant name."""
    if variant == "source_only":
        return False, False, False, False
    if variant == "drpl":
        return True, False, False, False
    if variant == "drpl_cpc":
        return True, True, False, False
    if variant == "drpl_cpc_lc":
        return True, True, True, False
    if variant == "full":
        return True, True, True, True
    raise ConfigurationError(f"unknown variant {variant!r}")


def _to_batch(
    samples: Sequence[data_mod.ImageSample],
    indices: np.ndarray,
    rng: np.random.Generator,
    augment: bool,
    num_classes: int,
    with_masks: bool,
) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    images = []
    masks = []
    for idx in indices:
        s = samples[int(idx)]
        img, msk = s.image, (s.mask if with_masks else None)
        if augment:
            margin = int(round(data_mod.CROP_MARGIN * img.shape[0]))
            dy = int(rng.integers(0, 2 * margin + 1))
            dx = int(rng.integers(0, 2 * margin + 1))
            flip = bool(rng.random() < 0.5)
            angle = float(rng.uniform(-data_mod.MAX_ROTATION_DEG, data_mod.MAX_ROTATION_DEG))
            img, msk = data_mod.apply_augment(img, msk, dy, dx, flip, angle)
        images.append(torch.from_numpy(img).unsqueeze(0))
        if with_masks:
            masks.append(torch.from_numpy(msk.astype(np.int64)))
    x = torch.stack(images)
    if not with_masks:
        return x, None
    labels = torch.stack(masks)
    return x, one_hot(labels, num_classes)


class Trainer:
    """Runs the alternating scheme over paired source/target sample pools.

    Target masks are never touched: target batches are assembled from the
    image field only, which the UDA purity test relies on.
    """

    def __init__(
        self,
        net_config: NetworkConfig,
        train_config: TrainConfig,
        source_samples: Sequence[data_mod.ImageSample],
        target_samples: Sequence[data_mod.ImageSample] = (),
    ):
        train_config.validate()
        adversarial, self.use_cpc, self.use_lc, domain_aware = _variant_flags(
            train_config.variant
        )
        if adversarial and not target_samples:
            raise ConfigurationError("adversarial variants need target-domain samples")
        if not source_samples:
            raise ConfigurationError("no source-domain samples")
        self.net_config = replace(net_config, domain_aware=domain_aware)
        self.train_config = train_config
        self.adversarial = adversarial
        self.source_samples = list(source_samples)
        self.target_samples = list(target_samples)
        self.nets = build_networks(self.net_config, train_config.seed, adversarial=adversarial)
        self.rng = np.random.default_rng(np.random.SeedSequence((train_config.seed, 0xB41C)))
        self.iteration = 0

        gen_side = [
            {"params": list(self.nets.content_encoder.parameters())
             + list(self.nets.segmenter.parameters())}
        ]
        self.opt_content = torch.optim.SGD(
            gen_side, lr=train_config.lr_content, momentum=train_config.momentum
        )
        if adversarial:
            self.opt_pattern = torch.optim.Adam(
                self.nets.pattern_encoders.parameters(),
                lr=train_config.lr_pattern,
                betas=train_config.adam_betas,
            )
            self.opt_generator = torch.optim.Adam(
                self.nets.generator.parameters(),
                lr=train_config.lr_generator,
                betas=train_config.adam_betas,
            )
            self.opt_discriminator = torch.optim.Adam(
                self.nets.discriminators.parameters(),
                lr=train_config.lr_discriminator,
                betas=train_config.adam_betas,
            )
        else:
            self.opt_pattern = None
            self.opt_generator = None
            self.opt_discriminator = None

    # -- learning-rate schedule -------------------------------------------------

    def current_lrs(self) -> dict[str, float]:
        cfg = self.train_config
        i, n, p = self.iteration, cfg.iterations, cfg.poly_power
        lrs = {"lr_content": poly_decay(cfg.lr_content, i, n, p)}
        if self.adversarial:
            lrs["lr_pattern"] = poly_decay(cfg.lr_pattern, i, n, p)
            lrs["lr_generator"] = poly_decay(cfg.lr_generator, i, n, p)
            lrs["lr_discriminator"] = poly_decay(cfg.lr_discriminator, i, n, p)
        else:
            lrs["lr_pattern"] = lrs["lr_generator"] = lrs["lr_discriminator"] = 0.0
        return lrs

    def _apply_lrs(self, lrs: dict[str, float]) -> None:
        self.opt_content.param_groups[0]["lr"] = lrs["lr_content"]
        if self.adversarial:
            self.opt_pattern.param_groups[0]["lr"] = lrs["lr_pattern"]
            self.opt_generator.param_groups[0]["lr"] = lrs["lr_generator"]
            self.opt_discriminator.param_groups[0]["lr"] = lrs["lr_discriminator"]

    # -- batches ------------------------------------------------------------------

    def _draw(self, samples, with_masks: bool):
        idx = self.rng.integers(0, len(samples), size=self.train_config.batch_size)
        return _to_batch(
            samples,
            idx,
            self.rng,
            self.train_config.augment,
            self.net_config.num_classes,
            with_masks,
        )

    def draw_batches(self):
        x_s, a_s = self._draw(self.source_samples, with_masks=True)
        x_t = None
        if self.adversarial:
            x_t, _ = self._draw(self.target_samples, with_masks=False)
        return x_s, a_s, x_t

    # -- one optimization step ----------------------------------------------------

    def train_step(
        self,
        batch_s: tuple[torch.Tensor, torch.Tensor],
        batch_t: Optional[torch.Tensor],
    ) -> LossReport:
        cfg = self.train_config
        w = cfg.weights
        self.nets.train()
        self._apply_lrs(self.current_lrs())
        x_s, a_s = batch_s

        if not self.adversarial:
            self.opt_content.zero_grad(set_to_none=True)
            m_s = self.nets.segment(self.nets.content_encode(x_s))
            lc = seg_loss(a_s, m_s, w.dice_eps, w.log_eps)
            total = w.lc * lc
            self._abort_if_bad({"lc": lc}, total)
            total.backward()
            self.opt_content.step()
            self.iteration += 1
            return LossReport(lc=_scalar(lc), total=_scalar(total), d_loss=None)

        if batch_t is None:
            raise ConfigurationError("adversarial variant requires a target batch")
        x_t = batch_t

        # Phase A: update content/pattern encoders, generator, segmenter.
        self.opt_content.zero_grad(set_to_none=True)
        self.opt_pattern.zero_grad(set_to_none=True)
        self.opt_generator.zero_grad(set_to_none=True)

        c_s = self.nets.content_encode(x_s)
        c_t = self.nets.content_encode(x_t)
        p_s = self.nets.pattern_encode(x_s, 0)
        p_t = self.nets.pattern_encode(x_t, 1)
        recon_s = self.nets.generate(c_s, p_s)
        recon_t = self.nets.generate(c_t, p_t)
        trans_s2t = self.nets.generate(c_s, p_t)
        trans_t2s = self.nets.generate(c_t, p_s)

        parts = LossParts()
        if self.use_cpc:
            parts.cpc_s = cpc_loss(
                c_s, self.nets.content_encode(recon_s), p_s, self.nets.pattern_encode(recon_s, 0)
            )
            parts.cpc_t = cpc_loss(
                c_t, self.nets.content_encode(recon_t), p_t, self.nets.pattern_encode(recon_t, 1)
            )
        m_s = self.nets.segment(c_s)
        if self.use_lc:
            m_s_trans = self.nets.segment(self.nets.content_encode(trans_s2t))
            parts.lc = lc_loss(a_s, m_s, m_s_trans, w.dice_eps, w.log_eps)
        else:
            parts.lc = seg_loss(a_s, m_s, w.dice_eps, w.log_eps)
        parts.cycle_s = cycle_loss(x_s, recon_s)
        parts.cycle_t = cycle_loss(x_t, recon_t)
        parts.gan_s2t = gan_loss_g(self.nets.discriminate(trans_s2t, 0), w.log_eps)
        parts.gan_t2s = gan_loss_g(self.nets.discriminate(trans_t2s, 1), w.log_eps)

        total = total_loss(parts, w)
        self._abort_if_bad(dict(parts.named()), total)
        total.backward()
        self.opt_content.step()
        self.opt_pattern.step()
        self.opt_generator.step()

        # Phase B: update the discriminator on detached recompositions.
        self.opt_discriminator.zero_grad(set_to_none=True)
        d_s2t = gan_loss_d(
            self.nets.discriminate(x_t, 0),
            self.nets.discriminate(trans_s2t.detach(), 0),
            w.log_eps,
        )
        d_t2s = gan_loss_d(
            self.nets.discriminate(x_s, 1),
            self.nets.discriminate(trans_t2s.detach(), 1),
            w.log_eps,
        )
        d_loss = d_s2t + d_t2s
        if not torch.isfinite(d_loss):
            raise NumericalError(
                f"loss term d_loss is not finite at iteration {self.iteration}"
            )
        d_loss.backward()
        self.opt_discriminator.step()

        self.iteration += 1
        return LossReport(
            cpc_s=_scalar(parts.cpc_s),
            cpc_t=_scalar(parts.cpc_t),
            lc=_scalar(parts.lc),
            cycle_s=_scalar(parts.cycle_s),
            cycle_t=_scalar(parts.cycle_t),
            gan_s2t=_scalar(parts.gan_s2t),
            gan_t2s=_scalar(parts.gan_t2s),
            total=_scalar(total),
            d_loss=_scalar(d_loss),
        )

    def _abort_if_bad(self, named_parts: dict, total: torch.Tensor) -> None:
        for name, value in named_parts.items():
            v = value if isinstance(value, torch.Tensor) else torch.as_tensor(float(value))
            if not torch.isfinite(v).all():
                raise NumericalError(
                    f"loss term {name} is not finite at iteration {self.iteration}"
                )
        if not torch.isfinite(total):
            raise NumericalError(
                f"total loss is not finite at iteration {self.iteration}"
            )

    def step(self) -> LossReport:
        x_s, a_s, x_t = self.draw_batches()
        return self.train_step((x_s, a_s), x_t)

    # -- state --------------------------------------------------------------------

    def state_checkpoint(self) -> "Checkpoint":
        optimizers = {"content": self.opt_content.state_dict()}
        if self.adversarial:
            optimizers["pattern"] = self.opt_pattern.state_dict()
            optimizers["generator"] = self.opt_generator.state_dict()
            optimizers["discriminator"] = self.opt_discriminator.state_dict()
        return Checkpoint(
            network_config=self.net_config,
            train_config=self.train_config,
            iteration=self.iteration,
            components={
                name: module.state_dict()
                for name, module in self.nets.named_children()
                if len(list(module.state_dict())) > 0
            },
            optimizers=optimizers,
            rng_state=self.rng.bit_generator.state,
        )

    @classmethod
    def from_checkpoint(
        cls,
        ckpt: "Checkpoint",
        source_samples: Sequence[data_mod.ImageSample],
        target_samples: Sequence[data_mod.ImageSample] = (),
    ) -> "Trainer":
        if ckpt.train_config is None or ckpt.optimizers is None:
            raise ConfigurationError("checkpoint does not carry a resumable train state")
        trainer = cls(ckpt.network_config, ckpt.train_config, source_samples, target_samples)
        trainer.nets.load_state_dict(_flatten_components(ckpt.components), strict=True)
        trainer.opt_content.load_state_dict(ckpt.optimizers["content"])
        if trainer.adversarial:
            trainer.opt_pattern.load_state_dict(ckpt.optimizers["pattern"])
            trainer.opt_generator.load_state_dict(ckpt.optimizers["generator"])
            trainer.opt_discriminator.load_state_dict(ckpt.optimizers["discriminator"])
        trainer.iteration = ckpt.iteration
        if ckpt.rng_state is not None:
            trainer.rng.bit_generator.state = ckpt.rng_state
        return trainer


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    network_config: NetworkConfig
    iteration: int
    components: dict[str, dict]
    train_config: Optional[TrainConfig] = None
    optimizers: Optional[dict[str, dict]] = None
    rng_state: Optional[dict] = None

    def inference_only(self) -> "Checkpoint":
        kept = {
            k: v for k, v in self.components.items() if k in ("content_encoder", "segmenter")
        }
        return Checkpoint(
            network_config=self.network_config, iteration=self.iteration, components=kept
        )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": 1,
        "network_config": asdict(ckpt.network_config),
        "train_config": asdict(ckpt.train_config) if ckpt.train_config else None,
        "iteration": ckpt.iteration,
        "components": ckpt.components,
        "optimizers": ckpt.optimizers,
        "rng_state": ckpt.rng_state,
    }
    torch.save(payload, path)


def _net_config_from_dict(raw: dict) -> NetworkConfig:
    raw = dict(raw)
    raw["pool_scales"] = tuple(raw.get("pool_scales", (1, 2, 4)))
    return NetworkConfig(**raw)


def _train_config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    raw["weights"] = LossWeights(**raw["weights"])
    raw["adam_betas"] = tuple(raw["adam_betas"])
    return TrainConfig(**raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    train_config = payload.get("train_config")
    return Checkpoint(
        network_config=_net_config_from_dict(payload["network_config"]),
        iteration=payload["iteration"],
        components=payload["components"],
        train_config=_train_config_from_dict(train_config) if train_config else None,
        optimizers=payload.get("optimizers"),
        rng_state=payload.get("rng_state"),
    )


def _flatten_components(components: dict[str, dict]) -> dict:
    flat = {}
    for name, state in components.items():
        for key, value in state.items():
            flat[f"{name}.{key}"] = value
    return flat


def networks_from_checkpoint(ckpt: Checkpoint) -> Networks:
    """Rebuild whatever components the checkpoint carries; others stay absent."""
    adversarial = "generator" in ckpt.components
    nets = build_networks(ckpt.network_config, seed=0, adversarial=adversarial)
    for name, module in nets.named_children():
        if name in ckpt.components:
            module.load_state_dict(ckpt.components[name], strict=True)
    return nets


def infer(ckpt: Checkpoint | str | Path, image: np.ndarray | torch.Tensor) -> np.ndarray:
    """Per-pixel argmax of segment(content_encode(x)); uses only those two nets."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    for needed in ("content_encoder", "segmenter"):
        if needed not in ckpt.components:
            raise ConfigurationError(f"checkpoint lacks required component {needed!r}")
    nets = build_networks(ckpt.network_config, seed=0, adversarial=False)
    nets.content_encoder.load_state_dict(ckpt.components["content_encoder"])
    nets.segmenter.load_state_dict(ckpt.components["segmenter"])
    nets.eval()
    x = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    x = x.unsqueeze(1)  # (B, 1, H, W)
    with torch.inference_mode():
        probs = nets.segment(nets.content_encode(x))
        labels = probs.argmax(dim=1).to(torch.uint8).numpy()
    return labels[0] if squeeze else labels


# -- high-level loops ------------------------------------------------------------


def _write_log_row(writer, iteration: int, report: LossReport, lrs: dict, variant: str) -> None:
    inactive = _inactive_fields(variant)
    row = [iteration]
    for name in LossReport.FIELDS:
        value = getattr(report, name)
        if name in inactive or value is None:
            row.append("")
        else:
            row.append(f"{value:.6f}")
    row.extend(
        f"{lrs[k]:.8f}" for k in ("lr_content", "lr_pattern", "lr_generator", "lr_discriminator")
    )
    writer.writerow(row)


def _inactive_fields(variant: str) -> frozenset[str]:
    adversarial, use_cpc, _, _ = _variant_flags(variant)
    inactive = set()
    if not adversarial:
        inactive.update({"cpc_s", "cpc_t", "cycle_s", "cycle_t", "gan_s2t", "gan_t2s", "d_loss"})
    elif not use_cpc:
        inactive.update({"cpc_s", "cpc_t"})
    return frozenset(inactive)


def train(
    net_config: NetworkConfig,
    train_config: TrainConfig,
    source_samples: Sequence[data_mod.ImageSample],
    target_samples: Sequence[data_mod.ImageSample],
    out_dir: Optional[str | Path] = None,
    checkpoint_every: int = 0,
    log_stream: Optional[io.TextIOBase] = None,
) -> Checkpoint:
    """Run UDA training; returns the final checkpoint and optionally logs/curves.

    Target samples contribute images only; their annotations, if any exist,
    are never read.
    """
    trainer = Trainer(net_config, train_config, source_samples, target_samples)
    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    writer = None
    if log_stream is None and out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = open(out_path / "losses.csv", "w", newline="")
        log_stream = log_file
    if log_stream is not None:
        writer = csv.writer(log_stream)
        writer.writerow(LOG_COLUMNS)
    try:
        for _ in range(train_config.iterations):
            lrs = trainer.current_lrs()
            report = trainer.step()
            if writer is not None:
                _write_log_row(writer, trainer.iteration, report, lrs, train_config.variant)
            if (
                checkpoint_every
                and out_path is not None
                and trainer.iteration % checkpoint_every == 0
            ):
                save_checkpoint(trainer.state_checkpoint(), out_path / "checkpoint.pt")
    finally:
        if log_file is not None:
            log_file.close()
    ckpt = trainer.state_checkpoint()
    if out_path is not None:
        save_checkpoint(ckpt, out_path / "checkpoint.pt")
    return ckpt


def train_upper_bound(
    net_config: NetworkConfig,
    train_config: TrainConfig,
    samples: Sequence[data_mod.ImageSample],
    out_dir: Optional[str | Path] = None,
) -> Checkpoint:
    """Supervised single-domain bound: content encoder + segmenter only."""
    if any(s.mask is None for s in samples):
        raise ConfigurationError("upper-bound training requires masks on every sample")
    cfg = replace(train_config, variant="source_only")
    return train(net_config, cfg, samples, (), out_dir=out_dir)
