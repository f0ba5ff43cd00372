"""Two-phase training of the inpainting network on healthy slices."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .losses import FeatureExtractor, LossConfig, LossWeights, TERM_NAMES, inpainting_loss
from .metrics import image_quality
from .model import InpaintModel, compose, inpaint_forward
from .optim import AdamState, adam_step
from .phantom import HoleSpec, generate_hole_mask
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""


@dataclass
class TrainSchedule:
    phase1_epochs: int = 20
    phase2_epochs: int = 20
    phase1_lr: float = 1e-4
    phase2_lr: float = 5e-5
    batch_size: int = 8
    # BN mode per phase as (encoder, decoder)
    phase1_bn: tuple = ("train", "train")
    phase2_bn: tuple = ("frozen", "train")
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints
    seed: int = 0
    total_epochs: int | None = None

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        total = self.phase1_epochs + self.phase2_epochs
        if self.total_epochs is None:
            self.total_epochs = total
        elif self.total_epochs != total:
            raise ValueError(f"total_epochs={self.total_epochs} but phases sum to {total}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.phase1_lr <= 0 or self.phase2_lr <= 0:
            raise ValueError("learning rates must be > 0")
        for modes in (self.phase1_bn, self.phase2_bn):
            if len(modes) != 2 or any(m not in ("train", "frozen") for m in modes):
                raise ValueError("BN policy must be a pair of 'train'/'frozen'")

    @classmethod
    def paper(cls) -> "TrainSchedule":
        return cls(phase1_epochs=150, phase2_epochs=150)

    def phase_of(self, epoch: int) -> int:
        return 1 if epoch < self.phase1_epochs else 2


class HoleSampler:
    """Draws training hole masks from a fixed pool under random dihedral transforms.

    Generating a mask takes milliseconds, so the pool is built once.  The
    eight flips/rotations keep coverage unchanged, so every sampled mask
    still lies inside the coverage band.  Pool size 0 generates fresh masks.
    """

    def __init__(self, spec: HoleSpec, size: int, pool: int = 256, seed: int = 0):
        self.spec = spec
        self.size = size
        self.rng = np.random.default_rng([seed, 7919])
        self.pool = generate_hole_mask(spec, (size, size), pool, seed=seed)[:, 0] if pool else None

    def sample(self, n: int) -> np.ndarray:
        if self.pool is None:
            return generate_hole_mask(self.spec, (self.size, self.size), n, seed=int(self.rng.integers(2**31)))
        idx = self.rng.integers(len(self.pool), size=n)
        out = np.empty((n, 1, self.size, self.size), dtype=np.float32)
        for k, (i, t) in enumerate(zip(idx, self.rng.integers(8, size=n))):
            m = np.rot90(self.pool[i], t % 4)
            out[k, 0] = m.T if t >= 4 else m
        return out


@dataclass
class TrainResult:
    model: InpaintModel
    history: list = field(default_factory=list)  # one dict per epoch
    best_epoch: int | None = None
    best_state: dict | None = None
    checkpoints: list = field(default_factory=list)

    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def evaluate_inpainting(model: InpaintModel, images, masks, batch_size: int = 16, scale: float = 255.0,
                        ssim_mode: str = "global") -> dict:
    """Mean MSE/PSNR/SSIM of composite outputs against the clean images."""
    vals = {"mse": [], "psnr": [], "ssim": []}
    for i in range(0, len(images), batch_size):
        img = images[i:i + batch_size]
        m = masks[i:i + batch_size]
        comp = compose(inpaint_forward(model, img, m), img, m)
        for a, b in zip(img, comp):
            q = image_quality(a, b, scale, ssim_mode)
            for k in vals:
                vals[k].append(q[k])
    # PSNR is +inf for a perfect slice; average only the finite ones
    finite_psnr = [p for p in vals["psnr"] if math.isfinite(p)]
    return {"mse": float(np.mean(vals["mse"])),
            "psnr": float(np.mean(finite_psnr)) if finite_psnr else math.inf,
            "ssim": float(np.mean(vals["ssim"]))}


def _better(cur: dict, best: dict | None) -> bool:
    # lowest MSE wins; SSIM breaks ties
    if best is None:
        return True
    if cur["mse"] != best["mse"]:
        return cur["mse"] < best["mse"]
    return cur["ssim"] > best["ssim"]


def train(model: InpaintModel, dataset, schedule: TrainSchedule, loss_cfg: LossConfig | LossWeights | None = None,
          extractor: FeatureExtractor | None = None, hole_spec: HoleSpec | None = None,
          validation=None, checkpoint_dir=None, sampler: HoleSampler | None = None,
          restore_best: bool = True, metric_scale: float = 255.0, callback=None) -> TrainResult:
    """Train ``model`` in place and return it with its per-epoch history.

    ``dataset`` is an (N, C, H, W) array of clean slices in [0, 1].
    ``validation`` is an optional (images, masks) pair of held-out slices
    with fixed holes; when given, the epoch with the best validation score
    is tracked and (by default) restored at the end.
    """
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError("training needs a non-empty (N, C, H, W) dataset")
    cfg = model.cfg
    if data.shape[1:] != (cfg.in_channels, cfg.size, cfg.size):
        raise ValueError(f"dataset slices {data.shape[1:]} do not match the network input")
    if loss_cfg is None:
        loss_cfg = LossConfig(LossWeights())
    elif isinstance(loss_cfg, LossWeights):
        loss_cfg = LossConfig(loss_cfg)
    extractor = extractor or FeatureExtractor(cfg.in_channels)
    result = TrainResult(model)
    if schedule.total_epochs == 0:
        return result
    sampler = sampler or HoleSampler(hole_spec or HoleSpec(seed=schedule.seed), cfg.size, seed=schedule.seed)
    params = model.parameters()
    opt = AdamState(lr=schedule.phase1_lr)
    rng = np.random.default_rng([schedule.seed, 31337])
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    best_val = None
    n = data.shape[0]

    for epoch in range(schedule.total_epochs):
        phase = schedule.phase_of(epoch)
        opt.lr = schedule.phase1_lr if phase == 1 else schedule.phase2_lr
        model.set_bn_modes(*(schedule.phase1_bn if phase == 1 else schedule.phase2_bn))
        order = rng.permutation(n)
        sums = dict.fromkeys(("loss",) + TERM_NAMES, 0.0)
        steps = 0
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            gt = data[idx]
            mask = sampler.sample(len(idx))
            for p in params.values():
                p.zero_grad()
            try:
                out = model.forward(Tensor(gt), mask, training=True)
                total, terms = inpainting_loss(out, gt, mask, extractor, loss_cfg)
                value = total.item()
                if not math.isfinite(value):
                    raise NumericError(f"loss is {value}")
                total.backward()
            except (NumericError, ValueError) as exc:
                raise TrainingError(f"training aborted at epoch {epoch} step {steps}: {exc}") from exc
            adam_step(params, opt)
            sums["loss"] += value
            for k in TERM_NAMES:
                v = terms[k]
                sums[k] += v.item() if isinstance(v, Tensor) else float(v)
            steps += 1
        record = {"epoch": epoch, "phase": phase, "lr": opt.lr}
        record.update({k: v / max(steps, 1) for k, v in sums.items()})
        if validation is not None:
            val = evaluate_inpainting(model, validation[0], validation[1], scale=metric_scale)
            record.update({f"val_{k}": v for k, v in val.items()})
            if _better(val, best_val):
                best_val = val
                result.best_epoch = epoch
                result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
                if ckdir is not None:
                    fileio.save_checkpoint(ckdir / "best.apck", result.best_state)
        result.history.append(record)
        log.info("epoch %d phase %d loss %.5f", epoch, phase, record["loss"])
        if ckdir is not None and schedule.checkpoint_every and (epoch + 1) % schedule.checkpoint_every == 0:
            path = ckdir / f"epoch{epoch + 1:04d}.apck"
            fileio.save_checkpoint(path, model.state_dict())
            result.checkpoints.append(path)
        if callback is not None:
            callback(record)

    if restore_best and result.best_state is not None:
        model.load_state_dict(result.best_state)
    return result
