"""Config-driven runs: build data from the phantom, train, autoinpaint a
cohort and score it.  Shared by the CLI and the end-to-end tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .losses import FeatureExtractor
from .metrics import aggregate
from .model import InpaintModel, NetConfig, build_network
from .phantom import HoleSpec, Volume, generate_hole_mask, healthy_training_set, healthy_volume, tumoral_volume
from .pipeline import ResidualVolume, autoinpaint_volume, threshold_sweep
from .train import HoleSampler, TrainResult, evaluate_inpainting, train


def make_extractor(cfg: RunConfig) -> FeatureExtractor:
    return FeatureExtractor(cfg.net.in_channels, cfg.loss.extractor_widths, cfg.loss.extractor_seed)


def hole_spec(cfg: RunConfig, seed: int) -> HoleSpec:
    return HoleSpec(coverage=tuple(cfg.train.hole_coverage), seed=seed)


def training_data(cfg: RunConfig):
    """(train images, (val images, fixed val masks)) from the healthy phantom."""
    ph = cfg.phantom
    data = healthy_training_set(ph.train_slices, ph.channels, ph.size, ph.train_seed, ph.slices_per_subject)
    val = None
    if cfg.train.val_slices:
        vimg = healthy_training_set(cfg.train.val_slices, ph.channels, ph.size, ph.val_seed, ph.slices_per_subject)
        vmask = generate_hole_mask(hole_spec(cfg, ph.val_seed), (ph.size, ph.size), cfg.train.val_slices)
        val = (vimg, vmask)
    return data, val


def infer_net_config(state: dict, size: int, slope: float = 0.2) -> NetConfig:
    """Rebuild the architecture from checkpoint tensor names and shapes."""
    depth = sum(1 for k in state if k.startswith("enc") and k.endswith(".feature.weight"))
    if depth == 0 or "head.weight" not in state:
        raise ValueError("checkpoint does not hold an inpainting network")
    widths = tuple(int(state[f"enc{i}.feature.weight"].shape[0]) for i in range(depth))
    w0 = state["enc0.feature.weight"]
    gated = "enc0.gating.weight" in state
    return NetConfig(in_channels=int(w0.shape[1]), depth=depth, widths=widths, kernel=int(w0.shape[-1]),
                     slope=slope, size=size, conv_type="gconv" if gated else "pconv",
                     bn_encoder=tuple(f"enc{i}.bn.gamma" in state for i in range(depth)),
                     bn_decoder=tuple(f"dec{i}.bn.gamma" in state for i in range(depth)))


def model_from_state(state: dict, size: int, slope: float = 0.2) -> InpaintModel:
    model = build_network(infer_net_config(state, size, slope), seed=0)
    model.load_state_dict(state)
    return model


def train_from_config(cfg: RunConfig, data=None, validation="auto", checkpoint_dir=None,
                      callback=None) -> TrainResult:
    seed = cfg.train.seed
    if data is None or validation == "auto":
        gen_data, gen_val = training_data(cfg)
        data = gen_data if data is None else data
        validation = gen_val if validation == "auto" else validation
    model = build_network(cfg.net.build(), seed=seed)
    sampler = HoleSampler(hole_spec(cfg, seed), cfg.net.size, pool=cfg.train.hole_pool, seed=seed)
    return train(model, data, cfg.train.build(), cfg.loss.build(), make_extractor(cfg), validation=validation,
                 checkpoint_dir=checkpoint_dir, sampler=sampler, metric_scale=cfg.metrics.scale,
                 callback=callback)


def eval_cohort(cfg: RunConfig) -> tuple[list[Volume], list[Volume]]:
    """Tumoral and healthy evaluation volumes (subjects disjoint from training)."""
    ph = cfg.phantom
    base = ph.eval_seed * 1000
    tumoral = [tumoral_volume(base + k, ph.eval_slices, ph.tumor_radius, ph.tumor_count, ph.channels, ph.size)
               for k in range(ph.tumoral_subjects)]
    healthy = [healthy_volume(base + 500 + k, ph.eval_slices, ph.channels, ph.size)
               for k in range(ph.healthy_subjects)]
    return tumoral, healthy


@dataclass
class CohortReport:
    tumoral: list  # ResidualVolume per tumoral subject
    healthy: list
    sweep: object  # SweepResult over tumoral subjects
    mean_dice_bracketed: float
    mean_dice_fixed: float
    false_positive_rate: float  # healthy slices passing the size gate
    tumoral_pass_rate: float
    seconds: float

    def summary(self) -> dict:
        s = self.sweep
        return {
            "tumoral_subjects": len(self.tumoral),
            "healthy_subjects": len(self.healthy),
            "[dice]": str(aggregate(s.bracketed("dice"))),
            "[precision]": str(aggregate(s.bracketed("precision"))),
            "[recall]": str(aggregate(s.bracketed("recall"))),
            "dice_fixed": str(aggregate(s.fixed("dice"))),
            "global_theta": s.global_theta,
            "mean_dice_bracketed": self.mean_dice_bracketed,
            "mean_dice_fixed": self.mean_dice_fixed,
            "false_positive_rate": self.false_positive_rate,
            "tumoral_pass_rate": self.tumoral_pass_rate,
            "seconds": self.seconds,
        }


def run_cohort(model: InpaintModel, cfg: RunConfig, tumoral=None, healthy=None, workers: int | None = None) -> CohortReport:
    t0 = time.perf_counter()
    if tumoral is None or healthy is None:
        tumoral, healthy = eval_cohort(cfg)
    params = cfg.pipeline.build()
    ext = make_extractor(cfg)
    workers = cfg.pipeline.workers if workers is None else workers

    def run(vols):
        return [autoinpaint_volume(model, v.image, v.ooi, params, ext, workers, v.subject) for v in vols]

    res_t = run(tumoral)
    res_h = run(healthy)
    sweep = threshold_sweep(res_t, [v.truth[:, 0] for v in tumoral], params.thetas())
    fp = float(np.mean(np.concatenate([r.passed for r in res_h]))) if res_h else 0.0
    tp = float(np.mean(np.concatenate([r.passed for r in res_t]))) if res_t else 0.0
    return CohortReport(res_t, res_h, sweep, float(sweep.bracketed("dice").mean()), float(sweep.fixed("dice").mean()),
                        fp, tp, time.perf_counter() - t0)


def sweep_loss(cfg: RunConfig, coefficient: str, values, callback=None) -> list[dict]:
    """Retrain with one loss coefficient varied; validation quality per value."""
    if not hasattr(cfg.loss, coefficient) or not coefficient.startswith("c_"):
        raise ValueError(f"unknown loss coefficient {coefficient!r}")
    data, val = training_data(cfg)
    if val is None:
        raise ValueError("sweep-loss needs train.val_slices > 0")
    rows = []
    for v in values:
        run_cfg = replace(cfg, loss=replace(cfg.loss, **{coefficient: float(v)}))
        result = train_from_config(run_cfg, data=data, validation=val)
        q = evaluate_inpainting(result.model, val[0], val[1], scale=cfg.metrics.scale, ssim_mode=cfg.metrics.ssim_mode)
        row = {"coefficient": coefficient, "value": float(v), "mse": q["mse"], "psnr": q["psnr"], "ssim": q["ssim"],
               "best_epoch": result.best_epoch}
        rows.append(row)
        if callback is not None:
            callback(row)
    return rows


def residual_volume_array(r: ResidualVolume) -> np.ndarray:
    return r.residual[:, None].astype(np.float32)
