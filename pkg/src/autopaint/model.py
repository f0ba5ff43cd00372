"""U-Net-like inpainting network built from gated (or partial) convolutions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (
    BNState,
    ConvParams,
    batch_norm2d,
    conv2d,
    downsample_mask,
    gconv2d,
    init_conv,
    pconv2d,
    upsample_mask,
)
from .tensor import Tensor, activation, as_tensor, concat, mul, sigmoid, upsample_nearest


@dataclass
class NetConfig:
    in_channels: int = 2
    depth: int = 4
    widths: tuple = (16, 32, 64, 64)
    kernel: int = 3
    slope: float = 0.2
    size: int = 64
    conv_type: str = "gconv"
    bn_encoder: tuple | None = None
    bn_decoder: tuple | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.in_channels not in (1, 2):
            raise ValueError("in_channels must be 1 or 2")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if len(self.widths) != self.depth:
            raise ValueError("widths must have one entry per encoder block")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.conv_type not in ("gconv", "pconv"):
            raise ValueError("conv_type must be 'gconv' or 'pconv'")
        if self.size % (2 ** self.depth):
            raise ValueError(f"input size {self.size} is not divisible by 2**{self.depth}")
        # first encoder block carries no BN (raw holed input); all others do
        if self.bn_encoder is None:
            self.bn_encoder = (False,) + (True,) * (self.depth - 1)
        if self.bn_decoder is None:
            self.bn_decoder = (True,) * self.depth
        self.bn_encoder = tuple(bool(b) for b in self.bn_encoder)
        self.bn_decoder = tuple(bool(b) for b in self.bn_decoder)
        if len(self.bn_encoder) != self.depth or len(self.bn_decoder) != self.depth:
            raise ValueError("BN flags need one entry per block")

    @property
    def decoder_widths(self) -> tuple:
        d = self.depth
        return tuple(self.widths[d - 2 - k] for k in range(d - 1)) + (self.widths[0],)


@dataclass
class Block:
    feature: ConvParams
    gating: ConvParams | None
    bn: BNState | None


@dataclass
class InpaintModel:
    cfg: NetConfig
    encoder: list = field(default_factory=list)
    decoder: list = field(default_factory=list)
    head: ConvParams = None

    # -- parameter bookkeeping ---------------------------------------------
    def _named_blocks(self):
        for i, b in enumerate(self.encoder):
            yield f"enc{i}", b
        for i, b in enumerate(self.decoder):
            yield f"dec{i}", b

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, b in self._named_blocks():
            out[f"{prefix}.feature.weight"] = b.feature.weight
            out[f"{prefix}.feature.bias"] = b.feature.bias
            if b.gating is not None:
                out[f"{prefix}.gating.weight"] = b.gating.weight
                out[f"{prefix}.gating.bias"] = b.gating.bias
            if b.bn is not None:
                out[f"{prefix}.bn.gamma"] = b.bn.gamma
                out[f"{prefix}.bn.beta"] = b.bn.beta
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def bn_states(self) -> dict[str, BNState]:
        return {f"{prefix}.bn": b.bn for prefix, b in self._named_blocks() if b.bn is not None}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.parameters().items()}
        for name, bn in self.bn_states().items():
            state[f"{name}.running_mean"] = bn.running_mean
            state[f"{name}.running_var"] = bn.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        bns = self.bn_states()
        expected = set(params) | {f"{n}.{s}" for n in bns for s in ("running_mean", "running_var")}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"checkpoint does not match network (missing={missing[:3]}, unexpected={extra[:3]})")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"checkpoint tensor {k} has shape {arr.shape}, network expects {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for n, bn in bns.items():
            bn.running_mean = np.asarray(state[f"{n}.running_mean"], dtype=np.float32).copy()
            bn.running_var = np.asarray(state[f"{n}.running_var"], dtype=np.float32).copy()

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def set_bn_modes(self, encoder: str, decoder: str):
        for b in self.encoder:
            if b.bn is not None:
                b.bn.mode = encoder
        for b in self.decoder:
            if b.bn is not None:
                b.bn.mode = decoder

    # -- forward ---------------------------------------------------------
    def _block(self, b: Block, h: Tensor, mask: np.ndarray, act: str, training: bool):
        cfg = self.cfg
        new_mask = None
        if b.gating is not None:
            h = gconv2d(h, b.feature, b.gating, "identity")
        else:
            h, new_mask = pconv2d(h, mask, b.feature)
        if b.bn is not None:
            h = batch_norm2d(h, b.bn, mode=None if training else "frozen")
        return activation(h, act, cfg.slope), new_mask

    def forward(self, image, mask, training: bool = False) -> Tensor:
        """Raw network output in (0, 1); holes of ``image`` are zeroed first."""
        cfg = self.cfg
        image = as_tensor(image)
        mask = _as_mask(mask, image.shape)
        if image.shape[1:] != (cfg.in_channels, cfg.size, cfg.size):
            raise ValueError(f"input {image.shape} does not match network config "
                             f"({cfg.in_channels}, {cfg.size}, {cfg.size})")
        holed = mul(image, Tensor(np.broadcast_to(mask, image.shape), dtype=image.dtype))
        gated = cfg.conv_type == "gconv"

        skips = [(holed, mask)]
        h, m = holed, mask
        for b in self.encoder:
            h, m_new = self._block(b, h, m, "relu", training)
            m = downsample_mask(m) if gated else m_new
            skips.append((h, m))

        for k, b in enumerate(self.decoder):
            skip_h, skip_m = skips[cfg.depth - 1 - k]
            up = upsample_nearest(h, 2)
            up_m = upsample_mask(m)
            if gated:
                m = np.maximum(up_m, skip_m)
                parts = [up, skip_h, Tensor(skip_m, dtype=image.dtype)]
                h, _ = self._block(b, concat(parts, axis=1), None, "leaky_relu", training)
            else:
                cat_mask = np.concatenate(
                    [np.broadcast_to(up_m, (up.shape[0], up.shape[1]) + up_m.shape[2:]),
                     np.broadcast_to(skip_m, skip_h.shape)], axis=1)
                h, m = self._block(b, concat([up, skip_h], axis=1), cat_mask, "leaky_relu", training)

        head_in = concat([h, holed, Tensor(mask, dtype=image.dtype)], axis=1)
        return sigmoid(conv2d(head_in, self.head))

    __call__ = forward


def _as_mask(mask, image_shape) -> np.ndarray:
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float32)
    n, c, h, w = image_shape
    if mask.ndim == 3:
        mask = mask[:, None]
    if mask.shape[1] != 1:
        if not (mask == mask[:, :1]).all():
            raise ValueError("mask must be shared across channels")
        mask = mask[:, :1]
    if mask.shape != (n, 1, h, w):
        raise ValueError(f"mask {mask.shape} does not fit image {image_shape}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError("mask must be binary")
    return mask


def build_network(cfg: NetConfig, seed: int = 0) -> InpaintModel:
    rng = np.random.default_rng(seed)
    gated = cfg.conv_type == "gconv"
    k = cfg.kernel

    def block(cin, cout, stride, bn):
        feature = init_conv(rng, cin, cout, k, stride, gain=2.0)
        gating = init_conv(rng, cin, cout, k, stride, gain=1.0) if gated else None
        return Block(feature, gating, BNState(cout) if bn else None)

    model = InpaintModel(cfg)
    cin = cfg.in_channels
    for i, w in enumerate(cfg.widths):
        model.encoder.append(block(cin, w, 2, cfg.bn_encoder[i]))
        cin = w
    enc_out = [cfg.in_channels] + list(cfg.widths)
    mask_ch = 1 if gated else 0
    for j, w in enumerate(cfg.decoder_widths):
        skip_ch = enc_out[cfg.depth - 1 - j]
        model.decoder.append(block(cin + skip_ch + mask_ch, w, 1, cfg.bn_decoder[j]))
        cin = w
    model.head = init_conv(rng, cin + cfg.in_channels + 1, cfg.in_channels, k, 1, gain=1.0)
    return model


def compose(output, image, mask) -> np.ndarray | Tensor:
    """M * image + (1 - M) * output, mask broadcast over channels."""
    if isinstance(output, Tensor):
        image_arr = image.data if isinstance(image, Tensor) else np.asarray(image)
        m = np.broadcast_to(_as_mask(mask, output.shape), output.shape).astype(output.dtype)
        return output * Tensor(1.0 - m, dtype=output.dtype) + Tensor(m * image_arr, dtype=output.dtype)
    output = np.asarray(output)
    image = np.asarray(image)
    m = np.broadcast_to(_as_mask(mask, output.shape), output.shape).astype(bool)
    return np.where(m, image, output)


def inpaint_forward(model: InpaintModel, image, mask) -> np.ndarray:
    """Inference-mode forward pass returning the raw (N, C, H, W) output."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if image.ndim == 3:
        image = image[None]
    return model.forward(Tensor(image), mask, training=False).data
