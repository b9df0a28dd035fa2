"""Mask-guided siamese encoder/decoder producing pixel change probabilities.

Both acquisitions pass through one shared convolutional encoder.  At the
bottleneck the two feature maps are fused (concatenation plus absolute
difference) and refined by windowed self-attention.  Every decoder resolution
is modulated by the coarse change mask, downsampled to that resolution, through
``F * (1 + alpha * M)`` with a learnable ``alpha`` per stage.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import LossConfig, cd_loss
from .nn import Module, Parameter, adam_step
from .tensor import Tensor


@dataclass(frozen=True)
class MGDConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    window_size: int = 4
    alpha_init: float = 0.1
    in_channels: int = 3
    height: int = 64
    width: int = 64
    guidance: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        problems = self.validate()
        if problems:
            raise ValueError("; ".join(problems))

    def validate(self) -> list[str]:
        out = []
        if not self.channels or any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            out.append(f"mgd.channels must be nonempty and strictly increasing, got {self.channels}")
        scale = 2 ** (len(self.channels) - 1)
        if self.height % scale or self.width % scale:
            out.append(f"mgd input {self.height}x{self.width} not divisible by {scale}")
        elif (self.height // scale) % self.window_size or (self.width // scale) % self.window_size:
            out.append(
                f"mgd.window_size {self.window_size} does not divide bottleneck "
                f"{self.height // scale}x{self.width // scale}"
            )
        return out

    @property
    def stages(self) -> int:
        return len(self.channels)


def _he(rng, shape, fan_in) -> Parameter:
    return Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


class ConvBlockEncoder(Module):
    """Per stage: conv-relu-conv-relu (bias-free), then 2x2 max pooling."""

    def __init__(self, cfg: MGDConfig, rng):
        self.cfg = cfg
        self.convs = []
        c_in = cfg.in_channels
        for c in cfg.channels:
            self.convs.append(_he(rng, (c, c_in, 3, 3), c_in * 9))
            self.convs.append(_he(rng, (c, c, 3, 3), c * 9))
            c_in = c

    def __call__(self, image) -> list[Tensor]:
        x = T.as_tensor(image)
        if x.shape[1:] != (self.cfg.in_channels, self.cfg.height, self.cfg.width):
            raise ValueError(
                f"encode: image shape {x.shape[1:]} != expected {(self.cfg.in_channels, self.cfg.height, self.cfg.width)}"
            )
        pyramid = []
        for s in range(self.cfg.stages):
            if s > 0:
                x = T.max_pool2d(x, 2)
            x = T.relu(T.conv2d(x, self.convs[2 * s], padding=1))
            x = T.relu(T.conv2d(x, self.convs[2 * s + 1], padding=1))
            pyramid.append(x)
        return pyramid


def attention_weights(feature_map, window_size: int, wq, wk) -> Tensor:
    """Row-stochastic (windows, ws*ws, ws*ws) attention matrices."""
    win = T.window_partition(feature_map, window_size)
    q, k = win @ wq, win @ wk
    scores = (q @ T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(q.shape[-1]))
    return T.softmax(scores, axis=-1)


def window_attention(feature_map, window_size: int, wq, wk, wv) -> Tensor:
    """Self-attention inside non-overlapping windows, added back to the input."""
    x = T.as_tensor(feature_map)
    _, _, h, w = x.shape
    win = T.window_partition(x, window_size)
    attn = attention_weights(x, window_size, wq, wk)
    return x + T.window_merge(attn @ (win @ wv), window_size, h, w)


class WindowAttention(Module):
    def __init__(self, channels: int, window_size: int, rng):
        self.window_size = window_size
        scale = 1.0 / np.sqrt(channels)
        self.wq = Parameter(rng.normal(0.0, scale, size=(channels, channels)))
        self.wk = Parameter(rng.normal(0.0, scale, size=(channels, channels)))
        self.wv = Parameter(rng.normal(0.0, scale, size=(channels, channels)))

    def __call__(self, x) -> Tensor:
        return window_attention(x, self.window_size, self.wq, self.wk, self.wv)


def mask_pyramid(coarse: np.ndarray, levels: int) -> list[np.ndarray]:
    """Level l is the mask after l rounds of 2x2 max pooling."""
    m = np.asarray(coarse, dtype=np.float64)
    out = [m]
    for _ in range(levels - 1):
        *lead, h, w = m.shape
        if h % 2 or w % 2:
            raise ValueError(f"mask_pyramid: cannot halve {h}x{w}")
        m = m.reshape(*lead, h // 2, 2, w // 2, 2).max(axis=(-3, -1))
        out.append(m)
    return out


def soft_guide(features, mask_level, alpha) -> Tensor:
    """features * (1 + alpha * mask), mask broadcast over channels."""
    features = T.as_tensor(features)
    mask = np.asarray(mask_level, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[None, None]
    elif mask.ndim == 3:
        mask = mask[:, None]
    if mask.shape[-2:] != features.shape[-2:]:
        raise ValueError(f"soft_guide: mask resolution {mask.shape[-2:]} != feature resolution {features.shape[-2:]}")
    return features * (1.0 + T.as_tensor(alpha) * mask)


def fuse(f1, f2) -> Tensor:
    return T.concat([f1, f2, T.abs_(f1 - f2)], axis=1)


class MaskGuidedDecoder(Module):
    def __init__(self, cfg: MGDConfig = MGDConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = ConvBlockEncoder(cfg, rng)
        chans = cfg.channels
        self.bottleneck = _he(rng, (chans[-1], 3 * chans[-1], 3, 3), 27 * chans[-1])
        self.bottleneck_b = Parameter(np.zeros(chans[-1]))
        self.attention = WindowAttention(chans[-1], cfg.window_size, rng)
        self.up_convs, self.up_biases = [], []
        for lvl in range(cfg.stages - 2, -1, -1):
            c_in = chans[lvl + 1] + 3 * chans[lvl]
            self.up_convs.append(_he(rng, (chans[lvl], c_in, 3, 3), 9 * c_in))
            self.up_biases.append(Parameter(np.zeros(chans[lvl])))
        self.head = _he(rng, (1, chans[0], 1, 1), chans[0])
        self.head_b = Parameter(np.zeros(1))
        # alphas[l] modulates pyramid level l
        self.alphas = [Parameter(np.array(cfg.alpha_init if cfg.guidance else 0.0)) for _ in chans]
        if not cfg.guidance:
            for a in self.alphas:
                a.frozen = True

    def encode(self, image) -> list[Tensor]:
        return self.encoder(image)

    def decode(self, pyr_t1, pyr_t2, masks, guided: bool = True) -> Tensor:
        """Probability map (N,1,H,W).  ``guided=False`` skips guidance entirely."""
        if len(pyr_t1) != self.cfg.stages or len(pyr_t2) != self.cfg.stages:
            raise ValueError(f"decode: expected {self.cfg.stages} pyramid levels")
        if guided and len(masks) < self.cfg.stages:
            raise ValueError(f"decode: expected {self.cfg.stages} mask levels, got {len(masks)}")
        for a, b in zip(pyr_t1, pyr_t2):
            if a.shape != b.shape:
                raise ValueError(f"decode: misaligned pyramid levels {a.shape} vs {b.shape}")
        top = self.cfg.stages - 1
        x = T.conv2d(fuse(pyr_t1[top], pyr_t2[top]), self.bottleneck, self.bottleneck_b, padding=1)
        x = self.attention(T.relu(x))
        if guided:
            x = soft_guide(x, masks[top], self.alphas[top])
        for i, lvl in enumerate(range(top - 1, -1, -1)):
            x = T.concat([T.nearest_upsample(x, 2), fuse(pyr_t1[lvl], pyr_t2[lvl])], axis=1)
            x = T.relu(T.conv2d(x, self.up_convs[i], self.up_biases[i], padding=1))
            if guided:
                x = soft_guide(x, masks[lvl], self.alphas[lvl])
        return T.sigmoid(T.conv2d(x, self.head, self.head_b))

    def __call__(self, img_t1, img_t2, coarse, guided: bool = True) -> Tensor:
        masks = mask_pyramid(coarse, self.cfg.stages) if guided else []
        return self.decode(self.encode(img_t1), self.encode(img_t2), masks, guided)

    def alpha_values(self) -> list[float]:
        return [float(a.data) for a in self.alphas]


def to_input(img: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 (or batch NxHxWx3) to float NCHW in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 3:
        arr = arr[None]
    return arr.transpose(0, 3, 1, 2)


@dataclass
class DecoderSample:
    img_t1: np.ndarray
    img_t2: np.ndarray
    gt: np.ndarray
    coarse: np.ndarray


def train_decoder(model: MaskGuidedDecoder, samples: list[DecoderSample], epochs: int = 10,
                  lr: float = 2e-3, batch_size: int = 8, loss_cfg: LossConfig = LossConfig(),
                  seed: int = 0, augment: bool = True) -> list[float]:
    """Minimise the BCE+Dice loss with Adam; returns the per-step loss curve.

    ``augment`` applies random flips and right-angle rotations to each batch,
    identically to both frames, the target and the coarse mask.
    """
    if not samples:
        raise ValueError("train_decoder: no training samples")
    rng = np.random.default_rng(seed)
    t1 = to_input(np.stack([s.img_t1 for s in samples]))
    t2 = to_input(np.stack([s.img_t2 for s in samples]))
    gt = np.stack([s.gt for s in samples]).astype(np.float64)[:, None]
    coarse = np.stack([s.coarse for s in samples]).astype(np.float64)
    params = model.parameters()
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            a, b, y, m = t1[idx], t2[idx], gt[idx], coarse[idx]
            if augment:
                k, flip = int(rng.integers(4)), bool(rng.integers(2))
                a, b, y, m = (_dihedral(v, k, flip) for v in (a, b, y, m))
            prob = model(a, b, m, guided=True)
            loss = cd_loss(prob, y, loss_cfg)
            T.backward(loss)
            adam_step(params, lr=lr)
            curve.append(loss.item())
    return curve


def _dihedral(v: np.ndarray, k: int, flip: bool) -> np.ndarray:
    v = np.rot90(v, k, axes=(-2, -1))
    if flip:
        v = v[..., ::-1]
    return np.ascontiguousarray(v)


def predict_proba(model: MaskGuidedDecoder, img_t1, img_t2, coarse, batch_size: int = 16) -> np.ndarray:
    a, b = to_input(img_t1), to_input(img_t2)
    m = np.asarray(coarse, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    out = []
    with T.no_grad():
        for s in range(0, a.shape[0], batch_size):
            out.append(model(a[s : s + batch_size], b[s : s + batch_size], m[s : s + batch_size]).data[:, 0])
    return np.concatenate(out, axis=0)


def predict(model: MaskGuidedDecoder, img_t1, img_t2, coarse, threshold: float = 0.5) -> np.ndarray:
    """Binary change mask(s): probability strictly above ``threshold``."""
    prob = predict_proba(model, img_t1, img_t2, coarse)
    mask = (prob > threshold).astype(np.uint8)
    return mask[0] if np.asarray(img_t1).ndim == 3 else mask
