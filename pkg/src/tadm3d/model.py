"""Encoder, conditional U-Net denoiser and brain-age estimator.

Conditioning paths into the denoiser:

* the baseline scan's encoder feature maps are concatenated onto the U-Net
  activations at the matching resolution;
* diffusion step, age gap, baseline age and cognitive status are embedded,
  concatenated and projected into one vector that every residual block adds
  (after its own projection) to its first normalised activation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, DomainError
from .phantom import AGE_MAX, AGE_MIN, Volume, status_code
from .tensor_core import Conv3d, GroupNorm, Linear, Module, Tensor, no_grad, ops

AGE_GAP_LIMIT = 15.0
AGE_CENTRE, AGE_SCALE = 70.0, 15.0


@dataclass(frozen=True)
class ModelConfig:
    extent: int = 16
    widths: tuple = (8, 16, 32)
    latent_dim: int = 64
    groups: int = 4
    cond_dim: int = 64
    step_dim: int = 32
    delta_dim: int = 32
    meta_dim: int = 16
    use_delta: bool = True
    use_metadata: bool = True


# ---------------------------------------------------------------- encodings

def pos_encode(delta, dim: int) -> np.ndarray:
    """Sinusoidal encoding of 10 * delta (0.1-year resolution).

    Scalar ``delta`` gives shape ``(dim,)``; an array of N values gives ``(N, dim)``.
    """
    if dim % 2:
        raise ConfigurationError(f"positional encoding dimension must be even, got {dim}")
    d = np.asarray(delta, dtype=np.float64)
    i = np.arange(dim // 2, dtype=np.float64)
    freq = 10000.0 ** (-2.0 * i / dim)
    ang = 10.0 * d[..., None] * freq
    out = np.empty(d.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def step_encode(t, dim: int) -> np.ndarray:
    """Standard sinusoidal embedding of the integer diffusion step."""
    t = np.asarray(t, dtype=np.float64)
    i = np.arange(dim // 2, dtype=np.float64)
    ang = t[..., None] * 10000.0 ** (-2.0 * i / dim)
    out = np.empty(t.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def normalize_age(age):
    return (np.asarray(age, dtype=np.float64) - AGE_MIN) / (AGE_MAX - AGE_MIN)


def one_hot_status(status):
    codes = np.atleast_1d(np.asarray([status_code(s) for s in np.atleast_1d(status)]))
    out = np.zeros((codes.size, 3))
    out[np.arange(codes.size), codes] = 1.0
    return out


# ---------------------------------------------------------------- conditioning bundle

@dataclass
class EncoderOutput:
    features: list          # per-resolution Tensors, finest first
    z: Tensor               # (N, latent_dim)


@dataclass
class ConditioningBundle:
    """Batch of conditioning inputs: baseline scans, signed gap, baseline age, status."""

    baseline: np.ndarray | None
    delta: np.ndarray | None
    age: np.ndarray | None
    status: np.ndarray | None
    features: EncoderOutput | None = field(default=None, repr=False)

    @classmethod
    def build(cls, baseline, delta, age, status):
        base = np.asarray(baseline.data if isinstance(baseline, Volume) else baseline, dtype=np.float32)
        if base.ndim == 3:
            base = base[None, None]
        elif base.ndim == 4:
            base = base[:, None]
        n = base.shape[0]
        delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (n,)).copy()
        age = np.broadcast_to(np.asarray(age, dtype=np.float64), (n,)).copy()
        status = np.array([status_code(s) for s in np.broadcast_to(np.asarray(status, dtype=object), (n,))])
        return cls(base, delta, age, status)

    @property
    def batch_size(self):
        return int(np.asarray(self.delta).shape[0])

    def validate(self):
        for name in ("baseline", "delta", "age", "status"):
            if getattr(self, name) is None:
                raise ContractError(f"conditioning field {name!r} is missing")
        if np.any(np.abs(self.delta) > AGE_GAP_LIMIT + 1e-9):
            raise DomainError(f"age gap outside [-{AGE_GAP_LIMIT}, {AGE_GAP_LIMIT}]")
        return self

    def with_features(self, features):
        return dataclasses.replace(self, features=features)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------- building blocks

class ConvBlock(Module):
    """conv -> group norm -> SiLU."""

    def __init__(self, cin, cout, groups, rng, stride=1, normalize=True):
        self.conv = Conv3d(cin, cout, 3, stride=stride, rng=rng)
        self.norm = GroupNorm(cout, groups) if normalize else None

    def forward(self, x):
        h = self.conv(x)
        return ops.silu(self.norm(h) if self.norm is not None else h)


class ResBlock(Module):
    def __init__(self, cin, cout, cond_dim, groups, rng):
        self.conv1 = Conv3d(cin, cout, 3, rng=rng)
        self.norm1 = GroupNorm(cout, groups)
        self.cond = Linear(cond_dim, cout, rng=rng)
        self.conv2 = Conv3d(cout, cout, 3, rng=rng)
        self.norm2 = GroupNorm(cout, groups)
        self.skip = Conv3d(cin, cout, 1, rng=rng) if cin != cout else None

    def forward(self, x, c):
        h = self.norm1(self.conv1(x))
        cc = self.cond(c)
        h = ops.silu(ops.add(h, ops.reshape(cc, cc.shape + (1, 1, 1))))
        h = ops.silu(self.norm2(self.conv2(h)))
        return ops.add(h, self.skip(x) if self.skip is not None else x)


class Encoder(Module):
    """Contracting path: two conv blocks per level, the first strided below level 0."""

    def __init__(self, widths, latent_dim, groups, rng, normalize=True):
        w0, w1, w2 = widths
        n = normalize
        self.level0 = [ConvBlock(1, w0, groups, rng, normalize=n), ConvBlock(w0, w0, groups, rng, normalize=n)]
        self.level1 = [ConvBlock(w0, w1, groups, rng, 2, n), ConvBlock(w1, w1, groups, rng, normalize=n)]
        self.level2 = [ConvBlock(w1, w2, groups, rng, 2, n), ConvBlock(w2, w2, groups, rng, normalize=n)]
        self.head = Linear(w2, latent_dim, rng=rng)

    def forward(self, x) -> EncoderOutput:
        feats = []
        h = x
        for level in (self.level0, self.level1, self.level2):
            for block in level:
                h = block(h)
            feats.append(h)
        z = self.head(ops.global_avg_pool(h))
        return EncoderOutput(feats, z)


class Embedder(Module):
    """Scalar conditions -> one conditioning vector per sample."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.age = Linear(1, cfg.meta_dim, rng=rng)
        self.status = Linear(3, cfg.meta_dim, rng=rng)
        width = cfg.step_dim + cfg.delta_dim + 2 * cfg.meta_dim
        self.proj = Linear(width, cfg.cond_dim, rng=rng)

    def metadata(self, age, status) -> Tensor:
        a = Tensor(normalize_age(age).reshape(-1, 1))
        d = Tensor(one_hot_status(status))
        return ops.concat([self.age(a), self.status(d)], axis=1)

    def forward(self, t, delta, age, status) -> Tensor:
        cfg = self.cfg
        n = np.asarray(delta).shape[0]
        parts = [Tensor(step_encode(t, cfg.step_dim))]
        if cfg.use_delta:
            parts.append(Tensor(pos_encode(delta, cfg.delta_dim)))
        else:
            parts.append(Tensor(np.zeros((n, cfg.delta_dim))))
        if cfg.use_metadata:
            parts.append(self.metadata(age, status))
        else:
            parts.append(Tensor(np.zeros((n, 2 * cfg.meta_dim))))
        return ops.silu(self.proj(ops.concat(parts, axis=1)))


class UNet(Module):
    def __init__(self, cfg: ModelConfig, rng):
        w0, w1, w2 = cfg.widths
        g, c = cfg.groups, cfg.cond_dim
        self.enc0 = ResBlock(1 + w0, w0, c, g, rng)
        self.down1 = Conv3d(w0, w1, 3, stride=2, rng=rng)
        self.enc1 = ResBlock(2 * w1, w1, c, g, rng)
        self.down2 = Conv3d(w1, w2, 3, stride=2, rng=rng)
        self.mid = ResBlock(2 * w2, w2, c, g, rng)
        self.up1 = Conv3d(w2, w1, 3, rng=rng)
        self.dec1 = ResBlock(2 * w1, w1, c, g, rng)
        self.up0 = Conv3d(w1, w0, 3, rng=rng)
        self.dec0 = ResBlock(2 * w0, w0, c, g, rng)
        self.out_norm = GroupNorm(w0, g)
        self.out = Conv3d(w0, 1, 3, rng=rng, zero=True)

    def forward(self, x, feats, c):
        f0, f1, f2 = feats
        h0 = self.enc0(ops.concat([x, f0]), c)
        h1 = self.enc1(ops.concat([self.down1(h0), f1]), c)
        h2 = self.mid(ops.concat([self.down2(h1), f2]), c)
        u1 = self.up1(ops.upsample_nearest(h2, h1.shape[2:]))
        d1 = self.dec1(ops.concat([u1, h1]), c)
        u0 = self.up0(ops.upsample_nearest(d1, h0.shape[2:]))
        d0 = self.dec0(ops.concat([u0, h0]), c)
        return self.out(ops.silu(self.out_norm(d0)))


class BrainAgeEstimator(Module):
    """Private encoder plus a two-layer perceptron regressing age in years.

    The encoder has no group normalisation, so absolute intensity levels reach
    the head, and its input is standardised by a fixed affine map centred on
    the tissue band.
    """

    INPUT_CENTRE = 0.6
    INPUT_GAIN = 5.0

    def __init__(self, cfg: ModelConfig, rng):
        self.phi = Encoder(cfg.widths, cfg.latent_dim, cfg.groups, rng, normalize=False)
        self.psi = [Linear(cfg.latent_dim, 32, rng=rng), Linear(32, 1, rng=rng)]

    def head(self, z):
        h = ops.silu(self.psi[0](z))
        out = self.psi[1](h)
        return ops.add(ops.scale(ops.reshape(out, (out.shape[0],)), AGE_SCALE), AGE_CENTRE)

    def standardize(self, volumes) -> Tensor:
        return ops.scale(ops.sub(ops.as_tensor(volumes), np.float32(self.INPUT_CENTRE)), self.INPUT_GAIN)

    def forward(self, volumes) -> Tensor:
        return self.head(self.phi(self.standardize(volumes)).z)

    @property
    def frozen(self):
        return all(p.frozen and not p.requires_grad for p in self.parameters())


# ---------------------------------------------------------------- full model

class TADM(Module):
    """Trainable encoder + denoiser + embedder, with a frozen-able brain-age estimator."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, residual_scale: float = 1.0):
        if cfg.extent < 8:
            raise ConfigurationError(f"extent {cfg.extent} below the minimum of 8")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.phi = Encoder(cfg.widths, cfg.latent_dim, cfg.groups, rng)
        self.unet = UNet(cfg, rng)
        self.embed = Embedder(cfg, rng)
        self.bae = BrainAgeEstimator(cfg, np.random.default_rng([seed, 1]))
        self.residual_scale = float(residual_scale)

    @property
    def extent(self):
        return self.cfg.extent

    def trainable(self):
        """Name -> parameter for everything the DDPM optimiser updates."""
        out = {}
        for prefix, mod in (("phi.", self.phi), ("unet.", self.unet), ("embed.", self.embed)):
            out.update(dict(mod.named_parameters(prefix)))
        return out

    def bae_parameters(self):
        return dict(self.bae.named_parameters("bae."))

    def _as_batch(self, volumes):
        if isinstance(volumes, Tensor):
            arr = volumes
        else:
            data = volumes.data if isinstance(volumes, Volume) else np.asarray(volumes, dtype=np.float32)
            if data.ndim == 3:
                data = data[None, None]
            elif data.ndim == 4:
                data = data[:, None]
            arr = Tensor(data)
        e = self.extent
        if arr.ndim != 5 or arr.shape[2:] != (e, e, e):
            raise DimensionError(f"volume extents {arr.shape[2:]} do not match model extent {e}")
        return arr

    def encode(self, volumes) -> EncoderOutput:
        return self.phi(self._as_batch(volumes))

    def condition_vector(self, t, cond: ConditioningBundle) -> Tensor:
        return self.embed(t, cond.delta, cond.age, cond.status)

    def denoise(self, x_t, t, cond: ConditioningBundle) -> Tensor:
        cond.validate()
        x_t = self._as_batch(x_t)
        n = x_t.shape[0]
        if cond.batch_size != n:
            raise DimensionError(f"batch axis: {n} samples but {cond.batch_size} conditioning rows")
        t = np.broadcast_to(np.asarray(t), (n,))
        feats = cond.features if cond.features is not None else self.encode(cond.baseline)
        c = self.condition_vector(t, cond)
        return self.unet(x_t, feats.features, c)

    def bae_age(self, volumes) -> Tensor:
        return self.bae(self._as_batch(volumes))

    def bae_delta(self, baseline, followup) -> Tensor:
        """Predicted age of ``followup`` minus predicted age of ``baseline``."""
        return ops.sub(self.bae_age(followup), self.bae_age(baseline))

    # ---- checkpoint helpers
    def state(self):
        st = {}
        for name, p in self.trainable().items():
            st[name] = p.data
        for name, p in self.bae_parameters().items():
            st[name] = p.data
        return st

    def load_state(self, state, strict=True):
        self.phi.load_state_dict(state, "phi.", strict)
        self.unet.load_state_dict(state, "unet.", strict)
        self.embed.load_state_dict(state, "embed.", strict)
        self.bae.load_state_dict(state, "bae.", strict)


def predict_age(model: TADM, volumes, batch=16) -> np.ndarray:
    """Inference-only brain-age predictions for a stack of volumes."""
    vols = np.asarray(volumes, dtype=np.float32)
    out = []
    with no_grad():
        for i in range(0, len(vols), batch):
            out.append(model.bae_age(vols[i:i + batch]).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)
