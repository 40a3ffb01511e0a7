"""Residual-diffusion training: BITR swap, noise and brain-age losses, AdamW.

A training step works on a batch of scan pairs. Each pair may be reversed in
time (baseline and follow-up exchanged, age gap negated), the residual
between the scans is scaled into [-1, 1] and noised, and the denoiser learns
to recover the noise. A one-step estimate of the clean residual is added back
onto the baseline and the frozen brain-age estimator checks that the implied
age gap matches the conditioning gap.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffusion
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    DomainError,
    FileFormatError,
    TrainingError,
)
from .model import TADM, BrainAgeEstimator, ConditioningBundle, ModelConfig, predict_age
from .phantom import COHORT_COLUMNS, METADATA_FILE, Volume, status_code
from .tensor_core import Tensor, backward, load_checkpoint, no_grad, ops, save_checkpoint
from .volume_io import read_mask, read_volume

CONFIG_KEYS = ("seed", "extent", "t_steps", "batch", "lr", "weight_decay", "lambda_bae",
               "bitr_p", "max_steps", "latent_dim", "cohort_dir", "out_dir")
LOG_COLUMNS = ("step", "lr", "loss_dml", "loss_bae", "loss_total")
# Residuals are divided by the largest |followup - baseline| in the training split.
# Only a small fraction of voxels change, so any lower percentile lands inside the
# band of real changes and the [-1, 1] sampler clamp would cut them off.
RESIDUAL_PERCENTILE = 100.0


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    extent: int = 16
    t_steps: int = 50
    batch: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-3
    lambda_bae: float = 1.0
    bitr_p: float = 0.5
    max_steps: int = 2000
    latent_dim: int = 64
    cohort_dir: str = ""
    out_dir: str = ""
    horizon: int | None = None
    checkpoint_every: int = 500
    widths: tuple = ModelConfig.widths
    use_delta: bool = True
    use_metadata: bool = True

    def __post_init__(self):
        if not 0.0 <= self.bitr_p <= 1.0:
            raise ConfigurationError(f"bitr_p must lie in [0, 1], got {self.bitr_p}")
        if self.lambda_bae < 0:
            raise ConfigurationError(f"lambda_bae must be >= 0, got {self.lambda_bae}")
        if self.batch < 1:
            raise ConfigurationError(f"batch must be >= 1, got {self.batch}")
        if self.max_steps < 0:
            raise ConfigurationError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.t_steps < 2:
            raise ConfigurationError(f"t_steps must be >= 2, got {self.t_steps}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr and weight_decay must be non-negative")

    @property
    def schedule_horizon(self):
        return self.horizon if self.horizon is not None else self.max_steps

    def model_config(self) -> ModelConfig:
        return ModelConfig(extent=self.extent, widths=tuple(self.widths), latent_dim=self.latent_dim,
                           use_delta=self.use_delta, use_metadata=self.use_metadata)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unset keys keep defaults."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"config line {lineno}: duplicate key {key!r}")
        kind = types[key]
        try:
            values[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
        except ValueError:
            raise ConfigurationError(f"config line {lineno}: bad {kind} value {val!r} for {key}") from None
    return TrainConfig(**values)


def read_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {getattr(cfg, k)}\n" for k in CONFIG_KEYS)


# ---------------------------------------------------------------- cohort access

@dataclass(frozen=True)
class CohortPair:
    subject_id: str
    split: str
    baseline_age: float
    status: int
    delta: float
    baseline_path: str
    followup_path: str


class Cohort:
    """Metadata table of a generated cohort plus cached scan and mask reads."""

    def __init__(self, root):
        self.root = str(root)
        path = os.path.join(self.root, METADATA_FILE)
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise FileFormatError(f"cannot read cohort table {path}: {exc}") from exc
        if not rows or tuple(rows[0]) != COHORT_COLUMNS:
            raise FileFormatError(f"{path}: header must be {','.join(COHORT_COLUMNS)}")
        self.pairs = []
        for i, r in enumerate(rows[1:], 2):
            if len(r) != len(COHORT_COLUMNS):
                raise FileFormatError(f"{path}:{i}: expected {len(COHORT_COLUMNS)} fields")
            try:
                self.pairs.append(CohortPair(r[0], r[1], float(r[2]), status_code(r[3]), float(r[4]), r[5], r[6]))
            except (ValueError, DomainError) as exc:
                raise FileFormatError(f"{path}:{i}: {exc}") from exc
        self._volumes = {}
        self._masks = {}

    def split(self, name):
        return [p for p in self.pairs if p.split == name]

    def _path(self, rel):
        return os.path.join(self.root, rel)

    def volume(self, rel) -> np.ndarray:
        if rel not in self._volumes:
            self._volumes[rel] = read_volume(self._path(rel)).data
        return self._volumes[rel]

    def masks(self, rel):
        if rel not in self._masks:
            self._masks[rel] = read_mask(self._path(rel)[:-5] + ".tmsk")
        return self._masks[rel]

    def check_files(self, pairs):
        missing = sorted({self._path(rel) for p in pairs for rel in (p.baseline_path, p.followup_path)
                          if not os.path.exists(self._path(rel))})
        if missing:
            raise FileFormatError("missing scan files: " + ", ".join(missing))

    def aged_scans(self, split):
        """Unique scans of a split with their true ages (baseline and follow-ups)."""
        seen = {}
        for p in self.split(split):
            seen.setdefault(p.baseline_path, p.baseline_age)
            seen.setdefault(p.followup_path, round(p.baseline_age + p.delta, 2))
        paths = sorted(seen)
        self.check_files(self.split(split))
        vols = np.stack([self.volume(q) for q in paths]) if paths else np.zeros((0,))
        return vols, np.array([seen[q] for q in paths])

    def sample(self, pair: CohortPair) -> "ScanPairSample":
        return ScanPairSample(self.volume(pair.baseline_path), self.volume(pair.followup_path),
                              pair.delta, pair.baseline_age, pair.status)


def residual_scale(cohort: Cohort, pairs) -> float:
    """``RESIDUAL_PERCENTILE``-th percentile (by default the maximum) of
    |followup - baseline| over every voxel of ``pairs``."""
    if not pairs:
        raise ContractError("residual scale needs at least one training pair")
    cohort.check_files(pairs)
    res = np.concatenate([np.abs(compute_residual(cohort.volume(p.baseline_path),
                                                  cohort.volume(p.followup_path))).ravel() for p in pairs])
    scale = float(np.percentile(res, RESIDUAL_PERCENTILE))
    if scale <= 0:
        scale = float(res.max()) or 1.0
    return scale


# ---------------------------------------------------------------- pair samples and losses

@dataclass(frozen=True)
class ScanPairSample:
    scan_a: np.ndarray
    scan_b: np.ndarray
    delta: float
    age: float
    status: int
    swapped: bool = False


def _array(v):
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float32)


def compute_residual(scan_a, scan_b) -> np.ndarray:
    """Voxel-wise ``scan_b - scan_a``."""
    a, b = _array(scan_a), _array(scan_b)
    if a.shape != b.shape:
        raise DimensionError(f"residual of scans with extents {a.shape} and {b.shape}")
    return (b - a).astype(np.float32)


def bitr_swap(sample: ScanPairSample, coin: int) -> ScanPairSample:
    """Reverse the pair in time when ``coin`` is 1: exchange scans, negate the gap,
    and move the baseline age to the former follow-up's age."""
    if sample.swapped:
        raise ContractError("sample has already been swapped")
    if coin not in (0, 1):
        raise DomainError(f"coin must be 0 or 1, got {coin}")
    if coin == 0:
        return sample
    return ScanPairSample(sample.scan_b, sample.scan_a, -sample.delta, sample.age + sample.delta,
                          sample.status, swapped=True)


def loss_dml(eps_hat, eps):
    """Mean squared error between predicted and true noise."""
    eps_hat = ops.as_tensor(eps_hat)
    if eps_hat.shape != np.shape(eps.data if isinstance(eps, Tensor) else eps):
        raise DimensionError(f"noise shapes {eps_hat.shape} and {np.shape(eps)} differ")
    return ops.mse_loss(eps_hat, eps)


def loss_bae(delta_hat, delta):
    """Squared error in years^2; batch mean when given arrays or tensors."""
    if not isinstance(delta_hat, Tensor) and np.ndim(delta_hat) == 0:
        return (float(delta_hat) - float(delta)) ** 2
    d = ops.sub(ops.as_tensor(delta_hat), np.asarray(delta, dtype=np.float32))
    return ops.reduce_mean(ops.mul(d, d))


# ---------------------------------------------------------------- optimiser

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_update(params: dict, opt: OptimizerState, grads: dict, lr, weight_decay,
                 beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place AdamW step with decoupled weight decay and bias correction.

    Parameters without a gradient entry (or with ``None``) get a zero gradient.
    """
    opt.step += 1
    c1 = 1.0 - beta1 ** opt.step
    c2 = 1.0 - beta2 ** opt.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data = p.data - lr * weight_decay * p.data
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return params


def cosine_lr(step: int, horizon: int, base_lr: float) -> float:
    if step < 0:
        raise DomainError(f"negative step {step}")
    if horizon <= 0 or step >= horizon:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / horizon))


# ---------------------------------------------------------------- one step

@dataclass(frozen=True)
class StepLosses:
    loss_dml: float
    loss_bae: float
    loss_total: float


def _prepare(batch, cfg: TrainConfig, sched, rng, scale):
    samples = []
    for s in batch:
        coin = int(rng.random() < cfg.bitr_p)
        samples.append(bitr_swap(s, coin))
    n = len(samples)
    e = samples[0].scan_a.shape
    x0 = np.stack([compute_residual(s.scan_a, s.scan_b) for s in samples])[:, None] / np.float32(scale)
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal((n, 1) + e).astype(np.float32)
    x_t = diffusion.q_sample(x0, t, eps, sched)
    cond = ConditioningBundle.build(np.stack([s.scan_a for s in samples]),
                                    [s.delta for s in samples], [s.age for s in samples],
                                    [s.status for s in samples])
    return samples, x_t, t, eps, cond


def compute_losses(model: TADM, batch, cfg: TrainConfig, sched, rng):
    """Forward pass of one step. Returns ``(total, dml, bae)`` as Tensors (bae may be None)."""
    if not batch:
        raise ContractError("training batch is empty")
    samples, x_t, t, eps, cond = _prepare(batch, cfg, sched, rng, model.residual_scale)
    eps_hat = model.denoise(Tensor(x_t), t, cond)
    l_dml = loss_dml(eps_hat, eps)
    if cfg.lambda_bae == 0:
        return l_dml, l_dml, None
    x0_hat = ops.clip(diffusion.predict_x0(x_t, eps_hat, t, sched), -1.0, 1.0)
    follow_hat = ops.add(ops.scale(x0_hat, model.residual_scale), cond.baseline)
    with no_grad():
        age_a = model.bae_age(cond.baseline).data
    delta_hat = ops.sub(model.bae_age(follow_hat), age_a)
    l_bae = loss_bae(delta_hat, cond.delta)
    total = ops.add(l_dml, ops.scale(l_bae, cfg.lambda_bae))
    return total, l_dml, l_bae


def train_step(model: TADM, opt: OptimizerState, batch, cfg: TrainConfig, sched, rng, step=None) -> StepLosses:
    """One AdamW update of encoder, denoiser and embedder on ``batch``."""
    if not model.bae.frozen:
        raise ContractError("brain-age estimator must be pretrained and frozen before DDPM training")
    step = opt.step if step is None else step
    total, l_dml, l_bae = compute_losses(model, batch, cfg, sched, rng)
    vals = (float(l_dml.data), float(l_bae.data) if l_bae is not None else 0.0, float(total.data))
    if not all(math.isfinite(v) for v in vals):
        raise TrainingError(f"non-finite loss at step {step}: dml={vals[0]} bae={vals[1]}")
    params = model.trainable()
    for p in params.values():
        p.grad = None
    backward(total)
    lr = cosine_lr(step, cfg.schedule_horizon, cfg.lr)
    adamw_update(params, opt, {k: p.grad for k, p in params.items()}, lr, cfg.weight_decay)
    return StepLosses(*vals)


# ---------------------------------------------------------------- checkpoints

def _meta(model: TADM, sched):
    cfg = model.cfg
    return {
        "sched.beta": sched.betas.astype(np.float32),
        "sched.T": np.array([sched.T], dtype=np.float32),
        "meta.residual_scale": np.array([model.residual_scale], dtype=np.float32),
        "meta.extent": np.array([cfg.extent], dtype=np.float32),
        "meta.latent_dim": np.array([cfg.latent_dim], dtype=np.float32),
        "meta.widths": np.array(cfg.widths, dtype=np.float32),
        "meta.use_delta": np.array([float(cfg.use_delta)], dtype=np.float32),
        "meta.use_metadata": np.array([float(cfg.use_metadata)], dtype=np.float32),
    }


def save_model(path, model: TADM, sched):
    state = dict(model.state())
    state.update(_meta(model, sched))
    save_checkpoint(path, state)


def _model_config(state, extent_key="meta.extent") -> ModelConfig:
    try:
        return ModelConfig(extent=int(state[extent_key][0]), latent_dim=int(state["meta.latent_dim"][0]),
                           widths=tuple(int(w) for w in state["meta.widths"]),
                           use_delta=bool(state.get("meta.use_delta", [1])[0]),
                           use_metadata=bool(state.get("meta.use_metadata", [1])[0]))
    except KeyError as exc:
        raise FileFormatError(f"checkpoint lacks metadata entry {exc}") from None


def load_model(path):
    """Returns ``(model, schedule)`` rebuilt from a full checkpoint."""
    state = load_checkpoint(path)
    cfg = _model_config(state)
    if "sched.beta" not in state or "meta.residual_scale" not in state:
        raise FileFormatError(f"{path}: not a full model checkpoint")
    model = TADM(cfg, residual_scale=float(state["meta.residual_scale"][0]))
    try:
        model.load_state(state)
    except (KeyError, ValueError) as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    model.bae.freeze()
    betas = state["sched.beta"].astype(np.float64)
    linear = diffusion.make_schedule("linear", betas.size)
    sched = linear if np.allclose(linear.betas, betas, rtol=1e-6, atol=1e-9) else diffusion.NoiseSchedule(betas)
    return model, sched


def save_bae(path, bae: BrainAgeEstimator, cfg: ModelConfig):
    state = bae.state_dict("bae.")
    state["meta.extent"] = np.array([cfg.extent], dtype=np.float32)
    state["meta.latent_dim"] = np.array([cfg.latent_dim], dtype=np.float32)
    state["meta.widths"] = np.array(cfg.widths, dtype=np.float32)
    save_checkpoint(path, state)


def load_bae_state(path) -> dict:
    state = load_checkpoint(path)
    if not any(k.startswith("bae.") for k in state):
        raise FileFormatError(f"{path}: no brain-age estimator tensors")
    return state


# ---------------------------------------------------------------- brain-age pretraining

@dataclass(frozen=True)
class BaeConfig:
    lr: float = 2e-3
    batch: int = 8
    max_steps: int = 3000
    min_steps: int = 3000
    eval_every: int = 50
    gate_mae: float = 1.5
    weight_decay: float = 0.0
    augment: bool = True


@dataclass
class BaeResult:
    estimator: BrainAgeEstimator
    steps: int
    val_mae: float
    baseline_mae: float
    history: list


def mean_age_baseline(train_ages, eval_ages) -> float:
    """MAE of predicting the training-set mean age for every evaluated scan."""
    return float(np.mean(np.abs(np.asarray(eval_ages) - np.mean(train_ages))))


def pretrain_bae(cohort: Cohort, cfg: TrainConfig, bae_cfg: BaeConfig = BaeConfig(), raise_on_gate=True) -> BaeResult:
    """Regress scan -> true age on the training split; stop once the validation
    MAE reaches the gate (after ``min_steps``), then freeze."""
    x_train, y_train = cohort.aged_scans("train")
    x_val, y_val = cohort.aged_scans("val")
    if len(y_train) == 0:
        raise ContractError("brain-age pretraining needs a non-empty training split")
    if len(y_val) == 0:
        x_val, y_val = x_train, y_train
    mcfg = cfg.model_config()
    bae = BrainAgeEstimator(mcfg, np.random.default_rng([cfg.seed, 1]))
    params = dict(bae.named_parameters())
    opt = OptimizerState()
    rng = np.random.default_rng([cfg.seed, 2])
    x_train = x_train[:, None].astype(np.float32)
    history = []
    val_mae = float("inf")
    step = 0
    for step in range(1, bae_cfg.max_steps + 1):
        idx = rng.choice(len(y_train), size=min(bae_cfg.batch, len(y_train)), replace=False)
        for p in params.values():
            p.grad = None
        xb = _symmetry_augment(x_train[idx], rng) if bae_cfg.augment else x_train[idx]
        pred = bae(Tensor(xb))
        err = ops.sub(pred, y_train[idx].astype(np.float32))
        loss = ops.reduce_mean(ops.mul(err, err))
        if not math.isfinite(float(loss.data)):
            raise TrainingError(f"non-finite brain-age loss at step {step}")
        backward(loss)
        lr = cosine_lr(step - 1, bae_cfg.max_steps, bae_cfg.lr)
        adamw_update(params, opt, {k: p.grad for k, p in params.items()}, lr, bae_cfg.weight_decay)
        if step % bae_cfg.eval_every == 0 or step == bae_cfg.max_steps:
            val_mae = float(np.mean(np.abs(_bae_predict(bae, x_val) - y_val)))
            history.append((step, float(loss.data), val_mae))
            if step >= bae_cfg.min_steps and val_mae <= bae_cfg.gate_mae:
                break
    bae.freeze()
    result = BaeResult(bae, step, val_mae, mean_age_baseline(y_train, y_val), history)
    if raise_on_gate and val_mae > bae_cfg.gate_mae:
        raise TrainingError(f"brain-age pretraining stopped at step {step} with validation MAE "
                            f"{val_mae:.3f} > {bae_cfg.gate_mae}")
    return result


def _symmetry_augment(x, rng):
    """Random axis permutation and flips of each (1, D, D, D) volume."""
    out = np.empty_like(x)
    for i, v in enumerate(x[:, 0]):
        v = np.transpose(v, rng.permutation(3))
        for ax in range(3):
            if rng.random() < 0.5:
                v = np.flip(v, ax)
        out[i, 0] = v
    return out


def _bae_predict(bae: BrainAgeEstimator, vols, batch=16):
    vols = np.asarray(vols, dtype=np.float32)
    if vols.ndim == 4:
        vols = vols[:, None]
    out = []
    with no_grad():
        for i in range(0, len(vols), batch):
            out.append(bae(Tensor(vols[i:i + batch])).data.astype(np.float64))
    return np.concatenate(out)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    model: TADM
    schedule: diffusion.NoiseSchedule
    losses: list
    log_path: str | None = None
    checkpoint_path: str | None = None


def build_model(cfg: TrainConfig, scale: float, bae_state: dict | None = None) -> TADM:
    model = TADM(cfg.model_config(), seed=cfg.seed, residual_scale=scale)
    if bae_state is not None:
        try:
            model.bae.load_state_dict(bae_state, "bae.")
        except (KeyError, ValueError) as exc:
            raise FileFormatError(f"brain-age checkpoint does not fit the model: {exc}") from exc
    model.bae.freeze()
    return model


def _fmt(x):
    return f"{x:.9g}"


def train(cfg: TrainConfig, cohort: Cohort | None = None, bae_state: dict | None = None,
          out_dir: str | None = None, progress=None, timing_path: str | None = None) -> TrainResult:
    """Full training run. Writes ``train_log.csv``, periodic
    ``checkpoint_<step>.tadw`` and ``model.tadw`` into ``out_dir`` when given.

    Nothing time-dependent is written there, so two runs with the same config
    and cohort leave byte-identical output directories; per-step wall-clock
    times go to the separate ``timing_path`` CSV when one is given.
    ``progress(step, losses)`` is called after every step.
    """
    cohort = cohort if cohort is not None else Cohort(cfg.cohort_dir)
    pairs = cohort.split("train")
    if not pairs:
        raise ContractError("training split is empty")
    cohort.check_files(pairs)
    scale = residual_scale(cohort, pairs)
    model = build_model(cfg, scale, bae_state)
    sched = diffusion.make_schedule("linear", cfg.t_steps)
    samples = [cohort.sample(p) for p in pairs]
    if samples[0].scan_a.shape != (cfg.extent,) * 3:
        raise DimensionError(f"cohort extent {samples[0].scan_a.shape} != configured extent {cfg.extent}")
    opt = OptimizerState()
    rng = np.random.default_rng(cfg.seed)
    out_dir = out_dir if out_dir is not None else (cfg.out_dir or None)
    log = timing = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log = open(os.path.join(out_dir, "train_log.csv"), "w", newline="", buffering=1)
        log.write(",".join(LOG_COLUMNS) + "\n")
    if timing_path:
        timing = open(timing_path, "w", buffering=1)
        timing.write("step,wall_seconds\n")
    losses = []
    t0 = time.perf_counter()
    try:
        for step in range(cfg.max_steps):
            idx = rng.choice(len(samples), size=cfg.batch, replace=len(samples) < cfg.batch)
            lr = cosine_lr(step, cfg.schedule_horizon, cfg.lr)
            res = train_step(model, opt, [samples[i] for i in idx], cfg, sched, rng, step)
            losses.append(res)
            if log:
                log.write(",".join([str(step), _fmt(lr), _fmt(res.loss_dml), _fmt(res.loss_bae),
                                    _fmt(res.loss_total)]) + "\n")
                if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.max_steps:
                    save_model(os.path.join(out_dir, f"checkpoint_{step + 1}.tadw"), model, sched)
            if timing:
                timing.write(f"{step},{time.perf_counter() - t0:.3f}\n")
            if progress is not None:
                progress(step, res)
    finally:
        for fh in (log, timing):
            if fh:
                fh.close()
    ckpt = None
    if out_dir:
        ckpt = os.path.join(out_dir, "model.tadw")
        save_model(ckpt, model, sched)
    return TrainResult(model, sched, losses, os.path.join(out_dir, "train_log.csv") if out_dir else None, ckpt)


def smoothed(values, window=100):
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


__all__ = [
    "BaeConfig", "BaeResult", "CONFIG_KEYS", "Cohort", "CohortPair", "LOG_COLUMNS", "OptimizerState",
    "ScanPairSample", "StepLosses", "TrainConfig", "TrainResult", "adamw_update", "bitr_swap",
    "build_model", "compute_losses", "compute_residual", "cosine_lr", "format_config", "load_bae_state",
    "load_model", "loss_bae", "loss_dml", "mean_age_baseline", "parse_config", "predict_age",
    "pretrain_bae", "read_config", "residual_scale", "save_bae", "save_model", "smoothed", "train",
    "train_step",
]
