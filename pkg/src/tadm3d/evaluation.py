"""Metrics against phantom ground truth, the wrong-conditioning protocol and
the ablation harness.

Region volume errors are absolute differences of region volume fractions,
expressed in percentage points of total brain volume.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import diffusion
from .errors import ConfigurationError, DimensionError, ProtocolError, TADMError
from .model import ConditioningBundle
from .phantom import AD, REGION_LABELS, RegionMasks, Volume, region_volume_fractions, status_code

REGIONS = ("ventricle", "hippocampus", "csf")
REPORT_COLUMNS = ("subject_id", "delta", "mse", "ssim", "err_ventricle", "err_hippocampus", "err_csf")
METRICS = REPORT_COLUMNS[2:]
DEGENERATE_ERROR = 100.0

# band edges halfway between the phantom intensity bands
_BACKGROUND_BELOW = 0.05
_VENTRICLE_BELOW = 0.175
_CSF_BELOW = 0.425
_TISSUE_BELOW = 0.775


def _array(v):
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


def mse(a, b) -> float:
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse of volumes with extents {a.shape} and {b.shape}")
    d = a - b
    return float(np.mean(d * d))


@dataclass(frozen=True)
class SsimParams:
    window: int = 7
    sigma: float = 1.5
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigurationError(f"SSIM window must be odd and positive, got {self.window}")
        if self.sigma <= 0:
            raise ConfigurationError(f"SSIM sigma must be positive, got {self.sigma}")

    @property
    def c1(self):
        return (0.01 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (0.03 * self.dynamic_range) ** 2

    def kernel(self):
        r = np.arange(self.window) - self.window // 2
        g = np.exp(-(r ** 2) / (2.0 * self.sigma ** 2))
        return g / g.sum()

    def describe(self):
        return f"ssim window={self.window} sigma={self.sigma} L={self.dynamic_range} C1={self.c1:g} C2={self.c2:g}"


def _filter_valid(x, g):
    """Separable Gaussian weighting evaluated at every valid window position."""
    k = g.size
    for ax in range(3):
        x = np.tensordot(sliding_window_view(x, k, axis=ax), g, axes=([-1], [0]))
    return x


def ssim_map(a, b, p: SsimParams = SsimParams()):
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim of volumes with extents {a.shape} and {b.shape}")
    if a.ndim != 3 or min(a.shape) < p.window:
        raise ConfigurationError(f"volume extents {a.shape} smaller than SSIM window {p.window}")
    g = p.kernel()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + p.c1) * (2.0 * cov + p.c2)
    den = (mu_a * mu_a + mu_b * mu_b + p.c1) * (var_a + var_b + p.c2)
    return num / den


def ssim3d(a, b, p: SsimParams = SsimParams()) -> float:
    """Mean SSIM over valid window positions with 3-D Gaussian weighting."""
    return float(np.mean(ssim_map(a, b, p)))


def segment_phantom(v) -> RegionMasks:
    """Label voxels by intensity band; every voxel gets exactly one label."""
    x = _array(v)
    labels = np.full(x.shape, REGION_LABELS["tissue"], dtype=np.uint8)
    labels[x < _TISSUE_BELOW] = REGION_LABELS["tissue"]
    labels[x >= _TISSUE_BELOW] = REGION_LABELS["hippocampus"]
    labels[x < _CSF_BELOW] = REGION_LABELS["csf"]
    labels[x < _VENTRICLE_BELOW] = REGION_LABELS["ventricle"]
    labels[x < _BACKGROUND_BELOW] = REGION_LABELS["background"]
    return RegionMasks(labels)


def region_volume_error(pred, truth_masks: RegionMasks) -> dict:
    """Per-region ``|frac_pred - frac_true| * 100``; 100 everywhere for an empty predicted brain."""
    seg = segment_phantom(pred)
    if not seg.brain.any():
        return {r: DEGENERATE_ERROR for r in REGIONS}
    fp = region_volume_fractions(seg)
    ft = region_volume_fractions(truth_masks)
    return {r: abs(fp[r] - ft[r]) * 100.0 for r in REGIONS}


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class PairMetrics:
    subject_id: str
    delta: float
    mse: float
    ssim: float
    err_ventricle: float
    err_hippocampus: float
    err_csf: float

    def row(self):
        return [self.subject_id, f"{self.delta:.2f}"] + [f"{getattr(self, m):.9g}" for m in METRICS]


def score_prediction(subject_id, delta, pred, truth, truth_masks, p: SsimParams = SsimParams()) -> PairMetrics:
    errs = region_volume_error(pred, truth_masks)
    return PairMetrics(subject_id, float(delta), mse(pred, truth), ssim3d(pred, truth, p),
                       errs["ventricle"], errs["hippocampus"], errs["csf"])


@dataclass
class MetricsReport:
    pairs: list = field(default_factory=list)
    ssim_params: SsimParams = SsimParams()
    label: str = ""

    def __len__(self):
        return len(self.pairs)

    @property
    def subject_count(self):
        return len({p.subject_id for p in self.pairs})

    def values(self, metric, min_delta=None):
        rows = [p for p in self.pairs if min_delta is None or p.delta >= min_delta]
        return np.array([getattr(p, metric) for p in rows], dtype=np.float64)

    def mean(self, metric, min_delta=None):
        v = self.values(metric, min_delta)
        return float(v.mean()) if v.size else float("nan")

    def aggregate(self, min_delta=None) -> dict:
        """metric -> (mean, population std)."""
        out = {}
        for m in METRICS:
            v = self.values(m, min_delta)
            out[m] = (float(v.mean()), float(v.std())) if v.size else (float("nan"), float("nan"))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for p in self.pairs:
            w.writerow(p.row())
        agg = self.aggregate()
        w.writerow(["mean", ""] + [f"{agg[m][0]:.9g}" for m in METRICS])
        w.writerow(["std", ""] + [f"{agg[m][1]:.9g}" for m in METRICS])
        buf.write(f"# pairs={len(self.pairs)} subjects={self.subject_count}; {self.ssim_params.describe()}; "
                  "region errors in percentage points of brain volume\n")
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def summary(self) -> str:
        agg = self.aggregate()
        head = f"{self.label + ': ' if self.label else ''}{len(self.pairs)} pairs, {self.subject_count} subjects"
        lines = [head] + [f"  {m:<16s} {agg[m][0]:.6f} +/- {agg[m][1]:.6f}" for m in METRICS]
        return "\n".join(lines)


def read_report(path) -> MetricsReport:
    """Parse the per-pair rows of a report CSV written by :meth:`MetricsReport.write_csv`."""
    rep = MetricsReport()
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    for r in rows[1:]:
        if r[0] in ("mean", "std"):
            continue
        rep.pairs.append(PairMetrics(r[0], float(r[1]), *(float(x) for x in r[2:])))
    return rep


# ---------------------------------------------------------------- model evaluation

def pair_seed(seed, pair) -> int:
    """Sampling seed of one pair, independent of evaluation order."""
    key = f"{pair.subject_id}|{pair.followup_path}".encode()
    return int(np.random.SeedSequence([int(seed), zlib.crc32(key)]).generate_state(1)[0])


def predict_followups(model, sched, baselines, deltas, ages, statuses, seeds, batch=8):
    """Sample residuals and return clamped follow-up predictions, shape ``(N, E, E, E)``."""
    baselines = np.asarray(baselines, dtype=np.float32)
    out = []
    for i in range(0, len(baselines), batch):
        sl = slice(i, i + batch)
        cond = ConditioningBundle.build(baselines[sl], deltas[sl], ages[sl], statuses[sl])
        res = diffusion.sample(model, cond, sched, seed=list(seeds[sl]))[:, 0]
        out.append(np.clip(baselines[sl] + np.float32(model.residual_scale) * res, 0.0, 1.0))
    return np.concatenate(out) if out else np.zeros((0,) + baselines.shape[1:], dtype=np.float32)


def _score_all(cohort, pairs, preds, p, label):
    rep = MetricsReport(ssim_params=p, label=label)
    for pair, pred in zip(pairs, preds):
        rep.pairs.append(score_prediction(pair.subject_id, pair.delta, pred,
                                          cohort.volume(pair.followup_path),
                                          cohort.masks(pair.followup_path), p))
    return rep


def evaluate_model(model, cohort, sched, split="test", seed=0, pairs=None, status=None,
                   p: SsimParams = SsimParams(), batch=8) -> MetricsReport:
    """Sample every pair of ``split`` with its fixed seed and score against truth.

    ``status`` forces one cognitive status for every pair.
    """
    pairs = list(pairs) if pairs is not None else cohort.split(split)
    if not pairs:
        raise ProtocolError(f"no pairs to evaluate in split {split!r}")
    cohort.check_files(pairs)
    n = len(pairs)
    base = np.stack([cohort.volume(q.baseline_path) for q in pairs])
    deltas = np.array([q.delta for q in pairs])
    ages = np.array([q.baseline_age for q in pairs])
    stats = np.array([status_code(status) if status is not None else q.status for q in pairs])
    seeds = np.array([pair_seed(seed, q) for q in pairs], dtype=np.uint64)
    preds = predict_followups(model, sched, base, deltas, ages, stats, seeds, batch)
    assert preds.shape[0] == n
    return _score_all(cohort, pairs, preds, p, "model" if status is None else f"model (status forced to {status})")


def evaluate_identity(cohort, split="test", pairs=None, p: SsimParams = SsimParams()) -> MetricsReport:
    """Baseline that predicts no change: the follow-up equals the baseline."""
    pairs = list(pairs) if pairs is not None else cohort.split(split)
    cohort.check_files(pairs)
    preds = [cohort.volume(q.baseline_path) for q in pairs]
    return _score_all(cohort, pairs, preds, p, "identity")


def evaluate_oracle(cohort, split="test", pairs=None, p: SsimParams = SsimParams()) -> MetricsReport:
    """Ground truth scored as its own prediction (best achievable)."""
    pairs = list(pairs) if pairs is not None else cohort.split(split)
    cohort.check_files(pairs)
    preds = [cohort.volume(q.followup_path) for q in pairs]
    return _score_all(cohort, pairs, preds, p, "oracle")


# ---------------------------------------------------------------- wrong conditioning

MIN_PROTOCOL_SUBJECTS = 5


@dataclass
class WrongConditioningReport:
    correct: MetricsReport
    forced: MetricsReport

    def region_deltas(self) -> dict:
        """Mean forced-minus-correct error per region."""
        return {r: self.forced.mean(f"err_{r}") - self.correct.mean(f"err_{r}") for r in REGIONS}

    def paired_sums(self):
        """Per-pair ventricle + hippocampus error under (correct, forced) conditioning."""
        c = self.correct.values("err_ventricle") + self.correct.values("err_hippocampus")
        f = self.forced.values("err_ventricle") + self.forced.values("err_hippocampus")
        return c, f

    def summary(self):
        c, f = self.paired_sums()
        lines = [self.correct.summary(), self.forced.summary(),
                 f"  mean ventricle+hippocampus error: correct {c.mean():.6f}, forced {f.mean():.6f}"]
        return "\n".join(lines)


def wrong_conditioning_protocol(model, cohort, sched, split="test", seed=0, forced="CN",
                                min_subjects=MIN_PROTOCOL_SUBJECTS) -> WrongConditioningReport:
    """Evaluate AD pairs with their true status and again with ``forced`` status,
    under identical volumes and sampling seeds."""
    pairs = [q for q in cohort.split(split) if q.status == AD]
    n_subj = len({q.subject_id for q in pairs})
    if n_subj < min_subjects:
        raise ProtocolError(f"wrong-conditioning protocol needs >= {min_subjects} AD subjects in "
                            f"split {split!r}, found {n_subj}")
    correct = evaluate_model(model, cohort, sched, pairs=pairs, seed=seed)
    wrong = evaluate_model(model, cohort, sched, pairs=pairs, seed=seed, status=forced)
    return WrongConditioningReport(correct, wrong)


# ---------------------------------------------------------------- ablation

ABLATION_VARIANTS = (
    ("full", {}),
    ("w/o metadata", {"use_metadata": False}),
    ("w/o age gap", {"use_delta": False}),
    ("w/o BAE", {"lambda_bae": 0.0}),
    ("w/o BITR", {"bitr_p": 0.0}),
)
ABLATION_COLUMNS = ("variant", "status") + tuple(f"{m}_{s}" for m in METRICS for s in ("mean", "std")) + (
    "ventricle_vs_full",)


@dataclass
class AblationRow:
    variant: str
    config: object
    report: MetricsReport | None
    error: str | None = None

    @property
    def ok(self):
        return self.report is not None


def ablation_configs(base_cfg):
    return [(name, base_cfg.replace(**diff)) for name, diff in ABLATION_VARIANTS]


def ablate(cohort, base_cfg, bae_state=None, split="test", seed=0, progress=None) -> list:
    """Train and evaluate the full model and four ablated variants under one seed and budget.

    A variant that fails to train yields a row carrying the error message.
    """
    from .training import train

    rows = []
    for name, cfg in ablation_configs(base_cfg):
        try:
            res = train(cfg, cohort, bae_state=bae_state, out_dir="")
            rep = evaluate_model(res.model, cohort, res.schedule, split=split, seed=seed)
            rep.label = name
            rows.append(AblationRow(name, cfg, rep))
        except (TADMError, FloatingPointError) as exc:
            rows.append(AblationRow(name, cfg, None, f"{type(exc).__name__}: {exc}"))
        if progress is not None:
            progress(rows[-1])
    return rows


def ablation_table(rows, min_delta=None) -> str:
    """CSV table: one row per variant with mean/std per metric and the ventricle check.

    ``ventricle_vs_full`` is ``ok`` when the full model's ventricle error is no
    larger than the variant's, ``FAIL`` otherwise, and ``n/a`` when either
    side failed to train.
    """
    full = next((r for r in rows if r.variant == "full"), None)
    full_v = full.report.mean("err_ventricle", min_delta) if full is not None and full.ok else math.nan
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        if not r.ok:
            w.writerow([r.variant, f"failed: {r.error}"] + ["nan"] * (2 * len(METRICS)) + ["n/a"])
            continue
        agg = r.report.aggregate(min_delta)
        vals = [f"{agg[m][i]:.9g}" for m in METRICS for i in (0, 1)]
        v = r.report.mean("err_ventricle", min_delta)
        if r.variant == "full":
            check = "-"
        elif math.isnan(full_v) or math.isnan(v):
            check = "n/a"
        else:
            check = "ok" if full_v <= v else "FAIL"
        w.writerow([r.variant, "ok"] + vals + [check])
    return buf.getvalue()


__all__ = [
    "ABLATION_COLUMNS", "ABLATION_VARIANTS", "AblationRow", "MetricsReport", "PairMetrics", "REGIONS",
    "REPORT_COLUMNS", "SsimParams", "WrongConditioningReport", "ablate", "ablation_configs",
    "ablation_table", "evaluate_identity", "evaluate_model", "evaluate_oracle", "mse", "pair_seed",
    "predict_followups", "read_report", "region_volume_error", "score_prediction", "segment_phantom",
    "ssim3d", "ssim_map", "wrong_conditioning_protocol",
]
