"""Synthetic longitudinal brain phantoms with analytically known progression.

A phantom is a centred ellipsoidal "brain" on a cubic grid with four labelled
compartments, each confined to a disjoint intensity band:

    ventricle    0.05 - 0.15   (grows with age)
    CSF rim      0.20 - 0.30   (one-voxel outer shell of the brain, static)
    tissue       0.55 - 0.70   (darkens slowly and linearly with age)
    hippocampus  0.85 - 0.95   (mirrored pair, shrinks with age)

Region sizes are set by voxel *count*: every anatomy fixes a ranking of the
candidate voxels for the ventricle and the hippocampus, and a scan at a given
age takes the first ``round(fraction * brain_voxels)`` of that ranking. Masks
are therefore nested across ages and across subjects sharing an anatomy seed,
which is what makes the progression properties exact rather than statistical.
"""

from __future__ import annotations

import csv
import functools
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DomainError, FileFormatError
from .volume_io import write_mask, write_volume

CN, MCI, AD = 0, 1, 2
STATUS_NAMES = ("CN", "MCI", "AD")
STATUS_CODES = {name: code for code, name in enumerate(STATUS_NAMES)}

VENTRICLE_RATES = {CN: 0.002, MCI: 0.004, AD: 0.008}
HIPPOCAMPUS_RATES = {CN: 0.001, MCI: 0.002, AD: 0.004}

AGE_MIN, AGE_MAX = 42.0, 95.0
MAX_SPAN = 15.0
VENTRICLE_CAP = 0.30
DEFAULT_EXTENT = 16
MIN_EXTENT = 8
MAX_EXTENT = 32

LABEL_BACKGROUND, LABEL_TISSUE, LABEL_VENTRICLE, LABEL_HIPPOCAMPUS, LABEL_CSF = 0, 1, 2, 3, 4
REGION_LABELS = {
    "background": LABEL_BACKGROUND,
    "tissue": LABEL_TISSUE,
    "ventricle": LABEL_VENTRICLE,
    "hippocampus": LABEL_HIPPOCAMPUS,
    "csf": LABEL_CSF,
}

# band centres; texture and gradients stay within +-0.02 of these
_VENTRICLE_LEVEL = 0.10
_CSF_LEVEL = 0.25
_HIPPO_LEVEL = 0.90
_TEXTURE_AMPLITUDE = 0.01
_GRADIENT_AMPLITUDE = 0.01
# tissue brightness falls linearly from 0.68 (age 40) to 0.58 (age 110)
_TISSUE_YOUNG, _TISSUE_OLD = 0.68, 0.58
_TISSUE_AGE_LO, _TISSUE_AGE_HI = 40.0, 110.0


def status_code(status) -> int:
    if isinstance(status, str):
        key = status.strip().upper()
        if key not in STATUS_CODES:
            raise DomainError(f"unknown cognitive status {status!r}; expected one of {STATUS_NAMES}")
        return STATUS_CODES[key]
    code = int(status)
    if code not in (CN, MCI, AD):
        raise DomainError(f"unknown cognitive status code {status!r}; expected 0, 1 or 2")
    return code


@dataclass(frozen=True)
class SubjectParams:
    subject_id: str
    baseline_age: float
    status: int
    ventricle_rate: float
    hippocampus_rate: float
    anatomy_seed: int

    def __post_init__(self):
        if not AGE_MIN <= self.baseline_age <= AGE_MAX:
            raise DomainError(f"baseline age {self.baseline_age} outside [{AGE_MIN}, {AGE_MAX}]")
        object.__setattr__(self, "status", status_code(self.status))
        if self.ventricle_rate <= 0 or self.hippocampus_rate <= 0:
            raise DomainError("progression rates must be strictly positive")

    @classmethod
    def for_status(cls, subject_id, baseline_age, status, anatomy_seed):
        """Subject with the default rates of its cognitive status."""
        code = status_code(status)
        return cls(subject_id, float(baseline_age), code,
                   VENTRICLE_RATES[code], HIPPOCAMPUS_RATES[code], int(anatomy_seed))

    @property
    def status_name(self):
        return STATUS_NAMES[self.status]

    def baseline_ventricle_fraction(self):
        """v0: slowly age-dependent, plus a per-anatomy offset."""
        jitter = np.random.default_rng([self.anatomy_seed, 1]).uniform(-0.004, 0.004)
        return 0.02 + 0.0005 * (self.baseline_age - AGE_MIN) + jitter

    def baseline_hippocampus_fraction(self):
        jitter = np.random.default_rng([self.anatomy_seed, 2]).uniform(-0.004, 0.004)
        return 0.04 + jitter

    def ventricle_fraction(self, age):
        return self.baseline_ventricle_fraction() + self.ventricle_rate * (age - self.baseline_age)

    def hippocampus_fraction(self, age):
        h0 = self.baseline_hippocampus_fraction()
        return max(h0 - self.hippocampus_rate * (age - self.baseline_age), h0 / 4.0)


@dataclass
class Volume:
    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or len(set(self.data.shape)) != 1:
            raise DomainError(f"volumes are cubic 3-D grids, got shape {self.data.shape}")

    @property
    def extent(self):
        return self.data.shape[0]


@dataclass
class RegionMasks:
    labels: np.ndarray
    saturated: bool = field(default=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)

    def region(self, name):
        if name == "brain":
            return self.labels != LABEL_BACKGROUND
        return self.labels == REGION_LABELS[name]

    @property
    def brain(self):
        return self.region("brain")

    @property
    def ventricle(self):
        return self.region("ventricle")

    @property
    def hippocampus(self):
        return self.region("hippocampus")

    @property
    def csf(self):
        return self.region("csf")

    @property
    def tissue(self):
        return self.region("tissue")

    @property
    def background(self):
        return self.region("background")


@dataclass(frozen=True)
class _Anatomy:
    brain: np.ndarray
    rim: np.ndarray
    hippo_order: np.ndarray      # flat indices of interior voxels, hippocampal-centre distance
    ventricle_field: np.ndarray  # normalised ellipsoidal distance, flat
    brain_count: int
    gradient: np.ndarray
    texture: np.ndarray


@functools.lru_cache(maxsize=256)
def _anatomy(anatomy_seed: int, extent: int) -> _Anatomy:
    rng = np.random.default_rng([anatomy_seed, 0])
    e = extent
    idx = np.indices((e, e, e), dtype=np.float64)
    centre = (e - 1) / 2.0 + rng.uniform(-0.25, 0.25, size=3)
    radii = e * np.array([0.40, 0.44, 0.42]) * (1.0 + rng.uniform(-0.04, 0.04, size=3))
    rel = [(idx[i] - centre[i]) / radii[i] for i in range(3)]
    brain = (rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2) <= 1.0
    interior = ndimage.binary_erosion(brain, structure=ndimage.generate_binary_structure(3, 1))
    rim = brain & ~interior

    # hippocampi: two spheres mirrored across the left/right (last) axis
    off = e * 0.21 * (1.0 + rng.uniform(-0.05, 0.05))
    hc = centre + np.array([0.12 * e, -0.05 * e, 0.0])
    d1 = np.sqrt((idx[0] - hc[0]) ** 2 + (idx[1] - hc[1]) ** 2 + (idx[2] - hc[2] - off) ** 2)
    d2 = np.sqrt((idx[0] - hc[0]) ** 2 + (idx[1] - hc[1]) ** 2 + (idx[2] - hc[2] + off) ** 2)
    dh = np.minimum(d1, d2).ravel()
    cand = np.flatnonzero(interior.ravel())
    hippo_order = cand[np.lexsort((cand, dh[cand]))]

    vr = radii * np.array([0.45, 0.35, 0.55])
    vc = centre + np.array([-0.03 * e, 0.04 * e, 0.0])
    dv = np.sqrt(sum(((idx[i] - vc[i]) / vr[i]) ** 2 for i in range(3))).ravel()

    gradient = _GRADIENT_AMPLITUDE * np.clip(rel[0], -1.0, 1.0)
    texture = rng.uniform(-_TEXTURE_AMPLITUDE, _TEXTURE_AMPLITUDE, size=(e, e, e))
    return _Anatomy(brain, rim, hippo_order, dv, int(brain.sum()), gradient, texture)


def tissue_level(age: float) -> float:
    frac = (np.clip(age, _TISSUE_AGE_LO, _TISSUE_AGE_HI) - _TISSUE_AGE_LO) / (_TISSUE_AGE_HI - _TISSUE_AGE_LO)
    return _TISSUE_YOUNG + (_TISSUE_OLD - _TISSUE_YOUNG) * frac


def _check_extent(extent):
    if not MIN_EXTENT <= extent <= MAX_EXTENT:
        raise ConfigurationError(f"extent {extent} outside [{MIN_EXTENT}, {MAX_EXTENT}]")


def _labels_at(subject: SubjectParams, age: float, extent: int):
    an = _anatomy(subject.anatomy_seed, extent)
    B = an.brain_count
    n_h0 = int(round(subject.baseline_hippocampus_fraction() * B))
    n_h = int(round(subject.hippocampus_fraction(age) * B))
    hippo_max = an.hippo_order[:n_h0]
    hippo = an.hippo_order[:n_h]

    v = subject.ventricle_fraction(age)
    saturated = v > VENTRICLE_CAP
    if saturated:
        warnings.warn(f"{subject.subject_id}: ventricle fraction {v:.3f} saturated at {VENTRICLE_CAP}",
                      RuntimeWarning, stacklevel=3)
        v = VENTRICLE_CAP
    interior = an.brain.ravel() & ~an.rim.ravel()
    interior[hippo_max] = False
    vcand = np.flatnonzero(interior)
    vorder = vcand[np.lexsort((vcand, an.ventricle_field[vcand]))]
    n_v = min(int(round(v * B)), vorder.size)

    labels = np.zeros(extent ** 3, dtype=np.uint8)
    labels[an.brain.ravel()] = LABEL_TISSUE
    labels[an.rim.ravel()] = LABEL_CSF
    labels[hippo] = LABEL_HIPPOCAMPUS
    labels[vorder[:n_v]] = LABEL_VENTRICLE
    return labels.reshape(extent, extent, extent), saturated, an


def synth_scan(subject: SubjectParams, age: float, extent: int = DEFAULT_EXTENT, spacing: float = 1.0):
    """Render the subject at ``age``; returns ``(Volume, RegionMasks)``."""
    _check_extent(extent)
    elapsed = age - subject.baseline_age
    if elapsed < -1e-9:
        raise DomainError(f"age {age} precedes baseline age {subject.baseline_age}")
    if elapsed > MAX_SPAN + 1e-9:
        raise DomainError(f"age {age} is more than {MAX_SPAN} years after baseline")
    labels, saturated, an = _labels_at(subject, age, extent)
    img = np.zeros(labels.shape, dtype=np.float64)
    img[labels == LABEL_TISSUE] = tissue_level(age)
    img[labels == LABEL_VENTRICLE] = _VENTRICLE_LEVEL
    img[labels == LABEL_CSF] = _CSF_LEVEL
    img[labels == LABEL_HIPPOCAMPUS] = _HIPPO_LEVEL
    img = np.where(an.brain, img + an.gradient + an.texture, 0.0)
    vol = Volume(np.clip(img, 0.0, 1.0).astype(np.float32), spacing)
    return vol, RegionMasks(labels, saturated)


@dataclass
class ScanPair:
    subject: SubjectParams
    delta: float
    baseline: Volume
    followup: Volume
    masks_baseline: RegionMasks
    masks_followup: RegionMasks


def synth_pair(subject: SubjectParams, delta: float, extent: int = DEFAULT_EXTENT) -> ScanPair:
    if not 0.0 <= delta <= MAX_SPAN:
        raise DomainError(f"interval {delta} outside [0, {MAX_SPAN}] years")
    va, ma = synth_scan(subject, subject.baseline_age, extent)
    vb, mb = synth_scan(subject, subject.baseline_age + delta, extent)
    return ScanPair(subject, float(delta), va, vb, ma, mb)


def region_volume_fractions(masks: RegionMasks) -> dict:
    """Region voxel count over brain voxel count, for every in-brain region."""
    brain = int(masks.brain.sum())
    if brain == 0:
        raise DomainError("brain mask is empty")
    return {name: float(masks.region(name).sum()) / brain
            for name in ("tissue", "ventricle", "hippocampus", "csf")}


# ---------------------------------------------------------------- cohorts

COHORT_COLUMNS = ("subject_id", "split", "baseline_age", "status", "delta_years",
                  "path_baseline", "path_followup")
METADATA_FILE = "cohort.csv"


def split_counts(n, split):
    if len(split) != 3 or any(f < 0 for f in split) or abs(sum(split) - 1.0) > 1e-6:
        raise ConfigurationError(f"split fractions {split} must be three non-negative values summing to 1")
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    return n_train, n_val, n - n_train - n_val


def sample_subjects(n, seed, prefix="sub"):
    """Draw ``n`` subjects: status CN/MCI/AD at 60/20/20, baseline age uniform."""
    rng = np.random.default_rng(seed)
    subjects, deltas = [], []
    for i in range(n):
        status = int(rng.choice(3, p=[0.6, 0.2, 0.2]))
        age = round(float(rng.uniform(AGE_MIN, AGE_MAX)), 2)
        anat = int(rng.integers(0, 2 ** 62))
        n_pairs = int(rng.integers(1, 5))
        ds = [round(float(d), 2) for d in rng.uniform(0.5, 10.0, size=n_pairs)]
        subjects.append(SubjectParams.for_status(f"{prefix}{i:04d}", age, status, anat))
        deltas.append(ds)
    order = rng.permutation(n)
    return subjects, deltas, order


def generate_cohort(n_subjects, seed, out_dir, split=(0.7, 0.1, 0.2), extent=DEFAULT_EXTENT,
                    statuses=None):
    """Write a cohort to ``out_dir``; returns the split counts ``(train, val, test)``.

    Splits are by subject. ``statuses`` optionally forces every subject's
    status (used to build dedicated AD evaluation sets).
    """
    if n_subjects < 10:
        raise ConfigurationError(f"a cohort needs at least 10 subjects, got {n_subjects}")
    _check_extent(extent)
    counts = split_counts(n_subjects, split)
    subjects, deltas, order = sample_subjects(n_subjects, seed)
    if statuses is not None:
        code = status_code(statuses)
        subjects = [SubjectParams.for_status(s.subject_id, s.baseline_age, code, s.anatomy_seed)
                    for s in subjects]
    names = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    split_of = {int(subj_idx): names[pos] for pos, subj_idx in enumerate(order)}

    scan_dir = os.path.join(out_dir, "scans")
    try:
        os.makedirs(scan_dir, exist_ok=True)
    except OSError as exc:
        raise FileFormatError(f"cannot create {scan_dir}: {exc}") from exc
    rows = []
    for i, (subj, ds) in enumerate(zip(subjects, deltas)):
        base_rel = f"scans/{subj.subject_id}_base.tvol"
        va, ma = synth_scan(subj, subj.baseline_age, extent)
        write_volume(os.path.join(out_dir, base_rel), va)
        write_mask(os.path.join(out_dir, base_rel[:-5] + ".tmsk"), ma)
        for j, d in enumerate(ds):
            fol_rel = f"scans/{subj.subject_id}_f{j}.tvol"
            vb, mb = synth_scan(subj, subj.baseline_age + d, extent)
            write_volume(os.path.join(out_dir, fol_rel), vb)
            write_mask(os.path.join(out_dir, fol_rel[:-5] + ".tmsk"), mb)
            rows.append((subj.subject_id, split_of[i], f"{subj.baseline_age:.2f}", subj.status_name,
                         f"{d:.2f}", base_rel, fol_rel))
    path = os.path.join(out_dir, METADATA_FILE)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COHORT_COLUMNS)
            w.writerows(rows)
    except OSError as exc:
        raise FileFormatError(f"cannot write {path}: {exc}") from exc
    return counts
