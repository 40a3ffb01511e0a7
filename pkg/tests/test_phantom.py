"""Phantom generator: region bookkeeping, progression, cohorts and file formats."""

import csv
import hashlib
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tadm3d import phantom
from tadm3d.errors import ConfigurationError, DomainError, FileFormatError
from tadm3d.phantom import (
    AD,
    CN,
    MCI,
    RegionMasks,
    SubjectParams,
    generate_cohort,
    region_volume_fractions,
    synth_pair,
    synth_scan,
)
from tadm3d.volume_io import read_mask, read_volume, write_mask, write_volume

BANDS = {"ventricle": (0.05, 0.15), "csf": (0.20, 0.30), "tissue": (0.55, 0.70), "hippocampus": (0.85, 0.95)}


def subject(status=CN, age=60.0, seed=7, sid="s"):
    return SubjectParams.for_status(sid, age, status, seed)


def _digest(root):
    h = hashlib.sha256()
    for dirpath, dirs, files in sorted(os.walk(root)):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


class TestSubjectParams:
    @pytest.mark.parametrize("age", [41.9, 95.1])
    def test_age_range(self, age):
        with pytest.raises(DomainError):
            subject(age=age)

    def test_rates_positive(self):
        with pytest.raises(DomainError):
            SubjectParams("s", 60.0, CN, 0.0, 0.001, 1)

    def test_rates_ordered_by_status(self):
        v = [phantom.VENTRICLE_RATES[s] for s in (CN, MCI, AD)]
        h = [phantom.HIPPOCAMPUS_RATES[s] for s in (CN, MCI, AD)]
        assert v[0] < v[1] < v[2] and h[0] < h[1] < h[2]
        assert h == [r / 2 for r in v]

    @pytest.mark.parametrize("name,code", [("CN", 0), ("mci", 1), (" AD ", 2), (2, 2)])
    def test_status_codes(self, name, code):
        assert phantom.status_code(name) == code

    @pytest.mark.parametrize("bad", ["XX", 3, -1])
    def test_bad_status(self, bad):
        with pytest.raises(DomainError):
            phantom.status_code(bad)


class TestSynthScan:
    def test_baseline_fractions_exact(self):
        s = subject()
        _, masks = synth_scan(s, s.baseline_age)
        frac = region_volume_fractions(masks)
        b = masks.brain.sum()
        assert frac["ventricle"] == pytest.approx(round(s.baseline_ventricle_fraction() * b) / b)
        assert frac["hippocampus"] == pytest.approx(round(s.baseline_hippocampus_fraction() * b) / b)
        assert abs(frac["ventricle"] - s.baseline_ventricle_fraction()) <= 0.5 / b

    def test_five_year_cn_growth(self):
        s = subject()
        _, ma = synth_scan(s, s.baseline_age)
        _, mb = synth_scan(s, s.baseline_age + 5)
        diff = region_volume_fractions(mb)["ventricle"] - region_volume_fractions(ma)["ventricle"]
        assert diff == pytest.approx(0.010, abs=1.0 / ma.brain.sum())

    def test_deterministic(self):
        a, _ = synth_scan(subject(), 63.0)
        b, _ = synth_scan(subject(), 63.0)
        assert a.data.tobytes() == b.data.tobytes()

    def test_intensity_bands(self):
        vol, masks = synth_scan(subject(AD), 70.0)
        assert vol.data.min() >= 0 and vol.data.max() <= 1
        for name, (lo, hi) in BANDS.items():
            vals = vol.data[masks.region(name)]
            assert vals.size > 0
            assert lo <= vals.min() and vals.max() <= hi, name
        assert np.all(vol.data[masks.background] == 0)

    def test_masks_partition_brain(self):
        _, m = synth_scan(subject(), 60.0)
        total = sum(m.region(r).astype(int) for r in ("tissue", "ventricle", "hippocampus", "csf"))
        np.testing.assert_array_equal(total, m.brain.astype(int))

    def test_hippocampus_mirrored_pair(self):
        _, m = synth_scan(subject(), 60.0, extent=24)
        e = m.labels.shape[2]
        h = m.hippocampus
        assert h[..., : e // 2].sum() > 0 and h[..., e // 2:].sum() > 0

    @pytest.mark.parametrize("age", [59.0, 60.0 + 15.5])
    def test_age_outside_span(self, age):
        with pytest.raises(DomainError):
            synth_scan(subject(), age)

    @pytest.mark.parametrize("extent", [7, 33])
    def test_extent_bounds(self, extent):
        with pytest.raises(ConfigurationError):
            synth_scan(subject(), 60.0, extent=extent)

    def test_saturation_flag(self):
        s = SubjectParams("s", 60.0, AD, 0.03, 0.004, 3)
        with pytest.warns(RuntimeWarning, match="saturated"):
            _, m = synth_scan(s, 75.0)
        assert m.saturated
        assert region_volume_fractions(m)["ventricle"] <= phantom.VENTRICLE_CAP + 1e-9

    def test_hippocampus_floor(self):
        s = SubjectParams("s", 60.0, AD, 0.001, 0.05, 3)
        _, m = synth_scan(s, 75.0)
        b = m.brain.sum()
        assert m.hippocampus.sum() == round(s.baseline_hippocampus_fraction() / 4 * b)


class TestProgression:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2 ** 40), status=st.sampled_from([CN, MCI, AD]),
           age=st.floats(42, 80), d1=st.floats(0, 7.5), d2=st.floats(0, 7.5))
    def test_monotone_in_age(self, seed, status, age, d1, d2):
        s = subject(status, age, seed)
        _, m1 = synth_scan(s, age + d1, extent=12)
        _, m2 = synth_scan(s, age + d1 + d2, extent=12)
        assert np.all(m2.ventricle[m1.ventricle])
        assert np.all(m1.hippocampus[m2.hippocampus])

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2 ** 40), delta=st.floats(0.5, 15))
    def test_status_ordering(self, seed, delta):
        change = {}
        for st_ in (CN, MCI, AD):
            p = synth_pair(subject(st_, 60.0, seed), delta, extent=12)
            change[st_] = {r: abs(int(p.masks_followup.region(r).sum()) - int(p.masks_baseline.region(r).sum()))
                           for r in ("ventricle", "hippocampus")}
        for r in ("ventricle", "hippocampus"):
            assert change[AD][r] >= change[MCI][r] >= change[CN][r]

    def test_ad_contains_cn(self):
        cn = synth_pair(subject(CN), 5.0)
        ad = synth_pair(subject(AD), 5.0)
        a, c = ad.masks_followup.ventricle, cn.masks_followup.ventricle
        assert np.all(a[c]) and a.sum() > c.sum()

    def test_zero_interval(self):
        p = synth_pair(subject(), 0.0)
        np.testing.assert_array_equal(p.baseline.data, p.followup.data)

    @pytest.mark.parametrize("delta", [-0.1, 15.1])
    def test_interval_range(self, delta):
        with pytest.raises(DomainError):
            synth_pair(subject(), delta)


class TestRegionFractions:
    def test_single_region(self):
        labels = np.full((4, 4, 4), phantom.LABEL_TISSUE)
        assert region_volume_fractions(RegionMasks(labels))["tissue"] == 1.0

    def test_hundred_in_thousand(self):
        labels = np.zeros(1000, np.uint8) + phantom.LABEL_TISSUE
        labels[:100] = phantom.LABEL_VENTRICLE
        assert region_volume_fractions(RegionMasks(labels.reshape(10, 10, 10)))["ventricle"] == 0.1

    def test_empty_brain(self):
        with pytest.raises(DomainError):
            region_volume_fractions(RegionMasks(np.zeros((3, 3, 3))))

    def test_sum_at_most_one(self):
        _, m = synth_scan(subject(MCI), 66.0)
        assert sum(region_volume_fractions(m).values()) == pytest.approx(1.0)


class TestCohort:
    def test_split_counts_and_partition(self, tiny_cohort_dir):
        with open(os.path.join(tiny_cohort_dir, "cohort.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == phantom.COHORT_COLUMNS
        by_split = {}
        for r in rows:
            by_split.setdefault(r["split"], set()).add(r["subject_id"])
        assert {k: len(v) for k, v in by_split.items()} == {"train": 7, "val": 1, "test": 2}
        ids = [s for v in by_split.values() for s in v]
        assert len(ids) == len(set(ids))
        for r in rows:
            assert 0.5 <= float(r["delta_years"]) <= 10.0
            assert os.path.exists(os.path.join(tiny_cohort_dir, r["path_followup"]))

    def test_pairs_per_subject(self, tiny_cohort_dir):
        with open(os.path.join(tiny_cohort_dir, "cohort.csv")) as fh:
            rows = list(csv.DictReader(fh))
        counts = {}
        for r in rows:
            counts[r["subject_id"]] = counts.get(r["subject_id"], 0) + 1
        assert all(1 <= c <= 4 for c in counts.values())

    def test_byte_identical_regeneration(self, tmp_path):
        generate_cohort(10, 5, tmp_path / "a", extent=8)
        generate_cohort(10, 5, tmp_path / "b", extent=8)
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_forced_status(self, tmp_path):
        generate_cohort(10, 5, tmp_path, extent=8, statuses="AD")
        with open(tmp_path / "cohort.csv") as fh:
            assert {r["status"] for r in csv.DictReader(fh)} == {"AD"}

    def test_status_mix(self):
        subjects, _, _ = phantom.sample_subjects(2000, 0)
        frac = np.bincount([s.status for s in subjects], minlength=3) / 2000
        np.testing.assert_allclose(frac, [0.6, 0.2, 0.2], atol=0.03)

    @pytest.mark.parametrize("kwargs", [dict(n_subjects=9), dict(n_subjects=10, split=(0.5, 0.5, 0.5))])
    def test_bad_arguments(self, tmp_path, kwargs):
        with pytest.raises(ConfigurationError):
            generate_cohort(seed=0, out_dir=tmp_path, extent=8, **kwargs)

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(FileFormatError, match="file"):
            generate_cohort(10, 0, blocker / "sub", extent=8)


class TestVolumeFiles:
    def test_roundtrip(self, tmp_path):
        vol, masks = synth_scan(subject(), 61.0, spacing=1.5)
        write_volume(tmp_path / "v.tvol", vol)
        write_mask(tmp_path / "m.tmsk", masks)
        back = read_volume(tmp_path / "v.tvol")
        assert back.spacing == 1.5
        np.testing.assert_array_equal(back.data, vol.data)
        np.testing.assert_array_equal(read_mask(tmp_path / "m.tmsk").labels, masks.labels)

    def test_header_layout(self, tmp_path):
        vol, _ = synth_scan(subject(), 61.0, extent=8)
        write_volume(tmp_path / "v.tvol", vol)
        raw = (tmp_path / "v.tvol").read_bytes()
        assert raw[:4] == b"TVOL" and len(raw) == 4 + 2 + 12 + 4 + 4 * 8 ** 3
        np.testing.assert_array_equal(np.frombuffer(raw[22:], "<f4").reshape(8, 8, 8), vol.data)

    def test_wrong_magic(self, tmp_path):
        _, masks = synth_scan(subject(), 61.0, extent=8)
        write_mask(tmp_path / "m.tmsk", masks)
        with pytest.raises(FileFormatError, match="magic"):
            read_volume(tmp_path / "m.tmsk")

    def test_truncated(self, tmp_path):
        vol, _ = synth_scan(subject(), 61.0, extent=8)
        write_volume(tmp_path / "v.tvol", vol)
        (tmp_path / "v.tvol").write_bytes((tmp_path / "v.tvol").read_bytes()[:-1])
        with pytest.raises(FileFormatError, match="payload"):
            read_volume(tmp_path / "v.tvol")

    def test_missing(self, tmp_path):
        with pytest.raises(FileFormatError):
            read_volume(tmp_path / "nope.tvol")
