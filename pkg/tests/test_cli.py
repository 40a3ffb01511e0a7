"""Command-line surface: outputs, exit codes, determinism and slice export."""

import hashlib
import os

import numpy as np
import pytest

from tadm3d.cli import (
    EXIT_FILE,
    EXIT_OK,
    EXIT_SHAPE,
    EXIT_USAGE,
    UsageError,
    exit_code,
    import_slices,
    main,
    read_pgm,
    thread_limit,
    to_gray,
)
from tadm3d.errors import ConfigurationError, DimensionError, FileFormatError, TrainingError
from tadm3d.phantom import Volume
from tadm3d.volume_io import read_volume, write_volume


def tree_hash(root):
    h = hashlib.sha256()
    for dirpath, dirs, files in os.walk(root):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def write_config(path, **kw):
    base = dict(seed=0, extent=8, t_steps=5, batch=2, lr=1e-3, lambda_bae=0.0, max_steps=3, latent_dim=8)
    base.update(kw)
    path.write_text("".join(f"{k} = {v}\n" for k, v in base.items()))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A cohort at extent 8 plus a three-step checkpoint produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cohort = root / "cohort"
    assert main(["gen-data", "--subjects", "10", "--seed", "2", "--extent", "8", "--out", str(cohort)]) == 0
    cfg = write_config(root / "run.cfg", cohort_dir=cohort, out_dir=root / "run")
    assert main(["train", "--config", cfg]) == 0
    return root, cohort, root / "run" / "model.tadw"


class TestGenData:
    def test_prints_split_counts(self, tmp_path, capsys):
        assert main(["gen-data", "--subjects", "10", "--extent", "8", "--out", str(tmp_path / "c")]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "train=7 val=1 test=2"

    def test_deterministic(self, tmp_path):
        for d in ("a", "b"):
            main(["gen-data", "--subjects", "10", "--seed", "4", "--extent", "8", "--out", str(tmp_path / d)])
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    @pytest.mark.parametrize("extent,code", [(9, EXIT_OK), (4, EXIT_USAGE)])
    def test_extent_bounds(self, tmp_path, extent, code):
        assert main(["gen-data", "--extent", str(extent), "--out", str(tmp_path / "c")]) == code

    def test_unwritable(self, tmp_path, capsys):
        blocker = tmp_path / "f"
        blocker.write_text("")
        assert main(["gen-data", "--extent", "8", "--out", str(blocker / "c")]) == EXIT_USAGE
        assert "cannot write" in capsys.readouterr().err

    def test_config_supplies_defaults(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "g.cfg", cohort_dir=tmp_path / "from_cfg")
        assert main(["gen-data", "--config", cfg]) == EXIT_OK
        assert (tmp_path / "from_cfg" / "cohort.csv").exists()


class TestTrainAndPredict:
    def test_train_outputs(self, trained):
        root, _, ckpt = trained
        assert ckpt.exists()
        assert (root / "run" / "train_log.csv").read_text().startswith("step,lr,loss_dml,loss_bae,loss_total\n")

    def test_train_needs_bae_when_weighted(self, trained, tmp_path):
        _, cohort, _ = trained
        cfg = write_config(tmp_path / "c.cfg", cohort_dir=cohort, out_dir=tmp_path / "o", lambda_bae=1.0)
        assert main(["train", "--config", cfg]) == EXIT_FILE

    def test_train_timing_file_is_separate(self, trained, tmp_path):
        _, cohort, _ = trained
        cfg = write_config(tmp_path / "c.cfg", cohort_dir=cohort, out_dir=tmp_path / "o", max_steps=2)
        assert main(["train", "--config", cfg, "--timing", str(tmp_path / "t.csv")]) == EXIT_OK
        assert len((tmp_path / "t.csv").read_text().splitlines()) == 3
        assert "timing.csv" not in os.listdir(tmp_path / "o")

    def test_bad_config_key(self, tmp_path):
        (tmp_path / "c.cfg").write_text("colour = blue\n")
        assert main(["train", "--config", str(tmp_path / "c.cfg")]) == EXIT_USAGE

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == EXIT_USAGE

    def _predict(self, ckpt, baseline, out, *extra):
        return main(["predict", "--checkpoint", str(ckpt), "--baseline", str(baseline), "--delta", "3",
                     "--age", "70", "--status", "AD", "--seed", "1", "--out", str(out), *extra])

    def test_predict_deterministic(self, trained, tmp_path, capsys):
        _, cohort, ckpt = trained
        base = next((cohort / "scans").glob("*_base.tvol"))
        assert self._predict(ckpt, base, tmp_path / "a.tvol") == EXIT_OK
        assert "bae_delta=" in capsys.readouterr().out
        assert self._predict(ckpt, base, tmp_path / "b.tvol") == EXIT_OK
        assert (tmp_path / "a.tvol").read_bytes() == (tmp_path / "b.tvol").read_bytes()
        pred = read_volume(tmp_path / "a.tvol").data
        assert pred.shape == (8, 8, 8) and pred.min() >= 0 and pred.max() <= 1

    def test_predict_bad_status(self, trained, tmp_path, capsys):
        _, cohort, ckpt = trained
        code = main(["predict", "--checkpoint", str(ckpt), "--baseline", "x", "--delta", "1", "--age", "60",
                     "--status", "X", "--out", str(tmp_path / "o.tvol")])
        assert code == EXIT_USAGE
        err = capsys.readouterr().err
        assert "CN" in err and "MCI" in err and "AD" in err

    def test_predict_backward_gated(self, trained, tmp_path):
        _, cohort, ckpt = trained
        base = next((cohort / "scans").glob("*_base.tvol"))
        args = ["predict", "--checkpoint", str(ckpt), "--baseline", str(base), "--delta", "-2", "--age", "70",
                "--status", "CN", "--out", str(tmp_path / "o.tvol")]
        assert main(args) == EXIT_USAGE
        assert main(args + ["--allow-backward"]) == EXIT_OK

    def test_predict_gap_limit(self, trained, tmp_path):
        _, cohort, ckpt = trained
        base = next((cohort / "scans").glob("*_base.tvol"))
        assert self._predict(ckpt, base, tmp_path / "o.tvol") == EXIT_OK
        code = main(["predict", "--checkpoint", str(ckpt), "--baseline", str(base), "--delta", "16", "--age", "70",
                     "--status", "CN", "--out", str(tmp_path / "o.tvol")])
        assert code == EXIT_USAGE

    def test_predict_bad_checkpoint(self, trained, tmp_path):
        _, cohort, _ = trained
        bad = tmp_path / "bad.tadw"
        bad.write_bytes(b"NOPE" + bytes(20))
        assert self._predict(bad, next((cohort / "scans").glob("*_base.tvol")), tmp_path / "o.tvol") == EXIT_FILE

    def test_predict_shape_mismatch(self, trained, tmp_path):
        _, _, ckpt = trained
        write_volume(tmp_path / "big.tvol", Volume(np.zeros((12, 12, 12))))
        assert self._predict(ckpt, tmp_path / "big.tvol", tmp_path / "o.tvol") == EXIT_SHAPE


class TestEvaluate:
    def test_report_deterministic(self, trained, tmp_path, capsys):
        _, cohort, ckpt = trained
        for name in ("a.csv", "b.csv"):
            assert main(["evaluate", "--checkpoint", str(ckpt), "--cohort", str(cohort), "--seed", "3",
                         "--out", str(tmp_path / name)]) == EXIT_OK
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert "ssim" in capsys.readouterr().out

    def test_identity(self, trained, tmp_path):
        _, cohort, _ = trained
        assert main(["evaluate", "--identity", "--cohort", str(cohort), "--out", str(tmp_path / "i.csv")]) == EXIT_OK

    def test_wrong_conditioning_needs_ad_subjects(self, trained):
        _, cohort, ckpt = trained
        assert main(["evaluate", "--checkpoint", str(ckpt), "--cohort", str(cohort), "--wrong-conditioning"]) == EXIT_USAGE

    def test_missing_cohort(self, trained, tmp_path):
        _, _, ckpt = trained
        assert main(["evaluate", "--checkpoint", str(ckpt), "--cohort", str(tmp_path)]) == EXIT_FILE

    def test_needs_checkpoint(self, trained):
        _, cohort, _ = trained
        assert main(["evaluate", "--cohort", str(cohort)]) == EXIT_USAGE


class TestAblate:
    def test_table(self, trained, tmp_path, capsys):
        _, cohort, _ = trained
        cfg = write_config(tmp_path / "a.cfg", cohort_dir=cohort, out_dir=tmp_path / "o")
        assert main(["ablate", "--config", cfg, "--steps", "1", "--out", str(tmp_path / "abl.csv")]) == EXIT_OK
        lines = (tmp_path / "abl.csv").read_text().splitlines()
        assert len(lines) == 6
        assert [ln.split(",")[0] for ln in lines[1:]] == ["full", "w/o metadata", "w/o age gap", "w/o BAE", "w/o BITR"]


class TestSlices:
    def test_half_grey_rounds_up(self, tmp_path):
        write_volume(tmp_path / "v.tvol", Volume(np.full((16, 16, 16), 0.5)))
        assert main(["export-slices", "--volume", str(tmp_path / "v.tvol"), "--axis", "z",
                     "--out", str(tmp_path / "s")]) == EXIT_OK
        files = sorted(os.listdir(tmp_path / "s"))
        assert len(files) == 16 and files[0] == "slice_000.pgm"
        img = read_pgm(tmp_path / "s" / files[3])
        assert img.shape == (16, 16) and np.all(img == 128)
        assert (tmp_path / "s" / files[0]).read_bytes().startswith(b"P5\n16 16\n255\n")

    @pytest.mark.parametrize("axis", ["x", "y", "z"])
    def test_round_trip(self, tmp_path, rng, axis):
        vol = rng.uniform(0, 1, (9, 10, 11)).astype(np.float32)
        from tadm3d.cli import export_slices

        class _V:
            data = vol

        export_slices(_V, axis, tmp_path)
        back = import_slices(tmp_path, axis)
        assert back.shape == vol.shape
        assert np.abs(back - vol).max() <= 1 / 255 + 1e-7

    def test_gray_mapping(self):
        np.testing.assert_array_equal(to_gray([-1.0, 0.0, 0.5, 1.0, 2.0]), [0, 0, 128, 255, 255])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "v.tvol").write_bytes(b"XXXX" + bytes(40))
        assert main(["export-slices", "--volume", str(tmp_path / "v.tvol"), "--axis", "x",
                     "--out", str(tmp_path / "s")]) == EXIT_FILE

    def test_bad_axis(self, tmp_path):
        assert main(["export-slices", "--volume", "v", "--axis", "w", "--out", str(tmp_path)]) == EXIT_USAGE


class TestEnvironmentAndCodes:
    @pytest.mark.parametrize("raw,expected", [("", None), ("3", 3), (" 1 ", 1)])
    def test_thread_limit(self, raw, expected):
        assert thread_limit({"TADM_THREADS": raw}) == expected

    @pytest.mark.parametrize("raw", ["0", "-2", "many"])
    def test_thread_limit_invalid(self, raw):
        with pytest.raises(UsageError):
            thread_limit({"TADM_THREADS": raw})

    def test_invalid_env_exit_code(self, monkeypatch, tmp_path):
        monkeypatch.setenv("TADM_THREADS", "zero")
        assert main(["gen-data", "--extent", "8", "--out", str(tmp_path / "c")]) == EXIT_USAGE

    def test_valid_env_runs(self, monkeypatch, tmp_path):
        monkeypatch.setenv("TADM_THREADS", "1")
        assert main(["gen-data", "--extent", "8", "--out", str(tmp_path / "c")]) == EXIT_OK

    @pytest.mark.parametrize("exc,code", [(DimensionError("x"), 4), (FileFormatError("x"), 3),
                                          (FileNotFoundError("x"), 3), (ConfigurationError("x"), 2),
                                          (TrainingError("x"), 1), (RuntimeError("x"), 1)])
    def test_exit_mapping(self, exc, code):
        assert exit_code(exc) == code

    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_help(self, capsys):
        assert main(["--help"]) == EXIT_OK
        out = capsys.readouterr().out
        for cmd in ("gen-data", "pretrain-bae", "train", "predict", "evaluate", "ablate", "export-slices"):
            assert cmd in out
