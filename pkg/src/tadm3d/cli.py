"""Command-line entry point ``tadm3d``.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
3 bad or missing input file, 4 shape mismatch.
"""

from __future__ import annotations

import argparse
import contextlib
import glob
import os
import sys

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    DomainError,
    FileFormatError,
    ProtocolError,
    TADMError,
)
from .phantom import MIN_EXTENT, STATUS_NAMES, Volume

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_FILE, EXIT_SHAPE = 0, 1, 2, 3, 4
MAX_PREDICT_GAP = 15.0
AXES = {"z": 0, "y": 1, "x": 2}


class UsageError(TADMError):
    """Bad command-line usage detected after argument parsing."""


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, DimensionError):
        return EXIT_SHAPE
    if isinstance(exc, (FileFormatError, OSError)):
        return EXIT_FILE
    if isinstance(exc, (UsageError, ConfigurationError, DomainError, ContractError, ProtocolError)):
        return EXIT_USAGE
    return EXIT_INTERNAL


def thread_limit(env=None):
    """Thread cap from ``TADM_THREADS``; ``None`` when unset (use all cores)."""
    env = os.environ if env is None else env
    raw = env.get("TADM_THREADS", "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TADM_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"TADM_THREADS must be a positive integer, got {raw!r}")
    return n


def _limits(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------- slices

def to_gray(values) -> np.ndarray:
    """Map [0, 1] to 0..255 with round-half-up; values outside are clamped."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, img):
    img = np.ascontiguousarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise FileFormatError(f"{path}: not a binary graymap")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FileFormatError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos + 1, count=w * h)
    return pixels.reshape(h, w).copy()


def export_slices(volume: Volume, axis: str, out_dir) -> list:
    """Write one ``slice_NNN.pgm`` per index along ``axis``; returns the paths."""
    if axis not in AXES:
        raise UsageError(f"axis must be one of x, y, z; got {axis!r}")
    os.makedirs(out_dir, exist_ok=True)
    gray = to_gray(volume.data)
    paths = []
    for i in range(gray.shape[AXES[axis]]):
        p = os.path.join(out_dir, f"slice_{i:03d}.pgm")
        write_pgm(p, np.take(gray, i, axis=AXES[axis]))
        paths.append(p)
    return paths


def import_slices(in_dir, axis: str) -> np.ndarray:
    """Rebuild a volume (values in [0, 1]) from an exported slice stack."""
    paths = sorted(glob.glob(os.path.join(in_dir, "slice_*.pgm")))
    if not paths:
        raise FileFormatError(f"no slice_*.pgm files in {in_dir}")
    stack = np.stack([read_pgm(p) for p in paths], axis=AXES[axis])
    return stack.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------- commands

def _config(args):
    from .training import read_config

    if not os.path.exists(args.config):
        raise UsageError(f"config file {args.config} does not exist")
    cfg = read_config(args.config)
    return cfg


def cmd_gen_data(args):
    from .phantom import generate_cohort
    from .training import read_config

    seed, extent, out = args.seed, args.extent, args.out
    if args.config:
        cfg = read_config(args.config)
        seed = cfg.seed if seed is None else seed
        extent = cfg.extent if extent is None else extent
        out = out or cfg.cohort_dir
    seed = 0 if seed is None else seed
    extent = 16 if extent is None else extent
    if not out:
        raise UsageError("gen-data needs --out (or cohort_dir in --config)")
    if extent < MIN_EXTENT:
        raise UsageError(f"extent {extent} below the minimum of {MIN_EXTENT}")
    try:
        counts = generate_cohort(args.subjects, seed, out, extent=extent, statuses=args.status)
    except (FileFormatError, OSError) as exc:
        raise UsageError(f"cannot write cohort to {out}: {exc}") from exc
    print(f"train={counts[0]} val={counts[1]} test={counts[2]}")


def cmd_pretrain_bae(args):
    from .training import Cohort, pretrain_bae, save_bae

    cfg = _config(args)
    cohort = Cohort(args.cohort or cfg.cohort_dir)
    res = pretrain_bae(cohort, cfg)
    out = args.out or os.path.join(cfg.out_dir or ".", "bae.tadw")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_bae(out, res.estimator, cfg.model_config())
    print(f"steps={res.steps} val_mae={res.val_mae:.4f} mean_age_baseline_mae={res.baseline_mae:.4f}")
    print(f"wrote {out}")


def _bae_state(path, cfg, required):
    from .training import load_bae_state

    path = path or os.path.join(cfg.out_dir or ".", "bae.tadw")
    if os.path.exists(path):
        return load_bae_state(path)
    if required:
        raise FileFormatError(f"brain-age checkpoint {path} not found (run pretrain-bae first)")
    return None


def cmd_train(args):
    from .training import Cohort, train

    cfg = _config(args)
    if not cfg.out_dir:
        raise UsageError("config must set out_dir for training")
    cohort = Cohort(args.cohort or cfg.cohort_dir)
    bae = _bae_state(args.bae, cfg, required=cfg.lambda_bae > 0)
    res = train(cfg, cohort, bae_state=bae, out_dir=cfg.out_dir, timing_path=args.timing)
    last = res.losses[-1] if res.losses else None
    if last is not None:
        print(f"steps={len(res.losses)} loss_dml={last.loss_dml:.6f} loss_bae={last.loss_bae:.6f} "
              f"loss_total={last.loss_total:.6f}")
    print(f"wrote {res.checkpoint_path}")


def cmd_predict(args):
    from . import diffusion
    from .model import ConditioningBundle
    from .training import load_model
    from .volume_io import read_volume, write_volume

    if not -MAX_PREDICT_GAP <= args.delta <= MAX_PREDICT_GAP:
        raise UsageError(f"--delta must lie within [-{MAX_PREDICT_GAP}, {MAX_PREDICT_GAP}]")
    if args.delta < 0 and not args.allow_backward:
        raise UsageError("negative --delta predicts backward in time; pass --allow-backward to enable it")
    model, sched = load_model(args.checkpoint)
    base = read_volume(args.baseline)
    if base.data.shape != (model.extent,) * 3:
        raise DimensionError(f"baseline extents {base.data.shape} do not match checkpoint extent {model.extent}")
    cond = ConditioningBundle.build(base.data, args.delta, args.age, args.status)
    res = diffusion.sample(model, cond, sched, seed=[args.seed])[0, 0]
    pred = np.clip(base.data + np.float32(model.residual_scale) * res, 0.0, 1.0).astype(np.float32)
    write_volume(args.out, Volume(pred, base.spacing))
    from .tensor_core import no_grad

    with no_grad():
        dhat = float(model.bae_delta(base.data, pred).data[0])
    print(f"wrote {args.out}")
    print(f"bae_delta={dhat:.3f} requested_delta={args.delta:.3f}")


def cmd_evaluate(args):
    from .evaluation import evaluate_identity, evaluate_model, wrong_conditioning_protocol
    from .training import Cohort, load_model

    cohort_dir = args.cohort
    if cohort_dir is None and args.config:
        cohort_dir = _config(args).cohort_dir
    if not cohort_dir:
        raise UsageError("evaluate needs --cohort or a config with cohort_dir")
    cohort = Cohort(cohort_dir)
    if args.identity:
        rep = evaluate_identity(cohort, args.split)
    else:
        if not args.checkpoint:
            raise UsageError("evaluate needs --checkpoint unless --identity is given")
        model, sched = load_model(args.checkpoint)
        if args.wrong_conditioning:
            wc = wrong_conditioning_protocol(model, cohort, sched, split=args.split, seed=args.seed)
            if args.out:
                wc.correct.write_csv(args.out)
                root, ext = os.path.splitext(args.out)
                wc.forced.write_csv(f"{root}_forced_cn{ext or '.csv'}")
            print(wc.summary())
            return
        rep = evaluate_model(model, cohort, sched, split=args.split, seed=args.seed)
    if args.out:
        rep.write_csv(args.out)
    print(rep.summary())


def cmd_ablate(args):
    from .evaluation import ablate, ablation_table
    from .training import Cohort

    cfg = _config(args)
    if args.steps is not None:
        cfg = cfg.replace(max_steps=args.steps)
    cohort = Cohort(args.cohort or cfg.cohort_dir)
    bae = _bae_state(args.bae, cfg, required=cfg.lambda_bae > 0)
    rows = ablate(cohort, cfg, bae_state=bae, split=args.split, seed=args.seed)
    table = ablation_table(rows)
    out = args.out or os.path.join(cfg.out_dir or ".", "ablation.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", newline="") as fh:
        fh.write(table)
    sys.stdout.write(table)


def cmd_export_slices(args):
    from .volume_io import read_volume

    vol = read_volume(args.volume)
    paths = export_slices(vol, args.axis, args.out)
    print(f"wrote {len(paths)} slices to {args.out}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tadm3d", description="Residual diffusion on synthetic brain phantoms.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen-data", help="generate a phantom cohort")
    g.add_argument("--subjects", type=int, default=10)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--extent", type=int, default=None)
    g.add_argument("--out", default=None)
    g.add_argument("--config", default=None)
    g.add_argument("--status", choices=STATUS_NAMES, default=None, help="force one status for every subject")
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("pretrain-bae", help="pretrain and freeze the brain-age estimator")
    b.add_argument("--config", required=True)
    b.add_argument("--cohort", default=None)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_pretrain_bae)

    t = sub.add_parser("train", help="train the residual diffusion model")
    t.add_argument("--config", required=True)
    t.add_argument("--cohort", default=None)
    t.add_argument("--bae", default=None, help="brain-age checkpoint (default: <out_dir>/bae.tadw)")
    t.add_argument("--timing", default=None, help="write per-step wall-clock seconds to this CSV")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="predict a follow-up scan")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--baseline", required=True)
    r.add_argument("--delta", type=float, required=True)
    r.add_argument("--age", type=float, required=True)
    r.add_argument("--status", choices=STATUS_NAMES, required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--allow-backward", action="store_true")
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score a checkpoint on a cohort split")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--cohort", default=None)
    e.add_argument("--config", default=None)
    e.add_argument("--split", default="test")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.add_argument("--identity", action="store_true", help="score the no-change baseline instead")
    e.add_argument("--wrong-conditioning", action="store_true", help="AD pairs with true vs forced-CN status")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and score the ablation variants")
    a.add_argument("--config", required=True)
    a.add_argument("--cohort", default=None)
    a.add_argument("--bae", default=None)
    a.add_argument("--steps", type=int, default=None, help="override max_steps for every variant")
    a.add_argument("--split", default="test")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-slices", help="write a volume as PGM slices")
    x.add_argument("--volume", required=True)
    x.add_argument("--axis", choices=sorted(AXES), required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_slices)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        with _limits(thread_limit()):
            args.func(args)
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - mapped onto exit codes
        code = exit_code(exc)
        print(f"tadm3d {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
