"""Command-line entry point: ``videolayers <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import effects
from .compositing import composite_without
from .evalsynth import SceneSpec, clutter_fraction, gradcheck, save_scene, sequence_scores, synth_scene
from .objective import NumericalError
from .solver import CheckpointError, Decomposition, SolverConfig, problem_from_dataset, realize, save_checkpoint, train
from .videodata import DataError, load_sequence, read_mask, read_rgb, resize_dataset, save_outputs, write_rgb

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_RESIZE = "448x256"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: error: {message}")


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got '{text}'") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive, got '{text}'")
    return w, h


def _layers(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated layer indices, got '{text}'") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--epochs", type=int, default=None)
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--resize", type=_size, nargs="?", const=_size(DEFAULT_RESIZE), default=None, metavar="WxH")
    g.add_argument("--config", type=Path, default=None, help="JSON file of solver settings")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    g.add_argument("--log-every", type=int, default=None, help="progress table interval in epochs")

    p = _Parser(prog="videolayers", description="Split a video into per-object layers and edit them.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("decompose", parents=[common], help="optimize layers for a sequence")
    s.add_argument("manifest", type=Path)
    s.add_argument("-o", "--out", type=Path, required=True)

    s = sub.add_parser("render", parents=[common], help="re-composite with layers removed")
    s.add_argument("outdir", type=Path, help="output directory of decompose")
    s.add_argument("--remove", type=_layers, default=[])
    s.add_argument("-o", "--out", type=Path, required=True)

    s = sub.add_parser("effect", parents=[common], help="apply an editing effect")
    s.add_argument("kind", choices=["colorpop", "bgswap", "strobe"])
    s.add_argument("outdir", type=Path, help="output directory of decompose")
    s.add_argument("-o", "--out", type=Path, required=True)
    s.add_argument("--layer", type=_layers, default=None, help="layers kept in color (default: all)")
    s.add_argument("--sat-lo", type=float, default=0.0)
    s.add_argument("--sat-hi", type=float, default=1.3)
    s.add_argument("--canvas", type=Path, default=None, help="replacement background image")
    s.add_argument("--interval", type=int, default=15)

    s = sub.add_parser("evaluate", parents=[common], help="score predicted layers against ground truth")
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--gt", type=Path, required=True)
    s.add_argument("--threshold", type=float, default=0.25)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic scene with ground truth")
    s.add_argument("spec", type=Path)
    s.add_argument("-o", "--out", type=Path, required=True)

    s = sub.add_parser("gradcheck", parents=[common], help="compare analytic and numeric gradients")
    s.add_argument("--tolerance", type=float, default=1e-4)
    return p


# -- commands ---------------------------------------------------------------------------


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def solver_config(args, manifest_config: dict | None = None) -> SolverConfig:
    """Defaults, then the manifest's config block, then --config, then explicit flags."""
    cfg = SolverConfig()
    try:
        cfg = cfg.updated(manifest_config or {})
        if args.config is not None:
            cfg = cfg.updated(_read_json(args.config))
        flags = {"seed": args.seed, "epochs": args.epochs, "lr": args.lr, "log_every": args.log_every}
        return cfg.updated({k: v for k, v in flags.items() if v is not None})
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad solver config: {exc}") from exc


class _ProgressTable:
    def __init__(self, every: int):
        self.every = every
        self.header = False

    def __call__(self, epoch: int, report) -> None:
        if not self.every or epoch % self.every:
            return
        row = report.as_row()
        if not self.header:
            print("epoch " + " ".join(f"{k:>10s}" for k in row), file=sys.stderr)
            self.header = True
        print(f"{epoch:5d} " + " ".join(f"{v:10.5f}" for v in row.values()), file=sys.stderr, flush=True)


def cmd_decompose(args) -> int:
    ds = load_sequence(args.manifest)
    if args.resize is not None:
        ds = resize_dataset(ds, *args.resize)
    cfg = solver_config(args, ds.config)
    prob = problem_from_dataset(ds, cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    result = train(prob, cfg, callback=_ProgressTable(cfg.log_every))
    decomp = realize(result.params, prob, transfer_detail=True)
    save_outputs(decomp.stack, out, canvas=decomp.canvas, threads=args.threads)
    decomp.save(out / "decomposition.npz")
    meta = {"history": result.history.rows, "bootstrap_active": result.weights.bootstrap_active}
    save_checkpoint(out / "checkpoint.vlck", result.params, result.state, meta)
    (out / "history.json").write_text(json.dumps(result.history.rows, indent=1))
    (out / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=1))
    return EXIT_OK


def _load_decomposition(outdir: Path) -> Decomposition:
    path = outdir / "decomposition.npz" if outdir.is_dir() else outdir
    if not path.exists():
        raise DataError(f"{path}: no decomposition found (run decompose first)")
    return Decomposition.load(path)


def _write_frames(frames: np.ndarray, out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(frames):
        write_rgb(img, out / f"{stem}_{t}.png")


def cmd_render(args) -> int:
    d = _load_decomposition(args.outdir)
    try:
        frames = np.stack([composite_without(d.stack, args.remove, t) for t in range(d.stack.num_frames)])
    except IndexError as exc:
        raise DataError(str(exc)) from exc
    if d.stack.gain is not None:
        frames = frames * d.stack.gain[..., None]
    _write_frames(frames, args.out, "frame")
    return EXIT_OK


def cmd_effect(args) -> int:
    d = _load_decomposition(args.outdir)
    if args.layer is not None and any(not 0 <= i < d.stack.num_layers for i in args.layer):
        raise DataError(f"--layer {args.layer} out of range for {d.stack.num_layers} layers")
    if args.kind == "colorpop":
        frames = effects.reconstruction(d)
        out = effects.color_pop(frames, effects.layer_alpha(d, args.layer), args.sat_lo, args.sat_hi)
        _write_frames(out, args.out, "colorpop")
    elif args.kind == "bgswap":
        if args.canvas is None:
            raise UsageError("bgswap needs --canvas")
        _write_frames(effects.background_replace(d, read_rgb(args.canvas)), args.out, "bgswap")
    else:
        args.out.mkdir(parents=True, exist_ok=True)
        write_rgb(effects.stroboscopic(d, args.interval), args.out / "strobe.png")
    return EXIT_OK


def _load_layers(path: Path) -> np.ndarray:
    """Soft layers (N, T, H, W) from an ``.npz`` (decompose or synth output) or a folder of PNG masks."""
    if path.is_dir():
        for name in ("decomposition.npz", "ground_truth.npz"):
            if (path / name).exists():
                return _load_layers(path / name)
        pngs = sorted(path.glob("*.png"))
        if not pngs:
            raise DataError(f"{path}: no masks found")
        return np.stack([read_mask(p) for p in pngs])[None]
    if not path.exists():
        raise DataError(f"{path}: not found")
    with np.load(path) as z:
        for key in ("support", "alpha"):
            if key in z:
                return np.asarray(z[key], dtype=np.float64)
    raise DataError(f"{path}: holds neither layer alphas nor ground-truth support")


def cmd_evaluate(args) -> int:
    pred = _load_layers(args.pred)
    gt = _load_layers(args.gt) > 0.5
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    rows = []
    for i in range(pred.shape[0]):
        scores = sequence_scores(pred[i] > args.threshold, gt[i])
        rows.append({"layer": i, **scores, "clutter": clutter_fraction(pred[i], gt[i])})
    summary = {k: float(np.mean([r[k] for r in rows])) for k in ("J", "F", "JF", "clutter")}
    print(json.dumps({"layers": rows, "mean": summary}, indent=1))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SceneSpec.from_dict(_read_json(args.spec))
    try:
        scene = synth_scene(spec, seed=args.seed or 0)
    except ValueError as exc:
        raise DataError(f"{args.spec}: {exc}") from exc
    save_scene(scene, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck(seed=args.seed or 0)
    for line in report.lines():
        print(line)
    worst = report.max_error()
    ok = worst <= args.tolerance
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "decompose": cmd_decompose,
    "render": cmd_render,
    "effect": cmd_effect,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
}


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, effects.EffectError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
