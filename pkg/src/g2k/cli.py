"""Command line front end: train, eval, viz, gradcheck, synth.

Configuration resolves in three layers: dataclass defaults, then a key=value
config file, then explicit flags; the G2K_SEED environment variable beats all
of them for the seed. Exit codes: 0 ok, 2 usage or bad input, 3 divergence,
4 checkpoint/config mismatch, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from . import data as da
from . import evaluation as ev
from . import training as tr
from .config import (VARIANTS, ConfigError, ModelConfig, TrainConfig,
                     config_hash)
from .model import TrajectoryModel, VariantError

_MODEL_FLAGS = [
    ("--hidden", "hidden_size", int),
    ("--blocks", "num_blocks", int),
    ("--block-skip", "block_skip", int),
    ("--cell-units", "cell_units", int),
    ("--embed-pos", "embed_pos", int),
    ("--embed-vis", "embed_vis", int),
    ("--feature-dim", "feature_dim", int),
    ("--zones", "zones", int),
    ("--grid-size", "grid_size", int),
    ("--cell-channels", "cell_channels", int),
    ("--static-input", "static_input_dim", int),
    ("--static-hidden", "static_hidden", int),
    ("--lambda", "lambda_reg", float),
    ("--neighborhood", "neighborhood_size", int),
    ("--obs-len", "obs_len", int),
    ("--pred-len", "pred_len", int),
    ("--tau", "tau", float),
    ("--init-scale", "init_scale", float),
]

_TRAIN_FLAGS = [
    ("--epochs", "epochs", int),
    ("--batch-size", "batch_size", int),
    ("--lr", "lr", float),
    ("--optimizer", "optimizer", str),
    ("--seed", "seed", int),
    ("--clip-norm", "clip_norm", float),
]

_MODEL_FIELD_NAMES = {f.name for f in fields(ModelConfig)}
_TRAIN_FIELD_NAMES = {f.name for f in fields(TrainConfig)}


def _add_config_flags(sub: argparse.ArgumentParser, with_variant: bool) -> None:
    if with_variant:
        sub.add_argument("--variant", required=True, choices=VARIANTS)
    sub.add_argument("--config", help="key=value file of hyperparameters")
    for flag, dest, typ in _MODEL_FLAGS:
        sub.add_argument(flag, dest=dest, type=typ, default=None)
    sub.add_argument("--no-attention", action="store_true",
                     help="replace learned attention by uniform weights")
    sub.add_argument("--no-static", action="store_true",
                     help="disable the static scene grid")
    for flag, dest, typ in _TRAIN_FLAGS:
        sub.add_argument(flag, dest=dest, type=typ, default=None)


def _add_data_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--scenario", help="synthetic scenario spec file")
    sub.add_argument("--dataset", help="canonical TSV track file")
    sub.add_argument("--image", help="PGM scene map attached to every batch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="g2k", description="pedestrian trajectory prediction workbench"
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", help="fit a variant, write ckpt + log")
    _add_config_flags(p_train, with_variant=True)
    _add_data_flags(p_train)
    p_train.add_argument("--out", required=True, help="output directory")

    p_eval = subs.add_parser("eval", help="score a checkpoint or the baseline")
    p_eval.add_argument("--ckpt")
    p_eval.add_argument("--baseline", action="store_true",
                        help="constant-velocity reference, no checkpoint")
    _add_data_flags(p_eval)
    p_eval.add_argument("--out", help="write the report CSV here")
    for flag, dest, typ in _MODEL_FLAGS:
        p_eval.add_argument(flag, dest=dest, type=typ, default=None)

    p_viz = subs.add_parser("viz", help="export adjacency, attention, heatmap")
    p_viz.add_argument("--ckpt", required=True)
    _add_data_flags(p_viz)
    p_viz.add_argument("--scene", type=int, default=0, help="batch index")
    p_viz.add_argument("--out", required=True, help="output directory")

    p_grad = subs.add_parser("gradcheck", help="finite-difference gradient audit")
    g = p_grad.add_mutually_exclusive_group(required=True)
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--all", action="store_true", help="check every variant")

    p_synth = subs.add_parser("synth", help="emit a synthetic scenario as TSV")
    p_synth.add_argument("--scenario", required=True)
    p_synth.add_argument("--out", required=True, help="output TSV path")

    return parser


# ---------------------------------------------------------------------------
# config resolution


def _convert(name: str, raw: str, cls) -> object:
    for f in fields(cls):
        if f.name != name:
            continue
        if f.type in ("bool", bool):
            if raw not in ("true", "false"):
                raise ConfigError(f"{name}: expected true/false, got {raw!r}")
            return raw == "true"
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        return raw
    raise ConfigError(f"unknown config key {name!r}")


def apply_config_file(path: str, mc: ModelConfig, tc: TrainConfig) -> None:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                if key in _MODEL_FIELD_NAMES:
                    setattr(mc, key, _convert(key, val, ModelConfig))
                elif key in _TRAIN_FIELD_NAMES:
                    setattr(tc, key, _convert(key, val, TrainConfig))
                else:
                    raise ConfigError(f"unknown config key {key!r}")
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from None


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """defaults <- config file <- flags <- G2K_SEED, then validation."""
    mc = ModelConfig()
    tc = TrainConfig()
    if getattr(args, "config", None):
        apply_config_file(args.config, mc, tc)
    if getattr(args, "variant", None):
        mc.variant = args.variant
    for _, dest, _ in _MODEL_FLAGS:
        v = getattr(args, dest, None)
        if v is not None:
            setattr(mc, dest, v)
    if getattr(args, "no_attention", False):
        mc.attention_enabled = False
    if getattr(args, "no_static", False):
        mc.static_grid_enabled = False
    for _, dest, _ in _TRAIN_FLAGS:
        v = getattr(args, dest, None)
        if v is not None:
            setattr(tc, dest, v)
    env_seed = os.environ.get("G2K_SEED")
    if env_seed is not None:
        try:
            tc.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"G2K_SEED must be an integer, got {env_seed!r}")
    mc.validate()
    mc.check_divisibility()
    tc.validate()
    return mc, tc


def load_batches(args, mc: ModelConfig | None) -> list[da.SceneBatch]:
    """Scenario or TSV input as scene batches.

    With a model config the window lengths must agree with it; without one
    (baseline evaluation) the scenario's own lengths stand.
    """
    if getattr(args, "scenario", None):
        sc = da.load_scenario(args.scenario)
        if mc is not None and (sc.obs_len, sc.pred_len) != (mc.obs_len, mc.pred_len):
            raise ConfigError(
                f"scenario windows {sc.obs_len}/{sc.pred_len} do not match "
                f"model obs/pred {mc.obs_len}/{mc.pred_len}"
            )
        batches = da.synthesize(sc)
    elif getattr(args, "dataset", None):
        points = da.load_dataset(args.dataset)
        cfg = mc if mc is not None else ModelConfig()
        batches = da.make_windows(
            points, cfg.obs_len, cfg.pred_len, max_peds=cfg.neighborhood_size
        )
    else:
        raise ConfigError("need --scenario or --dataset")
    if not batches:
        raise ConfigError("input produced no complete windows")
    if getattr(args, "image", None):
        img = da.read_pgm(args.image)
        for b in batches:
            b.scene_image = img
    return batches


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    mc, tc = resolve_configs(args)
    batches = load_batches(args, mc)
    os.makedirs(args.out, exist_ok=True)
    try:
        result = tr.train(batches, mc, tc)
    except tr.DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    ckpt_path = os.path.join(args.out, "ckpt")
    tr.save_checkpoint(ckpt_path, result.model, tc, tc.epochs, result.history)
    result.log.write(os.path.join(args.out, "log"))
    print(f"trained {mc.variant} for {tc.epochs} epochs, "
          f"final loss {result.history[-1]:.6g}")
    print(f"checkpoint {ckpt_path}")
    return 0


def _flag_mismatches(args, cfg: ModelConfig) -> list[str]:
    out = []
    for _, dest, _ in _MODEL_FLAGS:
        v = getattr(args, dest, None)
        if v is not None and getattr(cfg, dest) != v:
            out.append(f"{dest}: checkpoint has {getattr(cfg, dest)}, flag says {v}")
    return out


def cmd_eval(args) -> int:
    if args.baseline:
        batches = load_batches(args, None)
        report = ev.evaluate_baseline(batches)
    else:
        if not args.ckpt:
            raise ConfigError("need --ckpt (or --baseline)")
        ck = tr.load_checkpoint(args.ckpt)
        bad = _flag_mismatches(args, ck.model_cfg)
        if bad:
            for b in bad:
                print(f"config mismatch: {b}", file=sys.stderr)
            return 4
        model = ck.restore()
        batches = load_batches(args, ck.model_cfg)
        report = ev.evaluate(model, batches)
    problems = ev.check_invariants(report)
    if problems:
        for p in problems:
            print(f"invariant violated: {p}", file=sys.stderr)
        return 1
    sys.stdout.write(ev.report_table(report))
    if args.out:
        ev.write_report_csv(report, args.out)
        print(f"report {args.out}")
    return 0


def _matrix_csv(arr: np.ndarray, cfg_hash: str) -> str:
    lines = [f"# config {cfg_hash}"]
    lines.extend(",".join(repr(float(v)) for v in row) for row in np.atleast_2d(arr))
    return "\n".join(lines) + "\n"


def cmd_viz(args) -> int:
    ck = tr.load_checkpoint(args.ckpt)
    model = ck.restore()
    batches = load_batches(args, ck.model_cfg)
    if not 0 <= args.scene < len(batches):
        print(f"error: --scene {args.scene} out of range "
              f"(have {len(batches)} batches)", file=sys.stderr)
        return 2
    run = model.run(batches[args.scene])
    diag = run.diagnostics
    if not diag.adjacency:
        print(f"error: variant {ck.model_cfg.variant} infers no adjacency; "
              "nothing to export", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    h = ck.cfg_hash

    def save(name: str, arr: np.ndarray) -> None:
        path = os.path.join(args.out, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(_matrix_csv(arr, h))
        print(f"wrote {path}")

    save("adjacency.csv", diag.adjacency[-1])
    save("attention.csv", diag.attention[-1])
    if diag.cell_attention:
        g = ck.model_cfg.grid_size
        cells = np.asarray(diag.cell_attention[-1]).reshape(g, g)
        save("grid.csv", cells)
        peak = float(cells.max())
        img = np.zeros_like(cells) if peak <= 0 else cells / peak * 255.0
        pgm = os.path.join(args.out, "grid.pgm")
        da.write_pgm(pgm, img, magic="P2", comment=f"config {h}")
        print(f"wrote {pgm}")
    return 0


def cmd_gradcheck(args) -> int:
    names = list(VARIANTS) if args.all else [args.variant]
    all_ok = True
    for name in names:
        report = tr.quick_grad_check(name)
        ok = report.passed(1e-4)
        all_ok &= ok
        print(f"== {name}")
        print(report.format())
        if not ok:
            offenders = ", ".join(report.failures(1e-4))
            print(f"{name} offenders: {offenders}", file=sys.stderr)
    return 0 if all_ok else 5


def cmd_synth(args) -> int:
    sc = da.load_scenario(args.scenario)
    points = da.scenario_points(sc)
    da.write_dataset(points, args.out)
    print(f"wrote {len(points)} points ({sc.kind}, {sc.n_peds} pedestrians) "
          f"to {args.out}")
    return 0


_DISPATCH = {
    "train": cmd_train,
    "eval": cmd_eval,
    "viz": cmd_viz,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def entry(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _DISPATCH[args.command](args)
    except tr.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (ConfigError, VariantError, da.ParseError, da.IntegrityError,
            da.ScenarioError, ev.MetricError, ev.AblationError,
            FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(entry())


if __name__ == "__main__":
    main()
