"""``pathvit`` command line.

Every command reads an optional key-value config (``--config``, a path or the
name of a bundled config), applies ``--set key=value`` overrides and the
command's own flags, writes ``report.json`` plus CSV series into the output
directory and prints the report envelope on stdout. Failures print an error
envelope and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__, settings as st
from .analysis import cosine_profile, fourier_profile, path_ablation_eval, scale_profile
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, config_hash
from .dynamic import FLOPS_MODES, DynamicConfig, flops_count, threshold_sweep
from .ensemble import PathMask, decompose_paths, ensemble_combine, masks_from_spec, verify_equivalence
from .tensor import no_grad
from .train import evaluate, model_from_checkpoint, train
from .vit import init_weights, patch_embed

TOOL = "pathvit"
REPORT_FORMAT = 1

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class CommandUsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # raise instead of exiting so main() can emit an envelope
        raise CommandUsageError(message, self.format_help())


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--config", help="key-value config file or bundled config name (default.cfg, tiny.cfg, hier.cfg)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config key; repeatable")
    p.add_argument("--out", help=f"output directory (beats ${st.OUTPUT_ENV} and output.dir)")
    return p


def _ckpt_arg(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--checkpoint", required=required, help="checkpoint file; without one, freshly initialized weights are used" if not required else "checkpoint file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=TOOL, description="Path-ensemble vision transformer toolkit.")
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    parser.add_argument("--reference", action="store_true", help="print the generated CLI/config reference (Markdown) and exit")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    common = [_common()]

    p = sub.add_parser("train", parents=common, help="train a model and write a checkpoint")
    p.add_argument("--epochs", type=int, help="shorthand for --set train.epochs=N")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")

    p = sub.add_parser("eval", parents=common, help="top-1 accuracy of a checkpoint")
    _ckpt_arg(p, True)
    p.add_argument("--mask", help="path combination: all, last:K, from:S or a comma list (default: as trained)")
    p.add_argument("--form", choices=("ensemble", "cascade"), default="ensemble")
    p.add_argument("--workers", type=int, default=1, help="evaluation threads; results do not depend on this")

    p = sub.add_parser("verify-equivalence", parents=common, help="check path-sum form against the stacked form")
    p.add_argument("--depth", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--precision", choices=("single", "double"), default="double")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate-paths", parents=common, help="accuracy of path combinations with the unchanged head")
    _ckpt_arg(p, False)
    p.add_argument("--masks", default="auto", help="semicolon-separated combinations; 'auto' = all, each single path and every last:K")
    p.add_argument("--samples", type=int, help="evaluate on the first N samples")

    p = sub.add_parser("analyze", parents=common, help="per-path diagnostics")
    p.add_argument("kind", choices=("cosine", "scale", "fourier"))
    _ckpt_arg(p, False)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--token-map", action="store_true", help="cosine/scale on whole token maps instead of the pooled vector")

    p = sub.add_parser("dynamic-sweep", parents=common, help="accuracy and executed FLOPs across exit thresholds")
    _ckpt_arg(p, False)
    p.add_argument("--thresholds", default="0,0.5,0.6,0.7,0.8,0.9,0.95,0.99,1.0")
    p.add_argument("--split", type=int, help="paths in the early exit (default: from checkpoint or depth)")
    p.add_argument("--samples", type=int)

    p = sub.add_parser("flops", parents=common, help="analytic FLOPs for one image")
    p.add_argument("--mode", choices=FLOPS_MODES, default="standard")
    p.add_argument("--mask", help="combination for ensemble_pruned")
    p.add_argument("--split", type=int)
    p.add_argument("--downsample-mode", choices=("per_path", "synchronized"), default="per_path")

    p = sub.add_parser("export-checkpoint-info", parents=common, help="list checkpoint tensors and metadata")
    _ckpt_arg(p, True)
    return parser


# helpers


def _settings(args) -> dict[str, Any]:
    return st.load_settings(args.config, st.parse_overrides(args.overrides))


def _out_dir(args, settings: dict[str, Any]) -> Path:
    out = Path(args.out or os.environ.get(st.OUTPUT_ENV) or settings["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def envelope(command: str, chash: str | None, results: Any, status: str = "ok") -> dict:
    return {"tool": TOOL, "version": __version__, "format_version": REPORT_FORMAT, "command": command, "status": status, "config_hash": chash, "results": results}


def error_envelope(command: str | None, kind: str, message: str) -> dict:
    return {"tool": TOOL, "version": __version__, "format_version": REPORT_FORMAT, "command": command, "status": "error", "error": {"type": kind, "message": message}}


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _emit(out: Path, env: dict, series: dict[str, list[dict]] | None = None) -> dict:
    for name, rows in (series or {}).items():
        _write_csv(out / name, rows)
    (out / "report.json").write_text(json.dumps(env, indent=2, sort_keys=True, default=_json_default) + "\n")
    return env


def _hash(settings: dict[str, Any], mc: ModelConfig | None = None, **extra) -> str:
    blob = {k: v for k, v in settings.items() if not k.startswith(("model.", "output."))}
    blob["model"] = (mc or st.model_config(settings)).to_dict()
    blob.update(extra)
    return config_hash(blob)


def _model(args, settings):
    """(ModelConfig, weights, Model-or-None) from --checkpoint or fresh initialization."""
    if getattr(args, "checkpoint", None):
        ckpt = load_checkpoint(args.checkpoint)
        return ckpt.config, ckpt.weights, model_from_checkpoint(ckpt)
    mc = st.model_config(settings)
    return mc, init_weights(mc, seed=settings["train.seed"], precision=settings["train.precision"]), None


def _data(settings, mc, samples: int | None):
    ds = st.dataset(settings, mc)
    return ds.subset(samples) if samples else ds


# commands


def cmd_train(args, settings):
    if args.epochs is not None:
        settings["train.epochs"] = args.epochs
    if args.seed is not None:
        settings["train.seed"] = args.seed
    mc = st.model_config(settings)
    tc = st.train_config(settings, mc)
    ds = st.dataset(settings, mc)
    out = _out_dir(args, settings)
    ckpt, history = train(tc, mc, ds)
    ckpt.metadata["config_hash"] = _hash(settings, mc)
    ckpt.metadata["data_checksum"] = ds.checksum()
    save_checkpoint(out / "checkpoint.pvckpt", ckpt)
    results = {
        "checkpoint": str(out / "checkpoint.pvckpt"),
        "epochs": len(history),
        "final_loss": history[-1]["loss"] if history else None,
        "final_train_accuracy": history[-1]["accuracy"] if history else None,
        "samples": len(ds),
        "data_checksum": ckpt.metadata["data_checksum"],
    }
    return out, envelope("train", ckpt.metadata["config_hash"], results), {"metrics.csv": history}, EXIT_OK


def cmd_eval(args, settings):
    ckpt = load_checkpoint(args.checkpoint)
    mc = ckpt.config
    ds = st.dataset(settings, mc)
    mask = masks_from_spec(mc.num_paths, args.mask) if args.mask else None
    rep = evaluate(ckpt, ds, mask=mask, form=args.form, workers=args.workers)
    results = rep.to_dict() | {"form": args.form, "mask": mask.describe() if mask else "as trained"}
    out = _out_dir(args, settings)
    return out, envelope("eval", _hash(settings, mc), results), {"per_class.csv": rep.per_class}, EXIT_OK


def cmd_verify(args, settings):
    if args.depth is not None:
        settings["model.depth"] = args.depth
    if args.dim is not None:
        settings["model.embed_dim"] = args.dim
    mc = st.model_config(settings)
    weights = init_weights(mc, seed=args.seed, precision=args.precision, random_affine=True)
    rep = verify_equivalence(mc, weights, trials=args.trials, tolerance=args.tol, seed=args.seed)
    out = _out_dir(args, settings)
    env = envelope("verify-equivalence", _hash(settings, mc, precision=args.precision), rep.to_dict(), "ok" if rep.passed else "failed")
    return out, env, {"trials.csv": rep.per_trial}, EXIT_OK if rep.passed else EXIT_FAILED


def _auto_masks(n: int) -> list[PathMask]:
    masks = [PathMask.full(n)]
    masks += [PathMask.from_indices(n, [i]) for i in range(n)]
    masks += [PathMask.last(n, k) for k in range(1, n)]
    return masks


def cmd_ablate(args, settings):
    mc, weights, model = _model(args, settings)
    masks = _auto_masks(mc.num_paths) if args.masks == "auto" else [masks_from_spec(mc.num_paths, m) for m in args.masks.split(";")]
    ds = _data(settings, mc, args.samples)
    scale = model.scale if model else None
    rows = [r.to_dict() for r in path_ablation_eval(mc, weights, ds.batches(256, precision=weights.precision), masks, scale)]
    out = _out_dir(args, settings)
    return out, envelope("ablate-paths", _hash(settings, mc), {"rows": rows}), {"ablation.csv": rows}, EXIT_OK


def cmd_analyze(args, settings):
    mc, weights, model = _model(args, settings)
    ds = _data(settings, mc, args.samples)
    images = ds.images.astype(weights["patch.w"].data.dtype)
    with no_grad():
        ps = decompose_paths(patch_embed(images, mc, weights), mc, weights)
        x_hat = ensemble_combine(ps)
    paths = list(ps.paths)
    if args.kind == "cosine":
        prof = cosine_profile(paths, x_hat, mc, args.token_map)
        rows = prof.rows()
    elif args.kind == "scale":
        prof = scale_profile(paths, mc, args.token_map)
        rows = prof.rows()
    else:
        cls = mc.token_mode == "class_token"
        rows = []
        for k, p in enumerate(paths):
            rows += [{"path": k} | r for r in fourier_profile(p, has_class_token=cls).rows()]
    out = _out_dir(args, settings)
    results = {"kind": args.kind, "samples": len(ds), "paths": [list(m) for m in ps.members], "rows": rows}
    return out, envelope("analyze", _hash(settings, mc, kind=args.kind), results), {f"{args.kind}.csv": rows}, EXIT_OK


def cmd_dynamic(args, settings):
    mc, weights, model = _model(args, settings)
    dcfg = model.dynamic if model is not None else None
    if dcfg is None or (args.split and args.split != dcfg.split):
        dcfg = DynamicConfig.create(mc, args.split or settings["dynamic.split"] or None, settings["dynamic.threshold"], weights.precision)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    ds = _data(settings, mc, args.samples)
    rows = threshold_sweep(ds.batches(256, precision=weights.precision), mc, weights, dcfg, thresholds)
    early = flops_count(mc, "dynamic_early", split=dcfg.split).total
    full = flops_count(mc, "dynamic_full", split=dcfg.split).total
    results = {"split": dcfg.split, "early_cost": early, "full_cost": full, "standard_cost": flops_count(mc).total, "rows": rows}
    out = _out_dir(args, settings)
    return out, envelope("dynamic-sweep", _hash(settings, mc, split=dcfg.split), results), {"sweep.csv": rows}, EXIT_OK


def cmd_flops(args, settings):
    mc = st.model_config(settings)
    mask = masks_from_spec(mc.num_paths, args.mask) if args.mask else None
    rep = flops_count(mc, args.mode, mask=mask, split=args.split, downsample_mode=args.downsample_mode)
    rows = [{"component": k, "flops": v} for k, v in rep.components.items()]
    out = _out_dir(args, settings)
    return out, envelope("flops", _hash(settings, mc, mode=args.mode), rep.to_dict()), {"flops.csv": rows}, EXIT_OK


def cmd_info(args, settings):
    ckpt: Checkpoint = load_checkpoint(args.checkpoint)
    rows = [
        {"name": name, "shape": "x".join(map(str, t.shape)) or "scalar", "precision": "single" if t.data.dtype == np.float32 else "double", "elements": int(t.data.size)}
        for name, t in ckpt.tensors()
    ]
    results = {
        "format_version": ckpt.version,
        "model": ckpt.config.to_dict(),
        "metadata": ckpt.metadata,
        "tensor_count": len(rows),
        "parameter_count": sum(r["elements"] for r in rows if r["name"].startswith(("weights.", "scale.", "dynamic."))),
    }
    out = _out_dir(args, settings)
    return out, envelope("export-checkpoint-info", config_hash(ckpt.blob()), results), {"tensors.csv": rows}, EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "verify-equivalence": cmd_verify,
    "ablate-paths": cmd_ablate,
    "analyze": cmd_analyze,
    "dynamic-sweep": cmd_dynamic,
    "flops": cmd_flops,
    "export-checkpoint-info": cmd_info,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        if args.reference:
            print(st.reference_markdown())
            return EXIT_OK
        command = args.command
        if command is None:
            raise CommandUsageError("no command given", parser.format_help())
        settings = _settings(args)
        out, env, series, status = COMMANDS[command](args, settings)
        _emit(out, env, series)
        print(json.dumps(env, sort_keys=True, default=_json_default))
        return status
    except CommandUsageError as exc:
        sys.stderr.write(exc.usage)
        print(json.dumps(error_envelope(command, "UsageError", str(exc))))
        return EXIT_USAGE
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # every failure leaves a machine-readable record
        print(json.dumps(error_envelope(command, type(exc).__name__, str(exc))))
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
