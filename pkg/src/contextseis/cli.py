"""Command-line entry point: ``contextseis generate|train|eval|infer|inspect``.

Each command can read a JSON config file (``--config``) whose sections are
``generator``, ``model``, ``train`` and ``eval``; explicit flags override the
file. Whatever settings a run ends up using are written to
``resolved_config.json`` in its output directory, and that file can be passed
back through ``--config`` to repeat the run.

Exit codes: 0 success, 2 usage or configuration error, 3 IO error,
4 numerical failure during training.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensorio
from .evaluation import (
    PromptLayout,
    ensemble_variance,
    export_ensemble,
    export_reports,
    identity_steering,
    predict_line,
    prompt_spacing_study,
)
from .model import (
    ARCHITECTURES,
    PRESETS,
    ModelSpec,
    build_model,
    load_checkpoint,
    param_count,
    read_checkpoint_meta,
    save_checkpoint,
)
from .synthgen import GeneratorConfig, SeismicDataset, build_dataset
from .training import TrainConfig, TrainingDiverged, train, write_log

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# Per-profile defaults. The desk profile is sized for a laptop CPU.
PROFILES = {
    "desk": {
        "generator": {"n_lines": 200, "M": 21},
        "arch": "contextseisnet",
        "preset": "tiny",
        "train": {"S": 3, "batch_size": 8, "epochs": 10, "replace_fraction": 0.25, "draws_per_line": 3},
    },
    "paper": {
        "generator": {"n_lines": 15000, "M": 21},
        "arch": "contextseisnet",
        "preset": "small",
        "train": {"S": 5, "batch_size": 64, "epochs": 10},
    },
}


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config plumbing


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _generator_config(args, file_cfg) -> GeneratorConfig:
    prof = PROFILES[args.profile]
    section = _override(prof["generator"], **file_cfg.get("generator", {}))
    section = _override(section, n_lines=args.lines, M=args.cdps, seed=args.seed)
    if "geometry" in section:
        return GeneratorConfig.from_json(section)
    base = GeneratorConfig.desk() if args.profile == "desk" else GeneratorConfig.paper()
    merged = base.to_json()
    merged.update(section)
    return GeneratorConfig.from_json(merged)


def _model_choice(args, file_cfg):
    prof = PROFILES[args.profile]
    section = dict(file_cfg.get("model", {}))
    arch = args.arch or file_cfg.get("arch") or prof["arch"]
    if arch not in ARCHITECTURES:
        raise UsageError(f"unknown architecture {arch!r}")
    if args.preset is not None or "channels" not in section:
        preset = args.preset or section.get("size_preset") or prof["preset"]
        extra = {k: v for k, v in section.items() if k not in ("channels", "size_preset")}
        spec = ModelSpec.preset(preset, **extra)
    else:
        spec = ModelSpec.from_json(section)
    if args.no_norm:
        spec = ModelSpec(spec.channels, spec.kernel_size, spec.leaky_slope, False, spec.size_preset)
    return arch, spec


def _train_config(args, file_cfg) -> TrainConfig:
    prof = PROFILES[args.profile]
    section = _override(prof["train"], **file_cfg.get("train", {}))
    section = _override(
        section,
        S=args.prompts,
        epochs=args.epochs,
        lr_max=args.lr_max,
        weight_decay=args.weight_decay,
        clip_max_norm=args.clip,
        batch_size=args.batch,
        seed=args.seed,
        replace_fraction=args.replace_fraction,
        draws_per_line=args.draws,
    )
    return TrainConfig.from_json(section)


def _write_resolved(out: Path, payload: dict) -> None:
    with open(out / "resolved_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def _checkpoint_dir(path) -> Path:
    """Accept either a checkpoint directory or the train run holding one."""
    p = _require(path, "checkpoint")
    if (p / "checkpoint" / "checkpoint.json").exists():
        return p / "checkpoint"
    return p


def _layouts(args, file_cfg) -> list:
    texts = args.layout or file_cfg.get("eval", {}).get("layouts") or ["0,10,20"]
    source = "external_file" if getattr(args, "prompt_labels", None) else "ground_truth"
    return [PromptLayout.parse(t, source) for t in texts]


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    file_cfg = _load_config_file(args.config)
    config = _generator_config(args, file_cfg)
    out = build_dataset(config, args.out, keep_events=args.keep_events)
    _write_resolved(out, {"command": "generate", "profile": args.profile, "generator": config.to_json()})
    ds = SeismicDataset(out)
    print(
        f"dataset {out}: N={ds.N} M={ds.M} H={ds.H} W={ds.W} "
        f"train={len(ds.train_indices)} eval={len(ds.eval_indices)}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    arch, spec = _model_choice(args, file_cfg)
    config = _train_config(args, file_cfg)
    ds = SeismicDataset(_require(args.data, "dataset"))
    spec.check_input(ds.H, ds.W)
    init_seed = config.seed if args.init_seed is None else args.init_seed
    model = build_model(arch, spec, seed=init_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(
        out,
        {
            "command": "train",
            "profile": args.profile,
            "arch": arch,
            "init_seed": init_seed,
            "model": spec.to_json(),
            "train": config.to_json(),
        },
    )
    records = []

    def progress(rec):
        records.append(rec)
        if not args.quiet and (rec.step % 25 == 0):
            print(f"step {rec.step} epoch {rec.epoch} loss {rec.loss:.5f} lr {rec.lr:.2e}", flush=True)

    try:
        train(model, ds, config, callback=progress)
    except TrainingDiverged as exc:
        write_log(records + [exc.record], out / "train_log.csv")
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_log(records, out / "train_log.csv")
    save_checkpoint(model, out / "checkpoint", config.to_json(), epoch=config.epochs)
    final = records[-1].loss if records else float("nan")
    print(f"checkpoint {out / 'checkpoint'}: {arch} {model.num_parameters()} parameters, final loss {final:.5f}")
    return EXIT_OK


def _external_labels(path, shape):
    arr = tensorio.read_tensor(_require(path, "prompt-label file"))
    if arr.shape != shape:
        raise UsageError(f"prompt labels have shape {arr.shape}, expected {shape}")
    return np.asarray(arr, dtype=np.float64)


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    layouts = _layouts(args, file_cfg)
    ds = SeismicDataset(_require(args.data, "dataset"))
    lines = range(ds.N) if args.all_lines else None
    out = Path(args.out)
    if args.ensemble is not None:
        paths = [p for p in args.ensemble.split(",") if p]
        if len(paths) < 2:
            raise UsageError("--ensemble needs at least two checkpoints")
        models = [load_checkpoint(_checkpoint_dir(p)) for p in paths]
        out.mkdir(parents=True, exist_ok=True)
        ens = ensemble_variance(models, ds, layouts[0], lines=lines)
        export_ensemble(ens, out / "ensemble.csv")
        _write_resolved(out, {"command": "eval", "ensemble": paths, "layout": layouts[0].descriptor})
        print(f"ensemble of {ens.K}: spearman(std, mse) = {ens.spearman:.4f}")
        return EXIT_OK
    if args.checkpoint is None:
        raise UsageError("eval needs --checkpoint or --ensemble")
    model = load_checkpoint(_checkpoint_dir(args.checkpoint))
    external = None
    if args.prompt_labels:
        external = _external_labels(args.prompt_labels, ds.gathers.shape)
    out.mkdir(parents=True, exist_ok=True)
    model_id = args.model_id or Path(args.checkpoint).name
    reports = prompt_spacing_study(model, ds, layouts, lines=lines, external_labels=external, model_id=model_id)
    export_reports(reports, out / "report.csv")
    payload = {
        "command": "eval",
        "checkpoint": str(args.checkpoint),
        "layouts": [lay.descriptor for lay in layouts],
        "label_source": layouts[0].label_source,
    }
    if args.steering:
        l1_id, l1_true = identity_steering(model, ds, layouts[0], lines=lines)
        with open(out / "steering.json", "w") as fh:
            json.dump({"l1_identity": l1_id, "l1_ground_truth": l1_true}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"identity steering: L1 {l1_id:.5f} (identity prompts) vs {l1_true:.5f} (true prompts)")
    _write_resolved(out, payload)
    for r in reports:
        print(f"layout {r.layout.descriptor}: mean PSNR {r.mean_psnr():.3f} dB over {r.n_lines} lines")
    return EXIT_OK


def cmd_infer(args) -> int:
    file_cfg = _load_config_file(args.config)
    layout = _layouts(args, file_cfg)[0]
    model = load_checkpoint(_checkpoint_dir(args.checkpoint))
    gathers = np.asarray(tensorio.read_tensor(_require(args.input, "input")), dtype=np.float64)
    if gathers.ndim != 3:
        raise UsageError(f"input must be [M, H, W], got shape {gathers.shape}")
    if args.identity == bool(args.prompt_labels):
        raise UsageError("give exactly one of --prompt-labels or --identity")
    labels = gathers if args.identity else _external_labels(args.prompt_labels, gathers.shape)
    pred = predict_line(model, gathers, labels, layout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(out / "primaries.bin", pred)
    tensorio.write_tensor(out / "multiples.bin", gathers - pred)
    _write_resolved(
        out,
        {
            "command": "infer",
            "checkpoint": str(args.checkpoint),
            "input": str(args.input),
            "layout": layout.descriptor,
            "prompt_labels": "identity" if args.identity else str(args.prompt_labels),
        },
    )
    ratio = float(np.linalg.norm(gathers - pred) / max(np.linalg.norm(gathers), 1e-300))
    print(f"wrote {out / 'primaries.bin'} and {out / 'multiples.bin'} {pred.shape}; |X - Y*| / |X| = {ratio:.4f}")
    return EXIT_OK


def describe(path) -> dict:
    """Structured summary of a tensor file, checkpoint or dataset directory."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p} does not exist")
    if p.is_dir() and (p / "manifest.json").exists():
        ds = SeismicDataset(p)
        return {
            "kind": "dataset",
            "version": ds.manifest.get("version"),
            "N": ds.N,
            "M": ds.M,
            "H": ds.H,
            "W": ds.W,
            "train": len(ds.train_indices),
            "eval": len(ds.eval_indices),
            "config": ds.manifest["config"],
        }
    if p.is_dir() and (p / "checkpoint" / "checkpoint.json").exists():
        p = p / "checkpoint"
    if p.is_dir() and (p / "checkpoint.json").exists():
        meta = read_checkpoint_meta(p)
        model = load_checkpoint(p)
        spec = ModelSpec.from_json(meta["spec"])
        return {
            "kind": "checkpoint",
            "version": meta["version"],
            "architecture": meta["architecture"],
            "spec": meta["spec"],
            "param_count": model.num_parameters(),
            "param_count_formula": param_count(spec, meta["architecture"]),
            "epoch": meta["epoch"],
            "train_config": meta["train_config"],
        }
    if p.is_file() and tensorio.is_seis(p):
        version, dtype, shape = tensorio.read_header(p)
        return {"kind": "tensor", "version": version, "dtype": np.dtype(dtype).name, "shape": list(shape)}
    raise UsageError(f"{p} is not a SEIS tensor file, checkpoint or dataset")


def cmd_inspect(args) -> int:
    info = describe(args.path)
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
        return EXIT_OK
    kind = info["kind"]
    if kind == "tensor":
        print(f"tensor v{info['version']} dtype={info['dtype']} shape={tuple(info['shape'])}")
    elif kind == "checkpoint":
        print(
            f"checkpoint v{info['version']} {info['architecture']} channels={info['spec']['channels']} "
            f"norm={info['spec']['norm']} params={info['param_count']} epoch={info['epoch']}"
        )
    else:
        print(
            f"dataset v{info['version']} N={info['N']} M={info['M']} H={info['H']} W={info['W']} "
            f"train={info['train']} eval={info['eval']} seed={info['config']['seed']}"
        )
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="contextseis", description="In-context seismic demultiple toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
        if seed:
            p.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="build a synthetic dataset")
    common(g)
    g.add_argument("--lines", type=int)
    g.add_argument("--cdps", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--keep-events", action="store_true", help="record event parameters in the manifest")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--arch", choices=ARCHITECTURES)
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--no-norm", action="store_true", help="drop the normalization layers")
    t.add_argument("--prompts", type=int, help="support-set size S")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr-max", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--clip", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--replace-fraction", type=float)
    t.add_argument("--draws", type=int, help="episodes drawn per line per epoch")
    t.add_argument("--init-seed", type=int, help="weight-init seed (defaults to --seed)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint along evaluation lines")
    common(e, seed=False)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--ensemble", help="comma-separated checkpoint directories")
    e.add_argument("--layout", action="append", help="prompt positions, e.g. 0,10,20 (repeatable)")
    e.add_argument("--prompt-labels", help="SEIS file [N, M, H, W] of externally produced prompt labels")
    e.add_argument("--all-lines", action="store_true", help="score every line instead of the eval split")
    e.add_argument("--steering", action="store_true", help="also measure identity-prompt steering")
    e.add_argument("--model-id")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict primaries and multiples for one line")
    common(i, seed=False)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="SEIS file of gathers [M, H, W]")
    i.add_argument("--layout", action="append")
    i.add_argument("--prompt-labels", help="SEIS file [M, H, W]; only the prompt positions are read")
    i.add_argument("--identity", action="store_true", help="prompt with prompt_label := prompt")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("inspect", help="summarize a tensor file, checkpoint or dataset")
    s.add_argument("path")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"contextseis: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"contextseis: IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError, KeyError) as exc:
        print(f"contextseis: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
