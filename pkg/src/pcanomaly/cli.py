"""Command-line entry point: ``pcanomaly {synth,train,eval,score,ablate}``.

Every subcommand writes CSV/JSON into an output directory together with a
``run.json`` manifest holding the full configuration, the seed and hashes
of the inputs and outputs. Settings come from an optional JSON config file
(``--config``); flags given on the command line win over it.

All randomness derives from ``--seed`` through :mod:`pcanomaly.seeding`.
With ``--threads 1`` the BLAS pool is pinned to one thread, which makes
training bit-reproducible.

Exit codes: 0 success, 2 usage error, 3 file error, 4 numerical abort,
5 inconsistent inputs (checkpoint, config and data disagree).
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import SHAPES, DatasetError, category_out_split, export_dataset, load_manifest, synth_generate
from .evaluation import (
    TABLE3_POINTS,
    CheckpointCache,
    EvaluationError,
    ablation_tables,
    category_out,
    file_sha256,
    seed_sweep,
    write_manifest,
    write_results_csv,
    write_roc_csv,
    write_sweep_csv,
    write_sweep_roc_csv,
    write_table_csv,
)
from .geometry import PointCloudError
from .model import PRESETS, ModelError, load_checkpoint, save_checkpoint
from .scoring import ScoreError, ScoreVariant, score_testset_detailed, write_scores_csv
from .setdist import SetDistanceError
from .training import TrainConfig, TrainingDiverged, fit, write_loss_csv

log = logging.getLogger("pcanomaly")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5

RUN_MANIFEST = "run.json"


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


# -- configuration ------------------------------------------------------------

# Flags that map onto TrainConfig fields; None means "not given".
TRAIN_FLAGS = {
    "epochs": int, "lr": float, "batch_size": int, "k": int, "m": int, "dtype": str, "kl_reduction": str,
    "kl_scale": float,
}
MODEL_FLAGS = {"latent_dim": int, "fc_width": int, "fold_width": int}


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def read_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return cfg


def build_train_config(args) -> TrainConfig:
    """Preset, then JSON config file, then explicit flags."""
    file_cfg = read_config_file(args.config)
    preset = args.preset or file_cfg.pop("preset", None) or "desk"
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    model = PRESETS[preset].to_dict()
    model.update(file_cfg.pop("model", {}) or {})
    for name in MODEL_FLAGS:
        if getattr(args, name, None) is not None:
            model[name] = getattr(args, name)
    for name in ("point_widths", "graph_widths"):
        if getattr(args, name, None) is not None:
            model[name] = getattr(args, name)

    known = set(TrainConfig.__dataclass_fields__) - {"model"}
    unknown = set(file_cfg) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    values = dict(file_cfg)
    for name in TRAIN_FLAGS:
        if getattr(args, name, None) is not None:
            values[name] = getattr(args, name)
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "no_kl_rec", False):
        values["kl_rec_enabled"] = False
    try:
        return TrainConfig(model=model, **values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields (flags override it)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="model widths to start from (default: desk)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--k", type=int, help="neighbors in the encoder graph")
    p.add_argument("--m", type=int, help="decoder grid points")
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--kl-reduction", choices=("sum", "mean"))
    p.add_argument("--kl-scale", type=float, help="weight on both KL terms (default 1)")
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--point-widths", type=_int_list)
    p.add_argument("--graph-widths", type=_int_list)
    p.add_argument("--fc-width", type=int)
    p.add_argument("--fold-width", type=int)
    p.add_argument("--no-kl-rec", action="store_true", help="drop the reconstruction KL term")


def _add_common(p):
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--threads", type=int, help="cap BLAS threads; 1 makes runs bit-reproducible")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data_flags(p):
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--holdout-fraction", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcanomaly", description="Point-cloud VAE anomaly detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic shape dataset")
    _add_common(p)
    p.add_argument("--classes", type=_str_list, default=SHAPES)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--n", type=int, default=256, help="points per cloud")
    p.add_argument("--noise-sigma", type=float, default=0.02)

    p = sub.add_parser("train", help="train on the category-out split of a dataset")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--anomaly-class", required=True)
    p.add_argument("--n", type=int, help="points sampled per cloud (default: all points of the first file)")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="AUC of a trained checkpoint on its held-out split")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--anomaly-class", help="defaults to the class the checkpoint was trained without")
    p.add_argument("--variant", default="cd", help="score variant name, or 'all'")
    p.add_argument("--seeds", type=int, default=1, help="number of scoring seeds; more than one runs a sweep")
    p.add_argument("--points", type=_int_list, help="decoder output sizes to evaluate, e.g. 1024,2048")
    p.add_argument("--mean-codeword", action="store_true", help="decode the latent mean instead of a sample")

    p = sub.add_parser("score", help="write per-sample anomaly scores")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--variant", default="cd")
    p.add_argument("--m", type=int, help="decoder output size (default: the checkpoint's)")
    p.add_argument("--mean-codeword", action="store_true")

    p = sub.add_parser("ablate", help="train and evaluate the three ablation tables")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--n", type=int)
    p.add_argument("--classes", type=_str_list, help="anomaly classes to cover (default: all)")
    p.add_argument("--tables", type=_int_list, default=(1, 2, 3))
    p.add_argument("--points", type=_int_list, default=TABLE3_POINTS)
    p.add_argument("--cache-dir", help="reuse and store trained checkpoints here")
    _add_train_flags(p)
    return parser


# -- helpers ------------------------------------------------------------------

@contextlib.contextmanager
def thread_limit(n):
    if n is None:
        yield
        return
    if n < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _first_file_size(manifest) -> int:
    from .geometry import read_xyz

    spec = json.loads(Path(manifest).read_text())
    for files in spec.values():
        for rel in files:
            return len(read_xyz(Path(manifest).parent / rel))
    raise DatasetError(f"{manifest}: manifest lists no files")


def _load(manifest, n, seed):
    if not Path(manifest).is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    n = n or _first_file_size(manifest)
    return load_manifest(manifest, n=n, seed=seed), n


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _hashes(out: Path, names) -> dict:
    return {name: file_sha256(out / name) for name in names}


def _checkpoint(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, meta = load_checkpoint(path)
    if "train_config" not in meta:
        raise MismatchError(f"{path} carries no training configuration")
    cfg = TrainConfig.from_dict(meta["train_config"])
    if cfg.model != params.config:
        raise MismatchError(f"{path}: stored config does not match the stored weights")
    return params, meta, cfg


def _variants(text):
    if text.strip().lower() == "all":
        return list(ScoreVariant)
    return [ScoreVariant.parse(v) for v in _str_list(text)]


# -- subcommands --------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.per_class < 2:
        raise UsageError("--per-class must be at least 2")
    ds = synth_generate(args.classes, args.per_class, args.n, args.noise_sigma, seed)
    out = _out_dir(args.out)
    manifest = export_dataset(ds, out)
    write_manifest(out / RUN_MANIFEST, command="synth", classes=list(args.classes), per_class=args.per_class,
                   n=args.n, noise_sigma=args.noise_sigma, seed=seed, version=__version__,
                   outputs=_hashes(out, [manifest.name]))
    print(f"wrote {len(ds)} clouds to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    ds, n = _load(args.manifest, args.n, cfg.seed)
    train, _ = category_out_split(ds, args.anomaly_class, args.holdout_fraction, cfg.seed)
    out = _out_dir(args.out)

    def progress(e, _params):
        log.info("epoch %d  lrec %.6f  kl_ori %.6f  kl_rec %.6f", e.epoch, e.lrec, e.kl_ori, e.kl_rec)

    result = fit(train, cfg, progress=progress)
    meta = {"train_config": cfg.to_dict(), "anomaly_class": args.anomaly_class, "n": n,
            "holdout_fraction": args.holdout_fraction, "train_ids_sha256": _ids_hash(train.ids)}
    save_checkpoint(out / "checkpoint.ckpt", result.params, meta)
    write_loss_csv(out / "loss.csv", result.history)
    write_manifest(out / RUN_MANIFEST, command="train", manifest=str(args.manifest),
                   manifest_sha256=file_sha256(args.manifest), anomaly_class=args.anomaly_class, n=n,
                   holdout_fraction=args.holdout_fraction, train_config=cfg, version=__version__,
                   outputs=_hashes(out, ["checkpoint.ckpt", "loss.csv"]))
    last = result.history[-1] if result.history else None
    print(f"trained {len(train)} clouds for {cfg.epochs} epochs" + (f", final loss {last.total:.6f}" if last else ""))
    return EXIT_OK


def _ids_hash(ids) -> str:
    import hashlib

    return hashlib.sha256("\n".join(ids).encode()).hexdigest()


def cmd_eval(args) -> int:
    params, meta, cfg = _checkpoint(args.checkpoint)
    anomaly = args.anomaly_class or meta.get("anomaly_class")
    if anomaly is None:
        raise UsageError("--anomaly-class is required for this checkpoint")
    if meta.get("anomaly_class") not in (None, anomaly):
        raise MismatchError(f"checkpoint was trained without {meta['anomaly_class']!r}, not {anomaly!r}")
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    holdout = meta.get("holdout_fraction", args.holdout_fraction)
    ds, n = _load(args.manifest, meta.get("n"), cfg.seed)
    train, _ = category_out_split(ds, anomaly, holdout, cfg.seed)
    if "train_ids_sha256" in meta and meta["train_ids_sha256"] != _ids_hash(train.ids):
        raise MismatchError("the manifest's training split differs from the one the checkpoint saw")
    variants = _variants(args.variant)
    run_seed = 0 if args.seed is None else args.seed
    sample_z = not args.mean_codeword
    points = args.points or (None,)
    out = _out_dir(args.out)
    outputs = []

    results = []
    for v in variants:
        for m in points:
            if v.uses_emd and m not in (None, n):
                continue
            results.append(category_out(ds, anomaly, cfg, v, params=params, score_seed=run_seed,
                                        sample_z=sample_z, holdout_fraction=holdout, m=m))
    write_results_csv(out / "results.csv", results)
    write_roc_csv(out / "roc.csv", results)
    outputs += ["results.csv", "roc.csv"]
    if args.points:
        row = {"class": anomaly, **{str(r.m): r.auc for r in results if r.variant is variants[0]}}
        write_table_csv(out / "points.csv", [row])
        outputs.append("points.csv")

    if args.seeds > 1:
        for v in variants:
            sweep = seed_sweep(ds, anomaly, cfg, v, args.seeds, params=params, sample_z=sample_z,
                               holdout_fraction=holdout, m=args.points[0] if args.points else None)
            tag = v.value.replace("+", "_")
            write_sweep_csv(out / f"sweep_{tag}.csv", sweep)
            write_sweep_roc_csv(out / f"sweep_roc_{tag}.csv", sweep)
            outputs += [f"sweep_{tag}.csv", f"sweep_roc_{tag}.csv"]
            print(f"{v.value}: mean AUC {sweep.mean_auc:.4f} over {args.seeds} seeds")

    write_manifest(out / RUN_MANIFEST, command="eval", checkpoint=str(args.checkpoint),
                   checkpoint_sha256=file_sha256(args.checkpoint), manifest=str(args.manifest),
                   manifest_sha256=file_sha256(args.manifest), anomaly_class=anomaly,
                   variants=[v.value for v in variants], seed=run_seed, seeds=args.seeds,
                   points=list(args.points or []), sample_z=sample_z, train_config=cfg, version=__version__,
                   outputs=_hashes(out, outputs))
    for r in results:
        print(f"{r.anomaly_class}  {r.variant.value:<9} m={r.m:<5d} AUC {r.auc:.4f}")
    return EXIT_OK


def cmd_score(args) -> int:
    params, meta, cfg = _checkpoint(args.checkpoint)
    ds, n = _load(args.manifest, meta.get("n"), cfg.seed)
    variant = ScoreVariant.parse(args.variant)
    run_seed = 0 if args.seed is None else args.seed
    m = n if variant.uses_emd else (args.m or cfg.m)
    anomaly = meta.get("anomaly_class")
    if anomaly is not None:
        ds.is_anomaly = ds.labels == anomaly
    scores = score_testset_detailed(params, ds, variant, run_seed, k=cfg.k, m=m, sample_z=not args.mean_codeword)
    out = _out_dir(args.out)
    write_scores_csv(out / "scores.csv", ds, scores)
    write_manifest(out / RUN_MANIFEST, command="score", checkpoint=str(args.checkpoint),
                   checkpoint_sha256=file_sha256(args.checkpoint), manifest=str(args.manifest),
                   manifest_sha256=file_sha256(args.manifest), variant=variant, m=m, seed=run_seed,
                   sample_z=not args.mean_codeword, version=__version__, outputs=_hashes(out, ["scores.csv"]))
    print(f"scored {len(ds)} clouds with {variant.value}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = build_train_config(args)
    ds, n = _load(args.manifest, args.n, cfg.seed)
    out = _out_dir(args.out)
    cache = CheckpointCache(args.cache_dir)
    tables = ablation_tables(ds, cfg, classes=args.classes, tables=args.tables, points=args.points,
                             score_seed=cfg.seed, cache=cache, holdout_fraction=args.holdout_fraction)
    names = []
    for name, rows in tables.items():
        write_table_csv(out / f"{name}.csv", rows)
        names.append(f"{name}.csv")
    write_manifest(out / RUN_MANIFEST, command="ablate", manifest=str(args.manifest),
                   manifest_sha256=file_sha256(args.manifest), n=n, classes=list(args.classes or ds.classes),
                   tables=list(args.tables), points=list(args.points), holdout_fraction=args.holdout_fraction,
                   train_config=cfg, version=__version__, outputs=_hashes(out, names))
    print(f"wrote {', '.join(names)} to {out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "score": cmd_score, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pcanomaly {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as exc:
        print(f"pcanomaly {args.command}: file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"pcanomaly {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MismatchError, ModelError, DatasetError, PointCloudError, ScoreError, EvaluationError,
            SetDistanceError) as exc:
        print(f"pcanomaly {args.command}: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
