"""Command-line entry points: pretrain, probe, diagnose, cluster-inspect.

Exit codes: 0 success, 2 usage error (bad flags, bad config, missing input
files), 3 runtime failure. The SPCL_SEED environment variable overrides the
config seed. Unrecognized ``--<key> VALUE`` flags on pretrain are config
overrides using the dotted config key names.
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .clustering import ClusteringError, extract_epoch_features, kmeans
from .config import ConfigError, config_hash, derive_rng, load_config, serialize_config
from .data import DataError, load_npz
from .evaluate import EvalError, ProbeConfig, export_report, linear_probe, tp_fn_distances
from .losses import LossError
from .model import ModelError
from .optim import OptimError
from .sampling import SamplingError
from .trainer import CheckpointError, TrainerError, load_checkpoint, run_pretraining

USAGE_ERROR = 2
RUNTIME_ERROR = 3

_USAGE_EXCEPTIONS = (ConfigError, DataError, EvalError)
_RUNTIME_EXCEPTIONS = (TrainerError, ClusteringError, SamplingError, LossError, ModelError, OptimError)


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def _write_manifest(out_dir, run_id, command, artifacts, started, extra=None):
    manifest = {
        "run_id": run_id,
        "command": command,
        "artifacts": artifacts,
        "timestamps": {"started": started, "finished": _now()},
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _collect_overrides(extra_args):
    overrides = {}
    i = 0
    while i < len(extra_args):
        flag = extra_args[i]
        if not flag.startswith("--") or len(flag) == 2:
            raise ConfigError(f"unexpected argument {flag!r} (expected --<config-key> VALUE)")
        key = flag[2:]
        if "=" in key:
            key, _, value = key.partition("=")
            i += 1
        else:
            if i + 1 >= len(extra_args):
                raise ConfigError(f"flag --{key} is missing a value")
            value = extra_args[i + 1]
            i += 2
        overrides[key] = value
    return overrides


def _apply_env_seed(config):
    env = os.environ.get("SPCL_SEED")
    if env is not None:
        try:
            config.seed = int(env)
        except ValueError:
            raise ConfigError(f"SPCL_SEED must be an integer, got {env!r}") from None
    return config


def cmd_pretrain(args, extra):
    started = _now()
    overrides = _collect_overrides(extra)
    config = load_config(args.config, overrides)
    _apply_env_seed(config)
    dataset = load_npz(config.dataset_path, split="train")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resume_state = None
    if args.resume:
        resume_state = load_checkpoint(args.resume)
    state, produced = run_pretraining(
        config,
        dataset,
        encoder_arch=args.encoder,
        out_dir=out_dir,
        resume_state=resume_state,
        checkpoint_every=args.checkpoint_every,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    artifacts = {
        "metrics_csv": "metrics.csv",
        "checkpoints": [p.name for p in produced["checkpoints"]],
        "final_checkpoint": produced["checkpoints"][-1].name if produced["checkpoints"] else None,
    }
    extra_info = {
        "config": serialize_config(config),
        "config_hash": config_hash(config),
        "encoder_arch": args.encoder,
        "seed": config.seed,
    }
    if args.resume:
        extra_info["resumed_from"] = str(args.resume)
    _write_manifest(out_dir, f"pretrain-{config_hash(config)[:8]}", "pretrain", artifacts, started, extra_info)
    print(f"pretrain: {state.global_step} steps, final checkpoint {artifacts['final_checkpoint']}")
    return 0


def _load_bundle(ckpt_path):
    state = load_checkpoint(ckpt_path)
    _apply_env_seed(state.config)
    state.bundle.eval()
    return state


def cmd_probe(args, extra):
    started = _now()
    if extra:
        raise ConfigError(f"unexpected arguments: {extra}")
    state = _load_bundle(args.ckpt)
    train = load_npz(args.data, split="train")
    test = load_npz(args.data, split="test")
    probe_cfg = ProbeConfig(epochs=args.probe_epochs)
    result = linear_probe(state.bundle, train, test, probe_cfg, seed=state.config.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "probe.csv", "w") as fh:
        fh.write("top1,top5,n_train,n_test\n")
        fh.write(f"{result.top1!r},{result.top5!r},{result.n_train},{result.n_test}\n")
    summary = (
        f"linear probe on {Path(args.ckpt).name}: "
        f"top-1 {result.top1:.2f}% top-5 {result.top5:.2f}% "
        f"({result.n_train} train / {result.n_test} test samples)"
    )
    (out_dir / "probe.txt").write_text(summary + "\n")
    _write_manifest(
        out_dir,
        f"probe-{config_hash(state.config)[:8]}",
        "probe",
        {"probe_csv": "probe.csv", "probe_txt": "probe.txt"},
        started,
        {"checkpoint": str(args.ckpt), "seed": state.config.seed},
    )
    print(summary)
    return 0


def cmd_diagnose(args, extra):
    started = _now()
    if extra:
        raise ConfigError(f"unexpected arguments: {extra}")
    try:
        taus = [float(t) for t in args.taus.split(",") if t.strip() != ""]
    except ValueError:
        raise ConfigError(f"--taus must be a comma-separated list of numbers, got {args.taus!r}") from None
    if not taus or any(t <= 0 for t in taus):
        raise ConfigError("--taus needs at least one positive value")
    state = _load_bundle(args.ckpt)
    test = load_npz(args.data, split="test")
    reports = [
        tp_fn_distances(
            state.bundle,
            test,
            state.config.augmentation,
            seed=state.config.seed,
            tau=tau,
            epoch=state.epoch,
        )
        for tau in taus
    ]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    export_report(reports, out_dir / "distances.csv", out_dir / "distances.png")
    _write_manifest(
        out_dir,
        f"diagnose-{config_hash(state.config)[:8]}",
        "diagnose",
        {"distances_csv": "distances.csv", "distances_plot": "distances.png"},
        started,
        {"checkpoint": str(args.ckpt), "taus": taus, "seed": state.config.seed},
    )
    for r in reports:
        print(
            f"tau={r.tau_used:g} tp_mean={r.tp_mean:.4f} fn_mean={r.fn_mean:.4f} "
            f"(n_anchors={r.n_anchors}, fn_skipped={r.n_fn_skipped})"
        )
    return 0


def cmd_cluster_inspect(args, extra):
    started = _now()
    if extra:
        raise ConfigError(f"unexpected arguments: {extra}")
    state = _load_bundle(args.ckpt)
    dataset = load_npz(args.data, split="train")
    config = state.config
    features = extract_epoch_features(dataset, state.bundle.encoder, config.augmentation, config.seed, epoch=state.epoch)
    table = kmeans(
        features,
        config.num_prototypes,
        derive_rng(config.seed, f"kmeans/e{state.epoch}"),
        epoch=state.epoch,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "clusters.tsv").write_text(table.to_text_table())
    sizes = table.cluster_sizes()
    with open(out_dir / "cluster_sizes.csv", "w") as fh:
        fh.write("cluster,size\n")
        for k, size in enumerate(sizes):
            fh.write(f"{k},{int(size)}\n")
    _write_manifest(
        out_dir,
        f"cluster-inspect-{config_hash(config)[:8]}",
        "cluster-inspect",
        {"clusters_tsv": "clusters.tsv", "cluster_sizes_csv": "cluster_sizes.csv"},
        started,
        {"checkpoint": str(args.ckpt), "sse": table.sse, "seed": config.seed},
    )
    print(f"{table.num_prototypes} clusters over {len(dataset)} samples, sse={table.sse:.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="spcl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run pretraining from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--encoder", default="small_resnet", help="identity | linear | small_resnet | resnet50")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", type=int, default=1)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe a checkpointed encoder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probe-epochs", type=int, default=100)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("diagnose", help="TP/FN distance report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--taus", required=True, help="comma-separated temperatures, e.g. 0.1,0.5,1.0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("cluster-inspect", help="recompute and dump the prototype table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return args.func(args, extra)
    except _USAGE_EXCEPTIONS as exc:
        return _fail(USAGE_ERROR, str(exc))
    except CheckpointError as exc:
        # a missing checkpoint path is a usage problem, the rest are runtime
        code = USAGE_ERROR if "not found" in str(exc) else RUNTIME_ERROR
        return _fail(code, str(exc))
    except _RUNTIME_EXCEPTIONS as exc:
        return _fail(RUNTIME_ERROR, str(exc))


if __name__ == "__main__":
    raise SystemExit(main())
