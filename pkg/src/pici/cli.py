"""Command-line entry point: run training stages, evaluate checkpoints, and
export embeddings.

Configuration is a flat key=value text file with dotted section keys
(model.*, mask.*, losses.*, train.*, augment.*, metrics.*, data.*, out.*).
Exit codes: 0 success, 2 usage or configuration problem, 3 numerical
divergence during training.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .augment import strong_policy, weak_policy
from .data import Dataset, load_image_folder, synth_blobs
from .errors import ConfigError, DivergenceError, EmptyDatasetError, PiciError
from .metrics import accuracy, ari, nmi
from .network import (Network, NetworkConfig, load_checkpoint,
                      load_into_network)
from .trainer import TrainConfig, Trainer, predict_dataset


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _synth_spec(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"synth spec must be 'classes,per_class,image_size', got {text!r}")
    return tuple(int(p) for p in parts)


# key -> (caster, default); None default means "unset unless given".
_SCHEMA = {
    "model.dim": (int, 384),
    "model.layers": (int, 6),
    "model.heads": (int, 12),
    "model.decoder_dim": (int, 512),
    "model.decoder_layers": (int, 8),
    "model.decoder_heads": (int, 16),
    "model.patch_size": (int, 16),
    "model.image_size": (int, 224),
    "model.instance_dim": (int, 128),
    "model.clusters": (int, None),
    "mask.ratio": (float, 0.5),
    "mask.shared": (_bool, False),
    "losses.tau_i": (float, 0.5),
    "losses.tau_c": (float, 1.0),
    "losses.include_self": (_bool, False),
    "losses.recon_all_patches": (_bool, False),
    "train.e1": (int, 200),
    "train.e2": (int, 800),
    "train.e3": (int, 50),
    "train.batch": (int, 96),
    "train.lr": (float, 1e-4),
    "train.seed": (int, 0),
    "train.checkpoint_every": (int, 0),
    "train.eps_column": (float, 0.0),
    "augment.crop_lo": (float, 0.5),
    "augment.crop_hi": (float, 1.0),
    "augment.jitter": (float, 0.4),
    "augment.grayscale_prob": (float, 0.2),
    "augment.flip_prob": (float, 0.5),
    "augment.blur_prob": (float, 0.5),
    "metrics.nmi_norm": (str, "sqrt"),
    "data.path": (str, None),
    "data.synth": (_synth_spec, None),
    "data.synth_seed": (int, 7),
    "out.dir": (str, None),
}

_REQUIRED = ("model.clusters", "out.dir")


def parse_config_text(text: str) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment line; later duplicate keys
    are rejected."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(raw: dict[str, str]) -> dict:
    """Validate raw strings against the schema and fill defaults. Returns a
    dict keyed by the dotted names with typed values."""
    resolved = {}
    for key, value in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        caster, _ = _SCHEMA[key]
        try:
            resolved[key] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    for key, (_, default) in _SCHEMA.items():
        resolved.setdefault(key, default)
    for key in _REQUIRED:
        if resolved[key] is None:
            raise ConfigError(f"{key} is required")
    if (resolved["data.path"] is None) == (resolved["data.synth"] is None):
        raise ConfigError("exactly one of data.path and data.synth must be set")
    if resolved["metrics.nmi_norm"] not in ("sqrt", "arithmetic"):
        raise ConfigError("metrics.nmi_norm must be 'sqrt' or 'arithmetic'")
    return resolved


def _flat_for_snapshot(resolved: dict) -> dict[str, str]:
    out = {}
    for key in sorted(resolved):
        value = resolved[key]
        if value is None:
            continue
        if isinstance(value, bool):
            out[key] = "true" if value else "false"
        elif isinstance(value, tuple):
            out[key] = ",".join(str(v) for v in value)
        else:
            out[key] = str(value)
    return out


def _network_config(resolved: dict) -> NetworkConfig:
    return NetworkConfig(
        embed_dim=resolved["model.dim"],
        n_layers=resolved["model.layers"],
        n_heads=resolved["model.heads"],
        decoder_dim=resolved["model.decoder_dim"],
        decoder_layers=resolved["model.decoder_layers"],
        decoder_heads=resolved["model.decoder_heads"],
        patch_size=resolved["model.patch_size"],
        image_size=resolved["model.image_size"],
        instance_dim=resolved["model.instance_dim"],
        n_clusters=resolved["model.clusters"],
    ).validate()


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(
        e1=resolved["train.e1"], e2=resolved["train.e2"], e3=resolved["train.e3"],
        batch_size=resolved["train.batch"], learning_rate=resolved["train.lr"],
        seed=resolved["train.seed"], tau_i=resolved["losses.tau_i"],
        tau_c=resolved["losses.tau_c"], mask_ratio=resolved["mask.ratio"],
        mask_shared=resolved["mask.shared"],
        include_self=resolved["losses.include_self"],
        recon_all_patches=resolved["losses.recon_all_patches"],
        column_eps=resolved["train.eps_column"],
        checkpoint_every=resolved["train.checkpoint_every"],
    ).validate()


def _load_dataset(resolved: dict) -> Dataset:
    if resolved["data.path"] is not None:
        return load_image_folder(resolved["data.path"])
    classes, per_class, size = resolved["data.synth"]
    return synth_blobs(classes, per_class, size, resolved["data.synth_seed"])


def _policies(resolved: dict, mean, std):
    size = resolved["model.image_size"]
    weak = weak_policy(size, mean, std)
    strong = strong_policy(
        size, mean, std,
        crop_scale_range=(resolved["augment.crop_lo"], resolved["augment.crop_hi"]),
        jitter_strength=resolved["augment.jitter"],
        grayscale_prob=resolved["augment.grayscale_prob"],
        flip_prob=resolved["augment.flip_prob"],
        blur_prob=resolved["augment.blur_prob"],
    )
    return weak, strong


_STAGE_PREREQ = {"train": "pretrain", "boost": "train"}


def cmd_run(config_path: str, stage: str = "all", out_override: str | None = None,
            seed_override: int | None = None) -> int:
    try:
        raw = parse_config_text(Path(config_path).read_text(encoding="utf-8"))
        if out_override is not None:
            raw["out.dir"] = out_override
        if seed_override is not None:
            raw["train.seed"] = str(seed_override)
        resolved = resolve_config(raw)
        net_cfg = _network_config(resolved)
        train_cfg = _train_config(resolved)
        dataset = _load_dataset(resolved)
    except (OSError, PiciError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if stage not in ("all", "pretrain", "train", "boost"):
        print(f"config error: unknown stage {stage!r}", file=sys.stderr)
        return 2

    out_dir = Path(resolved["out.dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / "lock"
    try:
        lock_fd = open(lock, "x", encoding="utf-8")
    except FileExistsError:
        print(f"config error: {out_dir} is locked by another run "
              f"(remove {lock} if stale)", file=sys.stderr)
        return 2
    try:
        lock_fd.write(f"{os.getpid()}\n")
        lock_fd.close()

        net = Network(net_cfg, seed=train_cfg.seed)
        if stage in _STAGE_PREREQ:
            prereq = out_dir / f"checkpoint_{_STAGE_PREREQ[stage]}.pici"
            if not prereq.exists():
                print(f"config error: stage {stage!r} needs {prereq}",
                      file=sys.stderr)
                return 2
            try:
                meta, arrays = load_checkpoint(prereq)
                load_into_network(net, arrays)
            except (PiciError, OSError) as exc:
                print(f"config error: cannot resume from {prereq}: {exc}",
                      file=sys.stderr)
                return 2

        mean, std = dataset.channel_stats()
        weak, strong = _policies(resolved, mean, std)
        flat = _flat_for_snapshot(resolved)
        snapshot = out_dir / "config_resolved.txt"
        snapshot.write_text(
            "".join(f"{k}={v}\n" for k, v in flat.items()), encoding="utf-8")

        print(f"pici run: stage={stage} clusters={net_cfg.n_clusters} "
              f"tau_i={train_cfg.tau_i} tau_c={train_cfg.tau_c} "
              f"mask_ratio={train_cfg.mask_ratio} batch={train_cfg.batch_size} "
              f"lr={train_cfg.learning_rate} seed={train_cfg.seed}")

        trainer = Trainer(net, dataset, train_cfg, weak, strong,
                          out_dir=out_dir, nmi_norm=resolved["metrics.nmi_norm"],
                          append_metrics=stage in ("train", "boost"),
                          checkpoint_meta={"config": flat})
        stages = ("pretrain", "train", "boost") if stage == "all" else (stage,)
        try:
            trainer.run(stages)
        except DivergenceError as exc:
            print(f"divergence: {exc}", file=sys.stderr)
            return 3
        return 0
    finally:
        lock.unlink(missing_ok=True)


def _dataset_from_spec(spec: str) -> Dataset:
    if spec.startswith("synth:"):
        body = spec[len("synth:"):]
        parts = [p.strip() for p in body.split(",")]
        if len(parts) not in (3, 4):
            raise ConfigError(
                f"--data synth spec must be synth:classes,per_class,size[,seed], got {spec!r}")
        classes, per_class, size = (int(p) for p in parts[:3])
        seed = int(parts[3]) if len(parts) == 4 else 7
        return synth_blobs(classes, per_class, size, seed)
    return load_image_folder(spec)


def _restore(checkpoint_path: str):
    meta, arrays = load_checkpoint(checkpoint_path)
    if "network_config" not in meta:
        raise ConfigError(f"checkpoint {checkpoint_path} carries no network config")
    net_cfg = NetworkConfig(**meta["network_config"]).validate()
    net = Network(net_cfg, seed=0)
    load_into_network(net, arrays)
    mean = tuple(meta.get("normalize_mean", (0.0, 0.0, 0.0)))
    std = tuple(meta.get("normalize_std", (1.0, 1.0, 1.0)))
    return net, meta, mean, std


def _eval_predictions(checkpoint: str, data_spec: str):
    from .augment import weak_augment

    net, meta, mean, std = _restore(checkpoint)
    dataset = _dataset_from_spec(data_spec)
    if dataset.n_classes != net.config.n_clusters:
        raise ConfigError(
            f"dataset has {dataset.n_classes} classes but the checkpoint model "
            f"clusters into {net.config.n_clusters}")
    weak = weak_policy(net.config.image_size, mean, std)
    views = np.stack([weak_augment(img, weak) for img, _, _ in dataset.items])
    pred, z, h = predict_dataset(net, views)
    return dataset, pred, z, meta


def cmd_eval(checkpoint: str, data_spec: str, out: str) -> int:
    try:
        dataset, pred, _, meta = _eval_predictions(checkpoint, data_spec)
    except (PiciError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    true = dataset.labels()
    norm = meta.get("config", {}).get("metrics.nmi_norm", "sqrt")
    scores = (nmi(true, pred, norm), accuracy(true, pred), ari(true, pred))
    with open(out_dir / "eval.csv", "w", encoding="utf-8") as f:
        f.write("nmi,acc,ari,n_samples\n")
        f.write(",".join(repr(float(s)) for s in scores) + f",{len(dataset)}\n")
    with open(out_dir / "labels.csv", "w", encoding="utf-8") as f:
        f.write("id,true,pred\n")
        for item_id, t, p in zip(dataset.ids(), true, pred):
            f.write(f"{item_id},{t},{p}\n")
    print(f"pici eval: nmi={scores[0]:.4f} acc={scores[1]:.4f} ari={scores[2]:.4f} "
          f"n={len(dataset)}")
    return 0


def cmd_export_embeddings(checkpoint: str, data_spec: str, out: str) -> int:
    try:
        dataset, pred, z, _ = _eval_predictions(checkpoint, data_spec)
    except (PiciError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    true = dataset.labels()
    dim = z.shape[1]
    with open(out_dir / "embeddings.csv", "w", encoding="utf-8") as f:
        header = "id,true_label,pred_label," + ",".join(f"z_{j}" for j in range(dim))
        f.write(header + "\n")
        for item_id, t, p, row in zip(dataset.ids(), true, pred, z):
            f.write(f"{item_id},{t},{p}," + ",".join(repr(float(v)) for v in row) + "\n")
    print(f"pici export: wrote {len(dataset)} embeddings of dim {dim}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pici",
        description="Masked-patch transformer image clustering")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute training stages")
    run.add_argument("--config", required=True, help="key=value config file")
    run.add_argument("--stage", default="all",
                     choices=["all", "pretrain", "train", "boost"])
    run.add_argument("--out", default=None, help="override out.dir")
    run.add_argument("--seed", type=int, default=None, help="override train.seed")

    for name, fn in (("eval", "evaluate a checkpoint"),
                     ("export-embeddings", "write instance embeddings as CSV")):
        p = sub.add_parser(name, help=fn)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True,
                       help="dataset folder or synth:classes,per_class,size[,seed]")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("PICI_THREADS")
    if threads:
        try:
            import torch
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"config error: PICI_THREADS={threads!r} is not an integer",
                  file=sys.stderr)
            return 2
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    if args.command == "run":
        return cmd_run(args.config, args.stage, args.out, args.seed)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.data, args.out)
    return cmd_export_embeddings(args.checkpoint, args.data, args.out)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
