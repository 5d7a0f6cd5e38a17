"""Pipeline orchestration: synth, flow, train, adapt, eval, compare.

One JSON config document drives every stage; ``--key.path=value`` flags
override individual fields (CLI > config file > defaults) and all
randomness fans out from the single ``seed`` field via fixed per-stage
offsets. Target eval labels live under ``target/eval_only`` and are read by
the eval and compare commands only.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cbst, fusion, imagecore, metrics, optflow, segmodel, synthgen
from .parallel import parallel_map

CONFIG_VERSION = 1

# per-stage seed offsets
SEED_SAMPLING = 101
SEED_MODEL_INIT = 202
SEED_SGD = 303
SEED_ADAPT = 404

DEFAULTS: dict = {
    "version": CONFIG_VERSION,
    "seed": 7,
    "out_dir": "runs/default",
    "dataset": {
        "dir": "data/default",
        "width": 128,
        "height": 96,
        "n_classes": 6,
        "n_source": 6,
        "n_target": 6,
        "texture_amplitude": 0.25,
        "car_count": [1, 3],
        "person_count": [1, 2],
        "car_speed": [1, 6],
        "person_speed": [1, 2],
        "shift_source": None,
        "shift_target": {
            "gamma": 1.35,
            "gain": [0.9, 1.0, 1.2],
            "noise_sigma": 6.0,
            "texture_style": 1,
        },
    },
    "flow": {
        "source": "estimated",  # estimated | ground_truth
        "encoding": "colorwheel",  # colorwheel | magdir | mag | none
        "max_mag": 8.0,
        "levels": 3,
        "iterations": 3,
        "poly_radius": 3,
        "poly_sigma": 1.1,
        "win_radius": 6,
        "win_sigma": 2.4,
    },
    "model": {
        "hidden_dim": 64,
        "feature_radius": 1,
        "position_features": True,
        "standardize_flow": True,
        "samples_per_image": 2500,
        "learning_rate": 0.05,
        "batch_size": 64,
        "epochs": 15,
        "l2": 1e-4,
        "target_loss_weight": 1.0,
    },
    "cbst": {
        "p0": 0.2,
        "delta_p": 0.05,
        "p_max": 0.5,
        "rounds": 3,
        "use_prior": True,
        "prior_sigma": 6.0,
    },
}


# ---------------------------------------------------------------------------
# configuration


def _deep_update(base: dict, incoming: dict, path: str = "") -> dict:
    for key, value in incoming.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ValueError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _deep_update(base[key], value, here)
        else:
            base[key] = value
    return base


def _apply_override(cfg: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ValueError(f"unknown config key: {dotted}")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ValueError(f"unknown config key: {dotted}")
    node[keys[-1]] = value


def load_config(
    config_path: str | None, overrides: list[str], seed: int | None = None
) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        loaded = json.loads(Path(config_path).read_text())
        if loaded.get("version") != CONFIG_VERSION:
            raise ValueError(f"config version must be {CONFIG_VERSION}")
        _deep_update(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key.path=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _apply_override(cfg, dotted.lstrip("-"), raw)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _scene_spec(cfg: dict) -> synthgen.SceneSpec:
    d = cfg["dataset"]
    return synthgen.SceneSpec(
        width=d["width"],
        height=d["height"],
        n_classes=d["n_classes"],
        car_count=tuple(d["car_count"]),
        person_count=tuple(d["person_count"]),
        car_speed=tuple(d["car_speed"]),
        person_speed=tuple(d["person_speed"]),
        texture_amplitude=d["texture_amplitude"],
        seed=cfg["seed"],
    )


def _domain_shift(d: dict | None) -> synthgen.DomainShift | None:
    if d is None:
        return None
    return synthgen.DomainShift(
        gamma=d["gamma"],
        gain=tuple(d["gain"]),
        noise_sigma=d["noise_sigma"],
        texture_style=d["texture_style"],
    )


def _flow_params(cfg: dict) -> optflow.FlowParams:
    f = cfg["flow"]
    return optflow.FlowParams(
        levels=f["levels"],
        iterations=f["iterations"],
        poly_radius=f["poly_radius"],
        poly_sigma=f["poly_sigma"],
        win_radius=f["win_radius"],
        win_sigma=f["win_sigma"],
    )


def _train_config(cfg: dict, seed_offset: int) -> segmodel.TrainConfig:
    m = cfg["model"]
    return segmodel.TrainConfig(
        learning_rate=m["learning_rate"],
        batch_size=m["batch_size"],
        epochs=m["epochs"],
        seed=cfg["seed"] + seed_offset,
        l2=m["l2"],
    )


def _schedule(cfg: dict) -> cbst.RoundSchedule:
    c = cfg["cbst"]
    return cbst.RoundSchedule(
        p0=c["p0"], delta_p=c["delta_p"], p_max=c["p_max"], rounds=c["rounds"]
    )


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _split_count(manifest: dict, split: str) -> int:
    return manifest["n_source"] if split == "source" else manifest["n_target"]


def _load_flow_channels(cfg: dict, ds: Path, split: str, index: int) -> np.ndarray:
    enc = cfg["flow"]["encoding"]
    maps_dir = ds / split / "flowmaps"
    if enc == "colorwheel":
        return imagecore.read_ppm(maps_dir / f"{index}.ppm").astype(np.float32)
    if enc == "magdir":
        mag = imagecore.read_pgm(maps_dir / f"{index}_mag.pgm")
        direction = imagecore.read_pgm(maps_dir / f"{index}_dir.pgm")
        return np.stack([mag, direction], axis=2).astype(np.float32)
    if enc == "mag":
        return imagecore.read_pgm(maps_dir / f"{index}_mag.pgm").astype(np.float32)[:, :, None]
    raise ValueError(f"unknown flow encoding {enc!r}")


def _load_fused(cfg: dict, ds: Path, split: str, count: int) -> list[np.ndarray]:
    """Raw-scale fused images (RGB then flow channels, all 0-255 float32)."""
    out = []
    for i in range(count):
        rgb = imagecore.read_ppm(ds / split / "rgb" / f"{i}_t0.ppm").astype(np.float32)
        if cfg["flow"]["encoding"] == "none":
            out.append(rgb)
        else:
            out.append(fusion.concat_rgbf(rgb, _load_flow_channels(cfg, ds, split, i)))
    return out


def _stats_for(cfg: dict, source_fused: list[np.ndarray]) -> fusion.ChannelStats:
    stats = fusion.compute_stats(source_fused)
    if not cfg["model"]["standardize_flow"]:
        mean = stats.mean.copy()
        std = stats.std.copy()
        mean[3:] = 0.0
        std[3:] = 1.0
        stats = fusion.ChannelStats(mean=mean, std=std)
    return stats


def _sample_training_pixels(
    cfg: dict, std_images: list[np.ndarray], label_maps: list[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded uniform pixel sampling over labeled pixels of each image."""
    m = cfg["model"]
    rng = np.random.default_rng([cfg["seed"], SEED_SAMPLING])
    feats = []
    labels = []
    for img, lm in zip(std_images, label_maps):
        matrix = fusion.build_feature_matrix(img, m["feature_radius"], m["position_features"])
        flat = lm.reshape(-1)
        candidates = np.flatnonzero(flat != imagecore.IGNORE_LABEL)
        take = min(m["samples_per_image"], len(candidates))
        chosen = rng.choice(candidates, size=take, replace=False)
        feats.append(matrix[chosen])
        labels.append(flat[chosen])
    return np.concatenate(feats, axis=0), np.concatenate(labels, axis=0)


def _meta_path(checkpoint: Path) -> Path:
    return checkpoint.with_suffix(".meta.json")


def _save_meta(checkpoint: Path, cfg: dict, stats: fusion.ChannelStats, manifest: dict) -> None:
    meta = {
        "channel_mean": stats.mean.tolist(),
        "channel_std": stats.std.tolist(),
        "encoding": cfg["flow"]["encoding"],
        "feature_radius": cfg["model"]["feature_radius"],
        "position_features": cfg["model"]["position_features"],
        "standardize_flow": cfg["model"]["standardize_flow"],
        "n_classes": manifest["n_classes"],
        "class_names": [c["name"] for c in manifest["classes"]],
    }
    _meta_path(checkpoint).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_meta(checkpoint: Path) -> dict:
    path = _meta_path(checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint metadata {path!s}")
    return json.loads(path.read_text())


def _stats_from_meta(meta: dict) -> fusion.ChannelStats:
    return fusion.ChannelStats(
        mean=np.asarray(meta["channel_mean"], dtype=np.float64),
        std=np.asarray(meta["channel_std"], dtype=np.float64),
    )


def _eval_checkpoint_on_target(cfg: dict, checkpoint: Path) -> metrics.EvalReport:
    ds = Path(cfg["dataset"]["dir"])
    manifest = synthgen.load_manifest(ds)
    meta = _load_meta(checkpoint)
    model = segmodel.load_model(checkpoint)
    if cfg["flow"]["encoding"] != meta["encoding"]:
        raise ValueError(
            f"checkpoint was trained with encoding {meta['encoding']!r}, "
            f"config says {cfg['flow']['encoding']!r}"
        )
    stats = _stats_from_meta(meta)
    fused = _load_fused(cfg, ds, "target", manifest["n_target"])
    if fused[0].shape[2] != stats.channels:
        raise ValueError(
            f"fused channel count {fused[0].shape[2]} does not match checkpoint "
            f"stats ({stats.channels} channels)"
        )
    cm = metrics.new_confusion(meta["n_classes"])
    preds = parallel_map(
        lambda img: segmodel.predict_labels(
            model,
            fusion.standardize(img, stats),
            meta["feature_radius"],
            meta["position_features"],
        ),
        fused,
    )
    for i, pred in enumerate(preds):
        gt = imagecore.read_pgm(ds / "target" / "eval_only" / f"{i}.pgm")
        metrics.accumulate(cm, pred, gt)
    return metrics.report_from_confusion(cm, meta["class_names"])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> None:
    d = cfg["dataset"]
    synthgen.gen_dataset(
        _scene_spec(cfg),
        _domain_shift(d["shift_source"]),
        _domain_shift(d["shift_target"]),
        d["n_source"],
        d["n_target"],
        cfg["seed"],
        d["dir"],
    )
    print(f"dataset written to {d['dir']}")


def cmd_flow(cfg: dict) -> None:
    ds = Path(cfg["dataset"]["dir"])
    manifest = synthgen.load_manifest(ds)
    params = _flow_params(cfg)
    enc = cfg["flow"]["encoding"]
    max_mag = cfg["flow"]["max_mag"]
    for split in ("source", "target"):
        n = _split_count(manifest, split)
        est_dir = ds / split / "flow_est"
        maps_dir = ds / split / "flowmaps"
        est_dir.mkdir(parents=True, exist_ok=True)
        maps_dir.mkdir(parents=True, exist_ok=True)

        def estimate(i: int, split: str = split) -> np.ndarray:
            if cfg["flow"]["source"] == "ground_truth":
                return imagecore.read_flo(ds / split / "flow_gt" / f"{i}.flo")
            f1 = imagecore.read_ppm(ds / split / "rgb" / f"{i}_t0.ppm").astype(np.float32)
            f2 = imagecore.read_ppm(ds / split / "rgb" / f"{i}_t1.ppm").astype(np.float32)
            return optflow.farneback(optflow.rgb_to_gray(f1), optflow.rgb_to_gray(f2), params)

        flows = parallel_map(estimate, range(n))
        for i, flow in enumerate(flows):
            imagecore.write_flo(est_dir / f"{i}.flo", flow)
            if enc == "colorwheel":
                imagecore.write_ppm(maps_dir / f"{i}.ppm", optflow.flow_to_colorwheel(flow, max_mag))
            elif enc == "magdir":
                encoded = optflow.flow_to_magdir(flow, max_mag)
                imagecore.write_pgm(maps_dir / f"{i}_mag.pgm", encoded[:, :, 0])
                imagecore.write_pgm(maps_dir / f"{i}_dir.pgm", encoded[:, :, 1])
            elif enc == "mag":
                imagecore.write_pgm(maps_dir / f"{i}_mag.pgm", optflow.flow_to_mag(flow, max_mag)[:, :, 0])
            elif enc != "none":
                raise ValueError(f"unknown flow encoding {enc!r}")
        print(f"{split}: wrote {n} flow fields to {est_dir}")


def cmd_train(cfg: dict) -> None:
    ds = Path(cfg["dataset"]["dir"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = synthgen.load_manifest(ds)
    m = cfg["model"]

    fused = _load_fused(cfg, ds, "source", manifest["n_source"])
    stats = _stats_for(cfg, fused)
    std_imgs = [fusion.standardize(img, stats) for img in fused]
    label_maps = [
        imagecore.read_pgm(ds / "source" / "labels" / f"{i}.pgm")
        for i in range(manifest["n_source"])
    ]
    feats, labels = _sample_training_pixels(cfg, std_imgs, label_maps)

    model = segmodel.init_model(
        feats.shape[1], m["hidden_dim"], manifest["n_classes"], cfg["seed"] + SEED_MODEL_INIT
    )
    model, trace = segmodel.train(model, feats, labels, _train_config(cfg, SEED_SGD))

    checkpoint = out / "model_source.ckpt"
    segmodel.save_model(checkpoint, model)
    _save_meta(checkpoint, cfg, stats, manifest)

    cm = metrics.new_confusion(manifest["n_classes"])
    preds = parallel_map(
        lambda img: segmodel.predict_labels(model, img, m["feature_radius"], m["position_features"]),
        std_imgs,
    )
    for pred, gt in zip(preds, label_maps):
        metrics.accumulate(cm, pred, gt)
    report = metrics.report_from_confusion(cm, [c["name"] for c in manifest["classes"]])
    metrics.write_eval_csv(out / "source_eval.csv", report)
    print(
        f"trained on {len(labels)} source pixels "
        f"(final loss {trace[-1]:.4f}), source mIoU {100 * report.miou:.2f}"
    )


def cmd_adapt(cfg: dict) -> None:
    ds = Path(cfg["dataset"]["dir"])
    out = Path(cfg["out_dir"])
    manifest = synthgen.load_manifest(ds)
    m = cfg["model"]
    c = cfg["cbst"]

    checkpoint = out / "model_source.ckpt"
    if not checkpoint.exists():
        raise FileNotFoundError(f"missing source checkpoint {checkpoint!s}; run train first")
    meta = _load_meta(checkpoint)
    model0 = segmodel.load_model(checkpoint)
    stats = _stats_from_meta(meta)

    source_fused = _load_fused(cfg, ds, "source", manifest["n_source"])
    std_source = [fusion.standardize(img, stats) for img in source_fused]
    label_maps = [
        imagecore.read_pgm(ds / "source" / "labels" / f"{i}.pgm")
        for i in range(manifest["n_source"])
    ]
    source_feats, source_labels = _sample_training_pixels(cfg, std_source, label_maps)

    target_fused = _load_fused(cfg, ds, "target", manifest["n_target"])
    targets = []
    for img in target_fused:
        std = fusion.standardize(img, stats)
        targets.append(
            cbst.TargetSample(
                features=fusion.build_feature_matrix(std, m["feature_radius"], m["position_features"]),
                height=std.shape[0],
                width=std.shape[1],
            )
        )

    result = cbst.self_train(
        source_feats,
        source_labels,
        targets,
        model0,
        _schedule(cfg),
        _train_config(cfg, SEED_ADAPT),
        source_label_maps=label_maps,
        use_prior=c["use_prior"],
        prior_sigma=c["prior_sigma"],
        target_weight=m["target_loss_weight"],
    )

    adapted = out / "model_adapted.ckpt"
    segmodel.save_model(adapted, result.model)
    _save_meta(adapted, cfg, stats, manifest)
    for r, round_labels in enumerate(result.pseudolabels, start=1):
        round_dir = out / "pseudo_labels" / f"round_{r}"
        round_dir.mkdir(parents=True, exist_ok=True)
        for i, pl in enumerate(round_labels):
            imagecore.write_pgm(round_dir / f"{i}.pgm", pl)

    lines = ["round,p,class,lambda,selected_fraction,iou"]
    for row in result.rows:
        iou = "" if np.isnan(row.iou) else f"{100 * row.iou:.2f}"
        lines.append(
            f"{row.round_index},{row.p:.4f},{row.class_id},{row.lam:.6f},"
            f"{row.selected_fraction:.6f},{iou}"
        )
    (out / "cbst_rounds.csv").write_text("\n".join(lines) + "\n")
    print(f"adapted checkpoint written to {adapted}")


def cmd_eval(cfg: dict, checkpoint: str, out_csv: str | None) -> None:
    ckpt = Path(checkpoint)
    report = _eval_checkpoint_on_target(cfg, ckpt)
    out = Path(out_csv) if out_csv else Path(cfg["out_dir"]) / f"{ckpt.stem}_target_eval.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_eval_csv(out, report)
    print(f"target mIoU {100 * report.miou:.2f} -> {out}")


def cmd_compare(cfg: dict, report_a: str, report_b: str, out_csv: str | None) -> None:
    manifest = synthgen.load_manifest(Path(cfg["dataset"]["dir"]))
    moving = {c["name"] for c in manifest["classes"] if c["moving"]}
    a = metrics.read_eval_csv(report_a)
    b = metrics.read_eval_csv(report_b)
    cmp = metrics.compare_runs(a, b, moving)
    out = Path(out_csv) if out_csv else Path(cfg["out_dir"]) / "compare.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_compare_csv(out, cmp)
    print(
        f"mIoU delta {100 * cmp.miou_delta:+.2f}, "
        f"moving-class mean delta {100 * cmp.moving_mean_delta:+.2f} -> {out}"
    )


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowadapt",
        description="flow-augmented self-training pipeline on procedural scenes",
    )
    parser.add_argument("--config", help="JSON config path")
    parser.add_argument("--seed", type=int, help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "flow", "train", "adapt"):
        sub.add_parser(name)
    p_eval = sub.add_parser("eval")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out")
    p_cmp = sub.add_parser("compare")
    p_cmp.add_argument("report_a")
    p_cmp.add_argument("report_b")
    p_cmp.add_argument("--out")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    overrides = []
    for item in extras:
        if item.startswith("--") and "=" in item:
            overrides.append(item[2:])
        else:
            parser.error(f"unrecognized argument: {item}")
    cfg = load_config(args.config, overrides, args.seed)

    start = time.perf_counter()
    if args.command == "synth":
        cmd_synth(cfg)
    elif args.command == "flow":
        cmd_flow(cfg)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "adapt":
        cmd_adapt(cfg)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint, args.out)
    elif args.command == "compare":
        cmd_compare(cfg, args.report_a, args.report_b, args.out)
    print(f"{args.command} finished in {time.perf_counter() - start:.1f}s")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
