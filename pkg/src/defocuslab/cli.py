"""``defocuslab`` command line: synth, train-map, train-gan, infer, eval.

Every run writes ``config.json`` (the fully resolved configuration) next to
its outputs. Exit codes: 0 ok, 2 configuration, 3 data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .adversarial import (
    DiscriminatorConfig,
    GanTrainConfig,
    LossConfig,
    RandomConvExtractor,
    VGGConv33Extractor,
    build_discriminator,
    save_discriminator,
    train_defocusgan,
)
from .data_pipeline import load_index, load_record
from .deblur_generator import AnnealSchedule, DefocusGenerator, DGBConfig, load_generator, save_generator, tiled_forward
from .deconv_baseline import WienerConfig, two_stage_deblur
from .defocus_estimation import (
    EstimatorArch,
    EstimatorConfig,
    build_estimator_f,
    load_estimator,
    predict_map,
    save_estimator,
    train_defocus_estimator,
)
from .errors import CapabilityError, ConfigError, DatasetError, NumericalError, RangeError
from .evaluation import make_report
from .forward_reblur import SceneDescriptor, generate_scene, save_scene
from .io import read_png, sha256_file, write_pfm, write_png
from .psf_kernel import gaussian_bank, init_bank, load_bank, save_bank

log = logging.getLogger("defocuslab")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4
CACHE_ENV = "DEFOCUSLAB_CACHE"

_LAYOUT_REGIONS = {"uniform": 1, "two_plane": 2, "quadrants": 4, "ramp": 2}

DEFAULTS = {
    "synth": {
        "n_scenes": 4,
        "size": [128, 128],
        "textures": ["smooth_noise", "checkerboard", "noise", "smooth_noise"],
        "layouts": ["two_plane", "quadrants", "ramp", "uniform"],
        "coc_range": [0, 8],
        "scenes": None,
        "bank": "butterworth",
        "c_max": 25,
    },
    "train-map": {
        "data": None,
        "layout": "synthetic",
        "split": "train",
        "preview_split": "val",
        "split_counts": [350, 74, 76],
        "split_seed": 0,
        "width": 16,
        "init_bank": "butterworth",
        "estimator": asdict(EstimatorConfig()),
    },
    "train-gan": {
        "data": None,
        "layout": "synthetic",
        "split": "train",
        "split_counts": [350, 74, 76],
        "split_seed": 0,
        "maps": "gt",
        "generator": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(DGBConfig()).items()},
        "discriminator_width": 64,
        "anneal_iters": 20_000,
        "extractor": "vgg",
        "vgg_weights": None,
        "train": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(GanTrainConfig()).items()},
        "ablation": {"no_dg": False, "no_ms": False, "no_rcab": False, "no_lp": False, "no_gan": False},
    },
    "infer": {
        "checkpoint": None,
        "inputs": [],
        "tile": 512,
        "overlap": 64,
        "halo": 192,
        "bits": 16,
    },
    "eval": {
        "data": None,
        "layout": "synthetic",
        "split": "test",
        "split_counts": [350, 74, 76],
        "split_seed": 0,
        "model": "identity",
        "two_stage": False,
        "maps": "gt",
        "bank": "butterworth",
        "nsr": 1e-2,
        "reference_tables": ["single_image"],
    },
}


# -- configuration -------------------------------------------------------------------

def _merge(base: dict, override: dict, where="config") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise ConfigError(f"unknown key {where}.{k}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


def resolve_config(command: str, args) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if args.config:
        try:
            override = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {args.config} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config}: {exc}") from exc
        cfg = _merge(cfg, override.get(command, override))
    for key in ("data", "checkpoint", "model", "maps"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if command == "train-gan":
        for flag in cfg["ablation"]:
            if getattr(args, flag, False):
                cfg["ablation"][flag] = True
    if command == "infer":
        if args.inputs:
            cfg["inputs"] = list(args.inputs)
        if args.tile is not None:
            cfg["tile"] = args.tile
    if command == "eval" and args.two_stage:
        cfg["two_stage"] = True
    cfg["seed"] = args.seed
    cfg["deterministic"] = bool(args.deterministic)
    cfg["workers"] = args.workers
    return cfg


def _write_config(out: Path, command: str, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


def _seed_everything(seed: int, deterministic: bool):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _make_bank(spec, c_max=25):
    if spec == "butterworth":
        return init_bank(c_max, trainable=False)
    if spec == "gaussian":
        return gaussian_bank(c_max)
    if not Path(spec).is_file():
        raise ConfigError(f"bank must be 'butterworth', 'gaussian' or a checkpoint path, got {spec!r}")
    return load_bank(spec)


def _need(cfg, key):
    if not cfg.get(key):
        raise ConfigError(f"'{key}' is required (flag or config file)")
    return cfg[key]


def _load_split(cfg, split):
    root = _need(cfg, "data")
    cache = os.environ.get(CACHE_ENV) or None
    index = load_index(root, cfg["layout"], cfg["split_seed"], tuple(cfg["split_counts"]), cache_dir=cache)
    records = index.records if split == "all" else index.split(split)
    if not records:
        raise DatasetError(f"split {split!r} of {root} is empty (counts {index.counts()})")
    workers = max(1, int(cfg.get("workers") or 1))
    if workers == 1:
        return [load_record(r) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(load_record, records))


# -- subcommands ------------------------------------------------------------------------

def _scene_descriptors(cfg) -> list[SceneDescriptor]:
    if cfg["scenes"]:
        out = []
        for i, spec in enumerate(cfg["scenes"]):
            try:
                out.append(SceneDescriptor.from_kv(spec))
            except (ConfigError, RangeError) as exc:
                raise type(exc)(f"scene_{i:04d}: {exc}") from exc
        return out
    lo, hi = cfg["coc_range"]
    out = []
    for i in range(int(cfg["n_scenes"])):
        rng = np.random.default_rng([cfg["seed"], i])
        layout = cfg["layouts"][i % len(cfg["layouts"])]
        coc = [int(v) for v in rng.integers(lo, hi + 1, _LAYOUT_REGIONS[layout])]
        out.append(SceneDescriptor.from_kv({
            "size": cfg["size"], "texture": cfg["textures"][i % len(cfg["textures"])],
            "depth_layout": layout, "coc": coc, "seed": cfg["seed"] * 1000 + i,
        }))
    return out


def cmd_synth(cfg, out: Path) -> int:
    bank = _make_bank(cfg["bank"], cfg["c_max"])
    manifest = {"scenes": []}
    for i, desc in enumerate(_scene_descriptors(cfg)):
        sid = f"scene_{i:04d}"
        try:
            sample = generate_scene(desc, bank)
        except RangeError as exc:
            raise RangeError(f"{sid}: {exc}") from exc
        files = save_scene(sample, out / sid)
        manifest["scenes"].append({
            "scene_id": sid,
            "descriptor": {k: list(v) if isinstance(v, tuple) else v for k, v in desc.to_kv().items()},
            "files": {p.name: sha256_file(p) for p in files},
        })
        log.info("wrote %s", sid)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"synth: {len(manifest['scenes'])} scenes -> {out}")
    return 0


def cmd_train_map(cfg, out: Path) -> int:
    data = _load_split(cfg, cfg["split"])
    ecfg = EstimatorConfig(**{**cfg["estimator"], "seed": cfg["seed"]})
    print(f"train-map: lambda={ecfg.lambda_reg:g} lr={ecfg.lr:g} epochs={ecfg.total_epochs} "
          f"warmup={ecfg.warmup_epochs} scenes={len(data)}")
    f = build_estimator_f(EstimatorArch(width=cfg["width"], c_max=ecfg.c_max), seed=cfg["seed"])
    if cfg["init_bank"] == "butterworth":
        bank = init_bank(ecfg.c_max)
    else:
        bank = _make_bank(cfg["init_bank"], ecfg.c_max)
    f, bank, history = train_defocus_estimator(data, f, bank, ecfg)
    save_estimator(f, out / "estimator.npz")
    save_bank(bank, out / "bank.npz")
    history.write_csv(out / "history.csv")
    plotting.plot_history(history.rows, out / "loss.png", ["mean_loss"], "defocus map training")
    plotting.plot_kernel_bank(bank, out / "kernels.png", classes=range(0, ecfg.c_max + 1, 5))
    try:
        previews = _load_split(cfg, cfg["preview_split"])
    except DatasetError:
        previews = []
    prev_dir = out / "previews"
    prev_dir.mkdir(exist_ok=True)
    with torch.no_grad():
        for s in previews:
            m = predict_map(f, s.dp_left, s.dp_right)[0, 0].numpy()
            write_pfm(prev_dir / f"{s.scene_id}.pfm", m)
            plotting.plot_map(m, prev_dir / f"{s.scene_id}.png", ecfg.c_max)
            write_png(prev_dir / f"{s.scene_id}_map.png", m / ecfg.c_max, bits=8)
    print(f"train-map: {len(history.rows)} epochs, L_DM {history.losses[0]:.6f} -> {history.losses[-1]:.6f}")
    return 0


def _map_source(cfg, data):
    if cfg["maps"] == "gt":
        if any(s.gt_map is None for s in data):
            raise DatasetError("maps='gt' requires ground-truth maps (synthetic data)")
        return lambda i: data[i].gt_map
    f = load_estimator(cfg["maps"])
    with torch.no_grad():
        maps = [predict_map(f, s.dp_left, s.dp_right)[0, 0] for s in data]
    return lambda i: maps[i]


def _extractor(cfg):
    if cfg["ablation"]["no_lp"]:
        return None
    if cfg["extractor"] == "random":
        return RandomConvExtractor(seed=cfg["seed"])
    if cfg["extractor"] == "vgg":
        return VGGConv33Extractor(cfg["vgg_weights"])
    raise ConfigError(f"extractor must be 'vgg' or 'random', got {cfg['extractor']!r}")


def cmd_train_gan(cfg, out: Path) -> int:
    data = _load_split(cfg, cfg["split"])
    abl = cfg["ablation"]
    gcfg = DGBConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["generator"].items()})
    gcfg = gcfg.with_ablation(abl["no_dg"], abl["no_ms"], abl["no_rcab"])
    tr = dict(cfg["train"])
    loss = LossConfig(**tr.pop("loss"))
    if abl["no_lp"]:
        loss = LossConfig(0.0, loss.beta, loss.gp_coeff, loss.gamma)
    if abl["no_gan"]:
        loss = LossConfig(loss.alpha, 0.0, loss.gp_coeff, loss.gamma)
    tcfg = GanTrainConfig(**{**tr, "betas": tuple(tr["betas"]), "loss": loss, "seed": cfg["seed"],
                             "use_gan": tr["use_gan"] and not abl["no_gan"]})
    print(f"train-gan: lr={tcfg.lr:g} batch={tcfg.batch_size} alpha={loss.alpha:g} beta={loss.beta:g} "
          f"anneal={cfg['anneal_iters']:g} scenes={len(data)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg["seed"])
        generator = DefocusGenerator(gcfg)
    disc = None if abl["no_gan"] else build_discriminator(DiscriminatorConfig(width=cfg["discriminator_width"]), seed=cfg["seed"])
    schedule = AnnealSchedule(total_iters=cfg["anneal_iters"])
    if abl["no_dg"]:
        schedule = AnnealSchedule(w0=0.0, total_iters=cfg["anneal_iters"])
    generator, disc, history = train_defocusgan(data, generator, disc, _map_source(cfg, data), tcfg, schedule,
                                                extractor=_extractor(cfg))
    save_generator(generator, out / "generator.npz")
    if disc is not None:
        save_discriminator(disc, out / "discriminator.npz")
    history.write_csv(out / "history.csv")
    plotting.plot_history(history.rows, out / "loss.png", ["L_c", "L_p", "L_adv"], "generator training")
    last = history.rows[-1]
    print(f"train-gan: {len(history.rows)} epochs, {last['iter']} iters, "
          f"L_c={last['L_c']:.6f} L_p={last['L_p']:.6f} L_adv={last['L_adv']:.6f}")
    return 0


def _chw(arr):
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def _expand_inputs(inputs) -> list[Path]:
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.png")))
        elif p.is_file():
            paths.append(p)
        else:
            raise DatasetError(f"input {p} not found")
    if not paths:
        raise DatasetError("no input images")
    return paths


def _load_generator(path):
    if not path or not Path(path).is_file():
        raise DatasetError(f"generator checkpoint {path!r} not found")
    return load_generator(path)


def cmd_infer(cfg, out: Path) -> int:
    g = _load_generator(cfg["checkpoint"])
    for p in _expand_inputs(cfg["inputs"]):
        x = _chw(read_png(p))
        y = tiled_forward(g, x, cfg["tile"], cfg["overlap"], cfg["halo"]) if cfg["tile"] else g(x)
        write_png(out / p.name, y.clamp(0, 1).numpy().transpose(1, 2, 0), bits=cfg["bits"])
        log.info("wrote %s", out / p.name)
    print(f"infer: outputs in {out}")
    return 0


def cmd_eval(cfg, out: Path) -> int:
    data = _load_split(cfg, cfg["split"])
    preds = []
    if cfg["two_stage"]:
        bank = _make_bank(cfg["bank"])
        maps = _map_source(cfg, data)
        wcfg = WienerConfig(nsr=cfg["nsr"])
        for i, s in enumerate(data):
            preds.append(two_stage_deblur(s.oof, maps(i), bank, wcfg).clamp(0, 1))
        method = f"two-stage ({cfg['bank']} bank, {cfg['maps']} maps)"
    elif cfg["model"] == "identity":
        preds = [s.oof for s in data]
        method = "identity (blurred input)"
    else:
        g = _load_generator(cfg["model"])
        with torch.no_grad():
            preds = [g(s.oof).clamp(0, 1) for s in data]
        method = f"generator {Path(cfg['model']).name}"
    report = make_report(
        [(p, s.aif) for p, s in zip(preds, data)],
        scene_ids=[s.scene_id for s in data],
        metadata={"method": method, "split": cfg["split"], "scenes": len(data)},
        reference_tables=cfg["reference_tables"],
    )
    (out / "metrics.csv").write_text(report.to_csv())
    table = report.to_table()
    (out / "metrics.txt").write_text(table)
    plotting.plot_metrics(report, out / "metrics.png")
    print(table, end="")
    return 0


COMMANDS = {"synth": cmd_synth, "train-map": cmd_train_map, "train-gan": cmd_train_gan,
            "infer": cmd_infer, "eval": cmd_eval}


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding defaults (optionally keyed by subcommand)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="deterministic kernels, single thread")
    common.add_argument("--workers", type=int, default=1, help="threads for data loading")
    common.add_argument("--device", choices=["cpu", "auto"], default="cpu")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="defocuslab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("train-map", parents=[common], help="train the defocus map estimator and kernel bank")
    p.add_argument("--data")
    p = sub.add_parser("train-gan", parents=[common], help="train the deblurring generator")
    p.add_argument("--data")
    p.add_argument("--maps", help="'gt' or an estimator checkpoint")
    for flag in ("no-dg", "no-ms", "no-rcab", "no-lp", "no-gan"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), action="store_true")
    p = sub.add_parser("infer", parents=[common], help="deblur images with a trained generator")
    p.add_argument("inputs", nargs="*", help="PNG files or directories")
    p.add_argument("--checkpoint")
    p.add_argument("--tile", type=int, help="tile size in px (0 disables tiling)")
    p = sub.add_parser("eval", parents=[common], help="metrics report over a dataset split")
    p.add_argument("--data")
    p.add_argument("--model", help="'identity' or a generator checkpoint")
    p.add_argument("--maps", help="'gt' or an estimator checkpoint (two-stage mode)")
    p.add_argument("--two-stage", action="store_true", help="defocus map + Wiener deconvolution instead of the generator")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        if args.print_config:
            print(json.dumps({"command": args.command, **cfg}, indent=2, sort_keys=True))
            return 0
        _seed_everything(args.seed, args.deterministic)
        out = Path(args.out)
        _write_config(out, args.command, cfg)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, RangeError, CapabilityError) as exc:
        print(f"defocuslab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"defocuslab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"defocuslab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
