"""Command-line entry point: ``voldit <command> [options]``.

Commands write into ``--out`` (default: the config's output directory):

``phantoms``         volumes/, masks/, manifest.json
``train-backbone``   backbone.ckpt (best validation loss), backbone_last.ckpt, loss.tsv, loss.png
``train-adapter``    adapter.ckpt, adapter_loss.tsv, adapter_loss.png
``sample``           sample_XXXX.vol, manifest.json, samples.png
``evaluate``         report.tsv, metrics.png, masks.png (with --masks)

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 contract or
dimension error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec, evaluation, io, phantom, plotting, training
from .config import RunConfig
from .diffusion import cosine_schedule
from .dit import DiTConfig, DiTModel
from .errors import ConfigError, ContractError, VolDiTError
from .tgca import AdapterConfig, ControlAdapter

log = logging.getLogger("voldit")

DTYPE = np.float32


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "size", None):
        cfg.model.size = args.size
    if getattr(args, "patch", None):
        cfg.model.patch = args.patch
    if getattr(args, "mode", None):
        cfg.sample.mode = args.mode
    cfg.validate()
    return cfg


def _out_dir(args, cfg: RunConfig, default: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.output.dir) / default


def _write_tsv(path: Path, header: list[str], rows) -> None:
    lines = ["\t".join(header)] + ["\t".join(str(v) for v in r) for r in rows]
    io.atomic_write(path, ("\n".join(lines) + "\n").encode())


def _volume_files(path, sub: str = "volumes", split: str = "all") -> list[Path]:
    """Resolve a file, a directory of ``.vol`` files, or a phantom directory with a manifest."""
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise FileNotFoundError(f"{p}: no such file or directory")
    manifest = p / "manifest.json"
    if manifest.exists() and (p / sub).is_dir():
        m = json.loads(manifest.read_text())
        entries = m["items"]
        if split != "all":
            keep = set(m["splits"][split])
            entries = [e for i, e in enumerate(entries) if i in keep]
        return [p / e[sub[:-1]] for e in entries]
    files = sorted(p.glob("*.vol"))
    if not files:
        files = sorted((p / sub).glob("*.vol")) if (p / sub).is_dir() else []
    return files


def _read_all(files) -> list[np.ndarray]:
    return [io.read_volume(f)[0] for f in files]


def _split_of(data_dir: Path, split: str, sub: str = "volumes") -> list[np.ndarray]:
    return _read_all(_volume_files(data_dir, sub, split))


def _load_backbone(path) -> tuple[dict, DiTModel]:
    header, arrays = io.load_checkpoint(path)
    if header.get("kind") != "backbone":
        raise ConfigError(f"{path}: not a backbone checkpoint")
    model = DiTModel(DiTConfig.from_dict(header["dit"]), dtype=DTYPE)
    io.assign_parameters(model.params, arrays)
    return header, model


def _load_adapter(path, backbone_sha: str | None = None) -> tuple[dict, ControlAdapter]:
    header, arrays = io.load_checkpoint(path)
    if header.get("kind") != "adapter":
        raise ConfigError(f"{path}: not an adapter checkpoint")
    if backbone_sha is not None and header["backbone_sha256"] != backbone_sha:
        raise ConfigError(f"{path}: adapter was trained on a different backbone")
    adapter = ControlAdapter(AdapterConfig.from_dict(header["adapter"]), dtype=DTYPE)
    io.assign_parameters(adapter.params, arrays)
    return header, adapter


def _split_ckpts(paths) -> tuple[Path, Path | None]:
    backbone = adapter = None
    for p in paths or []:
        header, _ = io.load_checkpoint(p)
        kind = header.get("kind")
        if kind == "backbone":
            backbone = Path(p)
        elif kind == "adapter":
            adapter = Path(p)
        else:
            raise ConfigError(f"{p}: unknown checkpoint kind {kind!r}")
    if backbone is None:
        raise ConfigError("a backbone checkpoint is required (--ckpt)")
    return backbone, adapter


def _check_backbone_matches(cfg: RunConfig, header: dict) -> None:
    want = cfg.dit_config().to_dict()
    if header["dit"] != want:
        raise ConfigError(f"backbone checkpoint geometry {header['dit']} does not match config {want}")


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_phantoms(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    if args.n is not None:
        cfg.data.n = args.n
    cfg.validate()
    out = _out_dir(args, cfg, "phantoms")
    d = cfg.data
    seeds = phantom.phantom_seeds(d.seed, d.n)
    items = []
    for i, s in enumerate(seeds):
        ph = phantom.generate(s, d.geometry, d.n_labels)
        name = f"phantom_{i:04d}.vol"
        io.write_volume(out / "volumes" / name, ph.volume)
        io.write_volume(out / "masks" / name, ph.mask)
        items.append({"volume": f"volumes/{name}", "mask": f"masks/{name}", "seed": s})
    manifest = {
        "seed": d.seed,
        "n": d.n,
        "geometry": list(d.geometry),
        "n_labels": d.n_labels,
        "splits": phantom.split_indices(d.n),
        "items": items,
        "config": cfg.to_text(),
    }
    io.atomic_write(out / "manifest.json", json.dumps(manifest, indent=1).encode())
    print(f"wrote {d.n} phantoms to {out}")
    return 0


def _training_latents(cfg: RunConfig, data_dir: Path):
    spec = cfg.latent_spec()
    subset = "all" if cfg.train.subset == "all" else "train"
    train_vols = _split_of(data_dir, subset)
    if not train_vols:
        raise ContractError(f"{data_dir}: no training volumes")
    if tuple(train_vols[0].shape[1:]) != tuple(cfg.data.geometry):
        raise ConfigError(f"data geometry {train_vols[0].shape[1:]} does not match config {cfg.data.geometry}")
    lat = training.volumes_to_latents(train_vols, spec)
    norm = codec.LatentNormalizer.fit(lat)
    val_vols = _split_of(data_dir, "val") if subset == "train" else []
    val = norm.normalize(training.volumes_to_latents(val_vols, spec)) if val_vols else None
    return spec, norm, norm.normalize(lat), val


def cmd_train_backbone(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.steps is not None:
        cfg.train.steps = args.steps
    dcfg = cfg.validate()
    out = _out_dir(args, cfg, "backbone")
    data_dir = Path(args.data) if args.data else Path(cfg.output.dir) / "phantoms"
    spec, norm, latents, val = _training_latents(cfg, data_dir)
    sched = cosine_schedule(cfg.schedule.T, cfg.schedule.s)
    model = DiTModel(dcfg, seed=cfg.model.seed, dtype=DTYPE)
    tr = cfg.train

    def header(res, step) -> dict:
        return {
            "kind": "backbone",
            "config": cfg.to_text(),
            "dit": dcfg.to_dict(),
            "codec": spec.to_dict(),
            "normalizer": norm.to_dict(),
            "schedule": sched.to_dict(),
            "rng_state": res.rng_state,
            "step": step,
            "best_step": res.best_step,
            "best_val": res.best_val,
        }

    def on_eval(step, v, res):
        io.save_checkpoint(out / "backbone_last.ckpt", model.params, header(res, step))

    res = training.train_backbone(
        model, latents, sched, tr.steps, tr.batch, tr.lr, tr.seed, tr.huber_delta,
        val_latents=val, eval_every=tr.eval_every, on_eval=on_eval,
    )
    _write_tsv(out / "loss.tsv", ["step", "loss"], [(i + 1, f"{l:.6g}") for i, l in enumerate(res.losses)])
    _write_tsv(out / "val_loss.tsv", ["step", "val_loss"], [(s, f"{v:.6g}") for s, v in res.val])
    for name, p in model.params.items():
        p.data = res.best_params[name]
    digest = io.save_checkpoint(out / "backbone.ckpt", model.params, header(res, tr.steps))
    plotting.loss_curve(res.losses, out / "loss.png", val=res.val)
    print(f"backbone.ckpt sha256={digest} best_step={res.best_step} best_val={res.best_val:.6g}")
    return 0


def cmd_train_adapter(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.adapter.seed = args.seed
    if args.pi is not None:
        cfg.adapter.mode, cfg.adapter.pi = "fixed", args.pi
    if args.steps is not None:
        cfg.adapter.steps = args.steps
    dcfg = cfg.validate()
    out = _out_dir(args, cfg, "adapter")
    backbone_path, _ = _split_ckpts(args.ckpt)
    bheader, backbone = _load_backbone(backbone_path)
    _check_backbone_matches(cfg, bheader)
    backbone_sha = io.sha256_file(backbone_path)
    data_dir = Path(args.data) if args.data else Path(cfg.output.dir) / "phantoms"
    spec = codec.LatentSpec(bheader["codec"]["levels"], bheader["codec"]["input_channels"])
    norm = codec.LatentNormalizer.from_dict(bheader["normalizer"])
    subset = "all" if cfg.train.subset == "all" else "train"
    vols = _split_of(data_dir, subset)
    masks = np.stack(_split_of(data_dir, subset, "masks"))
    latents = norm.normalize(training.volumes_to_latents(vols, spec))
    sched = cosine_schedule(cfg.schedule.T, cfg.schedule.s)
    a = cfg.adapter
    acfg = AdapterConfig.for_backbone(
        dcfg, masks.shape[1], masks.shape[2:], cfg.injection_layers(dcfg.depth), mode=a.mode, pi=a.pi
    )
    adapter = ControlAdapter(acfg, seed=a.seed, dtype=DTYPE)
    losses = training.train_adapter(
        backbone, adapter, latents, masks, sched, a.steps, cfg.train.batch, a.lr, a.seed, cfg.train.huber_delta
    )
    if io.sha256_file(backbone_path) != backbone_sha:
        raise ContractError("backbone checkpoint changed during adapter training")
    header = {
        "kind": "adapter",
        "config": cfg.to_text(),
        "adapter": acfg.to_dict(),
        "mode": acfg.mode,
        "pi": acfg.pi if acfg.mode == "fixed" else None,
        "backbone_sha256": backbone_sha,
        "steps": a.steps,
        "seed": a.seed,
    }
    digest = io.save_checkpoint(out / "adapter.ckpt", adapter.params, header)
    _write_tsv(out / "adapter_loss.tsv", ["step", "loss"], [(i + 1, f"{l:.6g}") for i, l in enumerate(losses)])
    plotting.loss_curve(losses, out / "adapter_loss.png", title="adapter loss")
    print(f"adapter.ckpt sha256={digest} mode={acfg.mode}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.sample.seed = args.seed
    if args.n is not None:
        cfg.sample.n = args.n
    out = _out_dir(args, cfg, "samples")
    backbone_path, adapter_path = _split_ckpts(args.ckpt)
    bheader, model = _load_backbone(backbone_path)
    if args.size and model.cfg.size != args.size or args.patch and model.cfg.patch != args.patch:
        raise ConfigError(f"checkpoint is {model.cfg.size}/p={model.cfg.patch}, requested {args.size}/p={args.patch}")
    spec = codec.LatentSpec(bheader["codec"]["levels"], bheader["codec"]["input_channels"])
    norm = codec.LatentNormalizer.from_dict(bheader["normalizer"])
    sched = cosine_schedule(bheader["schedule"]["T"], bheader["schedule"]["s"])
    adapter = masks = None
    mask_files: list[Path] = []
    if args.masks:
        if adapter_path is None:
            raise ConfigError("--masks needs an adapter checkpoint (--ckpt)")
        _, adapter = _load_adapter(adapter_path, io.sha256_file(backbone_path))
        if args.pi is not None:
            adapter.set_fixed_scale(args.pi)
        mask_files = _volume_files(args.masks, "masks", args.split)
        if not mask_files:
            raise ContractError(f"{args.masks}: no mask volumes")
        masks = np.stack(_read_all(mask_files))
    s = cfg.sample
    z = training.generate_latents(model, sched, s.n, s.seed, s.mode, adapter, masks, s.batch)
    vols = training.decode_latents(z, spec, norm)
    items = []
    for i, v in enumerate(vols):
        name = f"sample_{i:04d}.vol"
        io.write_volume(out / name, v)
        item = {"volume": name, "chain": [s.seed, i]}
        if mask_files:
            item["mask"] = str(mask_files[i % len(mask_files)].resolve())
        items.append(item)
    manifest = {
        "n": s.n,
        "seed": s.seed,
        "mode": s.mode,
        "backbone_sha256": io.sha256_file(backbone_path),
        "adapter": None if adapter is None else {"mode": adapter.mode, "pi": adapter.acfg.pi},
        "items": items,
    }
    io.atomic_write(out / "manifest.json", json.dumps(manifest, indent=1).encode())
    plotting.slice_grid(list(vols), out / "samples.png")
    print(f"wrote {s.n} samples to {out}")
    return 0


def _fake_masks(fake_dir: Path, n: int, masks_arg, split: str) -> list[np.ndarray]:
    manifest = fake_dir / "manifest.json"
    if masks_arg is None and manifest.exists():
        items = json.loads(manifest.read_text())["items"][:n]
        if items and all("mask" in it for it in items):
            return [io.read_volume(it["mask"])[0] for it in items]
        raise ContractError(f"{fake_dir}: samples were not generated from masks")
    files = _volume_files(masks_arg, "masks", split)
    if not files:
        raise ContractError(f"{masks_arg}: no mask volumes")
    return [io.read_volume(files[i % len(files)])[0] for i in range(n)]


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.evaluate.seed = args.seed
    e = cfg.evaluate
    out = _out_dir(args, cfg, "evaluation")
    real = _read_all(_volume_files(args.real, "volumes", args.split))
    fake_files = _volume_files(args.fake)
    fake = _read_all(fake_files)
    if not real or not fake:
        raise ContractError("evaluate needs nonempty --real and --fake directories")
    n_fake = e.n_fake if args.n is None else args.n
    masks = None
    if args.masks is not None or args.with_masks:
        masks = _fake_masks(Path(args.fake), min(n_fake, len(fake)), args.masks, args.split)
    rep = evaluation.evaluate(
        real, fake, n_fake=n_fake, pairs=e.pairs, threshold=e.threshold,
        extractor=e.extractor, seed=e.seed, masks=masks,
    )
    rep.add("seed", e.seed)
    rep.add("ms_ssim_pairs", e.pairs)
    rep.add("threshold", e.threshold)
    io.atomic_write(out / "report.tsv", rep.to_tsv().encode())
    plotting.metric_panels(rep, out / "metrics.png")
    if rep.mask_scores:
        plotting.mask_scores(rep.mask_scores, out / "masks.png")
    sys.stdout.write("----- report -----\n" + rep.to_tsv() + "----- end -----\n")
    return 0


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voldit", description="Volumetric latent diffusion transformer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--size", choices=["XS", "S", "B", "L"])
        p.add_argument("--patch", type=int, choices=[1, 2, 4])
        return p

    p = common(sub.add_parser("phantoms", help="generate a phantom dataset"))
    p.add_argument("--n", type=int, help="number of phantoms")
    p.set_defaults(func=cmd_phantoms)

    p = common(sub.add_parser("train-backbone", help="train the unconditional backbone"))
    p.add_argument("--data", help="phantom directory")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_backbone)

    p = common(sub.add_parser("train-adapter", help="train the control adapter on a frozen backbone"))
    p.add_argument("--data", help="phantom directory")
    p.add_argument("--ckpt", action="append", required=True, help="backbone checkpoint")
    p.add_argument("--pi", type=float, help="fixed conditioning scale (ablation)")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_adapter)

    p = common(sub.add_parser("sample", help="generate volumes"))
    p.add_argument("--ckpt", action="append", required=True, help="backbone and optional adapter checkpoints")
    p.add_argument("--masks", help="mask file or directory for conditioned sampling")
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    p.add_argument("--mode", choices=["ancestral", "deterministic"])
    p.add_argument("--pi", type=float, help="override the adapter gate with a constant")
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_sample)

    p = common(sub.add_parser("evaluate", help="compare real and generated volumes"))
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--masks", help="masks the generated volumes were conditioned on")
    p.add_argument("--with-masks", action="store_true", help="take masks from the sample manifest")
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    p.add_argument("--n", type=int, help="number of generated volumes to use")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except VolDiTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 4)


if __name__ == "__main__":
    sys.exit(main())
