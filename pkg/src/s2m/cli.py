"""``s2m`` command line: simulate, train, generate, sweep, evaluate.

Options are resolved as built-in default < TOML config (``--config``) <
command-line flag. The TOML file holds global keys (``seed``, ``out``,
``jobs``, ``log_level``) at top level and one table per command, e.g.::

    seed = 3
    [generate]
    t_start = 400
    sigma = 1.0

Exit status: 0 success, 2 invalid input or configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("s2m")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

GLOBAL_DEFAULTS = {"seed": 0, "jobs": 1, "log_level": "INFO"}

DEFAULTS = {
    "simulate": {
        "out": "simulated", "style": "nuclei", "count": 10, "shape": [64, 64], "instances": None,
        "radius": None, "eccentricity": None, "fg": None, "bg": None, "thickness": 1, "sigma": 0.0,
    },
    "train": {
        "out": "train", "toy_corpus": False, "images": None, "steps": 20000, "batch_size": 8,
        "lr": 1e-4, "base_channels": 32, "depth": 3, "time_embed_dim": 128, "patch": [64, 64],
        "checkpoint_every": 1000, "resume": None, "corpus_size": 256,
    },
    "generate": {
        "out": "dataset", "checkpoint": None, "style": "nuclei", "n": 200, "t_start": 400,
        "sigma": 1.0, "shape": [64, 64], "instances": None, "radius": None, "eccentricity": None,
        "fg": None, "bg": None, "thickness": 1, "masks": None, "batch_size": 16,
    },
    "sweep": {
        "out": "sweep", "checkpoint": None, "t_start": [100, 400, 1000], "sigma": [0.0, 1.0, 2.0],
        "seeds": [0, 1, 2, 3], "n_refs": 8, "images": None, "masks": None, "style": "nuclei",
        "ref_seed": 12345,
    },
    "evaluate": {"out": "evaluation", "pred": None, "truth": None, "scores_a": None,
                 "scores_b": None, "threshold": 0.5},
}


class ValidationError(Exception):
    pass


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", type=Path, default=d, help="TOML configuration file")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--out", type=str, default=d, help="output directory")
    p.add_argument("--jobs", type=int, default=d, help="parallel workers for generation/sweep")
    p.add_argument("--log-level", dest="log_level", default=d,
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--style", choices=["nuclei", "membrane"])
    p.add_argument("--shape", type=int, nargs="+", metavar="N")
    p.add_argument("--instances", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--radius", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--eccentricity", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--fg", type=float, nargs=2, metavar=("LO", "HI"), help="foreground intensity range")
    p.add_argument("--bg", type=float, nargs=2, metavar=("LO", "HI"), help="background intensity range")
    p.add_argument("--thickness", type=int, help="membrane thickness in pixels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2m", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate label masks and sketches")
    _add_globals(p, suppress=True)
    _add_sim_flags(p)
    p.add_argument("--count", type=int)
    p.add_argument("--sigma", type=float, help="blur applied to written sketches")

    p = sub.add_parser("train", help="train a denoiser")
    _add_globals(p, suppress=True)
    p.add_argument("--toy-corpus", dest="toy_corpus", action="store_true", default=None)
    p.add_argument("--images", type=Path, help="directory of training TIFF images")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--time-embed-dim", dest="time_embed_dim", type=int)
    p.add_argument("--patch", type=int, nargs="+", metavar="N")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--corpus-size", dest="corpus_size", type=int)

    p = sub.add_parser("generate", help="generate an annotated dataset")
    _add_globals(p, suppress=True)
    _add_sim_flags(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--n", type=int)
    p.add_argument("--t-start", dest="t_start", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--masks", type=Path, help="directory of label TIFFs to use instead of simulation")
    p.add_argument("--batch-size", dest="batch_size", type=int)

    p = sub.add_parser("sweep", help="evaluate a (t_start, sigma) grid")
    _add_globals(p, suppress=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--t-start", dest="t_start", type=int, nargs="+")
    p.add_argument("--sigma", type=float, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--n-refs", dest="n_refs", type=int)
    p.add_argument("--images", type=Path)
    p.add_argument("--masks", type=Path)
    p.add_argument("--style", choices=["nuclei", "membrane"])
    p.add_argument("--ref-seed", dest="ref_seed", type=int)

    p = sub.add_parser("evaluate", help="score predicted masks and compare score lists")
    _add_globals(p, suppress=True)
    p.add_argument("--pred", type=Path)
    p.add_argument("--truth", type=Path)
    p.add_argument("--scores-a", dest="scores_a", type=Path)
    p.add_argument("--scores-b", dest="scores_b", type=Path)
    p.add_argument("--threshold", type=float)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, TOML and flags into one flat option dict."""
    toml: dict = {}
    if getattr(args, "config", None):
        try:
            toml = tomllib.loads(Path(args.config).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
    cmd = args.command
    opts = dict(GLOBAL_DEFAULTS)
    opts.update(DEFAULTS[cmd])
    opts.update({k: v for k, v in toml.items() if not isinstance(v, dict)})
    opts.update(toml.get(cmd, {}))
    explicit = set(toml.get(cmd, {}))
    for k, v in vars(args).items():
        if k in ("command", "config") or v is None:
            continue
        opts[k] = v
        explicit.add(k)
    opts["command"] = cmd
    opts["_explicit"] = explicit
    return opts


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / f".s2m-write-probe-{os.getpid()}"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ValidationError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _sim_params(o: dict, seed: int):
    from .sketch import SimParams

    kw = {"image_shape": tuple(o["shape"]), "membrane_thickness": o["thickness"], "seed": seed}
    for flag, name in (("instances", "instance_count"), ("radius", "radius"),
                       ("eccentricity", "eccentricity"), ("fg", "foreground_intensity"),
                       ("bg", "background_intensity")):
        if o.get(flag) is not None:
            kw[name] = tuple(o[flag])
    try:
        return SimParams(**kw)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def _load_checkpoint(path):
    from .denoiser import CheckpointError, load_checkpoint

    if path is None:
        raise ValidationError("--checkpoint is required")
    if not Path(path).exists():
        raise ValidationError(f"checkpoint {path} does not exist")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise ValidationError(str(exc)) from exc


def _schedule_of(den):
    from .diffusion import NoiseSchedule, default_schedule

    return NoiseSchedule.from_dict(den.schedule) if den.schedule else default_schedule()


def _read_tiff_dir(directory: Path, reader) -> dict[str, np.ndarray]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".tif", ".tiff"))
    out = {}
    for f in files:
        try:
            out[f.name] = reader(f)
        except Exception as exc:
            log.warning("skipping unreadable file %s: %s", f, exc)
    return out


def cmd_simulate(o: dict) -> int:
    from .io import write_image, write_json, write_mask
    from .pipeline import derive_seed
    from .sketch import SketchStyle, blur_sketch, mask_to_sketch, simulate_mask

    if o["count"] < 1:
        raise ValidationError("--count must be >= 1")
    if o["sigma"] < 0:
        raise ValidationError("--sigma must be >= 0")
    style = SketchStyle(o["style"])
    _sim_params(o, 0)
    out = _prepare_out(o["out"])
    width = max(4, len(str(o["count"] - 1)))
    for i in range(o["count"]):
        seed_i = derive_seed(o["seed"], i)
        params = _sim_params(o, seed_i)
        mask = simulate_mask(params, style)
        sketch_seed = derive_seed(seed_i, 0)
        sketch = blur_sketch(mask_to_sketch(mask, style, params, sketch_seed), o["sigma"])
        name = f"{i:0{width}d}"
        write_mask(out / "masks" / f"{name}.tif", mask.labels)
        write_image(out / "sketches" / f"{name}.tif", sketch.intensity)
        write_json(out / "sidecars" / f"{name}.json", {
            "index": i, "seed": seed_i, "sketch_seed": sketch_seed, "style": style.value,
            "sigma": o["sigma"], "sim_params": params.to_dict(),
            "mask_meta": dict(mask.meta),
        })
        if mask.meta.get("under_placed"):
            log.warning("sample %d: placed %d of %d instances", i, mask.meta["placed"], mask.meta["requested"])
    log.info("wrote %d mask/sketch pairs to %s", o["count"], out)
    return EXIT_OK


def _write_loss(out: Path, history) -> None:
    from .io import atomic_path

    with atomic_path(out / "loss.csv") as tmp:
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows((s, repr(float(v))) for s, v in history)
    if history:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        steps = np.array([s for s, _ in history])
        loss = np.array([v for _, v in history])
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(steps, loss, lw=0.3, alpha=0.4, label="batch")
        k = min(200, len(loss))
        if k > 1:
            smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
            ax.plot(steps[k - 1:], smooth, lw=1.5, label=f"{k}-step mean")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("noise-prediction MSE")
        ax.legend()
        fig.tight_layout()
        with atomic_path(out / "loss.png") as tmp:
            fig.savefig(tmp, format="png", dpi=120)
        plt.close(fig)


def cmd_train(o: dict, explicit: set) -> int:
    from .corpus import TOY_TRAINING, toy_corpus
    from .denoiser import DenoiserConfig, PatchSource, init_denoiser, train
    from .diffusion import default_schedule
    from .io import read_image

    if o["steps"] < 0:
        raise ValidationError("--steps must be >= 0")
    if o["toy_corpus"] and o["images"]:
        raise ValidationError("use either --toy-corpus or --images, not both")
    if not o["toy_corpus"] and not o["images"]:
        raise ValidationError("training data required: --toy-corpus or --images DIR")
    if o["toy_corpus"]:
        # pinned toy hyperparameters unless overridden explicitly
        for k in ("base_channels", "depth", "time_embed_dim"):
            if k not in explicit:
                o[k] = TOY_TRAINING["config"][k]
        for k in ("batch_size", "lr"):
            if k not in explicit:
                o[k] = TOY_TRAINING[k]
        if "patch" not in explicit:
            o["patch"] = list(TOY_TRAINING["config"]["patch_shape"])
    schedule = default_schedule()

    if o["resume"]:
        den = _load_checkpoint(o["resume"])
        config = den.config
    else:
        try:
            config = DenoiserConfig(input_rank=len(o["patch"]), base_channels=o["base_channels"],
                                    depth=o["depth"], time_embed_dim=o["time_embed_dim"],
                                    patch_shape=tuple(o["patch"]))
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
        den = None

    if o["toy_corpus"]:
        shape = tuple(config.patch_shape)
        images, _ = toy_corpus(n=o["corpus_size"], shape=shape, seed=TOY_TRAINING["corpus"]["seed"])
        images = list(images)
    else:
        if not Path(o["images"]).is_dir():
            raise ValidationError(f"image directory {o['images']} does not exist")
        images = list(_read_tiff_dir(o["images"], read_image).values())
        if not images:
            raise ValidationError(f"no readable TIFF images in {o['images']}")
    try:
        source = PatchSource(images, config.patch_shape)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc

    out = _prepare_out(o["out"])
    if den is None:
        den = init_denoiser(config, seed=o["seed"])
    ckpt = out / "denoiser.ckpt"
    train(den, source, o["steps"], schedule, optimizer_params={"lr": o["lr"]},
          checkpoint_every=o["checkpoint_every"], checkpoint_path=ckpt, batch_size=o["batch_size"])
    _write_loss(out, den.state.loss_history)
    log.info("checkpoint %s at step %d", ckpt, den.state.step)
    return EXIT_OK


def cmd_generate(o: dict) -> int:
    from .io import read_mask
    from .pipeline import GenerationConfig, generate_dataset
    from .sketch import SketchStyle

    den = _load_checkpoint(o["checkpoint"])
    schedule = _schedule_of(den)
    if not 1 <= o["t_start"] <= schedule.T:
        raise ValidationError(f"--t-start {o['t_start']} must lie in [1, T={schedule.T}]")
    if o["sigma"] < 0:
        raise ValidationError("--sigma must be >= 0")
    if o["n"] < 1:
        raise ValidationError("--n must be >= 1")
    params = _sim_params(o, o["seed"])
    masks = None
    if o["masks"]:
        if not Path(o["masks"]).is_dir():
            raise ValidationError(f"mask directory {o['masks']} does not exist")
        masks = list(_read_tiff_dir(o["masks"], read_mask).values())
        if len(masks) < o["n"]:
            raise ValidationError(f"{len(masks)} masks found, {o['n']} requested")
    out = _prepare_out(o["out"])
    config = GenerationConfig(t_start=o["t_start"], sigma=o["sigma"], seed=o["seed"])
    manifest = generate_dataset(den, schedule, params, SketchStyle(o["style"]), n_samples=o["n"],
                                config=config, out_dir=out, batch_size=o["batch_size"],
                                jobs=o["jobs"], masks=masks)
    log.info("wrote %d samples to %s", len(manifest.entries), out)
    return EXIT_OK


def _plot_sweep(report, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .io import atomic_path

    ts = report.metadata["t_start_grid"]
    ss = report.metadata["sigma_grid"]
    keys = [("psnr_db", "PSNR (dB)"), ("zncc", "ZNCC"), ("hist_similarity", "histogram similarity")]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for ax, (key, title) in zip(axes, keys):
        grid = np.array([[report.cell(t, s)[key] for s in ss] for t in ts])
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(ss)), [f"{s:g}" for s in ss])
        ax.set_yticks(range(len(ts)), [str(t) for t in ts])
        ax.set_xlabel("sigma")
        ax.set_ylabel("t_start")
        ax.set_title(title)
        for i in range(len(ts)):
            for j in range(len(ss)):
                ax.text(j, i, f"{grid[i, j]:.3g}", ha="center", va="center", color="w", fontsize=8)
        fig.colorbar(im, ax=ax)
    fig.tight_layout()
    with atomic_path(out / "sweep_heatmaps.png") as tmp:
        fig.savefig(tmp, format="png", dpi=110)
    plt.close(fig)

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    for ax, (key, title) in zip(axes, keys):
        for s in ss:
            ax.plot(ts, [report.cell(t, s)[key] for t in ts], marker="o", label=f"sigma={s:g}")
        ax.set_xlabel("t_start")
        ax.set_title(title)
        ax.legend(fontsize=7)
    fig.tight_layout()
    with atomic_path(out / "sweep_lines.png") as tmp:
        fig.savefig(tmp, format="png", dpi=110)
    plt.close(fig)


def cmd_sweep(o: dict) -> int:
    from .corpus import toy_corpus
    from .io import read_image, read_mask
    from .sweep import sweep

    den = _load_checkpoint(o["checkpoint"])
    schedule = _schedule_of(den)
    for t in o["t_start"]:
        if not 1 <= t <= schedule.T:
            raise ValidationError(f"--t-start value {t} must lie in [1, T={schedule.T}]")
    if any(s < 0 for s in o["sigma"]):
        raise ValidationError("--sigma values must be >= 0")
    if bool(o["images"]) != bool(o["masks"]):
        raise ValidationError("--images and --masks must be given together")
    if o["images"]:
        imgs = _read_tiff_dir(o["images"], read_image)
        msks = _read_tiff_dir(o["masks"], read_mask)
        names = sorted(set(imgs) & set(msks))
        if not names:
            raise ValidationError("no paired image/mask files with matching names")
        images = [imgs[n] for n in names][: o["n_refs"]]
        masks = [msks[n] for n in names][: o["n_refs"]]
    else:
        images, masks = toy_corpus(n=o["n_refs"], shape=den.config.patch_shape,
                                   seed=o["ref_seed"], style=o["style"])
        images, masks = list(images), list(masks)
    out = _prepare_out(o["out"])
    report = sweep(den, schedule, images, masks, o["t_start"], o["sigma"], o["seeds"],
                   style=o["style"], jobs=o["jobs"])
    report.write(out)
    _plot_sweep(report, out)
    for r in report.rows:
        log.info("t_start=%4d sigma=%.2f  PSNR %.2f dB  ZNCC %.3f  hist %.3f%s", r["t_start"], r["sigma"],
                 r["psnr_db"], r["zncc"], r["hist_similarity"], "  (recommended)" if r["recommended"] else "")
    return EXIT_OK


def _read_scores(path: Path) -> list[float]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read scores {path}: {exc}") from exc
    values = []
    for tok in text.replace(",", " ").split():
        try:
            values.append(float(tok))
        except ValueError:
            continue  # header words
    if not values:
        raise ValidationError(f"no numeric scores in {path}")
    return values


def cmd_evaluate(o: dict) -> int:
    from .io import atomic_path, read_mask, write_json
    from .metrics import instance_iou, rank_sum_test

    did = False
    if o["pred"] or o["truth"]:
        if not (o["pred"] and o["truth"]):
            raise ValidationError("--pred and --truth must be given together")
        for d in (o["pred"], o["truth"]):
            if not Path(d).is_dir():
                raise ValidationError(f"directory {d} does not exist")
        preds = _read_tiff_dir(o["pred"], read_mask)
        truths = _read_tiff_dir(o["truth"], read_mask)
        names = sorted(set(preds) & set(truths))
        if not names:
            raise ValidationError("no prediction/truth files with matching names")
        out = _prepare_out(o["out"])
        with atomic_path(out / "iou.csv") as tmp:
            with open(tmp, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["file", "truth_instances", "matched", "mean_iou"])
                for n in names:
                    if preds[n].shape != truths[n].shape:
                        raise ValidationError(f"{n}: shape {preds[n].shape} vs {truths[n].shape}")
                    r = instance_iou(preds[n], truths[n], o["threshold"])
                    w.writerow([n, len(r.truth_ids), r.matched, repr(r.mean_iou)])
        with atomic_path(out / "iou_instances.csv") as tmp:
            with open(tmp, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["file", "truth_id", "iou"])
                for n in names:
                    r = instance_iou(preds[n], truths[n], o["threshold"])
                    w.writerows([n, tid, repr(v)] for tid, v in zip(r.truth_ids, r.ious))
        did = True
    if o["scores_a"] or o["scores_b"]:
        if not (o["scores_a"] and o["scores_b"]):
            raise ValidationError("--scores-a and --scores-b must be given together")
        res = rank_sum_test(_read_scores(o["scores_a"]), _read_scores(o["scores_b"]))
        out = _prepare_out(o["out"])
        payload = {"U": res.U, "p_two_sided": res.p_two_sided, "method": res.method, "n": res.n, "m": res.m}
        write_json(out / "ranksum.json", payload)
        print(json.dumps(payload))
        did = True
    if not did:
        raise ValidationError("nothing to evaluate: give --pred/--truth and/or --scores-a/--scores-b")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        o = resolve(args)
        logging.basicConfig(level=getattr(logging, str(o["log_level"]).upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s")
        if o["command"] == "simulate":
            return cmd_simulate(o)
        if o["command"] == "train":
            return cmd_train(o, o["_explicit"])
        if o["command"] == "generate":
            return cmd_generate(o)
        if o["command"] == "sweep":
            return cmd_sweep(o)
        return cmd_evaluate(o)
    except ValidationError as exc:
        print(f"s2m {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"s2m {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
