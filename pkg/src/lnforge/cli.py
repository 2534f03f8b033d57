"""Command line interface: one subcommand per pipeline stage.

Every command reads the same INI configuration, writes its outputs under
``--out`` and leaves a ``<command>.run.json`` log recording the configuration
digest and the digests of every input and output file. On failure the process
prints one line ``error: <category>: <detail>`` to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from lnforge import __version__
from lnforge.adapter import load_adapter, save_adapter
from lnforge.codec import fit_codec, load_codec, save_codec
from lnforge.config import ConfigError, PipelineConfig, dump_config, load_config
from lnforge.diffusion import load_denoiser, save_denoiser
from lnforge.fileio import FormatError, file_digest
from lnforge.metrics import (
    ipr_report,
    long_axis_report,
    shape_features,
    write_histogram_csv,
    write_json,
)
from lnforge.optim import TrainingDiverged
from lnforge.phantoms import blob_family, lesion_texture, pelvic_background
from lnforge.pipeline import PipelineModels, PlacementError, ShapeRejected, assemble_dataset
from lnforge.sdf import load_tsdf, mask_to_tsdf, save_tsdf
from lnforge.volume import load_mask, load_volume, save_mask, save_volume
from lnforge.workflow import (
    train_adapter_model,
    train_shape_model,
    train_texture_model,
)

log = logging.getLogger("lnforge")

EXIT_CODES = {"usage": 2, "config": 2, "io": 3, "format": 4, "training": 5, "synthesis": 6,
              "numeric": 7, "input": 8, "internal": 70}


class CliError(Exception):
    def __init__(self, category: str, detail: str):
        super().__init__(detail)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# ---------------------------------------------------------------- helpers

def _lnv_files(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError("io", f"not a directory: {d}")
    files = sorted(d.glob("*.lnv"))
    if not files:
        raise CliError("input", f"no .lnv files in {d}")
    return files


def _need(path: str | Path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("io", f"missing file: {p}")
    return p


class RunLog:
    """Collects input/output digests for the ``<command>.run.json`` log."""

    def __init__(self, command: str, cfg: PipelineConfig, out: Path):
        self.command, self.cfg, self.out = command, cfg, out
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.extra: dict = {}

    @staticmethod
    def _key(path: Path, root: Path | None) -> str:
        try:
            return str(path.resolve().relative_to(root.resolve())) if root else path.name
        except ValueError:
            return path.name

    def input(self, path: Path, name: str | None = None) -> None:
        self.inputs[name or path.name] = file_digest(path)

    def output(self, path: Path) -> Path:
        self.outputs[self._key(path, self.out)] = ""
        return path

    def write(self) -> Path:
        for key in list(self.outputs):
            self.outputs[key] = file_digest(self.out / key)
        doc = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.run.seed,
            "config_hash": self.cfg.digest(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            **self.extra,
        }
        path = self.out / f"{self.command}.run.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _write_trace(trace, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


# ---------------------------------------------------------------- commands

def cmd_phantoms(args, cfg: PipelineConfig, out: Path, run: RunLog) -> None:
    """Write the bundled toy data: lesion masks, textures, backgrounds, regions."""
    g = cfg.geometry
    masks = blob_family(args.n_shapes, cfg.run.seed, dims=g.patch_dims, spacing=g.spacing)
    rng = np.random.default_rng([cfg.run.seed, 1])
    for sub in ("masks", "textures", "backgrounds", "regions"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks):
        save_mask(m, run.output(out / "masks" / f"shape_{i:04d}.lnv"))
        save_volume(lesion_texture(m, rng), run.output(out / "textures" / f"shape_{i:04d}.lnv"))
    bg_rng = np.random.default_rng([cfg.run.seed, 2])
    for i in range(args.n_backgrounds):
        ct, region = pelvic_background(bg_rng, tuple(args.bg_dims), g.spacing)
        save_volume(ct, run.output(out / "backgrounds" / f"bg{i:03d}.lnv"))
        save_mask(region, run.output(out / "regions" / f"bg{i:03d}.lnv"))


def cmd_tsdf(args, cfg: PipelineConfig, out: Path, run: RunLog) -> None:
    dest = out / "tsdf"
    dest.mkdir(parents=True, exist_ok=True)
    for f in _lnv_files(args.masks):
        run.input(f)
        t = mask_to_tsdf(load_mask(f), cfg.geometry.tau, cfg.norm_scale())
        save_tsdf(t, run.output(dest / f.name))


def _load_tsdfs(directory, run: RunLog):
    grids = []
    for f in _lnv_files(directory):
        run.input(f)
        grids.append(load_tsdf(f))
    return grids


def cmd_fit_codec(args, cfg: PipelineConfig, out: Path, run: RunLog) -> None:
    grids = _load_tsdfs(args.tsdf, run)
    d = args.dim or cfg.codec.shape_latent_dim
    codec = fit_codec(grids, d)
    save_codec(codec, run.output(out / args.name))


def cmd_train_shape(args, cfg: PipelineConfig, out: Path, run: RunLog) -> None:
    codec = load_codec(_need(args.codec))
    run.input(Path(args.codec), "codec")
    grids = _load_tsdfs(args.tsdf, run)
    net, s, trace = train_shape_model(codec, grids, cfg)
    save_denoiser(net, s, run.output(out / "shape.ddpm"))
    _write_trace(trace, run.output(out / "shape_loss.csv"))
    run.extra["final_loss"] = trace[-1]


def cmd_train_adapter(args, cfg: PipelineConfig, out: Path, run: RunLog) -> None:
    codec = load_codec(_need(args.codec))
    run.input(Path(args.codec), "codec")
    grids = _load_tsdfs(args.tsdf, run)
    diffusion_loss = None
    if args.shape_loss:
        with open(_need(args.shape_loss)) as fh:
            rows = list(csv.DictReader(fh))
        diffusion_loss = float(rows[-1]["loss"]) if rows else None
    A, trace, report = train_adapter_model(codec, grids, cfg, diffusion_loss_value=diffusion_loss)
    save_adapter(A, run.output(out / "adapter.adpt"))
    _write_trace(trace, run.output(out / "adapter_loss.csv"))
    write_json(report, run.output(out / "adapter_report.json"))


def cmd_train_texture(args, cfg: PipelineConfig, out: Path, run: RunLog) -> None:
    shape_codec = load_codec(_need(args.codec))
    run.input(Path(args.codec), "codec")
    patch_files = _lnv_files(args.patches)
    mask_dir = Path(args.masks)
    masks, textures = [], []
    for f in patch_files:
        mf = mask_dir / f.name
        if not mf.is_file():
            raise CliError("input", f"no mask for texture patch {f.name} in {mask_dir}")
        run.input(f, f"patches/{f.name}")
        run.input(mf, f"masks/{f.name}")
        tex = load_volume(f)
        if tex.unit != "NORMALIZED":
            raise CliError("input", f"texture patch {f.name} must be NORMALIZED, got {tex.unit}")
        textures.append(tex)
        masks.append(load_mask(mf))
    model = train_texture_model(shape_codec, masks, textures, cfg)
    save_codec(model.codec, run.output(out / "texture.codec"))
    save_denoiser(model.net, model.schedule, run.output(out / "texture.ddpm"))
    _write_trace(model.trace, run.output(out / "texture_loss.csv"))


def cmd_synth(args, cfg: PipelineConfig, out: Path, run: RunLog) -> None:
    paths = {
        "shape_codec": args.codec, "shape_net": args.shape_net, "texture_codec": args.texture_codec,
        "texture_net": args.texture_net,
    }
    if args.adapter:
        paths["adapter"] = args.adapter
    for name, p in paths.items():
        run.input(_need(p), name)
    shape_net, shape_s = load_denoiser(paths["shape_net"])
    tex_net, tex_s = load_denoiser(paths["texture_net"])
    models = PipelineModels(
        shape_net=shape_net, shape_schedule=shape_s, shape_codec=load_codec(paths["shape_codec"]),
        texture_net=tex_net, texture_schedule=tex_s, texture_codec=load_codec(paths["texture_codec"]),
        adapter=load_adapter(paths["adapter"]) if args.adapter else None,
        hashes={k: run.inputs[k] for k in paths},
    )
    bg_files = _lnv_files(args.backgrounds)
    region_dir = Path(args.regions)
    backgrounds, regions, ids = [], [], []
    for f in bg_files:
        rf = region_dir / f.name
        if not rf.is_file():
            raise CliError("input", f"no region mask for background {f.name} in {region_dir}")
        run.input(f, f"backgrounds/{f.name}")
        run.input(rf, f"regions/{f.name}")
        backgrounds.append(load_volume(f))
        regions.append(load_mask(rf))
        ids.append(f.stem)
    # a subdirectory keeps the dataset's masks/ apart from input masks under the same --out
    root = out / "dataset"
    manifest = assemble_dataset(backgrounds, regions, [args.count] * len(ids), models, cfg,
                                cfg.run.seed, root, ids)
    run.output(root / "manifest.json")
    for b in manifest.backgrounds:
        for key in ("volume", "label", "region"):
            run.output(root / b[key])
    for e in manifest.entries:
        for p in e["files"].values():
            run.output(root / p)


def cmd_eval_ipr(args, cfg: PipelineConfig, out: Path, run: RunLog) -> None:
    codec = load_codec(_need(args.codec))
    run.input(Path(args.codec), "codec")
    sets = []
    for label, directory in (("real", args.real), ("fake", args.fake)):
        masks = []
        for f in _lnv_files(directory):
            run.input(f, f"{label}/{f.name}")
            m = load_mask(f)
            if m.dims != tuple(codec.grid_dims):
                raise CliError("input", f"{label} mask {f.name} has dims {m.dims}, codec grid is "
                                        f"{tuple(codec.grid_dims)}")
            masks.append(m)
        sets.append(shape_features(codec, masks))
    k = args.k or cfg.metric.k
    report = ipr_report(sets[0], sets[1], k)
    write_json(report, run.output(out / args.name))
    print(json.dumps(report, sort_keys=True))


def cmd_measure(args, cfg: PipelineConfig, out: Path, run: RunLog) -> None:
    masks = []
    for f in _lnv_files(args.masks):
        run.input(f)
        masks.append(load_mask(f))
    report = long_axis_report(masks, args.bins or cfg.metric.bins)
    write_histogram_csv(report, run.output(out / "long_axis_hist.csv"))
    summary = {k: report[k] for k in ("n", "min", "max", "mean", "fraction_3_10")}
    summary["files"] = [f.name for f in _lnv_files(args.masks)]
    summary["lengths"] = report["lengths"]
    write_json(summary, run.output(out / "long_axis_summary.json"))
    print(json.dumps({k: summary[k] for k in ("n", "min", "max", "mean", "fraction_3_10")}, sort_keys=True))


def cmd_show_config(args, cfg: PipelineConfig, out: Path, run: RunLog) -> None:
    print(dump_config(cfg), end="")


COMMANDS = {
    "phantoms": cmd_phantoms,
    "tsdf": cmd_tsdf,
    "fit-codec": cmd_fit_codec,
    "train-shape": cmd_train_shape,
    "train-adapter": cmd_train_adapter,
    "train-texture": cmd_train_texture,
    "synth": cmd_synth,
    "eval-ipr": cmd_eval_ipr,
    "measure": cmd_measure,
    "show-config": cmd_show_config,
}


# ---------------------------------------------------------------- parser

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", metavar="PATH", help="INI configuration file", **d)
    parser.add_argument("--seed", type=int, metavar="U64", help="global seed (overrides [run] seed)", **d)
    parser.add_argument("--out", metavar="DIR", help="output directory (overrides [paths] out_dir)", **d)
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable", **d)
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr", **d)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lnforge", description="Synthetic lymph-node lesion pipeline.")
    p.add_argument("--version", action="version", version=f"lnforge {__version__}")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        _global_flags(sp, suppress=True)
        return sp

    sp = add("phantoms", "write the toy phantom data set")
    sp.add_argument("--n-shapes", type=int, default=200)
    sp.add_argument("--n-backgrounds", type=int, default=4)
    sp.add_argument("--bg-dims", type=int, nargs=3, default=[64, 64, 48], metavar=("X", "Y", "Z"))

    sp = add("tsdf", "convert lesion masks to TSDF grids")
    sp.add_argument("--masks", required=True, metavar="DIR")

    sp = add("fit-codec", "fit the linear shape codec")
    sp.add_argument("--tsdf", required=True, metavar="DIR")
    sp.add_argument("--dim", type=int, default=None, help="latent dimension (default from config)")
    sp.add_argument("--name", default="shape.codec", help="output file name")

    sp = add("train-shape", "train the latent shape denoiser")
    sp.add_argument("--tsdf", required=True, metavar="DIR")
    sp.add_argument("--codec", required=True, metavar="PATH")

    sp = add("train-adapter", "train the anatomical adapter")
    sp.add_argument("--tsdf", required=True, metavar="DIR")
    sp.add_argument("--codec", required=True, metavar="PATH")
    sp.add_argument("--shape-loss", metavar="CSV", help="shape loss trace, for the combined-loss report")

    sp = add("train-texture", "fit the texture codec and the shape-conditioned texture denoiser")
    sp.add_argument("--patches", required=True, metavar="DIR", help="NORMALIZED texture patches")
    sp.add_argument("--masks", required=True, metavar="DIR", help="masks with the same file names")
    sp.add_argument("--codec", required=True, metavar="PATH", help="shape codec")

    sp = add("synth", "synthesize lesions into backgrounds and write the dataset")
    sp.add_argument("--codec", required=True, metavar="PATH")
    sp.add_argument("--shape-net", required=True, metavar="PATH")
    sp.add_argument("--adapter", metavar="PATH", help="omit to synthesize without the adapter")
    sp.add_argument("--texture-codec", required=True, metavar="PATH")
    sp.add_argument("--texture-net", required=True, metavar="PATH")
    sp.add_argument("--backgrounds", required=True, metavar="DIR")
    sp.add_argument("--regions", required=True, metavar="DIR", help="region masks named like the backgrounds")
    sp.add_argument("--count", type=int, required=True, help="lesions per background")

    sp = add("eval-ipr", "improved precision/recall of two mask sets")
    sp.add_argument("--real", required=True, metavar="DIR")
    sp.add_argument("--fake", required=True, metavar="DIR")
    sp.add_argument("--codec", required=True, metavar="PATH")
    sp.add_argument("--k", type=int, default=None)
    sp.add_argument("--name", default="ipr.json", help="output file name")

    sp = add("measure", "long-axis histogram and summary of a mask set")
    sp.add_argument("--masks", required=True, metavar="DIR")
    sp.add_argument("--bins", type=int, default=None)

    add("show-config", "print the effective configuration")
    return p


def _overrides(args) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise CliError("usage", f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out.setdefault(section.strip(), {})[name.strip()] = value
    if getattr(args, "seed", None) is not None:
        out.setdefault("run", {})["seed"] = str(args.seed)
    if getattr(args, "out", None) is not None:
        out.setdefault("paths", {})["out_dir"] = args.out
    return out


def _thread_limit():
    raw = os.environ.get("LNFORGE_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise CliError("config", f"LNFORGE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError("config", f"LNFORGE_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, FormatError):
        return "format"
    if isinstance(exc, TrainingDiverged):
        return "training"
    if isinstance(exc, (ShapeRejected, PlacementError)):
        return "synthesis"
    if isinstance(exc, FloatingPointError):
        return "numeric"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, (ValueError, IndexError)):
        return "input"
    return "internal"


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, _overrides(args))
        out = Path(cfg.paths.out_dir)
        if args.command != "show-config":
            out.mkdir(parents=True, exist_ok=True)
        run = RunLog(args.command, cfg, out)
        if args.config:
            run.input(Path(args.config), "config")
        with _thread_limit():
            log.info("running %s (config %s)", args.command, cfg.digest()[:12])
            COMMANDS[args.command](args, cfg, out, run)
        if args.command != "show-config":
            run.write()
        return 0
    except Exception as exc:  # every failure becomes one parseable line
        category = _category(exc)
        detail = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {category}: {detail}", file=sys.stderr)
        return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
