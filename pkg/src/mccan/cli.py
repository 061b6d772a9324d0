"""Command line entry point: ``mccan <command> [flags]``.

Commands: synth-data, train, denoise, eval, count-params, cycle-trace.
Every run first prints one ``# resolved:`` line with its effective settings.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import chain as chain_mod
from .chain import ExperimentMode, build_chain, enumerate_cycles, plan_table
from .data import ROIS_NAME, ImageRecord, PhantomConfig, load_dataset, make_phantom_dataset, read_rois, save_dataset
from .imfile import read_image, write_image
from .networks import DEFAULT_FLOP_SIDE, GeneratorSpec, default_generator_spec, inference_budget

MODES = [m.value.replace("_", "-") for m in ExperimentMode]


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _echo(command: str, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print(f"# resolved: {command} {json.dumps(resolved, sort_keys=True, default=str)}")


# --- commands ------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    sigmas = args.sigmas
    if sigmas is None:
        sigmas = list(np.linspace(50.0, 0.0, args.domains))
    if len(sigmas) != args.domains:
        raise ValueError(f"--sigmas has {len(sigmas)} entries for {args.domains} domains")
    names = args.names or build_chain(args.domains).names
    cfg = PhantomConfig(args.n, args.side, tuple(sigmas), args.seed, intermediate=args.intermediate)
    args.sigmas = list(cfg.noise_sigmas)
    _echo("synth-data", args)
    ds = make_phantom_dataset(cfg, names)
    out = save_dataset(ds, args.out)
    print(f"wrote {len(ds.records)} images to {out}")
    return 0


def cmd_train(args) -> int:
    from .training import TrainConfig, resume, train

    ds = load_dataset(args.data)
    overrides = {
        "mode": args.mode.replace("-", "_") if args.mode else None,
        "seed": args.seed,
        "adv_form": args.adv_form,
        "epochs": args.epochs,
        "n_domains": args.domains,
    }
    if args.resume:
        _echo("train", args)
        ckpt, log_path = resume(args.resume, ds, args.out, mode=overrides["mode"], max_steps=args.max_steps)
    else:
        if args.config:
            cfg = TrainConfig.from_file(args.config, **overrides)
        else:
            values = {k: v for k, v in overrides.items() if v is not None}
            values.setdefault("n_domains", len(ds.domain_names))
            values["crop"] = min(TrainConfig.crop, min(r.side for r in ds.records))
            cfg = TrainConfig.from_dict(values)
        print(f"# resolved: train {json.dumps(cfg.to_dict(), sort_keys=True)} data={args.data} out={args.out}")
        ckpt, log_path = train(cfg, ds, args.out, max_steps=args.max_steps)
    print(f"checkpoint {ckpt}\nlog {log_path}")
    return 0


def cmd_denoise(args) -> int:
    from .evaluate import denoise
    from .training import load_model

    _echo("denoise", args)
    model = load_model(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.input:
        rec = ImageRecord(read_image(path), model.chain.head, Path(path).stem)
        out = denoise(rec, model)
        target = out_dir / (Path(path).stem + args.format)
        px = out.pixels
        if args.format == ".png":
            px = np.clip(np.rint(px), 0, 65535)
        write_image(target, px)
        print(f"{path} -> {target}")
    return 0


def _method_checkpoints(specs: list[str]) -> dict[str, str]:
    out = {}
    for s in specs:
        name, sep, path = s.partition("=")
        if not sep:
            name, path = Path(s).parent.name or s, s
        out[name] = path
    return out


def cmd_eval(args) -> int:
    from .evaluate import RoiReport, compare_report, denoise
    from .training import load_model

    _echo("eval", args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.plot_losses:
        _plot_losses(args.plot_losses, out / "losses.png")
        print(f"wrote {out / 'losses.png'}")
    if not args.checkpoint:
        return 0
    if not args.data:
        raise ValueError("--data is required with --checkpoint")
    ds = load_dataset(args.data)
    rois_path = Path(args.rois) if args.rois else Path(args.data) / ROIS_NAME
    rois = {}
    for r in read_rois(rois_path):
        rois.setdefault(r.image_id, []).append(r)
    models = {name: load_model(p) for name, p in _method_checkpoints(args.checkpoint).items()}
    merged: RoiReport | None = None
    for rec in ds.domain_records(0):
        if rec.source_id not in rois:
            continue
        variants = {name: denoise(rec, m) for name, m in models.items()}
        rep = compare_report(rec, variants, rois[rec.source_id])
        if merged is None:
            merged = rep
        else:
            merged.rows += rep.rows
            merged.roi_ids += rep.roi_ids
            merged.reductions.update(rep.reductions)
    if merged is None:
        raise ValueError("no noisy-domain image has ROIs")
    (out / "report.txt").write_text(merged.to_text() + "\n")
    (out / "report.tsv").write_text(merged.to_records())
    for name in models:
        print(f"{name}: mean SD reduction {merged.mean_reduction(name):.1f}%")
    print(f"wrote {out / 'report.txt'} and {out / 'report.tsv'}")
    return 0


def _plot_losses(log_path, target: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .training import read_log

    records = read_log(log_path)
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("composite", "adversarial", "identity", "disc_objective"):
        ax.plot(steps, [r[key] for r in records], label=key, lw=0.8)
    ax.plot(steps, [sum(r["cycle"].values()) for r in records], label="cycle (sum)", lw=0.8)
    ax.set_xlabel("step")
    ax.set_yscale("symlog")
    ax.legend()
    fig.tight_layout()
    fig.savefig(target, dpi=120)
    plt.close(fig)


def cmd_count_params(args) -> int:
    mode = ExperimentMode.parse(args.mode)
    base = default_generator_spec(mode)
    spec = GeneratorSpec(1, args.base_width or base.base_width, args.n_resblocks or base.n_resblocks, base.n_down)
    n_domains = args.domains or (2 if mode is ExperimentMode.CCADN else 3)
    args.domains = n_domains
    _echo("count-params", args)
    rep = inference_budget(mode, spec, n_domains, args.input_side)
    print(f"mode                     {rep.mode}")
    print(f"generator params         {rep.params_per_generator} ({rep.params_per_generator / 1e6:.2f}M)")
    print(f"inference generators     {rep.n_inference_generators}")
    print(f"inference params         {rep.total_inference_params} ({rep.total_inference_params / 1e6:.2f}M)")
    print(f"inference FLOPs @{rep.input_side}px  {rep.total_inference_flops} ({rep.total_inference_flops / 1e9:.1f}G)")
    return 0


def _parse_cycle(text: str, chain, mode) -> chain_mod.Cycle:
    cycles = enumerate_cycles(chain, mode)
    if text in ("global", "local"):
        for c in cycles:
            if c.kind.value == text:
                return c
        raise ValueError(f"mode {mode.value} has no {text} cycle")
    steps = tuple(chain.index(n) for n in _names(text.replace("->", ",")))
    for c in cycles:
        if c.steps == steps:
            return c
    raise ValueError(f"{text!r} is not a cycle of mode {mode.value}")


def cmd_cycle_trace(args) -> int:
    _echo("cycle-trace", args)
    if args.plan_only:
        chain = build_chain(args.domains, args.names)
        print(plan_table(chain, args.mode))
        return 0
    from .evaluate import background_roi, cycle_trace, write_trace
    from .training import load_model

    if not (args.checkpoint and args.input):
        raise ValueError("--checkpoint and --input are required unless --plan-only")
    model = load_model(args.checkpoint)
    cycle = _parse_cycle(args.cycle, model.chain, model.mode)
    image = ImageRecord(read_image(args.input), cycle.source, Path(args.input).stem)
    bg = None
    if args.rois:
        bg = background_roi([r for r in read_rois(args.rois) if r.image_id == image.source_id])
    frames = cycle_trace(image, model, cycle, bg)
    index = write_trace(frames, model.chain, args.out)
    for i, f in enumerate(frames):
        sd = "" if f.background_sd is None else f"  background SD {f.background_sd:.2f}"
        print(f"{i}: {model.chain.names[f.image.domain]}{sd}")
    print(f"wrote {index}")
    return 0


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mccan", description=__doc__, allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("synth-data", help="generate a phantom dataset", formatter_class=fmt, allow_abbrev=False)
    s.add_argument("--domains", type=int, default=3, help="number of domains in the chain")
    s.add_argument("--sigmas", type=_floats, default=None,
                   help="comma-separated noise SD per domain, strictly decreasing (default: linear 50..0)")
    s.add_argument("--n", type=int, default=200, help="images per domain")
    s.add_argument("--side", type=int, default=64, help="image side in pixels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--names", type=_names, default=None, help="comma-separated domain names")
    s.add_argument("--intermediate", choices=["gaussian", "injected"], default="gaussian",
                   help="interior domains: own Gaussian noise, or clean + weighted residual noise of a noisy image")
    s.add_argument("--out", type=Path, required=True,
                   help="output directory: images/*.png (16-bit), clean/*.png, manifest.tsv, rois.tsv")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train an experiment", formatter_class=fmt, allow_abbrev=False)
    s.add_argument("--mode", choices=MODES, default=None, help="experiment mode (overrides the config file)")
    s.add_argument("--config", type=Path, default=None, help="INI file with a [train] section of key = value lines")
    s.add_argument("--data", type=Path, required=True, help="dataset directory written by synth-data")
    s.add_argument("--out", type=Path, required=True, help="directory for checkpoint.pt and train_log.jsonl")
    s.add_argument("--domains", type=int, default=None, help="chain length (default: domains in the dataset)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--adv-form", choices=["log", "lsq"], default=None, help="adversarial loss form")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    s.add_argument("--resume", type=Path, default=None, help="continue from a checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="denoise noisy-domain images", formatter_class=fmt, allow_abbrev=False)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--input", type=Path, nargs="+", required=True, help="16-bit PNG or raw tensor (.mcrt) images")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.add_argument("--format", choices=[".mcrt", ".png"], default=".mcrt",
                   help="output format; PNG output is rounded and clipped to [0, 65535]")
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("eval", help="ROI mean/SD report against the original", formatter_class=fmt,
                       allow_abbrev=False)
    s.add_argument("--checkpoint", action="append", default=[],
                   help="NAME=PATH of a trained model (repeatable); NAME labels the report column")
    s.add_argument("--data", type=Path, default=None, help="dataset directory; its first-domain images are evaluated")
    s.add_argument("--rois", type=Path, default=None, help="ROI sidecar TSV (default: DATA/rois.tsv)")
    s.add_argument("--out", type=Path, required=True, help="directory for report.txt/report.tsv/losses.png")
    s.add_argument("--plot-losses", type=Path, default=None, help="training log to plot")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("count-params", help="inference parameter and FLOP budget", formatter_class=fmt,
                       allow_abbrev=False)
    s.add_argument("--mode", choices=MODES, default="mccan")
    s.add_argument("--domains", type=int, default=None, help="chain length (default: 2 for ccadn, else 3)")
    s.add_argument("--input-side", type=int, default=DEFAULT_FLOP_SIDE, help="side length for FLOP counting")
    s.add_argument("--base-width", type=int, default=None)
    s.add_argument("--n-resblocks", type=int, default=None)
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("cycle-trace", help="trace an image around a cycle", formatter_class=fmt, allow_abbrev=False)
    s.add_argument("--plan-only", action="store_true", help="print cycles and discriminator bindings and exit")
    s.add_argument("--mode", choices=MODES, default="mccan", help="mode for --plan-only")
    s.add_argument("--domains", type=int, default=3, help="chain length for --plan-only")
    s.add_argument("--names", type=_names, default=None, help="domain names for --plan-only")
    s.add_argument("--checkpoint", type=Path, default=None)
    s.add_argument("--input", type=Path, default=None, help="image in the cycle's source domain")
    s.add_argument("--cycle", default="global", help="'global', 'local' or explicit steps like X,Z,Y,Z,X")
    s.add_argument("--rois", type=Path, default=None, help="ROI sidecar; its 'bg' ROI gives the noise statistic")
    s.add_argument("--out", type=Path, default=Path("trace"), help="directory for frames and index.tsv")
    s.set_defaults(func=cmd_cycle_trace)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    func = args.func
    del args.verbose
    try:
        return func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
