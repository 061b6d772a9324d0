"""Chained inference, ROI statistics, comparison reports and cycle traces.

ROI standard deviations use the population convention (divide by n) and
rectangles are half-open, ``[x, x + width) x [y, y + height)``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .chain import Cycle, DomainChain, inference_path
from .data import BACKGROUND_ROI, DataError, ImageRecord, Roi, from_unit, to_unit
from .imfile import write_image
from .networks import NetworkSet
from .training import TrainedModel, load_model

ORIGINAL = "Original"


class EvaluationError(ValueError):
    pass


def _as_model(checkpoint) -> TrainedModel:
    if isinstance(checkpoint, TrainedModel):
        return checkpoint
    return load_model(checkpoint)


def _run_steps(steps: Sequence[int], nets: NetworkSet, pixels: np.ndarray, dtype) -> list[np.ndarray]:
    """Calibrated-unit image after each generator along ``steps``."""
    x = torch.as_tensor(to_unit(np.asarray(pixels, dtype=np.float64)), dtype=dtype)[None, None]
    outs = []
    with torch.no_grad():
        for a, b in zip(steps, steps[1:]):
            x = nets.generator(a, b)(x)
            outs.append(from_unit(x[0, 0].double().numpy()))
    return outs


def denoise(image: ImageRecord, checkpoint, chain: DomainChain | None = None) -> ImageRecord:
    """Push a noisy-domain image through every noisy-to-clean generator in chain order."""
    model = _as_model(checkpoint)
    chain = chain or model.chain
    if image.domain != chain.head:
        raise EvaluationError(f"denoise expects an image of domain {chain.names[chain.head]}, got domain {image.domain}")
    path = inference_path(chain)
    out = _run_steps(path.steps, model.nets, image.pixels, model.dtype)[-1]
    return ImageRecord(out, chain.tail, image.source_id)


def roi_stats(image: "ImageRecord | np.ndarray", rois: Sequence[Roi]) -> list[tuple[float, float]]:
    pixels = image.pixels if isinstance(image, ImageRecord) else np.asarray(image, dtype=np.float64)
    out = []
    for roi in rois:
        try:
            win = roi.window(pixels)
        except DataError as exc:
            raise EvaluationError(str(exc)) from None
        out.append((float(win.mean()), float(win.std())))
    return out


@dataclass(frozen=True)
class RoiRow:
    roi_id: str
    method: str
    mean: float
    sd: float


@dataclass
class RoiReport:
    rows: list[RoiRow]
    methods: list[str]
    roi_ids: list[str]
    sd_convention: str = "population"
    reductions: dict[tuple[str, str], float] = field(default_factory=dict)

    def get(self, roi_id: str, method: str) -> RoiRow:
        for r in self.rows:
            if r.roi_id == roi_id and r.method == method:
                return r
        raise KeyError((roi_id, method))

    def mean_reduction(self, method: str) -> float:
        vals = [v for (rid, m), v in self.reductions.items() if m == method]
        return float(np.mean(vals)) if vals else float("nan")

    def to_text(self) -> str:
        """Aligned table: one line per ROI, (mean, SD) per method."""
        head = f"{'ROI':<12s}" + "".join(f"{m:>22s}" for m in self.methods)
        sub = f"{'':<12s}" + "".join(f"{'Mean':>11s}{'SD':>11s}" for _ in self.methods)
        lines = [f"# SD convention: {self.sd_convention}; reduction % = 100*(1 - sd/sd_original)", head, sub]
        for rid in self.roi_ids:
            cells = "".join(f"{self.get(rid, m).mean:>11.1f}{self.get(rid, m).sd:>11.1f}" for m in self.methods)
            lines.append(f"{rid:<12s}{cells}")
        if len(self.methods) > 1:
            lines.append("")
            lines.append(f"{'SD reduction':<12s}" + "".join(f"{m:>22s}" for m in self.methods[1:]))
            for rid in self.roi_ids:
                cells = "".join(f"{self.reductions[(rid, m)]:>21.1f}%" for m in self.methods[1:])
                lines.append(f"{rid:<12s}{cells}")
        return "\n".join(lines)

    def to_records(self, delimiter: str = "\t") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["roi_id", "method", "mean", "sd", "sd_reduction_pct"])
        for r in self.rows:
            red = "" if r.method == ORIGINAL else repr(self.reductions[(r.roi_id, r.method)])
            w.writerow([r.roi_id, r.method, repr(r.mean), repr(r.sd), red])
        return buf.getvalue()


def sd_reduction(sd_original: float, sd_method: float) -> float:
    return 100.0 * (1.0 - sd_method / sd_original)


def compare_report(
    original: "ImageRecord | np.ndarray",
    variants: Mapping[str, "ImageRecord | np.ndarray"],
    rois: Sequence[Roi],
) -> RoiReport:
    def px(im):
        return im.pixels if isinstance(im, ImageRecord) else np.asarray(im, dtype=np.float64)

    base = px(original)
    for name, im in variants.items():
        if px(im).shape != base.shape:
            raise EvaluationError(f"variant {name!r} has shape {px(im).shape}, original {base.shape}")
    methods = [ORIGINAL, *variants]
    roi_ids = [f"{r.image_id}:{r.roi_id}" for r in rois]
    rows, reductions = [], {}
    orig_stats = roi_stats(base, rois)
    for rid, (m, s) in zip(roi_ids, orig_stats):
        rows.append(RoiRow(rid, ORIGINAL, m, s))
    for name, im in variants.items():
        for rid, (m, s), (_, s0) in zip(roi_ids, roi_stats(px(im), rois), orig_stats):
            rows.append(RoiRow(rid, name, m, s))
            reductions[(rid, name)] = sd_reduction(s0, s) if s0 > 0 else float("nan")
    return RoiReport(rows, methods, roi_ids, reductions=reductions)


@dataclass(frozen=True)
class TraceFrame:
    image: ImageRecord
    background_sd: float | None


def cycle_trace(
    image: ImageRecord, checkpoint, cycle: Cycle, background: Roi | None = None
) -> list[TraceFrame]:
    """The input followed by the image after every step of ``cycle``."""
    model = _as_model(checkpoint)
    if image.domain != cycle.source:
        raise EvaluationError(f"cycle starts at domain {cycle.source} but the image is in domain {image.domain}")
    for a, b in cycle.edges():
        if not model.nets.has_generator(a, b):
            raise EvaluationError(f"checkpoint has no generator for {a}->{b}")
    outs = _run_steps(cycle.steps, model.nets, image.pixels, model.dtype)
    frames = []
    for dom, px in zip(cycle.steps, [image.pixels, *outs]):
        sd = roi_stats(px, [background])[0][1] if background is not None else None
        frames.append(TraceFrame(ImageRecord(px, dom, image.source_id), sd))
    return frames


def background_roi(rois: Sequence[Roi]) -> Roi | None:
    for r in rois:
        if r.roi_id == BACKGROUND_ROI:
            return r
    return None


def write_trace(frames: Sequence[TraceFrame], chain: DomainChain, out_dir: "str | Path") -> Path:
    """One raw image file per frame plus an ``index.tsv`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "index.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["position", "domain", "path", "background_sd"])
        for i, f in enumerate(frames):
            name = f"{i:02d}_{chain.names[f.image.domain]}.mcrt"
            write_image(out / name, f.image.pixels)
            w.writerow([i, chain.names[f.image.domain], name, "" if f.background_sd is None else repr(f.background_sd)])
    return out / "index.tsv"
