"""Pixel-level similarity metrics and batch refinement of image folders."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backend as B
from .backend import Tensor
from .checkpoint import load_checkpoint
from .data import (
    list_images,
    load_pixels,
    make_pyramid,
    pyramid_from_partial,
    read_png,
    center_crop_square,
    resize_nearest_pixels,
    to_chw,
    to_hwc_pixels,
    write_png,
)
from .models import GeneratorConfig, ModelGraph, forward

PEAK = 2.0
EVAL_HEADER = ("id", "l1_hr", "l1_input_up", "psnr_hr", "variant")


def psnr(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> float:
    """PSNR in dB for images in [-1, 1]; identical inputs give ``inf``."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise B.ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK**2 / mse)


@dataclass(frozen=True)
class EvalRecord:
    id: str
    l1_hr: float
    l1_input_up: float
    psnr_hr: float
    variant: str

    def csv_row(self) -> list[str]:
        return [self.id, repr(self.l1_hr), repr(self.l1_input_up),
                "inf" if math.isinf(self.psnr_hr) else repr(self.psnr_hr), self.variant]


def refine(generator: ModelGraph, pyramid) -> np.ndarray:
    """Generator output as a float array, with parameters held constant."""
    return forward(generator, pyramid, trainable=False).data


def prepare_refine_input(pixels: np.ndarray, cfg: GeneratorConfig):
    """Turn an (H, W, 3) uint8 image into the pyramid the generator expects.

    Inputs at or above target resolution are resized to it and downscaled;
    smaller inputs must sit exactly on a pyramid level and supply every level
    the injection mask uses.
    """
    pixels = center_crop_square(pixels)
    s = pixels.shape[0]
    if s > cfg.target_res:
        pixels = resize_nearest_pixels(pixels, cfg.target_res)
        s = cfg.target_res
    image = Tensor(to_chw(pixels)[None])
    pyr = pyramid_from_partial(image, cfg.lowest_res, cfg.target_res)
    missing = [r for r, used, lv in zip(cfg.resolutions, cfg.injection_mask, pyr.levels) if used and lv is None]
    if missing:
        raise ValueError(
            f"a {s}x{s} input cannot supply levels {missing} required by variant {cfg.variant} "
            f"(mask {list(cfg.injection_mask)})"
        )
    return pyr


def evaluate(checkpoint, image_dir, output_dir) -> list[EvalRecord]:
    """Refine every PNG in ``image_dir``; write <id>_refined.png and eval.csv."""
    state = load_checkpoint(checkpoint)
    gen = state.generator
    cfg: GeneratorConfig = gen.config
    files = list_images(image_dir)
    if not files:
        raise ValueError(f"no PNG images in {image_dir}")

    prepared = []
    for f in files:
        pixels = center_crop_square(read_png(f))
        if pixels.shape[0] < cfg.target_res:
            raise ValueError(
                f"{f.name} is {pixels.shape[0]}px; evaluation needs images of at least target_res {cfg.target_res}"
            )
        prepared.append((f.stem, load_pixels(f, cfg.target_res)))

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for name, pixels in prepared:
        hr = Tensor(to_chw(pixels)[None])
        pyr = make_pyramid(hr, cfg.lowest_res)
        # metrics see the same clamped pixels that are written to disk
        out = np.clip(refine(gen, pyr), -1, 1)
        up = B.resize_nearest(pyr.lowest, cfg.target_res // cfg.lowest_res, "up").data
        records.append(EvalRecord(
            id=name,
            l1_hr=float(np.abs(out.astype(np.float64) - hr.data).mean()),
            l1_input_up=float(np.abs(out.astype(np.float64) - up).mean()),
            psnr_hr=psnr(out, hr.data),
            variant=cfg.variant,
        ))
        write_png(output_dir / f"{name}_refined.png", to_hwc_pixels(out[0]))
    write_eval_csv(output_dir / "eval.csv", records)
    return records


def write_eval_csv(path, records: list[EvalRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_HEADER)
        for r in records:
            w.writerow(r.csv_row())


def read_eval_csv(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EvalRecord(r["id"], float(r["l1_hr"]), float(r["l1_input_up"]), float(r["psnr_hr"]), r["variant"])
            for r in rows]


def mean_l1_hr(records: list[EvalRecord]) -> float:
    return float(np.mean([r.l1_hr for r in records]))

