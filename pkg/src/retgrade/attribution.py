"""Integrated Gradients over the grading model, plus overlay rendering.

Attribution of feature i for target-class score F, input x and baseline x':

    IG_i = (x_i - x'_i) * (1/m) * sum_{k=1..m} dF/dx_i at x' + (k/m)(x - x')

i.e. a right-endpoint Riemann approximation of the path integral. The target
score is the pre-softmax logit (softmax saturation would starve gradients).
Per-channel attributions are summed into one value per pixel so the mask
still accounts for the completeness identity sum(IG) = F(x) - F(x').

The path evaluations run in double precision (weights are cast once), which
keeps the completeness gap dominated by the Riemann error rather than
accumulation noise; results are reduced in index order, so masks are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import tensor as T
from .fundus import FundusImage, preprocess, preprocessed_image

_GRAD_CHUNK = 25


@dataclass(frozen=True)
class IGConfig:
    baseline: Union[str, np.ndarray] = "black"  # "black" or a CHW array
    steps: int = 50
    target: Union[int, str] = "predicted"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if isinstance(self.target, int) and not 0 <= self.target <= 4:
            raise ValueError(f"target class {self.target} out of range [0,4]")


@dataclass
class AttributionMask:
    values: np.ndarray  # (H, W) channel-summed attributions
    target_class: int
    completeness_gap: float
    steps: int
    baseline_kind: str


def _cast_weights(model) -> dict:
    return {name: T.Tensor(t.data.astype(np.float64)) for name, t in model.weights.items()}


def integrated_gradients_on_input(model, x: np.ndarray, config: IGConfig
                                  ) -> AttributionMask:
    """Integrated Gradients for an already-preprocessed CHW input in [0,1]."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(config.baseline, str):
        if config.baseline != "black":
            raise ValueError(f"unknown baseline {config.baseline!r}")
        baseline = np.zeros_like(x)
        baseline_kind = "black"
    else:
        baseline = np.asarray(config.baseline, dtype=np.float64)
        if baseline.shape != x.shape:
            raise ValueError(
                f"custom baseline shape {baseline.shape} does not match input {x.shape}"
            )
        baseline_kind = "custom"

    weights64 = _cast_weights(model) if hasattr(model, "weights") else None
    frozen = type(model)(model.config, weights64) if weights64 is not None else model

    if config.target == "predicted":
        logits = frozen.forward_logits(T.Tensor(x[None, ...]))
        target = int(logits.data[0].argmax())
    else:
        target = int(config.target)

    diff = x - baseline
    m = config.steps
    grad_sum = np.zeros_like(x)
    onehot_row = np.zeros(5, dtype=np.float64)
    onehot_row[target] = 1.0
    for start in range(1, m + 1, _GRAD_CHUNK):
        ks = np.arange(start, min(start + _GRAD_CHUNK, m + 1))
        points = baseline[None, ...] + (ks / m)[:, None, None, None] * diff[None, ...]
        batch = T.Tensor(points, requires_grad=True)
        logits = frozen.forward_logits(batch)
        score = T.tsum(T.mul(logits, T.Tensor(np.tile(onehot_row, (len(ks), 1)))))
        T.backward(score)
        grad_sum += batch.grad.sum(axis=0)

    ig = diff * (grad_sum / m)
    score_x = _target_logit_value(frozen, x, target)
    score_base = _target_logit_value(frozen, baseline, target)
    gap = abs(float(ig.sum()) - (score_x - score_base))
    return AttributionMask(
        values=ig.sum(axis=0),
        target_class=target,
        completeness_gap=gap,
        steps=m,
        baseline_kind=baseline_kind,
    )


def _target_logit_value(frozen, x: np.ndarray, target: int) -> float:
    logits = frozen.forward_logits(T.Tensor(x[None, ...].astype(np.float64)))
    return float(logits.data[0, target])


def integrated_gradients(model, img: FundusImage, config: IGConfig = IGConfig()
                         ) -> AttributionMask:
    """Attribution mask for one fundus image at model input resolution."""
    x = preprocess(img, size=model.config.input_size).data
    return integrated_gradients_on_input(model, x, config)


def _warm_colormap(t: np.ndarray) -> np.ndarray:
    """Monochrome-to-warm ramp: black -> red -> yellow -> white over [0,1]."""
    r = np.clip(3.0 * t, 0.0, 1.0)
    g = np.clip(3.0 * t - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * t - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def render_overlay(mask: AttributionMask, img: FundusImage) -> FundusImage:
    """Alpha-blend the attribution heatmap over the grayscale input.

    Absolute attributions are clipped at their 99th percentile and normalized
    to [0,1] before the colormap; blend is a fixed 50/50.
    """
    h, w = mask.values.shape
    if (img.height, img.width) != (h, w):
        raise ValueError(
            f"mask resolution {(h, w)} does not match image "
            f"{(img.height, img.width)}; render on the preprocessed image"
        )
    magnitude = np.abs(mask.values.astype(np.float64))
    # lower order statistic: replacing any value above it with it leaves it
    # fixed, so clipping is idempotent on outliers
    clip_at = np.percentile(magnitude, 99, method="lower")
    if clip_at == 0:
        clip_at = magnitude.max()  # sparse mask: fall back to max-normalization
    if clip_at > 0:
        norm = np.minimum(magnitude, clip_at) / clip_at
    else:
        norm = np.zeros_like(magnitude)
    heat = _warm_colormap(norm) * 255.0
    luma = (0.299 * img.pixels[..., 0].astype(np.float64)
            + 0.587 * img.pixels[..., 1]
            + 0.114 * img.pixels[..., 2])
    gray = np.repeat(luma[..., None], 3, axis=-1)
    blended = np.clip(np.rint(0.5 * gray + 0.5 * heat), 0, 255).astype(np.uint8)
    return FundusImage(pixels=blended, source_id=img.source_id)


def overlay_for_image(model, img: FundusImage, config: IGConfig = IGConfig()
                      ) -> tuple[AttributionMask, FundusImage]:
    """Convenience: mask plus its overlay on the resized input."""
    mask = integrated_gradients(model, img, config)
    base = preprocessed_image(img, size=model.config.input_size)
    return mask, render_overlay(mask, base)


def save_mask_csv(mask: AttributionMask, path) -> None:
    """Raw mask values, row-major, 6 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in mask.values:
            fh.write(",".join(f"{v:.6g}" for v in row))
            fh.write("\n")
