"""Backbone-lite image features and the context / depth-distribution heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng, ShapeError, conv2d, init_uniform, relu, sigmoid, softmax


@dataclass
class CameraHeadWeights:
    backbone: list[tuple[np.ndarray, np.ndarray]]
    context_k: np.ndarray
    context_b: np.ndarray
    depth_k: np.ndarray
    depth_b: np.ndarray

    @classmethod
    def init(cls, rng: Rng, c_in: int, channels: int, depth_bins: int) -> "CameraHeadWeights":
        c = channels
        backbone = [
            (init_uniform(rng, (c, c_in, 3, 3), 9 * c_in), init_uniform(rng, (c,), 9 * c_in)),
            (init_uniform(rng, (c, c, 3, 3), 9 * c), init_uniform(rng, (c,), 9 * c)),
        ]
        ck, cb = init_uniform(rng, (c, c, 3, 3), 9 * c), init_uniform(rng, (c,), 9 * c)
        dk, db = init_uniform(rng, (depth_bins, c, 3, 3), 9 * c), init_uniform(rng, (depth_bins,), 9 * c)
        return cls(backbone, ck, cb, dk, db)


def extract_features(image: np.ndarray, w: CameraHeadWeights) -> np.ndarray:
    """Two conv+ReLU layers over a stride-16 feature image ``[C_in, H, W]``."""
    x = image
    for k, b in w.backbone:
        x = relu(conv2d(x, k, b))
    return x


def context_depth_heads(f_i: np.ndarray, w: CameraHeadWeights, mode: str = "softmax"):
    """Context ``[C,H,W]`` and depth ``[D,H,W]``.

    ``mode="softmax"`` gives a categorical distribution over depth per pixel;
    ``mode="sigmoid"`` gives independent per-bin confidences.
    """
    if mode not in ("softmax", "sigmoid"):
        raise ValueError(f"unknown depth mode {mode!r}")
    if f_i.shape[0] != w.context_k.shape[1]:
        raise ShapeError(f"heads expect {w.context_k.shape[1]} channels, got {f_i.shape[0]}")
    context = conv2d(f_i, w.context_k, w.context_b)
    logits = conv2d(f_i, w.depth_k, w.depth_b)
    depth = softmax(logits, axis=0) if mode == "softmax" else sigmoid(logits)
    return context, depth
