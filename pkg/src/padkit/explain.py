"""Grad-CAM++ heatmaps and overlays."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .model import ATTACK_INDEX


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W), min-max normalised to [0, 1]
    target_class: int
    source_layer: str
    raw: np.ndarray  # rectified map at layer resolution, before upsampling/normalisation
    head: int = 0
    probability: float = float("nan")

    @property
    def argmax(self) -> tuple:
        """(x, y) pixel of the hottest point."""
        y, x = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(x), int(y)


def _as_batch(image) -> torch.Tensor:
    if isinstance(image, np.ndarray) and image.ndim == 3 and image.shape[-1] == 3:
        x = torch.from_numpy(image.astype(np.float32).transpose(2, 0, 1))
        if image.dtype == np.uint8:
            x = x / 255.0
    else:
        x = torch.as_tensor(image, dtype=torch.float32)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise ValueError(f"expected one RGB image, got shape {tuple(x.shape)}")
    return x


def _normalise(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def gradcam_pp(model, image, target_class: int = ATTACK_INDEX, layer: Optional[str] = None,
               head: int = 0) -> Heatmap:
    """Grad-CAM++ map for ``target_class`` of head ``head`` (0 = binary head).

    Per-map weights are ``sum_ij a_ij * relu(dY/dA_ij)`` with
    ``a_ij = g^2 / (2 g^2 + sum_ab A_ab g^3)``, where ``Y`` is the class logit.
    """
    layer = layer or model.default_cam_layer
    module = model.get_submodule(layer)
    x = _as_batch(image)
    out_h, out_w = x.shape[-2:]
    size = model.config.base.input_size if hasattr(model.config, "base") else model.config.input_size
    if (out_h, out_w) != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)

    captured = {}

    def hook(_mod, _inp, out):
        if not isinstance(out, torch.Tensor) or out.dim() != 4:
            raise ValueError(f"layer {layer!r} does not produce spatial feature maps")
        if not out.requires_grad:
            out = out.detach().requires_grad_(True)
        out.retain_grad()
        captured["act"] = out
        return out

    was_training = model.training
    model.eval()
    handle = module.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            logits = model.logits(x)
            if head >= len(logits):
                raise ValueError(f"model has no head {head}")
            if not 0 <= target_class < logits[head].shape[1]:
                raise ValueError(f"target class {target_class} invalid for head {head}")
            score = logits[head][0, target_class]
            model.zero_grad(set_to_none=True)
            score.backward()
        prob = float(torch.softmax(logits[head].detach(), dim=1)[0, target_class])
    finally:
        handle.remove()
        model.train(was_training)

    act = captured["act"].detach()[0].double()
    grad = captured["act"].grad[0].double()
    g2, g3 = grad ** 2, grad ** 3
    denom = 2 * g2 + act.sum(dim=(1, 2), keepdim=True) * g3
    alpha = torch.where(denom != 0, g2 / torch.where(denom != 0, denom, torch.ones_like(denom)), torch.zeros_like(denom))
    weights = (alpha * F.relu(grad)).sum(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * act).sum(dim=0))
    raw = cam.numpy()
    up = F.interpolate(cam[None, None], size=(out_h, out_w), mode="bilinear", align_corners=False)[0, 0]
    return Heatmap(
        values=_normalise(up.numpy()),
        target_class=target_class,
        source_layer=layer,
        raw=raw,
        head=head,
        probability=prob,
    )


def overlay(heatmap: Heatmap, image: np.ndarray, opacity: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """Alpha-blend the colour-mapped heatmap onto an RGB uint8 image."""
    if not 0.0 < opacity < 1.0:
        raise ValueError("opacity must lie in (0, 1)")
    image = np.asarray(image)
    if image.shape[:2] != heatmap.values.shape:
        raise ValueError(f"heatmap {heatmap.values.shape} does not match image {image.shape[:2]}")
    colour = colormaps[cmap](heatmap.values)[..., :3] * 255.0
    blended = (1.0 - opacity) * image.astype(np.float64) + opacity * colour
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def save_overlay(heatmap: Heatmap, image: np.ndarray, path, opacity: float = 0.5) -> Path:
    """Write the overlay PNG and a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(heatmap, image, opacity)).save(path)
    sidecar = {
        "target_class": heatmap.target_class,
        "head": heatmap.head,
        "layer": heatmap.source_layer,
        "predicted_probability": heatmap.probability,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def in_box(point: tuple, box: tuple) -> bool:
    x, y = point
    x0, y0, x1, y1 = box
    return x0 <= x < x1 and y0 <= y < y1
