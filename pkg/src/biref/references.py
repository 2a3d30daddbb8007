"""Non-learned parts of the bilateral reference: image gradient targets,
lossless image tiling for the inward reference, and prediction-dilated
gradient masking for the outward reference.

NumPy functions operate on single H x W (x C) arrays; the ``*_torch``
twins operate on N x C x H x W batches inside the training graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

# Largest |gx| (or |gy|) a 3x3 Sobel can produce on a [0, 1] image; a unit
# step edge therefore maps to exactly 1.
SOBEL_SCALE = 4.0


@dataclass
class PatchGrid:
    patches: np.ndarray  # N x h x w x C, row-major tile order
    grid: tuple[int, int]  # (rows, cols)
    origin_size: tuple[int, int]  # (H, W) before padding
    padding: tuple[int, int] = (0, 0)  # (bottom, right) reflect padding

    def stacked(self) -> np.ndarray:
        """h x w x (C*N) channel stack, tile-major then channel."""
        n, h, w, c = self.patches.shape
        return self.patches.transpose(1, 2, 0, 3).reshape(h, w, n * c)


def _gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=2) if image.ndim == 3 else image


def gradient_map(image: np.ndarray) -> np.ndarray:
    """Sobel magnitude of the channel-mean image, scaled to [0, 1]."""
    g = _gray(image)
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise ValueError(f"image {g.shape} is smaller than the 3x3 Sobel kernel")
    gx = ndimage.sobel(g, axis=1, mode="reflect")
    gy = ndimage.sobel(g, axis=0, mode="reflect")
    return np.clip(np.hypot(gx, gy) / SOBEL_SCALE, 0.0, 1.0)


def save_gradient_png(grad: np.ndarray, path: str | Path) -> None:
    cv2.imwrite(str(path), np.clip(np.rint(grad * 255), 0, 255).astype(np.uint8))


def patchify(image: np.ndarray, target: tuple[int, int]) -> PatchGrid:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    H, W = image.shape[:2]
    h, w = target
    if h < 1 or w < 1 or h > H or w > W:
        raise ValueError(f"target {target} must fit inside image {(H, W)}")
    pad_b, pad_r = (-H) % h, (-W) % w
    if pad_b or pad_r:
        mode = "reflect" if pad_b < H and pad_r < W else "symmetric"
        image = np.pad(image, ((0, pad_b), (0, pad_r), (0, 0)), mode=mode)
    rows, cols = image.shape[0] // h, image.shape[1] // w
    c = image.shape[2]
    tiles = image.reshape(rows, h, cols, w, c).transpose(0, 2, 1, 3, 4).reshape(rows * cols, h, w, c)
    return PatchGrid(patches=tiles.copy(), grid=(rows, cols), origin_size=(H, W), padding=(pad_b, pad_r))


def unpatchify(grid: PatchGrid) -> np.ndarray:
    n, h, w, c = grid.patches.shape
    rows, cols = grid.grid
    H, W = grid.origin_size
    pad_b, pad_r = grid.padding
    if rows * cols != n or rows * h != H + pad_b or cols * w != W + pad_r:
        raise ValueError("inconsistent PatchGrid metadata")
    full = grid.patches.reshape(rows, cols, h, w, c).transpose(0, 2, 1, 3, 4).reshape(rows * h, cols * w, c)
    return full[:H, :W]


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask).astype(bool)
    if radius == 0:
        return mask.astype(np.uint8)
    size = 2 * radius + 1
    return ndimage.binary_dilation(mask, structure=np.ones((size, size), bool)).astype(np.uint8)


def masked_gradient(grad: np.ndarray, pred: np.ndarray, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns (values, mask) with mask = dilate(pred > 0.5)."""
    grad, pred = np.asarray(grad), np.asarray(pred)
    if grad.shape != pred.shape:
        raise ValueError(f"gradient {grad.shape} and prediction {pred.shape} differ in size")
    mask = dilate(pred > 0.5, radius)
    return grad * mask, mask


# ---------------------------------------------------------------------------
# batched torch versions used in the network / objective

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def gradient_map_torch(images: torch.Tensor) -> torch.Tensor:
    """N x C x H x W -> N x 1 x H x W, same values as :func:`gradient_map`."""
    g = images.mean(dim=1, keepdim=True)
    g = F.pad(g, (1, 1, 1, 1), mode="replicate")
    kx = _SOBEL_X.to(g)[None, None]
    gx = F.conv2d(g, kx)
    gy = F.conv2d(g, kx.transpose(-1, -2))
    return (torch.sqrt(gx * gx + gy * gy) / SOBEL_SCALE).clamp(0.0, 1.0)


def patch_stack_torch(images: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Crop N x C x H x W into a row-major grid of size-``size`` tiles and
    stack them on channels: N x (tiles*C) x h x w."""
    n, c, H, W = images.shape
    h, w = size
    if H % h or W % w:
        raise ValueError(f"image {(H, W)} is not a multiple of tile {size}")
    rows, cols = H // h, W // w
    x = images.reshape(n, c, rows, h, cols, w).permute(0, 2, 4, 1, 3, 5)
    return x.reshape(n, rows * cols * c, h, w)


def dilate_torch(mask: torch.Tensor, radius: int) -> torch.Tensor:
    if radius <= 0:
        return mask
    return F.max_pool2d(mask, 2 * radius + 1, stride=1, padding=radius)


def stage_gradient_target(grad_full: torch.Tensor, pred: torch.Tensor, radius: int) -> torch.Tensor:
    """Area-downsample the full-resolution gradient to ``pred``'s size and
    keep it only inside the dilated binarized prediction."""
    g = F.interpolate(grad_full, size=pred.shape[-2:], mode="area")
    mask = dilate_torch((pred.detach() > 0.5).to(g.dtype), radius)
    return g * mask
