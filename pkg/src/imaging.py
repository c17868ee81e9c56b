"""
Raster image primitives: sRGB to CIELAB conversion, cropping, tiling and resizing.

Images are held as H x W x 3 float64 arrays with channel values in [0, 1].
"""

from __future__ import annotations

import logging
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from pathlib import Path
from dataclasses import dataclass
from typing import List, Tuple
from numpy.lib.stride_tricks import sliding_window_view
from src.constants import D65_WHITE, SRGB_PRIMARIES_XY

logger = logging.getLogger(__name__)

MIN_SIDE = 9
GRID = 3

class ImagingError(ValueError):
    """Raised for invalid rasters or geometry requests."""

def _rgb_to_xyz_matrix() -> np.ndarray:
    # columns are the primaries' XYZ scaled so that R=G=B=1 maps onto the white point
    primaries = np.array([[x / y, 1.0, (1.0 - x - y) / y] for x, y in SRGB_PRIMARIES_XY]).T
    scale = np.linalg.solve(primaries, np.array(D65_WHITE))
    return primaries * scale

# XYZ already divided by the white point, so a neutral input gives X/Xn = Y/Yn = Z/Zn
_RGB_TO_XYZ_N = _rgb_to_xyz_matrix() / np.array(D65_WHITE)[:, None]
_DELTA = 6.0 / 29.0

@dataclass(frozen=True)
class RgbImage:
    """
    Immutable sRGB raster, row-major H x W x 3, channel values in [0, 1].
    """

    data: np.ndarray

    def __post_init__(self):
        array = np.array(self.data, dtype=np.float64, copy=True)
        if array.ndim != 3 or array.shape[2] != 3:
            raise ImagingError(f"expected an H x W x 3 raster, got shape {array.shape}")
        if array.shape[0] < MIN_SIDE or array.shape[1] < MIN_SIDE:
            raise ImagingError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {array.shape[0]}x{array.shape[1]}")
        if not np.all(np.isfinite(array)) or array.min() < 0.0 or array.max() > 1.0:
            raise ImagingError("channel values must be finite and lie in [0, 1]")
        array.setflags(write=False)
        object.__setattr__(self, "data", array)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def clipped(cls, array: np.ndarray) -> "RgbImage":
        return cls(np.clip(array, 0.0, 1.0))

@dataclass(frozen=True)
class LabPlanes:
    """
    CIELAB planes of an image: L in [0, 100], a (red-green), b (blue-yellow).
    """

    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @property
    def height(self) -> int:
        return self.L.shape[0]

    @property
    def width(self) -> int:
        return self.L.shape[1]

@dataclass(frozen=True)
class CropBox:
    """
    Square box of the given side centred on (cx, cy); covers [x0, x1) x [y0, y1).
    """

    cx: int
    cy: int
    side: int

    @property
    def x0(self) -> int:
        return self.cx - self.side // 2

    @property
    def y0(self) -> int:
        return self.cy - self.side // 2

    @property
    def x1(self) -> int:
        return self.x0 + self.side

    @property
    def y1(self) -> int:
        return self.y0 + self.side

    @property
    def area(self) -> int:
        return self.side * self.side

    def fits(self, height: int, width: int) -> bool:
        return self.side > 0 and self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def overlap(self, x0: float, y0: float, x1: float, y1: float, scale_x: float = 1.0, scale_y: float = 1.0) -> float:
        """Area shared with the rectangle [x0, x1) x [y0, y1), after scaling this box."""
        ox = min(self.x1 * scale_x, x1) - max(self.x0 * scale_x, x0)
        oy = min(self.y1 * scale_y, y1) - max(self.y0 * scale_y, y0)
        return max(ox, 0.0) * max(oy, 0.0)

    def intersects(self, other: "CropBox") -> bool:
        return self.overlap(other.x0, other.y0, other.x1, other.y1) > 0

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "side": self.side}

    @classmethod
    def from_dict(cls, data: dict) -> "CropBox":
        return cls(cx=int(data["cx"]), cy=int(data["cy"]), side=int(data["side"]))

def srgb_to_cielab(img: RgbImage) -> LabPlanes:
    """
    Converts an sRGB raster to CIELAB (IEC 61966-2-1 transfer curve, D65 white).
    """
    rgb = img.data
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ_N.T
    f = np.where(xyz > _DELTA ** 3, np.cbrt(xyz), xyz / (3.0 * _DELTA ** 2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return LabPlanes(L=116.0 * fy - 16.0, a=500.0 * (fx - fy), b=200.0 * (fy - fz))

def box_filter(plane: np.ndarray, radius: int) -> np.ndarray:
    """
    Mean over a (2r+1)^2 window with edge-clamped borders.
    """
    if radius < 0:
        raise ImagingError("smoothing radius must be >= 0")
    if radius == 0:
        return np.array(plane, dtype=np.float64, copy=True)
    size = 2 * radius + 1
    padded = np.pad(plane, radius, mode="edge")
    return sliding_window_view(padded, (size, size)).mean(axis=(-2, -1))

def argmax_a_star(lab: LabPlanes, smooth_radius: int = 2) -> Tuple[int, int]:
    """
    Returns (x, y) of the maximal box-filtered a* value; ties go to the first row-major index.
    """
    smoothed = box_filter(lab.a, smooth_radius)
    y, x = divmod(int(np.argmax(smoothed)), smoothed.shape[1])
    return x, y

def crop_square(img: RgbImage, center: Tuple[int, int], side: int) -> Tuple[RgbImage, CropBox]:
    """
    Crops a side x side square around center, shifting (never shrinking) it to stay inside.
    """
    if side <= 0:
        raise ImagingError("crop side must be positive")
    if side > min(img.height, img.width):
        raise ImagingError(f"crop exceeds image: side {side} > {min(img.height, img.width)}")
    cx, cy = center
    x0 = int(np.clip(int(cx) - side // 2, 0, img.width - side))
    y0 = int(np.clip(int(cy) - side // 2, 0, img.height - side))
    box = CropBox(cx=x0 + side // 2, cy=y0 + side // 2, side=side)
    return RgbImage(img.data[y0:y0 + side, x0:x0 + side]), box

def tile_grid(img: RgbImage) -> List[RgbImage]:
    """
    Splits the image into nine equal tiles; tile t is grid cell (t // 3, t % 3).
    """
    if img.height % GRID or img.width % GRID:
        raise ImagingError(f"image {img.height}x{img.width} is not divisible into a {GRID}x{GRID} grid")
    th, tw = img.height // GRID, img.width // GRID
    return [
        RgbImage(img.data[r * th:(r + 1) * th, c * tw:(c + 1) * tw])
        for r in range(GRID)
        for c in range(GRID)
    ]

def assemble_grid(tiles: List[RgbImage]) -> RgbImage:
    """
    Inverse of tile_grid.
    """
    if len(tiles) != GRID * GRID:
        raise ImagingError(f"expected {GRID * GRID} tiles, got {len(tiles)}")
    rows = [np.concatenate([t.data for t in tiles[r * GRID:(r + 1) * GRID]], axis=1) for r in range(GRID)]
    return RgbImage(np.concatenate(rows, axis=0))

def to_tensor(img: RgbImage, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """H x W x 3 raster to a 3 x H x W tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.data.transpose(2, 0, 1))).to(dtype)

def from_tensor(tensor: torch.Tensor) -> RgbImage:
    """3 x H x W tensor to a raster, clamping into [0, 1]."""
    return RgbImage.clipped(tensor.detach().to(torch.float64).permute(1, 2, 0).numpy())

def resize_tensor(tensor: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    if tensor.shape[-2:] == (out_h, out_w):
        return tensor
    resized = F.interpolate(tensor.unsqueeze(0), size=(out_h, out_w), mode="bilinear", align_corners=False)
    return resized.squeeze(0)

def resize(img: RgbImage, out_h: int, out_w: int) -> RgbImage:
    """
    Bilinear resize with pixel-centre sampling; identity when the size is unchanged.
    """
    if out_h < 1 or out_w < 1:
        raise ImagingError("output size must be at least 1x1")
    if (img.height, img.width) == (out_h, out_w):
        return img
    return from_tensor(resize_tensor(to_tensor(img), out_h, out_w))

def load_image(path: Path) -> RgbImage:
    """
    Reads a PNG or JPEG file, mapping 8-bit channels to [0, 1].
    """
    with Image.open(path) as handle:
        array = np.asarray(handle.convert("RGB"), dtype=np.float64) / 255.0
    return RgbImage(array)

def quantize(img: RgbImage) -> RgbImage:
    """Rounds to the 8-bit grid so the raster survives a PNG round trip unchanged."""
    return RgbImage(np.rint(img.data * 255.0) / 255.0)

def save_image(img: RgbImage, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.rint(img.data * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PNG")
    return path
