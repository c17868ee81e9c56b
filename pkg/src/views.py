"""
Construction of the three views of an instance: the prior view v_p, the distorted
jigsaw view v_d and the within-instance-negative view v_win.
"""

from __future__ import annotations

import json
import math
import logging
import numpy as np
import torch
import torchvision.transforms.functional as TF
from pathlib import Path
from enum import Enum
from dataclasses import dataclass, field
from typing import List, Optional, Tuple
from src.models import PriorKind, ViewConfig
from src.seeding import derive_seed
from src.constants import PRIOR_CROP_BY_INPUT
from src.imaging import (
    CropBox,
    GRID,
    RgbImage,
    argmax_a_star,
    assemble_grid,
    crop_square,
    from_tensor,
    resize,
    save_image,
    srgb_to_cielab,
    tile_grid,
    to_tensor
)

logger = logging.getLogger(__name__)

class ViewError(ValueError):
    """Raised when a view cannot be built from the given inputs."""

class TransformKind(str, Enum):
    PRIOR = "T_p"
    DISTORT = "T_d"
    WIN = "T_win"

Range = Tuple[float, float]

@dataclass(frozen=True)
class SampledTransform:
    """
    One concrete draw from a TransformSet; applying it is deterministic.
    """

    crop: Optional[Tuple[float, float, float, float]] = None  # top, left, height, width as fractions
    hflip: bool = False
    vflip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    grayscale: bool = False
    channel_order: Tuple[int, int, int] = (0, 1, 2)
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    noise_seed: int = 0

    @property
    def is_identity(self) -> bool:
        return self == SampledTransform(noise_seed=self.noise_seed)

    def apply_tensor(self, tensor: torch.Tensor) -> torch.Tensor:
        height, width = tensor.shape[-2:]
        out = tensor
        if self.crop is not None:
            top_f, left_f, h_f, w_f = self.crop
            h = max(1, min(height, round(h_f * height)))
            w = max(1, min(width, round(w_f * width)))
            top = min(round(top_f * height), height - h)
            left = min(round(left_f * width), width - w)
            out = TF.resized_crop(out, top, left, h, w, [height, width], antialias=True)
        if self.hflip:
            out = TF.hflip(out)
        if self.vflip:
            out = TF.vflip(out)
        if self.brightness != 1.0:
            out = TF.adjust_brightness(out, self.brightness)
        if self.contrast != 1.0:
            out = TF.adjust_contrast(out, self.contrast)
        if self.saturation != 1.0:
            out = TF.adjust_saturation(out, self.saturation)
        if self.hue != 0.0:
            out = TF.adjust_hue(out.clamp(0.0, 1.0), self.hue)
        if self.grayscale:
            out = TF.rgb_to_grayscale(out, num_output_channels=3)
        if self.channel_order != (0, 1, 2):
            out = out[list(self.channel_order)]
        if self.blur_sigma > 0.0:
            kernel = min(2 * math.ceil(3.0 * self.blur_sigma) + 1, _largest_odd_kernel(height, width))
            if kernel >= 3:
                out = TF.gaussian_blur(out, [kernel, kernel], [self.blur_sigma, self.blur_sigma])
        if self.noise_sigma > 0.0:
            generator = torch.Generator().manual_seed(self.noise_seed)
            out = out + self.noise_sigma * torch.randn(out.shape, generator=generator, dtype=out.dtype)
        return out.clamp(0.0, 1.0)

    def apply(self, img: RgbImage) -> RgbImage:
        if self.is_identity:
            return img
        return from_tensor(self.apply_tensor(to_tensor(img)))

def _largest_odd_kernel(height: int, width: int) -> int:
    # reflect padding needs kernel // 2 < min side
    side = min(height, width)
    return side if side % 2 else side - 1

@dataclass(frozen=True)
class TransformSet:
    """
    Parameter ranges of one augmentation family; a degenerate range disables a transform.
    """

    kind: TransformKind
    crop_scale: Optional[Range] = None
    crop_ratio: Range = (3.0 / 4.0, 4.0 / 3.0)
    hflip_p: float = 0.0
    vflip_p: float = 0.0
    brightness: Range = (1.0, 1.0)
    contrast: Range = (1.0, 1.0)
    saturation: Range = (1.0, 1.0)
    hue: Range = (0.0, 0.0)
    grayscale_p: float = 0.0
    channel_perm_p: float = 0.0
    blur_sigma: Range = (0.0, 0.0)
    noise_sigma: Range = (0.0, 0.0)

    def sample(self, rng: np.random.Generator) -> SampledTransform:
        """
        Draws one transform. Every range is sampled in a fixed order so a seed
        always consumes the same amount of randomness.
        """
        scale = rng.uniform(*self.crop_scale) if self.crop_scale else 1.0
        log_ratio = rng.uniform(math.log(self.crop_ratio[0]), math.log(self.crop_ratio[1]))
        offsets = rng.uniform(0.0, 1.0, size=2)
        crop = None
        if self.crop_scale and scale < 1.0:
            ratio = math.exp(log_ratio)
            w_f = min(1.0, math.sqrt(scale * ratio))
            h_f = min(1.0, math.sqrt(scale / ratio))
            crop = (float(offsets[0] * (1.0 - h_f)), float(offsets[1] * (1.0 - w_f)), h_f, w_f)
        hflip = bool(rng.random() < self.hflip_p)
        vflip = bool(rng.random() < self.vflip_p)
        brightness = float(rng.uniform(*self.brightness))
        contrast = float(rng.uniform(*self.contrast))
        saturation = float(rng.uniform(*self.saturation))
        hue = float(rng.uniform(*self.hue))
        grayscale = bool(rng.random() < self.grayscale_p)
        permute = bool(rng.random() < self.channel_perm_p)
        order = tuple(int(c) for c in rng.permutation(3)) if permute else (0, 1, 2)
        blur_sigma = float(rng.uniform(*self.blur_sigma))
        noise_sigma = float(rng.uniform(*self.noise_sigma))
        noise_seed = int(rng.integers(0, 2 ** 31 - 1))
        return SampledTransform(
            crop=crop,
            hflip=hflip,
            vflip=vflip,
            brightness=brightness,
            contrast=contrast,
            saturation=saturation,
            hue=hue,
            grayscale=grayscale,
            channel_order=order,
            blur_sigma=blur_sigma,
            noise_sigma=noise_sigma,
            noise_seed=noise_seed,
        )

    @classmethod
    def prior(cls) -> "TransformSet":
        return cls(
            kind=TransformKind.PRIOR,
            crop_scale=(0.6, 1.0),
            hflip_p=0.5,
            vflip_p=0.5,
            brightness=(0.6, 1.4),
            contrast=(0.6, 1.4),
            saturation=(0.6, 1.4),
            hue=(-0.1, 0.1),
        )

    @classmethod
    def distort(cls) -> "TransformSet":
        return cls(
            kind=TransformKind.DISTORT,
            brightness=(0.4, 1.6),
            contrast=(0.4, 1.6),
            saturation=(0.4, 1.6),
            grayscale_p=0.3,
            channel_perm_p=0.3,
            blur_sigma=(1.0, 3.0),
            noise_sigma=(0.05, 0.15),
        )

    @classmethod
    def win(cls) -> "TransformSet":
        return cls(
            kind=TransformKind.WIN,
            hflip_p=0.5,
            vflip_p=0.5,
            brightness=(0.8, 1.2),
            contrast=(0.8, 1.2),
            saturation=(0.8, 1.2),
        )

    @classmethod
    def identity(cls, kind: TransformKind = TransformKind.PRIOR) -> "TransformSet":
        return cls(kind=kind)

@dataclass(frozen=True)
class TransformSuite:
    """The three families used together when building a bundle."""

    prior: TransformSet = field(default_factory=TransformSet.prior)
    distort: TransformSet = field(default_factory=TransformSet.distort)
    win: TransformSet = field(default_factory=TransformSet.win)

    @classmethod
    def identity(cls) -> "TransformSuite":
        return cls(
            prior=TransformSet.identity(TransformKind.PRIOR),
            distort=TransformSet.identity(TransformKind.DISTORT),
            win=TransformSet.identity(TransformKind.WIN),
        )

@dataclass(frozen=True)
class ViewBundle:
    """
    The views of one instance together with their provenance.
    """

    v_p: RgbImage
    v_d_tiles: List[RgbImage]
    permutation: Tuple[int, ...]
    v_win: Optional[RgbImage]
    prior_box: CropBox
    shared_mask: Tuple[bool, ...]
    instance_id: int
    seed: int

    def provenance(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "prior_box": self.prior_box.to_dict(),
            "permutation": list(self.permutation),
            "shared_mask": list(self.shared_mask),
            "seed": self.seed,
        }

def prior_crop_size(side: int, configured: int = 0) -> int:
    """
    Prior crop side for an image of the given side. A configured size wins;
    0 looks the input resolution up, falling back to a quarter of the side.
    """
    if configured > 0:
        return configured
    return PRIOR_CROP_BY_INPUT.get(side, max(1, round(side / 4)))

def prior_center(img: RgbImage, prior: PriorKind, smooth_radius: int, rng: np.random.Generator) -> Tuple[int, int]:
    if prior is PriorKind.RANDOM:
        return int(rng.integers(0, img.width)), int(rng.integers(0, img.height))
    return argmax_a_star(srgb_to_cielab(img), smooth_radius)

def make_prior_view(
    img: RgbImage,
    crop_size: int,
    seed: int,
    *,
    view_size: int = 120,
    smooth_radius: int = 2,
    transforms: TransformSet | None = None,
    prior: PriorKind = PriorKind.REDNESS,
) -> Tuple[RgbImage, CropBox]:
    """
    Crops a fixed square around the reddest location, augments it with a T_p draw
    and resizes it to view_size. Returns the view and the pre-transform box.
    """
    transforms = transforms or TransformSet.prior()
    rng = np.random.default_rng(seed)
    center = prior_center(img, prior, smooth_radius, rng)
    crop, box = crop_square(img, center, crop_size)
    view = transforms.sample(rng).apply(crop)
    return resize(view, view_size, view_size), box

def shared_tile_mask(box: CropBox, height: int, width: int, tile_size: int, threshold: float = 0.25) -> Tuple[bool, ...]:
    """
    Marks tile t as shared with the prior view when the box, rescaled onto the
    3*tile_size square, covers at least threshold of the tile's area.
    """
    side = GRID * tile_size
    scale_x, scale_y = side / width, side / height
    mask = []
    for t in range(GRID * GRID):
        row, col = divmod(t, GRID)
        area = box.overlap(
            col * tile_size, row * tile_size, (col + 1) * tile_size, (row + 1) * tile_size,
            scale_x=scale_x, scale_y=scale_y,
        )
        mask.append(area >= threshold * tile_size * tile_size)
    return tuple(mask)

def make_distorted_view(
    img: RgbImage,
    prior_box: CropBox,
    seed: int,
    *,
    tile_size: int = 40,
    shared_overlap: float = 0.25,
    prior_transforms: TransformSet | None = None,
    distort_transforms: TransformSet | None = None,
) -> Tuple[List[RgbImage], Tuple[int, ...], Tuple[bool, ...]]:
    """
    Builds the jigsaw view: nine tiles, shared ones augmented from T_p and the rest
    distorted from T_d, returned in a uniformly random order.
    """
    prior_transforms = prior_transforms or TransformSet.prior()
    distort_transforms = distort_transforms or TransformSet.distort()
    rng = np.random.default_rng(seed)
    side = GRID * tile_size
    tiles = tile_grid(resize(img, side, side))
    mask = shared_tile_mask(prior_box, img.height, img.width, tile_size, shared_overlap)
    augmented = [
        (prior_transforms if shared else distort_transforms).sample(rng).apply(tile)
        for tile, shared in zip(tiles, mask)
    ]
    permutation = tuple(int(t) for t in rng.permutation(GRID * GRID))
    return [augmented[t] for t in permutation], permutation, mask

def zero_region(img: RgbImage, box: CropBox) -> RgbImage:
    """
    Copy of img with all channels set to 0 inside the box.
    """
    if not box.fits(img.height, img.width):
        raise ViewError(f"box {box.to_dict()} does not lie within a {img.height}x{img.width} image")
    data = np.array(img.data, copy=True)
    data[box.y0:box.y1, box.x0:box.x1, :] = 0.0
    return RgbImage(data)

def make_win_view(
    img: RgbImage,
    prior_box: CropBox,
    seed: int,
    *,
    view_size: int = 120,
    transforms: TransformSet | None = None,
) -> RgbImage:
    """
    Zeroes the prior region, then applies a T_win draw and resizes to view_size.
    """
    transforms = transforms or TransformSet.win()
    rng = np.random.default_rng(seed)
    holed = zero_region(img, prior_box)
    return resize(transforms.sample(rng).apply(holed), view_size, view_size)

def build_view_bundle(
    img: RgbImage,
    config: ViewConfig,
    instance_id: int,
    seed: int,
    suite: TransformSuite | None = None,
) -> ViewBundle:
    """
    Composes the three view constructors with sub-seeds derived from seed.
    """
    if suite is None:
        suite = TransformSuite() if config.augment else TransformSuite.identity()
    prior_seed, distort_seed, win_seed = (derive_seed(seed, stream) for stream in range(3))
    v_p, box = make_prior_view(
        img,
        prior_crop_size(min(img.height, img.width), config.crop_size),
        prior_seed,
        view_size=config.view_size,
        smooth_radius=config.smooth_radius,
        transforms=suite.prior,
        prior=config.prior,
    )
    tiles, permutation, mask = make_distorted_view(
        img,
        box,
        distort_seed,
        tile_size=config.tile_size,
        shared_overlap=config.shared_overlap,
        prior_transforms=suite.prior,
        distort_transforms=suite.distort,
    )
    v_win = None
    if config.win_enabled:
        v_win = make_win_view(img, box, win_seed, view_size=config.view_size, transforms=suite.win)
    return ViewBundle(
        v_p=v_p,
        v_d_tiles=tiles,
        permutation=permutation,
        v_win=v_win,
        prior_box=box,
        shared_mask=mask,
        instance_id=instance_id,
        seed=seed,
    )

def dump_bundle(bundle: ViewBundle, out_dir: Path) -> Path:
    """
    Writes the views of a bundle as PNG files plus a JSON sidecar with provenance.
    """
    out_dir = Path(out_dir)
    stem = f"bundle_{bundle.instance_id:06d}"
    save_image(bundle.v_p, out_dir / f"{stem}_vp.png")
    save_image(assemble_grid(bundle.v_d_tiles), out_dir / f"{stem}_vd.png")
    if bundle.v_win is not None:
        save_image(bundle.v_win, out_dir / f"{stem}_win.png")
    sidecar = out_dir / f"{stem}.json"
    sidecar.write_text(json.dumps(bundle.provenance(), indent=2), encoding="utf-8")
    logger.debug("Dumped view bundle %d to %s", bundle.instance_id, out_dir)
    return sidecar
