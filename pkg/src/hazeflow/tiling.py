"""Full-frame inference by inner tiling.

Input tiles of the training patch size overlap by a fixed fraction; only the
central region of each tile's prediction is kept, and those inner windows
partition the frame exactly. Images whose sides are not multiples of the
inner window are reflect-padded up to the next multiple and cropped after
stitching. Border tiles read their context from the same reflect padding.

For posterior sampling, all tiles of sample j share one frame-level base
noise field, so sample j is a coherent posterior draw of the whole frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, IntegrationDivergenceError, ValidationError
from .rasters import as_raster, require_finite
from .sampling import (PosteriorSet, SamplerConfig, _euler_loop,
                       aggregate_posterior, resolve_velocity)
from .seeding import child_rng


@dataclass(frozen=True)
class Tile:
    """One work item; coordinates in the padded frame."""

    in_y: int
    in_x: int
    out_y: int   # inner-window origin, padded coords
    out_x: int
    img_y: int   # inner-window origin, image coords (clipped)
    img_x: int
    img_h: int   # clipped inner-window extent inside the image
    img_w: int


@dataclass(frozen=True)
class TileGrid:
    image_h: int
    image_w: int
    tile: int
    overlap_fraction: float
    inner: int
    margin: int
    rows: int
    cols: int
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int
    tiles: tuple[Tile, ...]

    @property
    def padded_shape(self) -> tuple[int, int]:
        return (self.image_h + self.pad_top + self.pad_bottom,
                self.image_w + self.pad_left + self.pad_right)


def plan_tiles(image_h: int, image_w: int, tile: int,
               overlap_fraction: float = 0.5) -> TileGrid:
    """Plan an exact-cover inner tiling of an image_h x image_w frame."""
    if image_h < 1 or image_w < 1:
        raise ValidationError("image dimensions must be positive")
    if tile < 2 or tile % 2 != 0:
        raise ValidationError("tile must be an even integer >= 2")
    if not (0.0 < overlap_fraction < 1.0):
        raise ValidationError("overlap_fraction must lie strictly in (0, 1)")
    inner_f = tile * (1.0 - overlap_fraction)
    inner = int(round(inner_f))
    if abs(inner_f - inner) > 1e-9 or inner < 1:
        raise ValidationError(
            f"tile*(1-overlap) must be a positive integer, got {inner_f}")
    if (tile - inner) % 2 != 0:
        raise ValidationError("tile and inner window must have the same parity")
    margin = (tile - inner) // 2

    rows = -(-image_h // inner)  # ceil division
    cols = -(-image_w // inner)
    cover_h, cover_w = rows * inner, cols * inner
    pad_top, pad_left = margin, margin
    pad_bottom = margin + (cover_h - image_h)
    pad_right = margin + (cover_w - image_w)
    # Reflect padding cannot exceed size-1 along an axis.
    if max(pad_top, pad_bottom) > image_h - 1 or max(pad_left, pad_right) > image_w - 1:
        raise ValidationError(
            f"tile {tile} too large to pad a {image_h}x{image_w} image for inner tiling")

    tiles = []
    for r in range(rows):
        for c in range(cols):
            out_y, out_x = pad_top + r * inner, pad_left + c * inner
            img_y, img_x = r * inner, c * inner
            tiles.append(Tile(
                in_y=out_y - margin, in_x=out_x - margin,
                out_y=out_y, out_x=out_x,
                img_y=img_y, img_x=img_x,
                img_h=min(inner, image_h - img_y),
                img_w=min(inner, image_w - img_x),
            ))
    return TileGrid(
        image_h=image_h, image_w=image_w, tile=tile,
        overlap_fraction=overlap_fraction, inner=inner, margin=margin,
        rows=rows, cols=cols,
        pad_top=pad_top, pad_bottom=pad_bottom,
        pad_left=pad_left, pad_right=pad_right,
        tiles=tuple(tiles),
    )


def pad_frame(image: np.ndarray, grid: TileGrid) -> np.ndarray:
    img = as_raster(image, "image")
    if img.shape != (grid.image_h, grid.image_w):
        raise ValidationError(
            f"grid planned for {(grid.image_h, grid.image_w)}, image is {img.shape}")
    return np.pad(img, ((grid.pad_top, grid.pad_bottom),
                        (grid.pad_left, grid.pad_right)), mode="reflect")


def predict_tiled(image: np.ndarray, grid: TileGrid, per_tile_fn) -> np.ndarray:
    """Apply per_tile_fn to every input tile and stitch the inner regions."""
    padded = pad_frame(image, grid)
    out = np.empty((grid.image_h, grid.image_w), dtype=np.float32)
    t, m, inner = grid.tile, grid.margin, grid.inner
    for tl in grid.tiles:
        try:
            pred = np.asarray(per_tile_fn(padded[tl.in_y:tl.in_y + t, tl.in_x:tl.in_x + t]))
        except Exception as exc:
            raise DataError(
                f"per-tile prediction failed at tile origin "
                f"({tl.img_y}, {tl.img_x}): {exc}") from exc
        if pred.shape != (t, t):
            raise DataError(
                f"per-tile prediction at ({tl.img_y}, {tl.img_x}) has shape "
                f"{pred.shape}, expected {(t, t)}")
        inner_pred = pred[m:m + inner, m:m + inner]
        out[tl.img_y:tl.img_y + tl.img_h, tl.img_x:tl.img_x + tl.img_w] = \
            inner_pred[:tl.img_h, :tl.img_w]
    return out


def sample_posterior_tiled(field, image: np.ndarray, grid: TileGrid,
                           cfg: SamplerConfig, observation_ref: str = "") -> PosteriorSet:
    """Posterior sampling of a full frame through the tiling plan.

    Sample j uses one base-noise field covering the padded frame; every tile
    of that sample reads its x0 from the corresponding window, which keeps
    the stitched sample a single coherent draw.
    """
    cfg.validate()
    padded_cond = pad_frame(image, grid)
    require_finite(padded_cond, "image")
    fn = resolve_velocity(field)

    k = cfg.n_samples
    noise = np.empty((k, *padded_cond.shape), dtype=np.float32)
    for j in range(k):
        noise[j] = child_rng(cfg.seed, j).standard_normal(padded_cond.shape)

    t, m, inner = grid.tile, grid.margin, grid.inner
    samples = np.empty((k, grid.image_h, grid.image_w), dtype=np.float32)
    for tl in grid.tiles:
        cond_tile = padded_cond[tl.in_y:tl.in_y + t, tl.in_x:tl.in_x + t]
        x0 = noise[:, tl.in_y:tl.in_y + t, tl.in_x:tl.in_x + t]
        if cfg.base == "sifm":
            x0 = cond_tile[None] + cfg.sifm_sigma * x0
        try:
            pred = _euler_loop(fn, x0, cond_tile, cfg.steps_t)
        except IntegrationDivergenceError as exc:
            raise IntegrationDivergenceError(
                f"tile origin ({tl.img_y}, {tl.img_x}): {exc}") from exc
        except Exception as exc:
            raise DataError(
                f"posterior integration failed at tile origin "
                f"({tl.img_y}, {tl.img_x}): {exc}") from exc
        inner_pred = pred[:, m:m + inner, m:m + inner]
        samples[:, tl.img_y:tl.img_y + tl.img_h, tl.img_x:tl.img_x + tl.img_w] = \
            inner_pred[:, :tl.img_h, :tl.img_w]
    return aggregate_posterior(samples, observation_ref)
