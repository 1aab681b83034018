"""Synthetic multi-region tile benchmark and on-disk tile directory I/O.

Each synthetic region renders informal settlements as dense grids of small
rotated quadrilaterals in a region-specific roof hue over smoothed colored
noise. The background also carries sparse, larger "formal" structures whose
hue equals another region's roof hue, so the meaning of a color depends on
the region: models that condition on region identity can resolve it, models
that cannot must fall back on weaker size/density cues. The held-out target
region blends two source regions' parameters and applies an unseen hue
shift, plus a wider per-tile hue jitter so pseudo-label reliability varies
across tiles.
"""

import colorsys
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, TileLoadError
from .rng import numpy_rng

logger = logging.getLogger(__name__)

SPLIT_SOURCE_TRAIN = "source_train"
SPLIT_SOURCE_VAL = "source_val"
SPLIT_TARGET = "target"
SPLITS = (SPLIT_SOURCE_TRAIN, SPLIT_SOURCE_VAL, SPLIT_TARGET)

VALID_TILE_SIZES = (32, 64, 128)

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class RegionSpec:
    """Identity and texture parameters of one region."""

    region_id: int
    name: str = ""
    base_hue: tuple = (0.7, 0.3, 0.3)  # roof color of informal structures, RGB in [0,1]
    background_tint: tuple = (0.85, 0.85, 0.8)
    distractor_hue: tuple = (0.3, 0.3, 0.7)  # roof color of formal structures
    structure_size: int = 4
    structure_density: float = 0.6
    distractor_density: float = 0.25
    orientation_jitter: float = 12.0
    noise_amplitude: float = 0.05
    hue_jitter: float = 0.01  # per-tile hue drift scale
    slum_fraction: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.slum_fraction <= 1.0:
            raise ConfigurationError(
                f"slum_fraction must be in [0, 1], got {self.slum_fraction}"
            )
        if self.structure_size < 2:
            raise ConfigurationError(
                f"structure_size must be >= 2 px, got {self.structure_size}"
            )


@dataclass
class Tile:
    """One image sample: RGB raster, optional binary mask, region id."""

    image: np.ndarray  # float32 (3, H, W) in [0, 1]
    mask: np.ndarray | None  # uint8 (H, W) in {0, 1}
    region_id: int
    tile_id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ConfigurationError(f"tile {self.tile_id}: image must be (3, H, W)")
        if self.image.shape[1] != self.image.shape[2]:
            raise ConfigurationError(f"tile {self.tile_id}: tiles must be square")
        if self.mask is not None and self.mask.shape != self.image.shape[1:]:
            raise ConfigurationError(
                f"tile {self.tile_id}: mask shape {self.mask.shape} does not match "
                f"image {self.image.shape[1:]}"
            )

    @property
    def size(self) -> int:
        return self.image.shape[1]


@dataclass
class TileSet:
    tiles: list
    split: str
    regions: list = field(default_factory=list)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")
        if self.split in (SPLIT_SOURCE_TRAIN, SPLIT_SOURCE_VAL):
            for t in self.tiles:
                if t.mask is None:
                    raise ConfigurationError(
                        f"tile {t.tile_id}: source splits require a mask for every tile"
                    )
        ids = [r.region_id for r in self.regions]
        if len(ids) != len(set(ids)):
            raise ConfigurationError("region ids must be unique within a tile set")

    def __len__(self) -> int:
        return len(self.tiles)

    def region_ids(self) -> list:
        return sorted({t.region_id for t in self.tiles})

    def without_masks(self) -> "TileSet":
        """Copy with every mask removed (what adaptation is allowed to see)."""
        stripped = [replace(t, mask=None) for t in self.tiles]
        return TileSet(tiles=stripped, split=SPLIT_TARGET, regions=list(self.regions))


def _hsv(h: float, s: float, v: float) -> tuple:
    return tuple(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _shift_hue(rgb, delta: float) -> tuple:
    h, s, v = colorsys.rgb_to_hsv(*rgb)
    return tuple(colorsys.hsv_to_rgb((h + delta) % 1.0, s, v))


def _blend(a, b, lam: float):
    if isinstance(a, tuple):
        return tuple(lam * x + (1.0 - lam) * y for x, y in zip(a, b))
    return lam * a + (1.0 - lam) * b


def build_region_specs(seed: int, num_regions: int) -> list:
    """Source region parameter table, a pure function of (seed, num_regions)."""
    rng = numpy_rng(seed, "regions")
    hue0 = rng.uniform(0.0, 1.0)
    specs = []
    for r in range(num_regions):
        hue = (hue0 + r / num_regions) % 1.0
        specs.append(
            RegionSpec(
                region_id=r,
                name=f"region{r:02d}",
                base_hue=_hsv(hue, 0.70, 0.70),
                background_tint=_hsv(hue + 0.5 / num_regions, 0.20, 0.88),
                structure_size=3 + (r % 3),
                structure_density=0.55 + 0.20 * rng.uniform(),
                distractor_density=0.20 + 0.10 * rng.uniform(),
                orientation_jitter=8.0 + 12.0 * rng.uniform(),
                noise_amplitude=0.04 + 0.04 * rng.uniform(),
                hue_jitter=0.01,
                slum_fraction=0.25 + 0.15 * rng.uniform(),
            )
        )
    # Each region's formal structures reuse the next region's roof hue, so
    # color semantics conflict across regions.
    out = []
    for r, spec in enumerate(specs):
        out.append(replace(spec, distractor_hue=specs[(r + 1) % num_regions].base_hue))
    return out


def blend_target_spec(seed: int, specs: list) -> tuple:
    """Target region as a convex blend of two source regions plus a hue shift.

    Returns (target_spec, (a, b)) where a, b are the blended source ids.
    """
    rng = numpy_rng(seed, "target-region")
    if len(specs) >= 2:
        a, b = sorted(rng.choice(len(specs), size=2, replace=False).tolist())
    else:
        a, b = 0, 0
    lam = rng.uniform(0.4, 0.6)
    sa, sb = specs[a], specs[b]
    shift = float(rng.choice([-1.0, 1.0])) * (0.03 + 0.03 * rng.uniform())
    target = RegionSpec(
        region_id=len(specs),
        name="target",
        base_hue=_shift_hue(_blend(sa.base_hue, sb.base_hue, lam), shift),
        background_tint=_shift_hue(_blend(sa.background_tint, sb.background_tint, lam), shift),
        distractor_hue=_blend(sa.distractor_hue, sb.distractor_hue, lam),
        structure_size=max(2, round(_blend(sa.structure_size, sb.structure_size, lam))),
        structure_density=_blend(sa.structure_density, sb.structure_density, lam),
        distractor_density=_blend(sa.distractor_density, sb.distractor_density, lam),
        orientation_jitter=_blend(sa.orientation_jitter, sb.orientation_jitter, lam),
        noise_amplitude=_blend(sa.noise_amplitude, sb.noise_amplitude, lam),
        hue_jitter=0.06,
        slum_fraction=_blend(sa.slum_fraction, sb.slum_fraction, lam),
    )
    return target, (a, b)


def _zone_mask(rng: np.random.Generator, size: int, fraction: float) -> np.ndarray:
    """Blob-shaped settlement zone covering ~fraction of the tile."""
    if fraction <= 0.0:
        return np.zeros((size, size), dtype=np.uint8)
    if fraction >= 1.0:
        return np.ones((size, size), dtype=np.uint8)
    blobs = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 6.0, mode="wrap")
    threshold = np.quantile(blobs, 1.0 - fraction)
    return (blobs > threshold).astype(np.uint8)


def _background(rng: np.random.Generator, size: int, tint, amplitude: float) -> np.ndarray:
    base = np.empty((size, size, 3), dtype=np.float64)
    base[:] = tint
    for c in range(3):
        rough = rng.standard_normal((size, size))
        base[:, :, c] += amplitude * gaussian_filter(rough, sigma=2.0, mode="wrap")
        base[:, :, c] += 0.35 * amplitude * rng.standard_normal((size, size))
    return np.clip(base, 0.0, 1.0)


def _draw_structures(draw, rng, zone, color, size_px, density, jitter_deg, inside_zone):
    """Scatter rotated quadrilateral roofs on a grid, inside or outside the zone."""
    canvas = zone.shape[0]
    spacing = size_px + max(1, size_px // 2)
    base_angle = rng.uniform(0.0, 90.0)
    for gy in range(0, canvas, spacing):
        for gx in range(0, canvas, spacing):
            u_keep = rng.uniform()
            cx = gx + spacing / 2.0 + rng.uniform(-1.0, 1.0)
            cy = gy + spacing / 2.0 + rng.uniform(-1.0, 1.0)
            ang = math.radians(base_angle + rng.uniform(-jitter_deg, jitter_deg))
            half = 0.5 * size_px * rng.uniform(0.85, 1.15)
            shade = rng.normal(0.0, 0.04, size=3)
            if u_keep > density:
                continue
            px = min(canvas - 1, max(0, int(round(cx))))
            py = min(canvas - 1, max(0, int(round(cy))))
            if bool(zone[py, px]) != inside_zone:
                continue
            ca, sa = math.cos(ang), math.sin(ang)
            corners = []
            for dx, dy in ((-half, -half), (half, -half), (half, half), (-half, half)):
                corners.append((cx + dx * ca - dy * sa, cy + dx * sa + dy * ca))
            col = np.clip(np.asarray(color) + shade, 0.0, 1.0)
            draw.polygon(corners, fill=tuple(int(round(255 * c)) for c in col))


def render_tile(spec: RegionSpec, rng: np.random.Generator, tile_size: int):
    """Render one (image, mask) pair from a region spec and a per-tile RNG."""
    frac = spec.slum_fraction
    if 0.0 < frac < 1.0:
        frac = float(np.clip(frac + rng.uniform(-0.05, 0.05), 0.02, 0.98))
    zone = _zone_mask(rng, tile_size, frac)
    tile_hue_shift = float(rng.normal(0.0, spec.hue_jitter))
    roof = _shift_hue(spec.base_hue, tile_hue_shift)

    bg = _background(rng, tile_size, spec.background_tint, spec.noise_amplitude)
    img = Image.fromarray((bg * 255.0).round().astype(np.uint8))
    draw = ImageDraw.Draw(img)
    # formal structures: larger, sparser, another region's roof hue
    _draw_structures(
        draw, rng, zone, spec.distractor_hue, spec.structure_size + 3,
        spec.distractor_density, 0.5 * spec.orientation_jitter, inside_zone=False,
    )
    _draw_structures(
        draw, rng, zone, roof, spec.structure_size,
        spec.structure_density, spec.orientation_jitter, inside_zone=True,
    )
    arr = np.asarray(img, dtype=np.float32) / 255.0
    image = np.ascontiguousarray(arr.transpose(2, 0, 1))
    return image, zone


def _render_region(spec, seed, tiles_per_region, tile_size) -> list:
    tiles = []
    for i in range(tiles_per_region):
        # independent stream per tile so generation parallelizes without
        # changing output
        rng = numpy_rng(seed, "tile", spec.region_id, i)
        image, mask = render_tile(spec, rng, tile_size)
        tiles.append(
            Tile(image=image, mask=mask, region_id=spec.region_id,
                 tile_id=f"{spec.name}_{i:04d}")
        )
    return tiles


def _validate_benchmark_args(num_regions, tiles_per_region, tile_size):
    if num_regions < 1:
        raise ConfigurationError(f"num_regions must be >= 1, got {num_regions}")
    if tiles_per_region < 1:
        raise ConfigurationError(f"tiles_per_region must be >= 1, got {tiles_per_region}")
    if tile_size not in VALID_TILE_SIZES:
        raise ConfigurationError(
            f"tile_size must be one of {VALID_TILE_SIZES}, got {tile_size}"
        )
    if num_regions < 3:
        logger.warning(
            "num_regions=%d gives a degenerate region-expert mutual information "
            "signal; 3 or more regions are recommended", num_regions,
        )


def generate_benchmark(seed: int, num_regions: int = 3, tiles_per_region: int = 16,
                       tile_size: int = 64):
    """Generate (source, target) tile sets; pure function of its arguments.

    The target set is one extra region blended from two source regions. All
    tiles carry ground-truth masks; the target masks exist only for held-out
    evaluation and must be stripped before adaptation.
    """
    _validate_benchmark_args(num_regions, tiles_per_region, tile_size)
    specs = build_region_specs(seed, num_regions)
    target_spec, _ = blend_target_spec(seed, specs)

    source_tiles = []
    for spec in specs:
        source_tiles.extend(_render_region(spec, seed, tiles_per_region, tile_size))
    target_tiles = _render_region(target_spec, seed, tiles_per_region, tile_size)

    source = TileSet(tiles=source_tiles, split=SPLIT_SOURCE_TRAIN, regions=specs)
    target = TileSet(tiles=target_tiles, split=SPLIT_TARGET, regions=[target_spec])
    return source, target


def generate_validation_tiles(seed: int, regions: list, tiles_per_region: int,
                              tile_size: int) -> TileSet:
    """Fresh tiles from existing region specs, on a separate seed substream."""
    if tile_size not in VALID_TILE_SIZES:
        raise ConfigurationError(
            f"tile_size must be one of {VALID_TILE_SIZES}, got {tile_size}"
        )
    tiles = []
    for spec in regions:
        for i in range(tiles_per_region):
            rng = numpy_rng(seed, "val-tile", spec.region_id, i)
            image, mask = render_tile(spec, rng, tile_size)
            tiles.append(
                Tile(image=image, mask=mask, region_id=spec.region_id,
                     tile_id=f"{spec.name}_val_{i:04d}")
            )
    return TileSet(tiles=tiles, split=SPLIT_SOURCE_VAL, regions=list(regions))


# ---------------------------------------------------------------------------
# On-disk layout: root/manifest.json, root/tiles/<region>/<id>.png (RGB),
# root/masks/<region>/<id>.png (grayscale, 0 = non-slum, 255 = slum).
# ---------------------------------------------------------------------------


def export_tileset(tileset: TileSet, root) -> None:
    root = Path(root)
    (root / "tiles").mkdir(parents=True, exist_ok=True)
    names = {r.region_id: r.name for r in tileset.regions}
    manifest = {
        "regions": [{"id": r.region_id, "name": r.name} for r in tileset.regions],
        "tile_size": tileset.tiles[0].size if tileset.tiles else 0,
    }
    with open(root / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for tile in tileset.tiles:
        name = names[tile.region_id]
        tile_dir = root / "tiles" / name
        tile_dir.mkdir(parents=True, exist_ok=True)
        rgb = (tile.image.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        Image.fromarray(rgb).save(tile_dir / f"{tile.tile_id}.png")
        if tile.mask is not None:
            mask_dir = root / "masks" / name
            mask_dir.mkdir(parents=True, exist_ok=True)
            gray = (tile.mask.astype(np.uint8) * 255)
            Image.fromarray(gray, mode="L").save(mask_dir / f"{tile.tile_id}.png")


def load_tile_directory(root, split: str = SPLIT_SOURCE_TRAIN) -> TileSet:
    """Load a tile directory; tiles come back sorted by (region_id, tile_id)."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise TileLoadError(f"missing manifest: {manifest_path}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        region_entries = [(int(r["id"]), str(r["name"])) for r in manifest["regions"]]
        tile_size = int(manifest["tile_size"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise TileLoadError(f"malformed manifest {manifest_path}: {exc}") from exc

    known = {name: rid for rid, name in region_entries}
    tiles_root = root / "tiles"
    if tiles_root.is_dir():
        for sub in sorted(p.name for p in tiles_root.iterdir() if p.is_dir()):
            if sub not in known:
                raise TileLoadError(
                    f"region directory {tiles_root / sub} not listed in {manifest_path}"
                )

    tiles = []
    for rid, name in region_entries:
        tile_dir = tiles_root / name
        if not tile_dir.is_dir():
            continue
        for img_path in sorted(tile_dir.glob("*.png")):
            arr = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32)
            if arr.shape[0] != tile_size or arr.shape[1] != tile_size:
                raise TileLoadError(
                    f"{img_path}: expected {tile_size}x{tile_size}, got "
                    f"{arr.shape[1]}x{arr.shape[0]}"
                )
            image = np.ascontiguousarray(arr.transpose(2, 0, 1)) / 255.0
            mask_path = root / "masks" / name / img_path.name
            mask = None
            if mask_path.is_file():
                gray = np.asarray(Image.open(mask_path).convert("L"))
                if gray.shape != (tile_size, tile_size):
                    raise TileLoadError(
                        f"{mask_path}: mask dims {gray.shape} do not match "
                        f"tile size {tile_size}"
                    )
                mask = (gray > 127).astype(np.uint8)
            elif split in (SPLIT_SOURCE_TRAIN, SPLIT_SOURCE_VAL):
                raise TileLoadError(f"missing mask for source tile: {mask_path}")
            tiles.append(
                Tile(image=image, mask=mask, region_id=rid, tile_id=img_path.stem)
            )
    tiles.sort(key=lambda t: (t.region_id, t.tile_id))
    regions = [RegionSpec(region_id=rid, name=name) for rid, name in region_entries]
    return TileSet(tiles=tiles, split=split, regions=regions)
