"""Occlusion masks on patch grids: random scatter and contiguous blocks.

A mask lives on the patch grid of an image (grid_h x grid_w patches of
patch_size pixels). Generation is a pure function of (grid, ratio, seed),
so masks are reproducible independent of who asks for them.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

_U64 = (1 << 64) - 1


def mix_seed(*parts: int) -> int:
    """Stable splitmix-style hash of integers onto a 64-bit seed."""
    x = 0x9E3779B97F4A7C15
    for p in parts:
        x = (x ^ (int(p) & _U64)) & _U64
        x = (x * 0xBF58476D1CE4E5B9) & _U64
        x ^= x >> 31
        x = (x * 0x94D049BB133111EB) & _U64
        x ^= x >> 29
    return x


@dataclass(frozen=True)
class MaskSpec:
    """Exact occlusion ground truth for one image."""

    grid_h: int
    grid_w: int
    patch_size: int
    masked: tuple[int, ...]  # sorted patch indices, row-major
    kind: str  # "random" | "block"
    seed: int
    ratio: float

    def __post_init__(self):
        p = self.grid_h * self.grid_w
        if any(i < 0 or i >= p for i in self.masked):
            raise ValueError("masked index out of range")
        if list(self.masked) != sorted(set(self.masked)):
            raise ValueError("masked indices must be sorted and unique")
        if self.kind not in ("random", "block"):
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def visible(self) -> tuple[int, ...]:
        m = set(self.masked)
        return tuple(i for i in range(self.n_patches) if i not in m)

    def patch_mask(self) -> np.ndarray:
        """Boolean (P,) array, True at masked patches."""
        out = np.zeros(self.n_patches, dtype=bool)
        out[list(self.masked)] = True
        return out

    def pixel_mask(self) -> np.ndarray:
        """Boolean (H, W) array, True at masked pixels."""
        pm = self.patch_mask().reshape(self.grid_h, self.grid_w)
        return np.kron(pm, np.ones((self.patch_size, self.patch_size), dtype=bool))


def empty_mask(grid_h: int, grid_w: int, patch_size: int, seed: int = 0) -> MaskSpec:
    return MaskSpec(grid_h, grid_w, patch_size, (), "random", seed, 0.0)


def gen_random_mask(grid_h: int, grid_w: int, ratio: float, seed: int, patch_size: int = 16) -> MaskSpec:
    """Sample round(ratio * P) distinct patches uniformly without replacement."""
    if not (0.0 <= ratio < 1.0):
        raise ValueError(f"random mask ratio must lie in [0, 1), got {ratio}")
    p = grid_h * grid_w
    count = int(round(ratio * p))
    rng = np.random.Generator(np.random.PCG64(seed))
    masked = tuple(sorted(rng.choice(p, size=count, replace=False).tolist())) if count else ()
    return MaskSpec(grid_h, grid_w, patch_size, masked, "random", seed, ratio)


def gen_block_mask(grid_h: int, grid_w: int, ratio: float, seed: int, patch_size: int = 16) -> MaskSpec:
    """One axis-aligned rectangle of patches covering ~ratio of the grid.

    The rectangle aspect ratio h/w is sampled in [0.5, 2]; the area must
    land within 5% of ratio * P or generation fails with diagnostics.
    """
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"block mask ratio must lie in (0, 1), got {ratio}")
    p = grid_h * grid_w
    target = ratio * p
    tol = 0.05 * target
    rng = np.random.Generator(np.random.PCG64(seed))
    aspect = rng.uniform(0.5, 2.0)

    # candidate rectangles near the sampled aspect, best area match first
    candidates = []
    for h in range(1, grid_h + 1):
        for w in range(1, grid_w + 1):
            if not (0.5 <= h / w <= 2.0):
                continue
            if abs(h * w - target) <= tol:
                candidates.append((abs(h * w - target), abs(h / w - aspect), h, w))
    if not candidates:
        raise ValueError(
            f"no {grid_h}x{grid_w} rectangle with aspect in [0.5, 2] covers "
            f"{target:.1f} +/- {tol:.1f} patches (ratio {ratio})"
        )
    candidates.sort()
    _, _, h, w = candidates[0]
    top = int(rng.integers(0, grid_h - h + 1))
    left = int(rng.integers(0, grid_w - w + 1))
    masked = tuple(
        r * grid_w + c for r in range(top, top + h) for c in range(left, left + w)
    )
    return MaskSpec(grid_h, grid_w, patch_size, masked, "block", seed, ratio)


def gen_mask(kind: str, grid_h: int, grid_w: int, ratio: float, seed: int, patch_size: int) -> MaskSpec:
    if ratio == 0.0:
        return empty_mask(grid_h, grid_w, patch_size, seed)
    if kind == "random":
        return gen_random_mask(grid_h, grid_w, ratio, seed, patch_size)
    if kind == "block":
        return gen_block_mask(grid_h, grid_w, ratio, seed, patch_size)
    raise ValueError(f"unknown mask kind {kind!r}")


def apply_mask(image: np.ndarray, spec: MaskSpec, fill: np.ndarray) -> np.ndarray:
    """Replace pixels of masked patches by per-channel fill values.

    Unmasked pixels are returned bit-identical. Accepts (H, W, C) arrays.
    """
    h, w = image.shape[0], image.shape[1]
    if h != spec.grid_h * spec.patch_size or w != spec.grid_w * spec.patch_size:
        raise ValueError(
            f"image {h}x{w} does not match mask grid "
            f"{spec.grid_h}x{spec.grid_w} of {spec.patch_size}px patches"
        )
    out = image.copy()
    if spec.masked:
        pix = spec.pixel_mask()
        out[pix] = np.asarray(fill, dtype=image.dtype)
    return out


def serialize_mask(spec: MaskSpec) -> str:
    masked = ",".join(str(i) for i in spec.masked)
    return (
        f"mask kind={spec.kind} grid_h={spec.grid_h} grid_w={spec.grid_w} "
        f"patch={spec.patch_size} ratio={spec.ratio!r} seed={spec.seed} masked={masked}"
    )


def parse_mask(text: str) -> MaskSpec:
    """Inverse of serialize_mask; validates ranges and block rectangularity."""
    tokens = text.strip().split()
    if not tokens or tokens[0] != "mask":
        raise ValueError("mask record must start with 'mask'")
    fields: dict[str, str] = {}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise ValueError(f"malformed mask field {tok!r}")
        key, val = tok.split("=", 1)
        fields[key] = val
    try:
        spec = MaskSpec(
            grid_h=int(fields["grid_h"]),
            grid_w=int(fields["grid_w"]),
            patch_size=int(fields["patch"]),
            masked=tuple(int(i) for i in fields["masked"].split(",")) if fields["masked"] else (),
            kind=fields["kind"],
            seed=int(fields["seed"]),
            ratio=float(fields["ratio"]),
        )
    except KeyError as exc:
        raise ValueError(f"mask record missing field {exc}") from exc
    if spec.kind == "block" and spec.masked:
        _check_rectangle(spec)
    return spec


def _check_rectangle(spec: MaskSpec) -> None:
    rows = sorted({i // spec.grid_w for i in spec.masked})
    cols = sorted({i % spec.grid_w for i in spec.masked})
    want = {r * spec.grid_w + c for r in rows for c in cols}
    contiguous = rows == list(range(rows[0], rows[-1] + 1)) and cols == list(range(cols[0], cols[-1] + 1))
    if not contiguous or want != set(spec.masked):
        raise ValueError("block mask does not form one axis-aligned rectangle")
