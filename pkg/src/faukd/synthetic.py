"""Parametric schematic-face dataset with correlated binary AU labels.

Each sample draws a face (ellipse, brows, eyes, nose, mouth) whose
geometry is controlled by up to six bilateral attributes, one per AU:

    0  brow raise      both brows shift up
    1  brow furrow     inner brow ends drop toward the nose
    2  eye widen       taller eye openings
    3  smile           mouth corners curve up
    4  mouth open      dark vertical opening
    5  mouth stretch   wider mouth

Attributes are bilateral on purpose: a horizontal flip leaves every label
unchanged, so flip augmentation is label-free. Latent attribute vectors
come from a correlated Gaussian (0.4 between consecutive AU pairs) and
are thresholded per AU, which gives both varied occurrence rates and the
co-occurrence structure the relational head feeds on. Subjects differ by
fixed style offsets. Everything is a pure function of the seed.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .masking import mix_seed

MAX_AUS = 6
_THRESHOLDS = (0.0, 0.25, -0.25, 0.15, -0.15, 0.1)  # per-AU latent cutoffs

# attribute ranges: (inactive, active, jitter std), pixels at 64px scale
_ATTRS = (
    (0.0, 3.5, 0.4),  # brow raise
    (0.0, 3.0, 0.4),  # brow furrow
    (1.4, 3.2, 0.25),  # eye half-height
    (0.0, 4.5, 0.4),  # smile curvature
    (0.7, 3.2, 0.25),  # mouth half-height
    (6.5, 10.0, 0.4),  # mouth half-width
)


def correlated_pairs(n_au: int) -> tuple[tuple[int, int], ...]:
    return tuple((2 * k, 2 * k + 1) for k in range(n_au // 2))


def sample_labels(n_samples: int, n_au: int, seed: int) -> np.ndarray:
    """Binary (n_samples, n_au) labels from a thresholded correlated Gaussian."""
    corr = np.eye(n_au)
    for a, b in correlated_pairs(n_au):
        corr[a, b] = corr[b, a] = 0.4
    chol = np.linalg.cholesky(corr)
    rng = np.random.Generator(np.random.PCG64(mix_seed(seed, 3)))
    z = rng.normal(size=(n_samples, n_au)) @ chol.T
    taus = np.array([_THRESHOLDS[i % len(_THRESHOLDS)] for i in range(n_au)])
    return (z > taus).astype(np.int64)


def _subject_style(seed: int, subject: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(mix_seed(seed, 1000 + subject)))
    skin = np.array([225, 195, 175]) + rng.integers(-18, 18, 3)
    return {
        "bg": tuple(int(200 + rng.integers(0, 35)) for _ in range(3)),
        "skin": tuple(int(v) for v in np.clip(skin, 150, 250)),
        "line": tuple(int(v) for v in rng.integers(20, 70, 3)),
        "rx": float(rng.uniform(20.0, 24.0)),
        "ry": float(rng.uniform(25.0, 28.0)),
        "eye_dx": float(rng.uniform(8.0, 11.0)),
        "eye_y": float(rng.uniform(25.0, 27.5)),
        "mouth_y": float(rng.uniform(43.5, 46.5)),
        "stroke": int(rng.integers(1, 3)),
    }


def _attr_values(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    vals = np.zeros(len(labels))
    for i, y in enumerate(labels):
        off, on, jit = _ATTRS[i]
        vals[i] = off + (on - off) * y + rng.normal(0.0, jit)
    return vals


def render_face(labels: np.ndarray, style: dict, sample_rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Draw one face as a (size, size, 3) uint8 array. Supersampled 2x."""
    n_au = len(labels)
    attrs = np.zeros(MAX_AUS)
    attrs[:] = [a[0] for a in _ATTRS]
    attrs[:n_au] = _attr_values(labels, sample_rng)
    jx, jy = sample_rng.normal(0.0, 0.6, 2)  # whole-face jitter

    s = 2  # supersampling factor
    img = Image.new("RGB", (size * s, size * s), style["bg"])
    d = ImageDraw.Draw(img)
    line, stroke = style["line"], style["stroke"] * s

    def xy(x, y):
        return ((x + jx) * s, (y + jy) * s)

    cx, cy = 32.0, 34.0
    rx, ry = style["rx"], style["ry"]
    d.ellipse([xy(cx - rx, cy - ry), xy(cx + rx, cy + ry)], fill=style["skin"], outline=line, width=stroke)

    brow_raise, furrow, eye_h, smile, mouth_h, mouth_w = attrs
    eye_y = style["eye_y"]
    for side in (-1, 1):
        ex = cx + side * style["eye_dx"]
        # eye: white opening with pupil
        d.ellipse([xy(ex - 4.5, eye_y - eye_h), xy(ex + 4.5, eye_y + eye_h)],
                  fill=(250, 250, 250), outline=line, width=stroke)
        d.ellipse([xy(ex - 1.3, eye_y - 1.3), xy(ex + 1.3, eye_y + 1.3)], fill=line)
        # brow: inner end toward the nose drops when furrowed
        by = eye_y - 7.0 - brow_raise
        inner, outer = ex - side * 5.0, ex + side * 5.0
        d.line([xy(inner, by + furrow), xy(outer, by)], fill=line, width=stroke)
    # nose
    d.line([xy(cx, cy - 3.0), xy(cx, cy + 4.5)], fill=line, width=stroke)

    my = style["mouth_y"]
    if mouth_h > 1.6:  # visibly open mouth
        d.ellipse([xy(cx - mouth_w * 0.8, my - mouth_h), xy(cx + mouth_w * 0.8, my + mouth_h)],
                  fill=(70, 25, 25), outline=line, width=stroke)
    pts = []
    for t in np.linspace(0.0, 1.0, 17):
        x = cx - mouth_w + 2.0 * mouth_w * t
        y = my - smile * 0.5 + smile * (2.0 * t - 1.0) ** 2  # corners up when smiling
        pts.append(xy(x, y))
    d.line(pts, fill=line, width=stroke, joint="curve")

    img = img.resize((size, size), Image.LANCZOS)
    return np.asarray(img)


def gen_synthetic_dataset(out_dir: str | Path, n_samples: int, n_subjects: int, seed: int,
                          n_au: int = 6, image_size: int = 64):
    """Render a dataset to disk: PNG images, labels CSV, and a stats file.

    Returns the loaded manifest. Subjects are assigned round-robin so the
    subject-disjoint folds stay balanced.
    """
    from .data import load_manifest

    if n_subjects < 3 or n_samples < n_subjects:
        raise ValueError("need n_samples >= n_subjects >= 3")
    if not (4 <= n_au <= MAX_AUS):
        raise ValueError(f"au count must lie in [4, {MAX_AUS}]")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    labels = sample_labels(n_samples, n_au, seed)
    styles = [_subject_style(seed, s) for s in range(n_subjects)]

    mean_acc = np.zeros(3)
    rows = []
    for i in range(n_samples):
        subject = i % n_subjects
        rng = np.random.Generator(np.random.PCG64(mix_seed(seed, 2000 + i)))
        arr = render_face(labels[i], styles[subject], rng, image_size)
        name = f"img_{i:05d}.png"
        Image.fromarray(arr).save(out / "images" / name)
        mean_acc += arr.reshape(-1, 3).mean(axis=0) / 255.0
        rows.append([name, f"s{subject:02d}"] + labels[i].tolist())

    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "subject"] + [f"au_{k + 1}" for k in range(n_au)])
        writer.writerows(rows)
    means = mean_acc / n_samples
    with open(out / "meta.txt", "w") as fh:
        fh.write(f"image_size = {image_size}\n")
        fh.write(f"au_count = {n_au}\n")
        fh.write(f"n_samples = {n_samples}\n")
        fh.write(f"n_subjects = {n_subjects}\n")
        fh.write(f"seed = {seed}\n")
        for ch, v in zip("rgb", means):
            fh.write(f"channel_mean_{ch} = {float(v)!r}\n")
    return load_manifest(out)
