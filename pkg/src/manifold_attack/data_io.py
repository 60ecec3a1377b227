"""Toy face corpus: parametric renderer, algebraic AU read-back, CSV ingestion.

The renderer draws a stylized face whose expression is controlled by an AU
vector through two channels:

* geometry (brow height, eyelid opening, nose wrinkle shading, mouth curve
  and opening) confined to three landmark boxes (eyes, nose, mouth), and
* N small multiplicative shading sites on the forehead and cheeks, one per AU
  component, with pixel value skin * (1 - 0.5 * mu_n), plus one untouched
  reference site.

Site positions depend only on the image size, never on identity or AU, so an
algebraic oracle can recover mu exactly from a clean render and approximately
from a generated image. Identity varies colors and minor feature sizes only.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .au_space import AUSpaceConfig, AUVector, preset, validate_au
from .errors import (
    DatasetTooSmall,
    DimensionMismatch,
    EmptyInput,
    FitFailed,
    MalformedRow,
    MissingImage,
    MissingLandmarks,
    MissingRegion,
    NoSurvivors,
    OutOfRange,
)

BACKGROUND_GRAY = 0.92
SHADE_GAIN = 0.5  # site pixel = skin * (1 - SHADE_GAIN * mu_n)

REGION_NAMES = ("eyes", "nose", "mouth")
# (x0, y0, x1, y1) at the 64px reference size; x1/y1 exclusive
_REGION_BOXES_64 = {
    "eyes": (8, 15, 56, 29),
    "nose": (24, 29, 40, 44),
    "mouth": (16, 41, 48, 58),
}
# local editor / local loss crop targets, (height, width)
REGION_CROP_SIZES = {"eyes": (16, 32), "nose": (16, 16), "mouth": (16, 32)}

_SITE_ROW_FRACTIONS = (9 / 64, 12 / 64, 31 / 64, 34 / 64, 37 / 64)


def region_boxes(size: int) -> dict:
    """Landmark boxes scaled to a square image of the given size."""
    out = {}
    for name, (x0, y0, x1, y1) in _REGION_BOXES_64.items():
        out[name] = (
            int(round(x0 * size / 64)),
            int(round(y0 * size / 64)),
            int(round(x1 * size / 64)),
            int(round(y1 * size / 64)),
        )
    return out


def _face_ellipse(size: int):
    return size / 2.0, 33 / 64 * size, 24 / 64 * size, 29 / 64 * size


def enumerate_au_sites(size: int) -> list:
    """Candidate shading sites for an image size, as (x, y, side) top-left corners.

    Index 0 is the reference site; AU component n reads site n + 1. The layout
    is a pure function of size: rows on the forehead and cheeks, sites kept
    clear of the face boundary and of all landmark boxes.
    """
    f = size / 64.0
    side = max(2, int(round(2 * f)))
    step = max(side + 1, int(round(3 * f)))
    guard = int(math.ceil(f))
    cx, cy, rx, ry = _face_ellipse(size)
    shrink = 2.5 * f
    boxes = region_boxes(size).values()

    def inside_face(px, py):
        return ((px - cx) / (rx - shrink)) ** 2 + ((py - cy) / (ry - shrink)) ** 2 <= 1.0

    def clear_of_boxes(x, y):
        gx0, gy0 = x - guard, y - guard
        gx1, gy1 = x + side + guard, y + side + guard
        for bx0, by0, bx1, by1 in boxes:
            if gx0 < bx1 and gx1 > bx0 and gy0 < by1 and gy1 > by0:
                return False
        return True

    sites = []
    for frac in _SITE_ROW_FRACTIONS:
        y = int(round(frac * size))
        for x in range(0, size - side):
            if (x - (size // 2)) % step != 0:
                continue
            corners_ok = all(
                inside_face(px + 0.5, py + 0.5)
                for px in (x, x + side - 1)
                for py in (y, y + side - 1)
            )
            if corners_ok and clear_of_boxes(x, y):
                sites.append((x, y, side))
    return sites


@dataclass(frozen=True)
class IdentityParams:
    """Per-identity appearance knobs; everything positional stays fixed."""

    skin: tuple
    brow_color: tuple
    iris_color: tuple
    lip_color: tuple
    eye_rx: float
    brow_thickness: float
    mouth_halfwidth: float
    nose_rx: float
    nose_ry: float


def identity_params(seed: int, identity: int) -> IdentityParams:
    rng = np.random.default_rng([seed, identity])
    r = rng.uniform(0.62, 0.85)
    g = r * rng.uniform(0.78, 0.88)
    b = g * rng.uniform(0.60, 0.75)
    dark = rng.uniform(0.12, 0.30)
    iris = (rng.uniform(0.08, 0.45), rng.uniform(0.12, 0.40), rng.uniform(0.08, 0.50))
    lip = (rng.uniform(0.55, 0.75), rng.uniform(0.20, 0.35), rng.uniform(0.22, 0.38))
    return IdentityParams(
        skin=(r, g, b),
        brow_color=(dark, dark * 0.9, dark * 0.85),
        iris_color=iris,
        lip_color=lip,
        eye_rx=rng.uniform(4.2, 4.8),
        brow_thickness=rng.uniform(1.2, 2.0),
        mouth_halfwidth=rng.uniform(9.0, 11.0),
        nose_rx=rng.uniform(2.6, 3.4),
        nose_ry=rng.uniform(3.4, 4.2),
    )


def _expression_features(mu: np.ndarray):
    n = mu.shape[0]

    def g(i):
        return float(mu[i]) if i < n else 0.0

    brow = float(np.clip(0.5 * g(0) + 0.5 * g(1) - 0.9 * g(2), -1.0, 1.0))
    eye_open = float(np.clip(0.55 + 0.7 * g(3) - 0.45 * g(5) - 0.55 * g(16), 0.05, 1.3))
    nose_wrk = g(6)
    curve = float(np.clip(0.9 * g(8) + 0.25 * g(9) - 1.0 * g(10), -1.0, 1.0))
    openm = float(np.clip(0.45 * g(14) + 0.75 * g(15), 0.0, 1.15))
    return brow, eye_open, nose_wrk, curve, openm


def render_face(params: IdentityParams, au, size: int = 64) -> np.ndarray:
    """Draw one face as a float32 (3, size, size) array in [0, 1]."""
    mu = au.values if isinstance(au, AUVector) else np.asarray(au, dtype=np.float64)
    if np.any(mu < 0.0) or np.any(mu > 1.0):
        raise OutOfRange("AU components must lie in [0, 1] for rendering")
    sites = enumerate_au_sites(size)
    if len(sites) < mu.shape[0] + 1:
        raise OutOfRange(
            f"size {size} yields {len(sites)} shading sites; "
            f"need {mu.shape[0] + 1} for {mu.shape[0]} AU components"
        )
    f = size / 64.0
    img = np.full((3, size, size), BACKGROUND_GRAY, dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    px, py = xx + 0.5, yy + 0.5

    cx, cy, rx, ry = _face_ellipse(size)
    face = ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0
    for c in range(3):
        img[c][face] = params.skin[c]

    # shading sites: reference first, then one per AU component
    for n, (sx, sy, side) in enumerate(sites[: mu.shape[0] + 1]):
        factor = 1.0 if n == 0 else 1.0 - SHADE_GAIN * mu[n - 1]
        for c in range(3):
            img[c, sy:sy + side, sx:sx + side] = params.skin[c] * factor

    brow, eye_open, nose_wrk, curve, openm = _expression_features(mu)

    by = 19.0 * f - 2.2 * f * brow
    tb = params.brow_thickness * f
    for ex in (cx - 10.0 * f, cx + 10.0 * f):
        bar = (np.abs(px - ex) <= 4.5 * f) & (np.abs(py - by) <= tb / 2.0)
        for c in range(3):
            img[c][bar] = params.brow_color[c]

    ey = 23.0 * f
    ery = (1.0 + 2.6 * eye_open) * f
    erx = params.eye_rx * f
    for ex in (cx - 10.0 * f, cx + 10.0 * f):
        sclera = ((px - ex) / erx) ** 2 + ((py - ey) / ery) ** 2 <= 1.0
        for c in range(3):
            img[c][sclera] = 0.97
        ri = min(2.4 * f, 0.9 * ery)
        iris = (px - ex) ** 2 + (py - ey) ** 2 <= ri ** 2
        iris &= sclera
        for c in range(3):
            img[c][iris] = params.iris_color[c]

    nx, ny = cx, 38.0 * f
    nose = ((px - nx) / (params.nose_rx * f)) ** 2 + ((py - ny) / (params.nose_ry * f)) ** 2 <= 1.0
    shade = 0.86 - 0.25 * nose_wrk
    for c in range(3):
        img[c][nose] = params.skin[c] * shade

    my = 49.0 * f
    w = params.mouth_halfwidth * f
    u = (px - cx) / w
    y_line = my + 3.0 * f * curve * (1.0 - 2.0 * u ** 2)
    rym = (1.2 + 3.2 * openm) * f
    lips = (np.abs(u) <= 1.0) & (np.abs(py - y_line) <= rym)
    for c in range(3):
        img[c][lips] = params.lip_color[c]
    if openm > 0.3:
        inner = (np.abs(u) <= 0.82) & (np.abs(py - y_line) <= rym * 0.45)
        for c in range(3):
            img[c][inner] = (0.10, 0.06, 0.06)[c]

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def oracle_residual(image: np.ndarray, n_au: int) -> dict:
    """Diagnostics for how face-like an image is where the oracle reads it.

    Normalized terms (1.0 = at tolerance): background corners vs the fixed
    gray, reference-site uniformity, and AU estimates escaping the unit box.
    """
    img = np.asarray(image, dtype=np.float64)
    size = img.shape[-1]
    k = max(2, size // 21)
    corners = [
        img[:, :k, :k], img[:, :k, -k:], img[:, -k:, :k], img[:, -k:, -k:],
    ]
    bg = max(float(np.abs(c - BACKGROUND_GRAY).mean()) for c in corners)
    sx, sy, side = enumerate_au_sites(size)[0]
    ref_patch = img[:, sy:sy + side, sx:sx + side]
    ref_std = float(ref_patch.reshape(3, -1).std(axis=1).max())
    raw = _read_sites(img, n_au)
    box = float(np.maximum(raw - 1.0, 0.0).max(initial=0.0))
    box = max(box, float(np.maximum(-raw, 0.0).max(initial=0.0)))
    combined = max(bg / 0.15, ref_std / 0.08, box / 0.25)
    return {"background": bg, "reference_std": ref_std, "box_escape": box, "combined": combined}


def _read_sites(img: np.ndarray, n_au: int) -> np.ndarray:
    size = img.shape[-1]
    sites = enumerate_au_sites(size)
    if len(sites) < n_au + 1:
        raise OutOfRange(f"size {size} supports at most {len(sites) - 1} AU components")
    rx, ry, side = sites[0]
    ref = img[:, ry:ry + side, rx:rx + side].reshape(3, -1).mean(axis=1)
    if np.any(ref < 1e-3):
        raise FitFailed("reference site is black; cannot normalize shading reads")
    mu = np.empty(n_au)
    for n, (sx, sy, s) in enumerate(sites[1:n_au + 1]):
        patch = img[:, sy:sy + s, sx:sx + s].reshape(3, -1).mean(axis=1)
        mu[n] = float(np.mean(1.0 - patch / ref) / SHADE_GAIN)
    return mu


def toy_au_oracle(image, n_au: int, strict: bool = True) -> AUVector:
    """Recover the AU vector from the shading sites of a rendered face.

    Exact on clean renders. With strict=True, refuses images whose residuals
    say the read is meaningless; with strict=False, clips the estimate to the
    unit box so generated images can still be scored.
    """
    img = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] != img.shape[2]:
        raise DimensionMismatch(f"expected (3, S, S) image, got shape {img.shape}")
    res = oracle_residual(img, n_au)
    if strict and res["combined"] > 1.0:
        worst = max(("background", "reference_std", "box_escape"), key=lambda k: res[k])
        raise FitFailed(
            f"image too far from the face family to read AUs "
            f"(combined residual {res['combined']:.3f}, worst term {worst})"
        )
    mu = _read_sites(img.astype(np.float64), n_au)
    return AUVector(np.clip(mu, 0.0, 1.0))


@dataclass
class FaceImage:
    filename: str
    identity: int
    image: np.ndarray  # (3, S, S) float32 in [0, 1]
    au: AUVector
    confidence: float
    regions: dict = field(default_factory=dict)


@dataclass
class FaceDataset:
    images: list
    image_size: int
    au_dim: int

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        return self.images[idx]

    def identities(self):
        return sorted({im.identity for im in self.images})


def as_arrays(dataset: FaceDataset):
    """Stack a dataset into (images, aus, identities) arrays."""
    if not dataset.images:
        raise EmptyInput("dataset has no images")
    imgs = np.stack([im.image for im in dataset.images]).astype(np.float32)
    aus = np.stack([im.au.values for im in dataset.images]).astype(np.float32)
    ids = np.array([im.identity for im in dataset.images], dtype=np.int64)
    return imgs, aus, ids


def split_dataset(dataset: FaceDataset, holdout_fraction: float = 0.1, seed: int = 0):
    """Shuffle and split into (train, holdout); holdout gets at least one image."""
    if not (0.0 < holdout_fraction < 1.0):
        raise OutOfRange(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    m = len(dataset)
    if m < 2:
        raise DatasetTooSmall(f"cannot split a dataset of {m} image(s)")
    order = np.random.default_rng(seed).permutation(m)
    n_hold = max(1, int(round(m * holdout_fraction)))
    hold_idx = set(order[:n_hold].tolist())
    train = [dataset.images[i] for i in range(m) if i not in hold_idx]
    hold = [dataset.images[i] for i in range(m) if i in hold_idx]
    mk = lambda ims: FaceDataset(ims, dataset.image_size, dataset.au_dim)
    return mk(train), mk(hold)


def crop_region(image: np.ndarray, box, out_hw=None) -> np.ndarray:
    """Crop (x0, y0, x1, y1) from a (3, S, S) array, optionally resized."""
    x0, y0, x1, y1 = box
    s = image.shape[-1]
    if not (0 <= x0 < x1 <= s and 0 <= y0 < y1 <= s):
        raise MissingRegion(f"box {box} does not fit a {s}x{s} image")
    patch = image[:, y0:y1, x0:x1]
    if out_hw is None:
        return patch
    t = torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32)).unsqueeze(0)
    t = F.interpolate(t, size=out_hw, mode="bilinear", align_corners=False)
    return t.squeeze(0).numpy()


def crop_region_t(batch: torch.Tensor, box, out_hw) -> torch.Tensor:
    """Differentiable crop+resize of a (B, 3, S, S) batch to (B, 3, h, w)."""
    x0, y0, x1, y1 = box
    s = batch.shape[-1]
    if not (0 <= x0 < x1 <= s and 0 <= y0 < y1 <= s):
        raise MissingRegion(f"box {box} does not fit a {s}x{s} batch")
    patch = batch[:, :, y0:y1, x0:x1]
    return F.interpolate(patch, size=out_hw, mode="bilinear", align_corners=False)


def save_image_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr8 = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr8, mode="RGB").save(path)


def load_image_png(path) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingImage(f"image file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _identity_from_filename(filename: str) -> int:
    stem = os.path.basename(filename).split(".")[0]
    if stem.startswith("id") and "_" in stem:
        head = stem[2:].split("_")[0]
        if head.isdigit():
            return int(head)
    return -1


def synthesize_dataset(
    n_identities: int,
    per_identity: int,
    au_config: AUSpaceConfig,
    size: int = 64,
    seed: int = 0,
    expression_strength=(0.35, 1.0),
    jitter_sigma: float = 0.03,
) -> FaceDataset:
    """Render a corpus: per identity, one neutral face plus random expressions.

    Non-neutral draws pick a preset, scale it by a random strength, and add
    clipped Gaussian jitter so AU labels cover the box near plausible codes.
    """
    if n_identities < 1 or per_identity < 1:
        raise DatasetTooSmall("need at least one identity and one image per identity")
    rng = np.random.default_rng(seed)
    names = [n for n in au_config.preset_table if n != "neutral"]
    boxes = region_boxes(size)
    images = []
    for ident in range(n_identities):
        params = identity_params(seed, ident)
        for j in range(per_identity):
            if j == 0:
                mu = np.zeros(au_config.dimension)
            else:
                base = preset(names[int(rng.integers(len(names)))], au_config).as_array()
                mu = base * rng.uniform(*expression_strength)
                mu = np.clip(mu + rng.normal(0.0, jitter_sigma, mu.shape), 0.0, 1.0)
            au = AUVector(mu)
            img = render_face(params, au, size)
            images.append(
                FaceImage(
                    filename=f"id{ident:04d}_{j:03d}.png",
                    identity=ident,
                    image=img,
                    au=au,
                    confidence=1.0,
                    regions=dict(boxes),
                )
            )
    return FaceDataset(images, size, au_config.dimension)


def render_expression_image(
    identity: int, expression: str, au_config: AUSpaceConfig, size: int = 64, seed: int = 0
) -> np.ndarray:
    """Ground-truth render of one identity wearing a named expression."""
    return render_face(identity_params(seed, identity), preset(expression, au_config), size)


def save_dataset(dataset: FaceDataset, out_dir) -> None:
    """Write images plus labels.csv and landmarks.csv under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    n = dataset.au_dim
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["filename"] + [f"au_{i + 1}" for i in range(n)] + ["confidence"])
        for im in dataset.images:
            wr.writerow([im.filename] + [f"{v:.6g}" for v in im.au.values] + [f"{im.confidence:.4g}"])
    with open(os.path.join(out_dir, "landmarks.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["filename", "region", "x0", "y0", "x1", "y1"])
        for im in dataset.images:
            for name in REGION_NAMES:
                x0, y0, x1, y1 = im.regions[name]
                wr.writerow([im.filename, name, x0, y0, x1, y1])
    for im in dataset.images:
        save_image_png(im.image, os.path.join(out_dir, im.filename))


def load_dataset(
    data_dir,
    au_config: AUSpaceConfig,
    confidence_min: float = 0.95,
    au_input_scale: float = 1.0,
) -> FaceDataset:
    """Read a corpus written by save_dataset (or hand-prepared to match).

    labels.csv rows: filename, au_1..au_N, confidence. AU values are divided
    by au_input_scale before validation, for label sources on other scales.
    Rows below confidence_min are dropped; dropping everything is an error.
    """
    labels_path = os.path.join(data_dir, "labels.csv")
    lm_path = os.path.join(data_dir, "landmarks.csv")
    if not os.path.exists(labels_path):
        raise MissingImage(f"labels.csv not found in {data_dir}")
    if not os.path.exists(lm_path):
        raise MissingLandmarks(f"landmarks.csv not found in {data_dir}")

    marks = {}
    with open(lm_path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or (i == 0 and row[0] == "filename"):
                continue
            if len(row) != 6:
                raise MalformedRow(f"landmarks.csv row {i + 1}: expected 6 fields, got {len(row)}")
            fn, name = row[0], row[1]
            try:
                box = tuple(int(v) for v in row[2:])
            except ValueError:
                raise MalformedRow(f"landmarks.csv row {i + 1}: non-integer box") from None
            marks.setdefault(fn, {})[name] = box

    n = au_config.dimension
    images = []
    total = 0
    size = None
    with open(labels_path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or (i == 0 and row[0] == "filename"):
                continue
            if len(row) != n + 2:
                raise MalformedRow(
                    f"labels.csv row {i + 1}: expected {n + 2} fields "
                    f"(filename, {n} AU values, confidence), got {len(row)}"
                )
            fn = row[0]
            try:
                vals = np.array([float(v) for v in row[1:n + 1]]) / au_input_scale
                conf = float(row[n + 1])
            except ValueError:
                raise MalformedRow(f"labels.csv row {i + 1}: non-numeric field") from None
            total += 1
            if conf < confidence_min:
                continue
            try:
                au = validate_au(vals, au_config)
            except (OutOfRange, DimensionMismatch) as exc:
                raise MalformedRow(f"labels.csv row {i + 1}: {exc}") from None
            img = load_image_png(os.path.join(data_dir, fn))
            if img.shape[1] != img.shape[2]:
                raise MalformedRow(f"labels.csv row {i + 1}: image {fn} is not square")
            if size is None:
                size = img.shape[-1]
            elif img.shape[-1] != size:
                raise MalformedRow(f"labels.csv row {i + 1}: image size differs from the rest")
            if fn not in marks or any(r not in marks[fn] for r in REGION_NAMES):
                raise MissingLandmarks(f"{fn}: landmarks.csv lacks one of {REGION_NAMES}")
            images.append(
                FaceImage(fn, _identity_from_filename(fn), img, au, conf, dict(marks[fn]))
            )
    if total == 0:
        raise EmptyInput(f"labels.csv in {data_dir} has no data rows")
    if not images:
        raise NoSurvivors(
            f"all {total} rows fell below the confidence threshold {confidence_min}"
        )
    return FaceDataset(images, size, n)


def save_dataset_npz(dataset: FaceDataset, path) -> None:
    imgs, _, ids = as_arrays(dataset)
    aus = np.stack([im.au.values for im in dataset.images])
    boxes = np.array(
        [[dataset.images[0].regions[r][k] for k in range(4)] for r in REGION_NAMES],
        dtype=np.int64,
    )
    names = np.array([im.filename for im in dataset.images])
    np.savez_compressed(
        path, images=imgs, aus=aus, identities=ids, filenames=names, boxes=boxes
    )


def load_dataset_npz(path) -> FaceDataset:
    if not os.path.exists(path):
        raise MissingImage(f"dataset archive not found: {path}")
    z = np.load(path, allow_pickle=False)
    boxes = {r: tuple(int(v) for v in z["boxes"][k]) for k, r in enumerate(REGION_NAMES)}
    images = [
        FaceImage(
            str(z["filenames"][i]),
            int(z["identities"][i]),
            z["images"][i],
            AUVector(z["aus"][i]),
            1.0,
            dict(boxes),
        )
        for i in range(z["images"].shape[0])
    ]
    return FaceDataset(images, int(z["images"].shape[-1]), int(z["aus"].shape[1]))
