"""Procedural training corpus, degradation pipeline, metrics, image IO.

Four generator families double as class labels: linear gradients,
checkerboards, star polygons, and Gabor patches.  Every image is float in
[0,1], channels last.  The degradation that manufactures LR inputs is
blur, bicubic downsample, additive Gaussian noise, clamp, in that order;
negative-quality training targets get a separate, harsher degradation of
the HR image itself.

PSNR/SSIM follow the usual conventions: PSNR is capped at 99 dB for
near-identical pairs, SSIM runs on BT.601 luma under an 11x11 Gaussian
window with sigma 1.5 and reflect padding.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .numerics import Rng
from .resample import bicubic_resize, center_crop, gaussian_blur

CLASS_NAMES = ("gradient", "checker", "polygon", "gabor")

# -- generators -----------------------------------------------------------------


def _grid(size: int):
    xs = (np.arange(size) + 0.5) / size
    return np.meshgrid(xs, xs, indexing="ij")


def _gen_gradient(size: int, rng: Rng) -> np.ndarray:
    gy, gx = _grid(size)
    theta = float(rng.uniform(()) * 2.0 * np.pi)
    t = gx * np.cos(theta) + gy * np.sin(theta)
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    c0 = rng.uniform((3,)) * 0.7 + 0.25
    c1 = rng.uniform((3,)) * 0.7 + 0.25
    return c0 + t[..., None] * (c1 - c0)


def _gen_checker(size: int, rng: Rng) -> np.ndarray:
    ss = 2  # supersample for soft edges
    n = size * ss
    cell = int(rng.integers(8, 21, ())) * ss
    oy = int(rng.integers(0, cell, ()))
    ox = int(rng.integers(0, cell, ()))
    iy = (np.arange(n) + oy) // cell
    ix = (np.arange(n) + ox) // cell
    parity = (iy[:, None] + ix[None, :]) % 2
    c0 = rng.uniform((3,)) * 0.7 + 0.05
    c1 = rng.uniform((3,)) * 0.7 + 0.05
    big = np.where(parity[..., None] == 0, c0, c1)
    return big.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))


def _gen_polygon(size: int, rng: Rng) -> np.ndarray:
    ss = 2
    n = size * ss
    gy, gx = _grid(n)
    # soft background ramp
    bg0 = rng.uniform((3,)) * 0.4 + 0.1
    bg1 = rng.uniform((3,)) * 0.4 + 0.1
    img = bg0 + gy[..., None] * (bg1 - bg0)
    # star-shaped polygon: vertices in polar form, straight chords between them
    k = int(rng.integers(3, 7, ()))
    angles = np.sort(rng.uniform((k,)) * 2.0 * np.pi)
    radii = rng.uniform((k,)) * 0.25 + 0.18
    cy = 0.5 + (float(rng.uniform(())) - 0.5) * 0.2
    cx = 0.5 + (float(rng.uniform(())) - 0.5) * 0.2
    phi = np.arctan2(gy - cy, gx - cx)
    rho = np.hypot(gy - cy, gx - cx)
    edge = np.empty_like(phi)
    for v in range(k):
        a1, a2 = angles[v], angles[(v + 1) % k]
        r1, r2 = radii[v], radii[(v + 1) % k]
        span = (a2 - a1) % (2.0 * np.pi)
        rel = (phi - a1) % (2.0 * np.pi)
        sel = rel <= span
        denom = r1 * np.sin(rel) + r2 * np.sin(span - rel)
        with np.errstate(divide="ignore", invalid="ignore"):
            chord = r1 * r2 * np.sin(span) / denom
        edge[sel] = chord[sel]
    fill = rng.uniform((3,)) * 0.7 + 0.2
    img = np.where((rho < edge)[..., None], fill, img)
    return img.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))


def _gen_gabor(size: int, rng: Rng) -> np.ndarray:
    gy, gx = _grid(size)
    theta = float(rng.uniform(()) * np.pi)
    wavelength = (float(rng.uniform(())) * 16.0 + 12.0) / size
    phase = float(rng.uniform(()) * 2.0 * np.pi)
    sigma = float(rng.uniform(())) * 0.2 + 0.25
    cy = 0.5 + (float(rng.uniform(())) - 0.5) * 0.3
    cx = 0.5 + (float(rng.uniform(())) - 0.5) * 0.3
    carrier = np.cos(2.0 * np.pi * ((gx - cx) * np.cos(theta) + (gy - cy) * np.sin(theta)) / wavelength + phase)
    envelope = np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2.0 * sigma**2))
    wave = 0.5 * carrier * envelope
    base = rng.uniform((3,)) * 0.5 + 0.25
    tint = rng.uniform((3,)) * 0.6 - 0.3
    return base + wave[..., None] * tint


_GENERATORS = (_gen_gradient, _gen_checker, _gen_polygon, _gen_gabor)


def generate_image(class_id: int, size: int, rng: Rng) -> np.ndarray:
    """One procedural image of the given class, (size, size, 3) in [0,1]."""
    img = _GENERATORS[class_id](size, rng)
    return np.clip(img, 0.0, 1.0)


def preprocess(img: np.ndarray, out_size: int) -> np.ndarray:
    """Resize to 1.25x the target (bicubic), then crop the central square."""
    side = int(round(out_size * 1.25))
    resized = bicubic_resize(img, (side, side))
    return np.clip(center_crop(resized, (out_size, out_size)), 0.0, 1.0)


# -- degradation ------------------------------------------------------------------


def degrade(hr: np.ndarray, rng: Rng, *, factor: int = 4,
            blur_range: tuple[float, float] = (0.5, 1.5),
            noise_range: tuple[float, float] = (0.01, 0.05)) -> np.ndarray:
    """HR -> LR: Gaussian blur, bicubic 1/factor, Gaussian noise, clamp."""
    sigma = float(rng.uniform(())) * (blur_range[1] - blur_range[0]) + blur_range[0]
    noise = float(rng.uniform(())) * (noise_range[1] - noise_range[0]) + noise_range[0]
    h, w = hr.shape[-3], hr.shape[-2]
    lr = gaussian_blur(hr, sigma)
    lr = bicubic_resize(lr, (h // factor, w // factor))
    lr = lr + rng.normal(lr.shape) * noise
    return np.clip(lr, 0.0, 1.0)


def degrade_strong(hr: np.ndarray, rng: Rng) -> np.ndarray:
    """Same-resolution quality collapse for negative training targets."""
    sigma = float(rng.uniform(())) * 1.0 + 1.5
    noise = float(rng.uniform(())) * 0.06 + 0.06
    h, w = hr.shape[-3], hr.shape[-2]
    out = gaussian_blur(hr, sigma)
    out = bicubic_resize(out, (h // 2, w // 2))
    out = bicubic_resize(out, (h, w))
    out = out + rng.normal(out.shape) * noise
    return np.clip(out, 0.0, 1.0)


# -- metrics -----------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0, cap: float = 99.0) -> float:
    """10 log10(peak^2 / MSE), capped for (near-)identical inputs."""
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * np.log10(peak * peak / mse))


def luma(img: np.ndarray) -> np.ndarray:
    """BT.601: 0.299 R + 0.587 G + 0.114 B."""
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def _gauss_window_1d(radius: int = 5, sigma: float = 1.5) -> np.ndarray:
    off = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (off / sigma) ** 2)
    return k / k.sum()


def _filter2d(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    radius = (len(k) - 1) // 2
    xp = np.pad(x, radius, mode="reflect")
    out = np.zeros_like(x)
    for i, w in enumerate(k):
        out += w * xp[i : i + x.shape[0], radius : radius + x.shape[1]]
    out2 = np.zeros_like(x)
    xp2 = np.pad(out, ((0, 0), (radius, radius)), mode="reflect")
    for j, w in enumerate(k):
        out2 += w * xp2[:, j : j + x.shape[1]]
    return out2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM on luma, 11x11 Gaussian window sigma 1.5, reflect padding."""
    x = luma(a.astype(np.float64)) if a.ndim == 3 else a.astype(np.float64)
    y = luma(b.astype(np.float64)) if b.ndim == 3 else b.astype(np.float64)
    c1, c2 = 0.01**2, 0.03**2
    k = _gauss_window_1d()
    mx = _filter2d(x, k)
    my = _filter2d(y, k)
    mxx = _filter2d(x * x, k)
    myy = _filter2d(y * y, k)
    mxy = _filter2d(x * y, k)
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


# -- image files --------------------------------------------------------------------


class ImageError(Exception):
    """Unreadable or malformed image file."""


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


def write_png(path: str, img: np.ndarray):
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_png(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return from_uint8(np.asarray(im.convert("RGB")))
    except (OSError, ValueError) as exc:
        raise ImageError(f"{path}: {exc}") from exc


def write_ppm(path: str, img: np.ndarray):
    """Binary P6, maxval 255."""
    data = to_uint8(img)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path: str, img: np.ndarray):
    """Binary P5, maxval 255; color input is converted to luma."""
    data = to_uint8(luma(img) if img.ndim == 3 else img)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_pnm_tokens(blob: bytes, path: str, count: int) -> tuple[list[bytes], int]:
    """First `count` whitespace/comment-delimited header tokens and the
    offset of the byte right after the single whitespace ending the last one."""
    tokens: list[bytes] = []
    pos = 0
    n = len(blob)
    while len(tokens) < count:
        while pos < n and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos : pos + 1] == b"#":
            while pos < n and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError(f"{path}: truncated header at byte {pos}")
        tokens.append(blob[start:pos])
        if len(tokens) == count:
            if pos >= n:
                raise ImageError(f"{path}: missing pixel data at byte {pos}")
            pos += 1  # exactly one whitespace byte after maxval
    return tokens, pos


def read_pnm(path: str) -> np.ndarray:
    """Binary PPM (P6) or PGM (P5); returns (h, w, 3) or (h, w) float."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 2 or blob[:2] not in (b"P5", b"P6"):
        raise ImageError(f"{path}: not a binary PGM/PPM (bad magic at byte 0)")
    channels = 3 if blob[:2] == b"P6" else 1
    tokens, offset = _read_pnm_tokens(blob, path, 4)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ImageError(f"{path}: malformed header token before byte {offset}") from exc
    if maxval != 255:
        raise ImageError(f"{path}: unsupported maxval {maxval} (header ends at byte {offset})")
    need = w * h * channels
    if len(blob) - offset < need:
        raise ImageError(
            f"{path}: expected {need} pixel bytes at byte {offset}, found {len(blob) - offset}")
    raw = np.frombuffer(blob, dtype=np.uint8, count=need, offset=offset)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return from_uint8(raw.reshape(shape))


def read_image(path: str) -> np.ndarray:
    """PNG or binary PNM by extension; always (h, w, 3) float in [0,1]."""
    ext = os.path.splitext(path)[1].lower()
    if ext in (".ppm", ".pgm"):
        img = read_pnm(path)
        return np.repeat(img[..., None], 3, axis=-1) if img.ndim == 2 else img
    return read_png(path)


def write_image(path: str, img: np.ndarray):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        write_ppm(path, img)
    elif ext == ".pgm":
        write_pgm(path, img)
    else:
        write_png(path, img)


# -- corpus and manifest --------------------------------------------------------------


class ManifestError(Exception):
    """Malformed corpus manifest."""


def write_manifest(path: str, rows: list[tuple[str, int, int]]):
    """Rows of (relative path, class id, quality label), tab separated."""
    with open(path, "w", encoding="utf-8") as fh:
        for rel, class_id, quality in rows:
            fh.write(f"{rel}\t{class_id}\t{quality}\n")


def read_manifest(path: str) -> list[tuple[str, int, int]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                rows.append((parts[0], int(parts[1]), int(parts[2])))
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: non-integer field") from exc
    return rows


def build_corpus(out_dir: str, n_images: int, hr_size: int, seed: int,
                 val_count: int, neg_fraction: float = 0.15,
                 gen_size: int | None = None) -> tuple[str, str]:
    """Write HR PNGs plus train/val manifests; returns the manifest paths.

    Classes rotate round-robin so every family is equally represented.
    Validation rows are always positive quality; negative-quality rows
    (harsh targets for guidance training) only appear in the train split.
    """
    os.makedirs(out_dir, exist_ok=True)
    gen_size = gen_size or int(round(hr_size * 1.5))
    root = Rng(seed).stream("corpus")
    rows: list[tuple[str, int, int]] = []
    for i in range(n_images):
        class_id = i % len(CLASS_NAMES)
        rng = root.at_step(i)
        img = generate_image(class_id, gen_size, rng.stream("gen"))
        hr = preprocess(img, hr_size)
        name = f"img_{i:05d}_{CLASS_NAMES[class_id]}.png"
        write_png(os.path.join(out_dir, name), hr)
        rows.append((name, class_id, 1))
    if not 0 <= val_count <= n_images:
        raise ValueError("val_count out of range")
    val_rows = rows[-val_count:] if val_count else []
    train_rows = rows[: n_images - val_count]
    neg = Rng(seed).stream("labels")
    train_rows = [(name, cid, 0 if float(neg.at_step(i).uniform(())) < neg_fraction else 1)
                  for i, (name, cid, _) in enumerate(train_rows)]
    train_path = os.path.join(out_dir, "train.tsv")
    val_path = os.path.join(out_dir, "val.tsv")
    write_manifest(train_path, train_rows)
    write_manifest(val_path, val_rows)
    return train_path, val_path
