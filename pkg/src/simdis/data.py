"""Datasets on disk and the two-view augmentation pipeline.

On-disk layout, one directory per dataset under ``root``::

    <root>/<name>/meta.json     {"name", "num_classes", "image_size", "channels", "mean", "std"}
    <root>/<name>/train.npz     images: uint8 (N, H, W, C), labels: int64 (N,)
    <root>/<name>/eval.npz      same keys

Every augmentation draw for a training example is taken from a generator seeded
with ``(seed, epoch, index)``, so batch composition and worker count never change
what an example looks like.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import DataConfig


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    split: str = "train"
    image_size: int = 16
    num_classes: int = 10
    root: str = "data"
    max_examples: int = 0

    def __post_init__(self):
        if self.split not in ("train", "eval"):
            raise DataError(f"unknown split {self.split!r}")

    @classmethod
    def from_config(cls, cfg: DataConfig, split: str = "train") -> "DatasetSpec":
        return cls(
            name=cfg.name,
            split=split,
            image_size=cfg.image_size,
            num_classes=cfg.num_classes,
            root=cfg.root,
            max_examples=cfg.max_train if split == "train" else 0,
        )


@dataclass
class AugmentedPair:
    """Two augmented views of the same image(s).

    Tensors may be a single image (C, H, W) or a batch (B, C, H, W); ``index``
    holds dataset indices for batches.
    """

    v: torch.Tensor
    v_prime: torch.Tensor
    label: torch.Tensor | int
    index: Optional[torch.Tensor] = None

    def swapped(self) -> "AugmentedPair":
        return AugmentedPair(self.v_prime, self.v, self.label, self.index)

    def __len__(self) -> int:
        return self.v.shape[0] if self.v.dim() == 4 else 1


# --------------------------------------------------------------------------- corpora


def _render_shapes(n: int, size: int, num_classes: int, rng: np.random.Generator, palette: str = "colour"):
    """Anti-aliased glyphs on noisy backgrounds; class = glyph type.

    ``palette="colour"`` draws arbitrary foreground/background colours;
    ``"mono"`` uses a light glyph on a dark background with a faint tint.
    """
    if not 2 <= num_classes <= 10:
        raise DataError("shapes corpus supports 2..10 classes")
    ss = 4
    res = size * ss
    grid = (np.arange(res) + 0.5) / res * 2 - 1
    gx, gy = np.meshgrid(grid, grid)
    labels = rng.integers(0, num_classes, size=n)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    for i, lab in enumerate(labels):
        scale = rng.uniform(0.6, 0.85)
        cx, cy = rng.uniform(-0.15, 0.15, size=2)
        ang = rng.uniform(-0.25, 0.25)
        c, s = math.cos(ang), math.sin(ang)
        u = (c * (gx - cx) + s * (gy - cy)) / scale
        w = (-s * (gx - cx) + c * (gy - cy)) / scale
        r = np.hypot(u, w)
        au, aw = np.abs(u), np.abs(w)
        if lab == 0:
            mask = r < 1
        elif lab == 1:
            mask = np.maximum(au, aw) < 0.85
        elif lab == 2:
            mask = au + aw < 1.1
        elif lab == 3:
            mask = (w < 0.7) & (w > 1.6 * au - 0.9)
        elif lab == 4:
            mask = (r < 1) & (r > 0.55)
        elif lab == 5:
            mask = ((au < 0.3) & (aw < 1)) | ((aw < 0.3) & (au < 1))
        elif lab == 6:
            mask = (np.abs(u - w) < 0.4) & (r < 1.1) | (np.abs(u + w) < 0.4) & (r < 1.1)
        elif lab == 7:
            mask = (np.maximum(au, aw) < 0.9) & (np.maximum(au, aw) > 0.55)
        elif lab == 8:
            mask = (au < 1) & (np.abs(w - 0.5) < 0.22) | (au < 1) & (np.abs(w + 0.5) < 0.22)
        else:
            mask = (r < 1) & (w > 0)
        if palette == "mono":
            fg = rng.uniform(0.65, 0.95) + rng.uniform(-0.05, 0.05, size=3)
            bg = rng.uniform(0.05, 0.35) + rng.uniform(-0.05, 0.05, size=3)
        else:
            fg = rng.uniform(0.0, 1.0, size=3)
            bg = rng.uniform(0.0, 1.0, size=3)
            while np.abs(fg - bg).sum() < 0.6:
                bg = rng.uniform(0.0, 1.0, size=3)
        img = np.where(mask[..., None], fg, bg)
        img = img.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))
        img = img + rng.normal(0.0, 0.04, size=img.shape)
        images[i] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def _load_digits(size: int):
    from sklearn.datasets import load_digits

    d = load_digits()
    x = torch.from_numpy(d.images.astype(np.float32) / 16.0)[:, None]
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False).clamp(0, 1)
    x = x.repeat(1, 3, 1, 1).permute(0, 2, 3, 1).numpy()
    return np.round(x * 255).astype(np.uint8), d.target.astype(np.int64)


def fetch_dataset(
    name: str = "shapes",
    root: str | Path = "data",
    image_size: int = 16,
    num_classes: int = 10,
    n_train: int = 5000,
    n_eval: int = 1000,
    seed: int = 0,
    overwrite: bool = False,
) -> Path:
    """Materialise a corpus in the documented layout and return its directory.

    ``shapes`` is generated procedurally; ``digits`` is the 8x8 handwritten-digit
    set bundled with scikit-learn, resized to ``image_size``.
    """
    out = Path(root) / name
    if (out / "meta.json").exists() and not overwrite:
        return out
    rng = np.random.default_rng(seed)
    if name in ("shapes", "shapes_mono"):
        palette = "mono" if name == "shapes_mono" else "colour"
        x_tr, y_tr = _render_shapes(n_train, image_size, num_classes, rng, palette)
        x_ev, y_ev = _render_shapes(n_eval, image_size, num_classes, rng, palette)
    elif name == "digits":
        x, y = _load_digits(image_size)
        perm = rng.permutation(len(x))
        n_ev = len(x) // 5
        x_ev, y_ev = x[perm[:n_ev]], y[perm[:n_ev]]
        x_tr, y_tr = x[perm[n_ev:]], y[perm[n_ev:]]
        num_classes = 10
    else:
        raise DataError(f"no fetcher for dataset {name!r}; known: shapes, shapes_mono, digits")
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out / "train.npz", images=x_tr, labels=y_tr)
    np.savez_compressed(out / "eval.npz", images=x_ev, labels=y_ev)
    pixels = x_tr.reshape(-1, x_tr.shape[-1]).astype(np.float64) / 255.0
    meta = {
        "name": name,
        "num_classes": int(num_classes),
        "image_size": int(image_size),
        "channels": int(x_tr.shape[-1]),
        "mean": pixels.mean(0).tolist(),
        "std": pixels.std(0).tolist(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    return out


class ImageSet:
    """A split held in memory as float images in [0, 1]."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, mean, std, num_classes: int):
        if images.dim() != 4 or images.shape[-1] == 0 or images.shape[-2] == 0:
            raise DataError(f"expected (N, C, H, W) images, got {tuple(images.shape)}")
        self.images = images
        self.labels = labels
        self.mean = torch.as_tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
        self.std = torch.as_tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
        self.num_classes = num_classes

    def __len__(self) -> int:
        return self.images.shape[0]

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std


_CACHE: dict = {}


def load_split(spec: DatasetSpec) -> ImageSet:
    base = Path(spec.root) / spec.name
    path = base / f"{spec.split}.npz"
    if not path.exists() or not (base / "meta.json").exists():
        raise DataError(
            f"dataset {spec.name!r} not found under {spec.root!r}; "
            f"run `simdis fetch-data --name {spec.name} --root {spec.root}` first"
        )
    meta = json.loads((base / "meta.json").read_text())
    if meta["image_size"] != spec.image_size:
        raise DataError(f"{spec.name}: stored image_size {meta['image_size']} != configured {spec.image_size}")
    if meta["num_classes"] != spec.num_classes:
        raise DataError(f"{spec.name}: stored num_classes {meta['num_classes']} != configured {spec.num_classes}")
    key = (str(path.resolve()), path.stat().st_mtime_ns, spec.max_examples)
    if key in _CACHE:
        return _CACHE[key]
    with np.load(path) as z:
        images, labels = z["images"], z["labels"]
    if spec.max_examples and spec.max_examples < len(images):
        images, labels = images[: spec.max_examples], labels[: spec.max_examples]
    x = torch.from_numpy(images).permute(0, 3, 1, 2).float().div_(255.0).contiguous()
    ds = ImageSet(x, torch.from_numpy(labels).long(), meta["mean"], meta["std"], meta["num_classes"])
    _CACHE[key] = ds
    return ds


# --------------------------------------------------------------------------- augmentation

# Uniform draws consumed per view; fixed so the stream never depends on outcomes.
_DRAWS_PER_VIEW = 14


class Augmenter:
    """Random resized crop, flip, colour jitter, grayscale and blur, vectorised over a batch."""

    def __init__(self, cfg: DataConfig):
        self.cfg = cfg

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return rng.random(_DRAWS_PER_VIEW)

    def _params(self, u: np.ndarray):
        cfg, k = self.cfg, self.cfg.strength
        p = lambda prob: min(1.0, prob * k)  # noqa: E731
        lo = 1.0 - k * (1.0 - cfg.crop_scale[0])
        hi = 1.0 - k * (1.0 - cfg.crop_scale[1])
        lo = min(max(lo, 1e-3), 1.0)
        hi = min(max(hi, lo), 1.0)
        area = lo + (hi - lo) * u[:, 0]
        log_r = np.log(np.asarray(cfg.crop_ratio, dtype=np.float64)) * min(k, 1.0)
        ratio = np.exp(log_r[0] + (log_r[1] - log_r[0]) * u[:, 1])
        w = np.minimum(np.sqrt(area * ratio), 1.0)
        h = np.minimum(np.sqrt(area / ratio), 1.0)
        cx = (1.0 - w) * (2 * u[:, 2] - 1)
        cy = (1.0 - h) * (2 * u[:, 3] - 1)
        flip = np.where(u[:, 4] < p(cfg.flip_prob), -1.0, 1.0)
        jitter = u[:, 5] < p(cfg.jitter_prob)
        bri = 1 + cfg.brightness * k * (2 * u[:, 6] - 1)
        con = 1 + cfg.contrast * k * (2 * u[:, 7] - 1)
        sat = 1 + cfg.saturation * k * (2 * u[:, 8] - 1)
        gray = u[:, 9] < p(cfg.grayscale_prob)
        blur = u[:, 10] < p(cfg.blur_prob)
        sigma = 0.1 + 0.9 * u[:, 11]
        hue = cfg.hue * min(k, 1.0) * (2 * u[:, 12] - 1) * 2 * np.pi
        return w, h, cx, cy, flip, jitter, bri, con, sat, hue, gray, blur, sigma

    def apply(self, images: torch.Tensor, draws: np.ndarray) -> torch.Tensor:
        """Augment (B, C, H, W) images in [0, 1]; ``draws`` is (B, _DRAWS_PER_VIEW)."""
        x = images
        if self.cfg.strength == 0:
            return x.clone()
        w, h, cx, cy, flip, jitter, bri, con, sat, hue, gray, blur, sigma = self._params(draws)
        b = x.shape[0]
        theta = np.zeros((b, 2, 3))
        theta[:, 0, 0] = w * flip
        theta[:, 0, 2] = cx
        theta[:, 1, 1] = h
        theta[:, 1, 2] = cy
        identity = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        if not np.allclose(theta, identity, atol=0, rtol=0):
            th = torch.from_numpy(theta).to(x.dtype)
            grid = F.affine_grid(th, list(x.shape), align_corners=False)
            x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
        else:
            x = x.clone()

        if jitter.any() and x.shape[1] == 3:
            sel = torch.from_numpy(jitter).view(-1, 1, 1, 1)
            bri_t = torch.from_numpy(bri).to(x.dtype).view(-1, 1, 1, 1)
            con_t = torch.from_numpy(con).to(x.dtype).view(-1, 1, 1, 1)
            sat_t = torch.from_numpy(sat).to(x.dtype).view(-1, 1, 1, 1)
            y = (x * bri_t).clamp(0, 1)
            m = _luma(y).mean(dim=(2, 3), keepdim=True)
            y = ((y - m) * con_t + m).clamp(0, 1)
            g = _luma(y)
            y = (g + (y - g) * sat_t).clamp(0, 1)
            y = _rotate_hue(y, hue)
            x = torch.where(sel, y, x)
        if gray.any() and x.shape[1] == 3:
            sel = torch.from_numpy(gray).view(-1, 1, 1, 1)
            x = torch.where(sel, _luma(x).expand_as(x), x)
        if blur.any():
            x = torch.where(torch.from_numpy(blur).view(-1, 1, 1, 1), _gaussian_blur3(x, sigma), x)
        return x

    def pair(self, images: torch.Tensor, rngs) -> tuple[torch.Tensor, torch.Tensor]:
        """Two views per image; ``rngs`` holds one generator per image."""
        d = np.stack([np.concatenate([self.draw(r), self.draw(r)]) for r in rngs])
        return self.apply(images, d[:, :_DRAWS_PER_VIEW]), self.apply(images, d[:, _DRAWS_PER_VIEW:])


def _luma(x: torch.Tensor) -> torch.Tensor:
    wts = torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype).view(1, 3, 1, 1)
    return (x * wts).sum(dim=1, keepdim=True)


_RGB2YIQ = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])


def _rotate_hue(x: torch.Tensor, angle: np.ndarray) -> torch.Tensor:
    """Rotate chroma in YIQ space by ``angle`` radians per sample."""
    if not np.any(angle):
        return x
    c, s = np.cos(angle), np.sin(angle)
    rot = np.zeros((len(angle), 3, 3))
    rot[:, 0, 0] = 1
    rot[:, 1, 1], rot[:, 1, 2], rot[:, 2, 1], rot[:, 2, 2] = c, -s, s, c
    m = torch.linalg.inv(_RGB2YIQ) @ torch.from_numpy(rot).float() @ _RGB2YIQ
    return torch.einsum("bij,bjhw->bihw", m.to(x.dtype), x).clamp(0, 1)


def _gaussian_blur3(x: torch.Tensor, sigma: np.ndarray) -> torch.Tensor:
    b, c, hh, ww = x.shape
    t = np.exp(-1.0 / (2 * sigma**2))
    k1 = np.stack([t, np.ones_like(t), t], axis=1)
    k1 /= k1.sum(axis=1, keepdims=True)
    k2 = torch.from_numpy(k1[:, :, None] * k1[:, None, :]).to(x.dtype)
    weight = k2.repeat_interleave(c, dim=0).unsqueeze(1)
    y = F.conv2d(F.pad(x.reshape(1, b * c, hh, ww), (1, 1, 1, 1), mode="replicate"), weight, groups=b * c)
    return y.view(b, c, hh, ww)


def example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, epoch, index])


def make_view_pair(
    image: torch.Tensor,
    rng: np.random.Generator,
    cfg: Optional[DataConfig] = None,
    mean=None,
    std=None,
    label: int = -1,
) -> AugmentedPair:
    """Two independently augmented, normalized views of one (C, H, W) image in [0, 1]."""
    if image.dim() != 3 or image.shape[1] == 0 or image.shape[2] == 0 or image.numel() == 0:
        raise DataError(f"degenerate image of shape {tuple(image.shape)}")
    cfg = cfg or DataConfig()
    c = image.shape[0]
    mean = torch.zeros(c) if mean is None else torch.as_tensor(mean, dtype=torch.float32)
    std = torch.ones(c) if std is None else torch.as_tensor(std, dtype=torch.float32)
    v, vp = Augmenter(cfg).pair(image[None], [rng])
    norm = lambda t: ((t - mean.view(1, -1, 1, 1)) / std.view(1, -1, 1, 1))[0]  # noqa: E731
    return AugmentedPair(norm(v), norm(vp), label)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed & 0xFFFFFFFF, epoch, 0x5EED]).permutation(n)


def iterate_epoch(
    spec: DatasetSpec,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    cfg: Optional[DataConfig] = None,
) -> Iterator[AugmentedPair]:
    """Yield ceil(M / batch_size) batches covering every example once.

    Train batches are shuffled and augmented; eval batches come in index order
    with a single un-augmented view (``v_prime is v``).
    """
    ds = load_split(spec)
    n = len(ds)
    if spec.split == "train":
        order = epoch_order(n, seed, epoch)
        aug = Augmenter(cfg or DataConfig())
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        it = torch.from_numpy(idx)
        imgs = ds.images[it]
        if spec.split == "train":
            v, vp = aug.pair(imgs, [example_rng(seed, epoch, int(i)) for i in idx])
            yield AugmentedPair(ds.normalize(v), ds.normalize(vp), ds.labels[it], it)
        else:
            v = ds.normalize(imgs)
            yield AugmentedPair(v, v, ds.labels[it], it)


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)
