"""Synthetic multi-class image data, normalization, and dataset files.

Each class is a parametric pattern: an oriented grating (orientation and
spatial frequency fixed per class, with bounded per-sample orientation
jitter, random phase, contrast and envelope) or a blob texture (blob count
and radius fixed per class). Orientation intervals of grating classes never
overlap, so with ``noise=0`` the classes are separable by construction;
``noise`` adds iid Gaussian pixel noise and is the difficulty knob.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import blob
from .errors import CorruptionError, FormatError, ValidationError
from .models import read_json
from .rng import make_rng

MANIFEST_VERSION = 1
FAMILIES = ("grating", "blobs")


@dataclass
class SyntheticConfig:
    classes: int = 4
    per_class: int = 500
    image_size: int = 32
    channels: int = 3
    noise: float = 0.15
    family: str = "grating"
    jitter: float = 0.9
    contrast: tuple = (0.06, 0.18)

    def __post_init__(self):
        if self.classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.classes}")
        if self.per_class < 1:
            raise ValidationError("per_class must be >= 1")
        if self.image_size < 4 or self.channels < 1:
            raise ValidationError("image_size must be >= 4 and channels >= 1")
        if self.noise < 0:
            raise ValidationError("noise must be >= 0")
        if self.family not in FAMILIES:
            raise ValidationError(f"family must be one of {FAMILIES}")
        if not 0 <= self.jitter < 1:
            raise ValidationError("jitter must lie in [0, 1) to keep classes disjoint")
        self.contrast = tuple(self.contrast)

    def class_params(self):
        """Per-class pattern parameters; pairwise distinct by construction."""
        k = self.classes
        if self.family == "grating":
            return [{"orientation": np.pi * c / k, "frequency": 3.0 + (c % 3)} for c in range(k)]
        return [{"count": 2 + 2 * c, "radius": 1.5 + 4.0 * c / k} for c in range(k)]


def _grating(cfg, p, rng, yy, xx):
    s = cfg.image_size
    half = 0.5 * cfg.jitter * np.pi / cfg.classes
    theta = p["orientation"] + rng.uniform(-half, half)
    freq = p["frequency"] * rng.uniform(0.9, 1.1)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(*cfg.contrast)
    cy, cx = rng.uniform(0.3 * s, 0.7 * s, size=2)
    width = rng.uniform(0.25 * s, 0.45 * s)
    env = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / s + phase)
    return amp * env * wave


def _blobs(cfg, p, rng, yy, xx):
    s = cfg.image_size
    img = np.zeros((s, s))
    amp = rng.uniform(*cfg.contrast)
    for _ in range(p["count"]):
        cy, cx = rng.uniform(0, s, size=2)
        r = p["radius"] * rng.uniform(0.85, 1.15)
        img += rng.choice((-1.0, 1.0)) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return amp * img


def generate_synthetic(config, seed):
    """Returns (images [N,H,W,C] in [0,1], int labels, manifest dict).

    Samples are ordered class by class; sample ``i`` draws from its own
    stream derived from (seed, i), so generation is order independent.
    """
    s, ch = config.image_size, config.channels
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    params = config.class_params()
    make = _grating if config.family == "grating" else _blobs
    n = config.classes * config.per_class
    images = np.empty((n, s, s, ch))
    labels = np.repeat(np.arange(config.classes), config.per_class)
    for i in range(n):
        rng = make_rng(seed, "sample", i)
        pattern = make(config, params[labels[i]], rng, yy, xx)
        tint = rng.uniform(0.6, 1.0, size=ch)
        img = 0.5 + pattern[:, :, None] * tint
        if config.noise > 0:
            img = img + rng.normal(0.0, config.noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    manifest = {
        "name": f"synthetic-{config.family}",
        "class_names": [f"class_{c}" for c in range(config.classes)],
        "counts_per_class": [config.per_class] * config.classes,
        "image_shape": [s, s, ch],
        "generator_seed": int(seed),
        "generator": _jsonable(asdict(config)),
        "normalization": "none (generated in [0,1])",
    }
    return images, labels, manifest


def _jsonable(d):
    return json.loads(json.dumps(d, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


def normalize(images):
    """Scale to [0,1]: divide by 255 when the global max says byte data.

    Returns (images, rule) where rule is ``"divide_by_255"`` or ``"identity"``.
    """
    arr = np.asarray(images, dtype=np.float64)
    if arr.size and arr.max() > 1.0:
        return arr / 255.0, "divide_by_255"
    return arr, "identity"


def save_dataset(path, images, labels, manifest, splits=None):
    """Write ``images.grft``, ``labels.grft`` and ``manifest.json`` into ``path``."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.shape[0] != labels.shape[0]:
        raise ValidationError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    os.makedirs(path, exist_ok=True)
    files = {}
    for name, arr in (("images", images), ("labels", labels.astype(np.float64))):
        fname = f"{name}.grft"
        files[name] = {"file": fname, "sha256": blob.write(os.path.join(path, fname), arr, "f64")}
    doc = dict(manifest)
    doc.update({
        "format": "kgraft-dataset",
        "version": MANIFEST_VERSION,
        "sample_count": int(labels.shape[0]),
        "counts_per_class": np.bincount(labels.astype(np.int64),
                                        minlength=len(manifest["class_names"])).tolist(),
        "files": files,
    })
    if splits is not None:
        doc["splits"] = {
            "seed": splits["seed"],
            "ratios": list(splits["ratios"]),
            "indices": {k: [int(i) for i in v] for k, v in splits["indices"].items()},
        }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return doc


def load_dataset(path):
    """Returns (images, int labels, manifest); verifies checksums, counts and shapes."""
    doc = read_json(os.path.join(path, "manifest.json"), "manifest.json")
    if doc.get("format") != "kgraft-dataset":
        raise FormatError(f"unexpected format {doc.get('format')!r}", "manifest.format")
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported version {doc.get('version')!r}", "manifest.version")
    for key in ("files", "sample_count", "image_shape", "class_names", "counts_per_class"):
        if key not in doc:
            raise FormatError("missing", f"manifest.{key}")
    arrays = {}
    for name in ("images", "labels"):
        entry = doc["files"].get(name)
        if entry is None:
            raise FormatError("missing", f"manifest.files.{name}")
        arrays[name] = blob.read(os.path.join(path, entry["file"]), name, entry.get("sha256"))
    images, labels = arrays["images"], arrays["labels"]
    n = doc["sample_count"]
    if images.shape[0] != n:
        raise FormatError(f"manifest says {n} samples, images blob has {images.shape[0]}",
                          "manifest.sample_count")
    if labels.shape != (n,):
        raise FormatError(f"manifest says {n} samples, labels blob has {labels.shape}",
                          "manifest.sample_count")
    if list(images.shape[1:]) != list(doc["image_shape"]):
        raise FormatError(f"images blob shape {images.shape[1:]} != {doc['image_shape']}",
                          "manifest.image_shape")
    if np.any(labels != np.round(labels)) or labels.min() < 0 or labels.max() >= len(doc["class_names"]):
        raise CorruptionError("labels are not valid class indices", "labels")
    labels = labels.astype(np.int64)
    counts = np.bincount(labels, minlength=len(doc["class_names"])).tolist()
    if counts != list(doc["counts_per_class"]):
        raise FormatError(f"label counts {counts} != {doc['counts_per_class']}",
                          "manifest.counts_per_class")
    return images, labels, doc


def dataset_digest(images, labels):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return h.hexdigest()
