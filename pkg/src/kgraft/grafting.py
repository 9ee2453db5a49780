"""Selection vector -> scion taps -> pooled, concatenated features -> dense head.

The grafted model is ``head(concat(gap(tap_i(x)) for i in scion))`` where the
taps come from a frozen donor. Because the donor never changes, the composed
features can be computed once and cached; training and candidate evaluation
then run on the cache instead of the images.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import blob
from .errors import FormatError, ShapeError, StalenessError, UsageError, ValidationError
from .models import compute_taps, he_uniform, params_digest, prefix_parameter_count, read_json

GRAFT_FORMAT_VERSION = 1
CACHE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SelectionVector:
    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValidationError("selection bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_indices(cls, indices, m):
        indices = set(int(i) for i in indices)
        bad = sorted(i for i in indices if not 0 <= i < m)
        if bad:
            raise UsageError(f"layer indices {bad} outside valid range 0..{m - 1}")
        return cls(tuple(1 if i in indices else 0 for i in range(m)))

    @classmethod
    def from_string(cls, text):
        if not text or any(ch not in "01" for ch in text):
            raise ValidationError(f"selection string must be 0/1 characters, got {text!r}")
        return cls(tuple(int(ch) for ch in text))

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return "".join(str(b) for b in self.bits)


def scion_from_selection(s):
    """Sorted indices of the 1-bits."""
    return tuple(i for i, b in enumerate(s.bits) if b)


def pool_tap(f):
    """Global average pool of one rank-4 tap; rank-2 taps pass through."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 4:
        return f.mean(axis=(1, 2))
    if f.ndim == 2:
        return f
    raise ShapeError(f"tap has unsupported rank {f.ndim}")


def transform_scion_features(taps):
    """Global-average-pool each rank-4 tap; rank-2 taps pass through."""
    out = {}
    for i, f in taps.items():
        try:
            out[i] = pool_tap(f)
        except ShapeError as exc:
            raise ShapeError(f"tap {i}: {exc}") from None
    return out


def compose_features(g):
    """Concatenate transformed taps in ascending layer-index order."""
    if not g:
        raise UsageError("cannot compose an empty scion")
    return np.concatenate([np.asarray(g[i], dtype=np.float64) for i in sorted(g)], axis=1)


@dataclass(frozen=True)
class HeadSpec:
    class_count: int
    hidden_units: int = 256
    dropout_rate: float = 0.3
    hidden_activation: str = "relu"

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ValidationError("hidden_units must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValidationError("dropout_rate must lie in [0, 1)")
        if self.class_count < 2:
            raise ValidationError("class_count must be >= 2")
        if self.hidden_activation != "relu":
            raise ValidationError("only relu hidden activation is supported")

    def parameter_count(self, width):
        return (width + 1) * self.hidden_units + (self.hidden_units + 1) * self.class_count


@dataclass(frozen=True)
class GraftedModelSpec:
    donor_path: str
    donor_hash: str
    selection: SelectionVector
    head: HeadSpec
    widths: tuple
    donor_prefix_params: int

    @property
    def scion(self):
        return scion_from_selection(self.selection)

    @property
    def input_width(self):
        return sum(self.widths)

    @property
    def cache_key(self):
        return feature_key(self.donor_hash, self.selection)

    def head_parameter_count(self):
        return self.head.parameter_count(self.input_width)

    def parameter_count(self):
        """Deployed size: head plus the donor prefix needed to reach the deepest tap."""
        return self.head_parameter_count() + self.donor_prefix_params

    def to_dict(self):
        return {
            "donor_path": self.donor_path,
            "donor_hash": self.donor_hash,
            "selection": str(self.selection),
            "scion": list(self.scion),
            "widths": list(self.widths),
            "donor_prefix_params": self.donor_prefix_params,
            "head": {"class_count": self.head.class_count, "hidden_units": self.head.hidden_units,
                     "dropout_rate": self.head.dropout_rate,
                     "hidden_activation": self.head.hidden_activation},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["donor_path"], d["donor_hash"], SelectionVector.from_string(d["selection"]),
                   HeadSpec(**d["head"]), tuple(d["widths"]), int(d["donor_prefix_params"]))


def feature_key(donor_hash, selection):
    return hashlib.sha256(f"{donor_hash}:{selection}".encode()).hexdigest()


def donor_hash(spec, params):
    h = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode())
    h.update(params_digest(params, [n for n in spec.param_shapes]).encode())
    return h.hexdigest()


class GraftHead:
    """dense(hidden) -> relu -> dropout -> dense(K); the mapping applied to h(x)."""

    HIDDEN, OUT = "graft_hidden", "graft_out"

    def __init__(self, head, width):
        self.head = head
        self.width = width

    def init_params(self, rng):
        u, k = self.head.hidden_units, self.head.class_count
        return {self.HIDDEN: (he_uniform(rng, (self.width, u)), np.zeros(u)),
                self.OUT: (he_uniform(rng, (u, k)), np.zeros(k))}

    @property
    def dropout_rate(self):
        return self.head.dropout_rate

    def fused_arrays(self, params):
        """[w1, b1, w2, b2], the very arrays in ``params`` (updated in place by training)."""
        return [*params[self.HIDDEN], *params[self.OUT]]

    def logits(self, tape, params, x, mode, rng, trainable=True):
        if x.ndim != 2 or x.shape[1] != self.width:
            raise ShapeError(f"head expects (N, {self.width}) features, got {x.shape}")
        w1, b1 = params[self.HIDDEN]
        w2, b2 = params[self.OUT]
        h = ad.dense(tape.constant(x), tape.parameter(f"{self.HIDDEN}.weight", w1, trainable),
                     tape.parameter(f"{self.HIDDEN}.bias", b1, trainable))
        h = ad.relu(h)
        h = ad.dropout(h, self.head.dropout_rate, mode, rng)
        return ad.dense(h, tape.parameter(f"{self.OUT}.weight", w2, trainable),
                        tape.parameter(f"{self.OUT}.bias", b2, trainable))


def build_grafted_model(donor_spec, donor_params, s, head, rng, donor_path=""):
    """Returns (GraftedModelSpec, freshly initialized head params)."""
    if len(s) != len(donor_spec.layers):
        raise ValidationError(f"selection has {len(s)} bits, donor has {len(donor_spec.layers)} layers")
    scion = scion_from_selection(s)
    if not scion:
        raise UsageError("empty scion: select at least one donor layer")
    if head.class_count != donor_spec.class_count:
        raise ValidationError(f"head has {head.class_count} classes, donor {donor_spec.class_count}")
    widths = tuple(donor_spec.channels(i) for i in scion)
    g_spec = GraftedModelSpec(donor_path, donor_hash(donor_spec, donor_params), s, head, widths,
                              prefix_parameter_count(donor_spec, scion[-1]))
    return g_spec, GraftHead(head, g_spec.input_width).init_params(rng)


def composed_features(donor_spec, donor_params, s, images, chunk=64):
    taps = compute_taps(donor_spec, donor_params, images, scion_from_selection(s), chunk, pool_tap)
    return compose_features(taps)


def grafted_forward(g_spec, head_params, images=None, features=None, donor=None,
                    mode="eval", rng=None):
    """Logits from raw images (donor run first) or from cached feature rows.

    Pass ``images`` with ``donor=(spec, params)``, or ``features`` as either a
    ``FeatureCache`` split array via ``(cache, split)`` or a bare row matrix.
    """
    if (images is None) == (features is None):
        raise UsageError("pass exactly one of images or features")
    if images is not None:
        if donor is None:
            raise UsageError("raw-image path needs donor=(spec, params)")
        spec, params = donor
        if donor_hash(spec, params) != g_spec.donor_hash:
            raise StalenessError("donor parameters differ from the ones this graft was built on")
        rows = composed_features(spec, params, g_spec.selection, images)
    elif isinstance(features, tuple):
        cache, split = features
        cache.check(g_spec)
        rows = cache.features[split]
    else:
        rows = np.asarray(features, dtype=np.float64)
    tape = ad.Tape()
    return GraftHead(g_spec.head, g_spec.input_width).logits(tape, head_params, rows, mode, rng,
                                                             trainable=False).value


@dataclass
class FeatureCache:
    donor_hash: str
    selection: SelectionVector
    widths: tuple
    features: dict

    @property
    def key(self):
        return feature_key(self.donor_hash, self.selection)

    def check(self, g_spec):
        if self.key != g_spec.cache_key:
            raise StalenessError(
                f"feature cache was built for selection {self.selection} on donor "
                f"{self.donor_hash[:12]}, graft wants {g_spec.selection} on {g_spec.donor_hash[:12]}")
        if tuple(self.widths) != tuple(g_spec.widths):
            raise StalenessError(f"cache widths {self.widths} != graft widths {g_spec.widths}")


def build_feature_cache(donor_spec, donor_params, s, splits, chunk=64):
    """h(x) rows for every sample of every split (``splits``: name -> images)."""
    scion = scion_from_selection(s)
    if not scion:
        raise UsageError("empty scion: select at least one donor layer")
    feats = {name: composed_features(donor_spec, donor_params, s, x, chunk)
             for name, x in splits.items()}
    return FeatureCache(donor_hash(donor_spec, donor_params), s,
                        tuple(donor_spec.channels(i) for i in scion), feats)


def save_cache(cache, path):
    os.makedirs(path, exist_ok=True)
    files = {}
    for name in sorted(cache.features):
        fname = f"{name}.grft"
        files[name] = {"file": fname, "rows": int(cache.features[name].shape[0]),
                       "sha256": blob.write(os.path.join(path, fname), cache.features[name], "f64")}
    header = {"format": "kgraft-feature-cache", "version": CACHE_FORMAT_VERSION,
              "donor_hash": cache.donor_hash, "selection": str(cache.selection),
              "widths": list(cache.widths), "key": cache.key, "splits": files}
    with open(os.path.join(path, "cache.json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cache(path):
    head = read_json(os.path.join(path, "cache.json"), "cache.json")
    if head.get("format") != "kgraft-feature-cache" or head.get("version") != CACHE_FORMAT_VERSION:
        raise FormatError("not a version-1 feature cache", "cache.json.format")
    sel = SelectionVector.from_string(head["selection"])
    feats = {}
    width = sum(head["widths"])
    for name, entry in head["splits"].items():
        arr = blob.read(os.path.join(path, entry["file"]), f"cache.{name}", entry.get("sha256"))
        if arr.ndim != 2 or arr.shape != (entry["rows"], width):
            raise FormatError(f"shape {arr.shape} != ({entry['rows']}, {width})", f"cache.{name}")
        feats[name] = arr
    cache = FeatureCache(head["donor_hash"], sel, tuple(head["widths"]), feats)
    if cache.key != head.get("key"):
        raise FormatError("key does not match donor hash and selection", "cache.json.key")
    return cache


def save_graft(g_spec, head_params, path, dtype="f32"):
    os.makedirs(path, exist_ok=True)
    tensors = {}
    for layer in (GraftHead.HIDDEN, GraftHead.OUT):
        for part, arr in zip(("weight", "bias"), head_params[layer]):
            key = f"{layer}.{part}"
            digest = blob.write(os.path.join(path, f"{key}.grft"), arr, dtype)
            tensors[key] = {"file": f"{key}.grft", "shape": list(arr.shape), "sha256": digest}
    doc = {"format": "kgraft-graft", "version": GRAFT_FORMAT_VERSION, "storage_dtype": dtype,
           "graft": g_spec.to_dict(), "tensors": tensors}
    with open(os.path.join(path, "graft.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_graft(path):
    doc = read_json(os.path.join(path, "graft.json"), "graft.json")
    if doc.get("format") != "kgraft-graft" or doc.get("version") != GRAFT_FORMAT_VERSION:
        raise FormatError("not a version-1 graft", "graft.json.format")
    try:
        g_spec = GraftedModelSpec.from_dict(doc["graft"])
    except (KeyError, TypeError, ValidationError) as exc:
        raise FormatError(f"malformed graft ({exc})", "graft.json.graft") from None
    h = g_spec.head
    want = {GraftHead.HIDDEN: ((g_spec.input_width, h.hidden_units), (h.hidden_units,)),
            GraftHead.OUT: ((h.hidden_units, h.class_count), (h.class_count,))}
    params = {}
    for layer, shapes in want.items():
        arrs = []
        for part, shape in zip(("weight", "bias"), shapes):
            key = f"{layer}.{part}"
            entry = doc["tensors"].get(key)
            if entry is None:
                raise FormatError("tensor missing from manifest", key)
            arr = blob.read(os.path.join(path, entry["file"]), key, entry.get("sha256"))
            if arr.shape != shape:
                raise FormatError(f"shape {arr.shape} != expected {shape}", key)
            arrs.append(arr)
        params[layer] = tuple(arrs)
    return g_spec, params
