"""Layer-list architectures, parameter storage, tapped forward passes, counting, I/O.

Tap indices count every entry of ``ModelSpec.layers`` (activations, pools,
dropout included), 0-based, and a tap holds that entry's output.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import blob
from .errors import FormatError, ShapeError, UsageError, ValidationError

TAP_CONVENTION = "0-based index over every layer entry; tap = output of that entry"
MODEL_FORMAT_VERSION = 1

# required hyperparameters per kind
LAYER_KINDS = {
    "conv": {"filters", "kernel", "stride", "padding"},
    "maxpool": {"window", "stride"},
    "flatten": set(),
    "dense": {"units"},
    "leaky_relu": {"alpha"},
    "relu": set(),
    "dropout": {"rate"},
    "softmax_head": {"units"},
}
PARAM_KINDS = ("conv", "dense", "softmax_head")


@dataclass
class LayerSpec:
    kind: str
    name: str
    config: dict = field(default_factory=dict)
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        want, have = LAYER_KINDS[self.kind], set(self.config)
        if want != have:
            raise ValidationError(
                f"layer {self.name!r} ({self.kind}) needs exactly {sorted(want)}, got {sorted(have)}")

    @property
    def has_params(self):
        return self.kind in PARAM_KINDS

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "config": dict(self.config),
                "trainable": self.trainable}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["name"], dict(d.get("config", {})), bool(d.get("trainable", True)))


def _conv_out(size, k, stride, padding):
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def _propagate(layer, shape):
    """Output shape (without batch axis) of ``layer`` for input ``shape``; also param shapes."""
    c = layer.config
    if layer.kind == "conv":
        if len(shape) != 3:
            raise ShapeError(f"{layer.name}: conv needs (H,W,C) input, got {shape}")
        h, w, cin = shape
        k, s = c["kernel"], c["stride"]
        if c["padding"] not in ("same", "valid"):
            raise ValidationError(f"{layer.name}: padding must be 'same' or 'valid'")
        if c["padding"] == "valid" and (k > h or k > w):
            raise ShapeError(f"{layer.name}: kernel {k} larger than input {h}x{w}")
        out = (_conv_out(h, k, s, c["padding"]), _conv_out(w, k, s, c["padding"]), c["filters"])
        return out, ((k, k, cin, c["filters"]), (c["filters"],))
    if layer.kind == "maxpool":
        if len(shape) != 3:
            raise ShapeError(f"{layer.name}: maxpool needs (H,W,C) input, got {shape}")
        h, w, ch = shape
        win, s = c["window"], c["stride"]
        if win > h or win > w:
            raise ShapeError(f"{layer.name}: window {win} exceeds spatial extent {h}x{w}")
        return ((h - win) // s + 1, (w - win) // s + 1, ch), None
    if layer.kind == "flatten":
        return (int(np.prod(shape)),), None
    if layer.kind in ("dense", "softmax_head"):
        if len(shape) != 1:
            raise ShapeError(f"{layer.name}: {layer.kind} needs a flat input, got {shape}")
        return (c["units"],), ((shape[0], c["units"]), (c["units"],))
    return shape, None


@dataclass
class ModelSpec:
    input_shape: tuple
    layers: list
    class_count: int
    output_shapes: list = field(init=False, repr=False)
    param_shapes: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.class_count < 2:
            raise ValidationError(f"class_count must be >= 2, got {self.class_count}")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError("layer names must be unique")
        shape = self.input_shape
        self.output_shapes, self.param_shapes = [], {}
        for layer in self.layers:
            shape, pshapes = _propagate(layer, shape)
            self.output_shapes.append(shape)
            if pshapes is not None:
                self.param_shapes[layer.name] = pshapes
        if self.layers:
            last = self.layers[-1]
            if last.kind != "softmax_head" or last.config["units"] != self.class_count:
                raise ValidationError(
                    f"final layer must be softmax_head with {self.class_count} units")

    def __len__(self):
        return len(self.layers)

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "class_count": self.class_count,
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), [LayerSpec.from_dict(x) for x in d["layers"]],
                   int(d["class_count"]))

    def channels(self, index):
        """Feature width a tap at ``index`` contributes after pooling (last extent)."""
        return self.output_shapes[index][-1]


def build_donor_spec(input_shape=(32, 32, 3), class_count=4, conv_blocks=((8, 8), (16, 16), (32, 32)),
                     head_units=256, freeze_depth=0, alpha=0.3, dropout_rate=0.3, kernel=3):
    """VGG-style conv/conv/pool blocks followed by the two-dense donor head.

    ``conv_blocks`` lists filter counts per conv in each block; every conv is
    followed by its own LeakyReLU entry and every block ends in a 2x2 pool.
    The first ``freeze_depth`` entries are marked non-trainable.
    """
    layers = []
    for b, block in enumerate(conv_blocks, start=1):
        for j, filters in enumerate(block, start=1):
            layers.append(LayerSpec("conv", f"block{b}_conv{j}",
                                    {"filters": int(filters), "kernel": kernel, "stride": 1,
                                     "padding": "same"}))
            layers.append(LayerSpec("leaky_relu", f"block{b}_act{j}", {"alpha": alpha}))
        layers.append(LayerSpec("maxpool", f"block{b}_pool", {"window": 2, "stride": 2}))
    layers.append(LayerSpec("flatten", "flatten"))
    for j in (1, 2):
        layers.append(LayerSpec("dense", f"fc{j}", {"units": head_units}))
        layers.append(LayerSpec("leaky_relu", f"fc{j}_act", {"alpha": alpha}))
        layers.append(LayerSpec("dropout", f"fc{j}_drop", {"rate": dropout_rate}))
    layers.append(LayerSpec("softmax_head", "head", {"units": class_count}))
    if not 0 <= freeze_depth <= len(layers):
        raise ValidationError(f"freeze_depth {freeze_depth} outside 0..{len(layers)}")
    for layer in layers[:freeze_depth]:
        layer.trainable = False
    return ModelSpec(tuple(input_shape), layers, class_count)


# -- parameters ----------------------------------------------------------------

def he_uniform(rng, wshape):
    fan_in = int(np.prod(wshape[:-1]))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=wshape)


def init_params(spec, rng):
    """He-uniform weights, zero biases, drawn in layer order."""
    params = {}
    for layer in spec.layers:
        if layer.name not in spec.param_shapes:
            continue
        wshape, bshape = spec.param_shapes[layer.name]
        params[layer.name] = (he_uniform(rng, wshape), np.zeros(bshape))
    return params


def copy_params(params):
    return {k: (w.copy(), b.copy()) for k, (w, b) in params.items()}


def params_digest(params, order=None):
    """sha256 over parameter bytes in ``order`` (default: sorted names)."""
    h = hashlib.sha256()
    for name in order or sorted(params):
        w, b = params[name]
        h.update(name.encode())
        h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class ParamCount:
    per_layer: dict
    total: int
    trainable: int
    frozen: int


def count_parameters(spec):
    """Exact counts: conv (k*k*Cin+1)*Cout, dense (F+1)*U, everything else 0."""
    per_layer, trainable, frozen = {}, 0, 0
    for layer in spec.layers:
        n = 0
        if layer.name in spec.param_shapes:
            wshape, bshape = spec.param_shapes[layer.name]
            n = int(np.prod(wshape)) + int(np.prod(bshape))
        per_layer[layer.name] = n
        if layer.trainable:
            trainable += n
        else:
            frozen += n
    return ParamCount(per_layer, trainable + frozen, trainable, frozen)


def prefix_parameter_count(spec, last_index):
    """Parameters of layers 0..last_index, i.e. what computing that tap requires."""
    counts = count_parameters(spec).per_layer
    return sum(counts[layer.name] for layer in spec.layers[:last_index + 1])


# -- forward -------------------------------------------------------------------

def param_nodes(tape, spec, params, trainable=True):
    nodes = {}
    for layer in spec.layers:
        if layer.name not in spec.param_shapes:
            continue
        w, b = params[layer.name]
        train = trainable and layer.trainable
        nodes[layer.name] = (tape.parameter(f"{layer.name}.weight", w, train),
                             tape.parameter(f"{layer.name}.bias", b, train))
    return nodes


def run_layers(spec, nodes, x, mode="eval", rng=None, taps=(), upto=None):
    """Apply layers 0..upto to node ``x``; returns (last node, {index: node})."""
    taps = set(taps)
    out = {}
    last = len(spec.layers) - 1 if upto is None else upto
    h = x
    for i, layer in enumerate(spec.layers[:last + 1]):
        c = layer.config
        if layer.kind == "conv":
            w, b = nodes[layer.name]
            h = ad.conv2d(h, w, b, c["stride"], c["padding"])
        elif layer.kind == "maxpool":
            h = ad.maxpool2d(h, c["window"], c["stride"])
        elif layer.kind == "flatten":
            h = ad.flatten(h)
        elif layer.kind in ("dense", "softmax_head"):
            w, b = nodes[layer.name]
            h = ad.dense(h, w, b)
        elif layer.kind == "leaky_relu":
            h = ad.leaky_relu(h, c["alpha"])
        elif layer.kind == "relu":
            h = ad.relu(h)
        elif layer.kind == "dropout":
            h = ad.dropout(h, c["rate"], mode, rng)
        if i in taps:
            out[i] = h
    return h, out


def _check_batch(spec, batch):
    batch = ad.as_tensor(batch)
    if batch.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {batch.shape[1:]} != model input {spec.input_shape}")
    return batch


def _check_taps(spec, tap_indices):
    taps = sorted(set(int(i) for i in tap_indices))
    bad = [i for i in taps if not 0 <= i < len(spec.layers)]
    if bad:
        raise UsageError(f"tap indices {bad} outside 0..{len(spec.layers) - 1}")
    return taps


def forward_with_taps(spec, params, batch, tap_indices=(), mode="eval", rng=None, chunk=None):
    """Full forward pass; returns (logits, {index: output of that layer}).

    ``chunk`` splits the batch to bound memory in eval mode.
    """
    taps = _check_taps(spec, tap_indices)
    batch = _check_batch(spec, batch)
    if chunk is None or batch.shape[0] <= chunk:
        tape = ad.Tape()
        nodes = param_nodes(tape, spec, params, trainable=False)
        logits, out = run_layers(spec, nodes, tape.constant(batch), mode, rng, taps)
        return logits.value, {i: out[i].value for i in taps}
    parts = [forward_with_taps(spec, params, batch[s:s + chunk], taps, mode, rng)
             for s in range(0, batch.shape[0], chunk)]
    logits = np.concatenate([p[0] for p in parts])
    return logits, {i: np.concatenate([p[1][i] for p in parts]) for i in taps}


def compute_taps(spec, params, batch, tap_indices, chunk=64, reduce=None):
    """Eval-mode tap outputs only; stops after the deepest requested layer.

    ``reduce`` (array -> array) is applied to each tap per chunk, so callers
    that pool right away never hold full-resolution maps for the whole batch.
    """
    taps = _check_taps(spec, tap_indices)
    if not taps:
        return {}
    batch = _check_batch(spec, batch)
    pieces = {i: [] for i in taps}
    for s in range(0, batch.shape[0], chunk):
        tape = ad.Tape()
        nodes = param_nodes(tape, spec, params, trainable=False)
        _, out = run_layers(spec, nodes, tape.constant(batch[s:s + chunk]), "eval", None, taps,
                            upto=taps[-1])
        for i in taps:
            pieces[i].append(out[i].value if reduce is None else reduce(out[i].value))
    return {i: np.concatenate(p) for i, p in pieces.items()}


# -- serialization -----------------------------------------------------------------

def save_model(spec, params, path, dtype="f32"):
    """Write ``model.json`` plus one GRFT blob per tensor into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    tensors = {}
    for layer in spec.layers:
        if layer.name not in spec.param_shapes:
            continue
        for part, arr in zip(("weight", "bias"), params[layer.name]):
            key = f"{layer.name}.{part}"
            fname = f"{key}.grft"
            digest = blob.write(os.path.join(path, fname), arr, dtype)
            tensors[key] = {"file": fname, "shape": list(arr.shape), "sha256": digest}
    manifest = {
        "format": "kgraft-model",
        "version": MODEL_FORMAT_VERSION,
        "tap_index_convention": TAP_CONVENTION,
        "endianness": "little",
        "storage_dtype": dtype,
        "spec": spec.to_dict(),
        "tensors": tensors,
    }
    with open(os.path.join(path, "model.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path, field_name):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise FormatError("file missing", field_name) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc.msg})", field_name) from None


def load_model(path):
    """Inverse of :func:`save_model`; every tensor is checked before anything is returned."""
    meta = read_json(os.path.join(path, "model.json"), "model.json")
    if meta.get("format") != "kgraft-model":
        raise FormatError(f"unexpected format {meta.get('format')!r}", "model.json.format")
    if meta.get("version") != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported version {meta.get('version')!r}", "model.json.version")
    try:
        spec = ModelSpec.from_dict(meta["spec"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed spec ({exc})", "model.json.spec") from None
    except (ValidationError, ShapeError) as exc:
        raise FormatError(str(exc), "model.json.spec") from None
    tensors = meta.get("tensors", {})
    params = {}
    for name, (wshape, bshape) in spec.param_shapes.items():
        arrs = []
        for part, want in (("weight", wshape), ("bias", bshape)):
            key = f"{name}.{part}"
            if key not in tensors:
                raise FormatError("tensor missing from manifest", key)
            entry = tensors[key]
            arr = blob.read(os.path.join(path, entry["file"]), key, entry.get("sha256"))
            if arr.shape != tuple(want):
                raise FormatError(f"shape {arr.shape} != expected {tuple(want)}", key)
            arrs.append(arr)
        params[name] = tuple(arrs)
    return spec, params


class Network:
    """Adapter giving a ModelSpec the ``logits(tape, params, x, ...)`` training interface."""

    def __init__(self, spec):
        self.spec = spec

    def logits(self, tape, params, x, mode, rng, trainable=True):
        nodes = param_nodes(tape, self.spec, params, trainable)
        out, _ = run_layers(self.spec, nodes, tape.constant(x), mode, rng)
        return out
