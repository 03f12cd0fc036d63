"""MeshNet-style segmentation network in three variants.

The stack is eight dilated convolution layers: seven 3^3 ReLU layers whose
dilations rise and fall (default 1,1,1,2,4,8,1 with matching paddings, so
spatial extent is preserved), then a 1^3 classifier over C classes. Variants:

* ``map``: deterministic weights, trained with an L2 penalty.
* ``bd``: same weights, but activations entering layers 2-8 are multiplied
  by Bernoulli keep masks at BOTH train and test time, with no rescaling.
* ``ssd``: every layer carries a spike-and-slab posterior; forward passes
  sample via the local reparameterization and concrete filter gates.

Checkpoints use a small binary container (magic ``BVXL``) holding the config
as a key=value block plus one raw little-endian blob per parameter; loading
restores every parameter bit for bit.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bayes_layers import (
    SpikeSlabConvParams,
    SpikeSlabPrior,
    bernoulli_dropout,
    layer_kl,
    spike_slab_conv,
)
from .conv3d import ConvSpec, dilated_conv3d, receptive_field
from .objectives import METHODS
from .tensor import Tensor

__all__ = ["MeshNetConfig", "MeshNet", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_MAGIC = b"BVXL"
CHECKPOINT_VERSION = 1

_ROLE_CODES = {"weight": 0, "bias": 1, "mu": 2, "sigma_raw": 3, "dropout_logit": 4}
_ROLE_NAMES = {v: k for k, v in _ROLE_CODES.items()}


@dataclass(frozen=True)
class MeshNetConfig:
    """Architecture and method selection.

    ``dilations`` lists the seven 3^3 layers; the final 1^3 classifier is
    implied and takes the last entry of ``paddings``. Defaults reproduce
    the full-size network; :meth:`desk_scale` shrinks it for laptop runs.
    """

    num_classes: int = 50
    filters: int = 96
    dilations: tuple[int, ...] = (1, 1, 1, 2, 4, 8, 1)
    paddings: tuple[int, ...] = (1, 1, 1, 2, 4, 8, 1, 0)
    method: str = "map"
    bd_keep_prob: float = 0.9
    prior: SpikeSlabPrior = field(default_factory=SpikeSlabPrior)
    temperature: float = 0.02
    subvolume_size: int = 32

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"MeshNetConfig: method must be one of {METHODS}, got {self.method!r}")
        if len(self.paddings) != len(self.dilations) + 1:
            raise ValueError(
                f"MeshNetConfig: need one padding per layer including the classifier, "
                f"got {len(self.dilations)} dilations and {len(self.paddings)} paddings"
            )
        if self.num_classes < 2:
            raise ValueError(f"MeshNetConfig: num_classes must be >= 2, got {self.num_classes}")
        if self.filters < 1:
            raise ValueError(f"MeshNetConfig: filters must be >= 1, got {self.filters}")
        if not 0.0 < self.bd_keep_prob <= 1.0:
            raise ValueError(f"MeshNetConfig: bd_keep_prob must lie in (0,1], got {self.bd_keep_prob}")
        if self.subvolume_size < 1:
            raise ValueError(f"MeshNetConfig: subvolume_size must be >= 1, got {self.subvolume_size}")
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "paddings", tuple(int(p) for p in self.paddings))

    @classmethod
    def desk_scale(cls, **overrides) -> "MeshNetConfig":
        """Small variant that trains in minutes on one CPU core."""
        base = dict(num_classes=8, filters=16, subvolume_size=16)
        base.update(overrides)
        return cls(**base)

    @property
    def num_layers(self) -> int:
        return len(self.dilations) + 1

    def layer_specs(self) -> list[ConvSpec]:
        specs = []
        cin = 1
        for dil, pad in zip(self.dilations, self.paddings[:-1]):
            specs.append(
                ConvSpec(
                    in_channels=cin,
                    out_channels=self.filters,
                    kernel_bounds=(1, 1, 1),
                    dilation=dil,
                    padding=pad,
                )
            )
            cin = self.filters
        specs.append(
            ConvSpec(
                in_channels=cin,
                out_channels=self.num_classes,
                kernel_bounds=(0, 0, 0),
                dilation=1,
                padding=self.paddings[-1],
            )
        )
        return specs


class _PointLayer:
    """Deterministic convolution layer (MAP and BD variants)."""

    def __init__(self, spec: ConvSpec, weight: Tensor, bias: Tensor):
        self.spec = spec
        self.weight = weight
        self.bias = bias

    @classmethod
    def initialize(cls, spec: ConvSpec, rng: np.random.Generator, dtype) -> "_PointLayer":
        fan_in = spec.in_channels * spec.taps
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=spec.weight_shape())
        return cls(
            spec,
            weight=Tensor(w.astype(dtype), requires_grad=True),
            bias=Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True),
        )

    def apply(self, h: Tensor, rng, sampling: bool) -> Tensor:
        return dilated_conv3d(h, self.weight, self.bias, self.spec)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]

    def weight_tensors(self) -> list[Tensor]:
        return [self.weight]


class _SpikeSlabLayer:
    """Spike-and-slab convolution layer (SSD variant)."""

    def __init__(self, params: SpikeSlabConvParams):
        self.spec = params.spec
        self.params = params

    @classmethod
    def initialize(cls, spec: ConvSpec, rng: np.random.Generator, dtype, temperature: float) -> "_SpikeSlabLayer":
        return cls(SpikeSlabConvParams.initialize(spec, rng, dtype=dtype, temperature=temperature))

    def apply(self, h: Tensor, rng, sampling: bool) -> Tensor:
        if sampling:
            return spike_slab_conv(h, self.params, rng)
        return dilated_conv3d(h, self.params.mu, self.params.bias, self.spec)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.params.parameters()

    def weight_tensors(self) -> list[Tensor]:
        return [self.params.mu]


class MeshNet:
    """The assembled network. Use :meth:`build` rather than the constructor."""

    def __init__(self, cfg: MeshNetConfig, layers: list):
        self.cfg = cfg
        self.layers = layers

    @classmethod
    def build(cls, cfg: MeshNetConfig, rng: np.random.Generator, dtype=np.float32) -> "MeshNet":
        layers = []
        for spec in cfg.layer_specs():
            if cfg.method == "ssd":
                layers.append(_SpikeSlabLayer.initialize(spec, rng, dtype, cfg.temperature))
            else:
                layers.append(_PointLayer.initialize(spec, rng, dtype))
        return cls(cfg, layers)

    @property
    def dtype(self):
        return self.layers[0].parameters()[0][1].data.dtype

    def forward(self, x, rng: np.random.Generator | None = None, mode: str = "sample") -> Tensor:
        """Logits of shape (C, S, S, S) for one subvolume of shape (1, S, S, S)."""
        if mode not in ("sample", "deterministic"):
            raise ValueError(f"forward: mode must be 'sample' or 'deterministic', got {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        s = self.cfg.subvolume_size
        if x.data.shape != (1, s, s, s):
            raise T.ShapeMismatchError("forward input", x.data.shape, (1, s, s, s))
        sampling = mode == "sample" and self.cfg.method != "map"
        if sampling and rng is None:
            raise ValueError(f"forward: method {self.cfg.method!r} in sample mode needs an rng")
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if self.cfg.method == "bd" and sampling and i > 0:
                h = bernoulli_dropout(h, self.cfg.bd_keep_prob, rng)
            h = layer.apply(h, rng, sampling)
            if i < last:
                h = T.relu(h)
        return h

    def predict_mc(self, x, n_mc: int, rng: np.random.Generator | None = None) -> Tensor:
        """Mean softmax over n_mc sampled passes; probabilities in float64."""
        if n_mc < 1:
            raise ValueError(f"predict_mc: n_mc must be >= 1, got {n_mc}")
        with T.no_grad():
            acc = None
            for _ in range(n_mc):
                logits = self.forward(x, rng, mode="sample")
                probs = T.softmax(logits.data.astype(np.float64, copy=False), axis=0)
                acc = probs if acc is None else acc + probs
        return Tensor(acc / n_mc)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for role, t in layer.parameters():
                out.append((f"layer{i + 1}.{role}", t))
        return out

    def zero_grad(self):
        for _, t in self.parameters():
            t.zero_grad()

    def weight_tensors(self) -> list[Tensor]:
        """Kernel weights subject to the L2 prior (biases excluded)."""
        out = []
        for layer in self.layers:
            out.extend(layer.weight_tensors())
        return out

    def layer_kls(self) -> list[Tensor]:
        if self.cfg.method != "ssd":
            raise ValueError(f"layer_kls: only the ssd variant has KL terms, not {self.cfg.method!r}")
        return [layer_kl(layer.params, self.cfg.prior) for layer in self.layers]

    def receptive_field(self) -> tuple[int, int, int]:
        return receptive_field([layer.spec for layer in self.layers])

    def parameter_census(self) -> dict[str, int]:
        """Parameter counts by role; ``point_total`` is kernel weights + biases."""
        weights = biases = sigmas = logits = 0
        for layer in self.layers:
            for role, t in layer.parameters():
                n = t.data.size
                if role in ("weight", "mu"):
                    weights += n
                elif role == "bias":
                    biases += n
                elif role == "sigma_raw":
                    sigmas += n
                elif role == "dropout_logit":
                    logits += n
        return {
            "weights": weights,
            "biases": biases,
            "sigmas": sigmas,
            "dropout_logits": logits,
            "point_total": weights + biases,
            "trainable_total": weights + biases + sigmas + logits,
        }


# -- checkpoint container ------------------------------------------------


def _header_lines(cfg: MeshNetConfig, seed: int, dtype) -> str:
    prior = cfg.prior
    pairs = [
        ("format_version", str(CHECKPOINT_VERSION)),
        ("num_classes", str(cfg.num_classes)),
        ("filters", str(cfg.filters)),
        ("dilations", ",".join(map(str, cfg.dilations))),
        ("paddings", ",".join(map(str, cfg.paddings))),
        ("method", cfg.method),
        ("bd_keep_prob", repr(cfg.bd_keep_prob)),
        ("p_prior", repr(prior.p_prior)),
        ("mu_prior", repr(prior.mu_prior)),
        ("sigma_prior", repr(prior.sigma_prior)),
        ("temperature", repr(cfg.temperature)),
        ("subvolume_size", str(cfg.subvolume_size)),
        ("dtype", np.dtype(dtype).name),
        ("seed", str(int(seed))),
    ]
    return "".join(f"{k}={v}\n" for k, v in pairs)


def _parse_header(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"checkpoint: malformed header line {line!r}")
        out[key] = value
    return out


def save_checkpoint(model: MeshNet, path, seed: int):
    """Write config, seed, and every parameter blob; bit-exact on reload."""
    dtype = model.dtype
    wire = "<f4" if dtype == np.float32 else "<f8"
    header = _header_lines(model.cfg, seed, dtype).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    blobs = []
    for i, layer in enumerate(model.layers):
        for role, t in layer.parameters():
            blobs.append((i, _ROLE_CODES[role], t.data))
    buf.write(struct.pack("<I", len(blobs)))
    for layer_idx, role_code, arr in blobs:
        payload = np.ascontiguousarray(arr).astype(wire, copy=False).tobytes()
        buf.write(struct.pack("<HBB", layer_idx, role_code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[MeshNet, int]:
    """Rebuild the model saved at ``path``; returns (model, stored seed)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ValueError(f"checkpoint: bad magic {bytes(view[:4])!r}, expected {CHECKPOINT_MAGIC!r}")
    version, header_len = struct.unpack_from("<HI", view, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint: unsupported format version {version}")
    off = 10
    fields = _parse_header(bytes(view[off : off + header_len]).decode("utf-8"))
    off += header_len
    cfg = MeshNetConfig(
        num_classes=int(fields["num_classes"]),
        filters=int(fields["filters"]),
        dilations=tuple(int(v) for v in fields["dilations"].split(",")),
        paddings=tuple(int(v) for v in fields["paddings"].split(",")),
        method=fields["method"],
        bd_keep_prob=float(fields["bd_keep_prob"]),
        prior=SpikeSlabPrior(
            p_prior=float(fields["p_prior"]),
            mu_prior=float(fields["mu_prior"]),
            sigma_prior=float(fields["sigma_prior"]),
        ),
        temperature=float(fields["temperature"]),
        subvolume_size=int(fields["subvolume_size"]),
    )
    dtype = np.dtype(fields["dtype"])
    wire = "<f4" if dtype == np.float32 else "<f8"
    seed = int(fields["seed"])

    (n_blobs,) = struct.unpack_from("<I", view, off)
    off += 4
    loaded: dict[tuple[int, str], np.ndarray] = {}
    for _ in range(n_blobs):
        layer_idx, role_code, ndim = struct.unpack_from("<HBB", view, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", view, off)
        off += 8
        arr = np.frombuffer(view, dtype=wire, count=int(np.prod(shape)), offset=off)
        loaded[(layer_idx, _ROLE_NAMES[role_code])] = (
            arr.reshape(shape).astype(dtype, copy=True)
        )
        off += nbytes

    model = MeshNet.build(cfg, np.random.default_rng(0), dtype=dtype)
    for i, layer in enumerate(model.layers):
        for role, t in layer.parameters():
            key = (i, role)
            if key not in loaded:
                raise ValueError(f"checkpoint: missing blob for layer {i + 1} role {role}")
            if loaded[key].shape != t.data.shape:
                raise ValueError(
                    f"checkpoint: blob shape {loaded[key].shape} does not match "
                    f"layer {i + 1} role {role} shape {t.data.shape}"
                )
            t.data = loaded[key]
    return model, seed
