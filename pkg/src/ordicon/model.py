"""Dual-encoder architecture: local (attention-gated) and global encoders,
projection heads, the fusion regressor, and DCOL1 checkpoint files."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import nn
from .numerics import make_rng

CHECKPOINT_MAGIC = b"DCOL1\n"


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 1
    height: int = 96
    width: int = 96
    stages: tuple[tuple[int, bool], ...] = ((8, True), (16, True), (32, True))

    def __post_init__(self):
        if not self.stages:
            raise ValueError("encoder needs at least one conv stage")
        object.__setattr__(self, "stages", tuple((int(c), bool(p)) for c, p in self.stages))
        h, w = self.height, self.width
        for _, pool in self.stages:
            if pool:
                if h % 2 or w % 2:
                    raise ValueError(f"spatial dims {self.height}x{self.width} not divisible by pooling")
                h, w = h // 2, w // 2

    @property
    def feature_dim(self) -> int:
        return self.stages[-1][0]

    @property
    def feature_hw(self) -> tuple[int, int]:
        n_pool = sum(p for _, p in self.stages)
        return self.height >> n_pool, self.width >> n_pool


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: tuple[int, int] = (128, 32)
    fusion: tuple[int, int] = (128, 32)
    normalize_projections: bool = True
    projector_final_relu: bool = False

    @classmethod
    def full_scale(cls, encoder: EncoderConfig | None = None) -> "ModelConfig":
        return cls(encoder or EncoderConfig(), (1280, 128), (1280, 128))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["stages"] = [list(s) for s in self.encoder.stages]
        d["projector"] = list(self.projector)
        d["fusion"] = list(self.fusion)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d.get("encoder", {}))
        if "stages" in enc:
            enc["stages"] = tuple(tuple(s) for s in enc["stages"])
        return cls(EncoderConfig(**enc), tuple(d.get("projector", (128, 32))),
                   tuple(d.get("fusion", (128, 32))), bool(d.get("normalize_projections", True)),
                   bool(d.get("projector_final_relu", False)))


class Module(nn.Layer):
    """Composite layer; subclasses list their parts in ``children()``."""

    def children(self) -> list[tuple[str, nn.Layer]]:
        raise NotImplementedError

    def astype(self, dtype):
        for _, layer in nn.iter_layers(self):
            layer.astype(dtype)
        return self


def backbone(cfg: EncoderConfig, rng, input_grad: bool = False) -> nn.Sequential:
    """Conv/relu/avg-pool stages operating on CNHW tensors."""
    layers: list[nn.Layer] = []
    c_in = cfg.channels
    for i, (c_out, pool) in enumerate(cfg.stages):
        layers.append(nn.Conv2d(c_in, c_out, rng, input_grad=input_grad or i > 0, layout="CNHW"))
        layers.append(nn.ReLU())
        if pool:
            layers.append(nn.AvgPool2d())
        c_in = c_out
    return nn.Sequential(*layers)


def _to_cnhw(x):
    return x.transpose(1, 0, 2, 3)


class AttentionBlock(Module):
    """(conv3x3 -> batchnorm -> relu) x 2 with widths c -> c/2 -> 1, then a 3x3
    stride-1 average pool and a sigmoid: a single-channel spatial map."""

    def __init__(self, channels: int, rng, layout: str = "NCHW") -> None:
        super().__init__()
        mid = max(1, channels // 2)
        self.layout = layout
        self.body = nn.Sequential(
            nn.Conv2d(channels, mid, rng, layout=layout), nn.BatchNorm2d(mid, layout=layout), nn.ReLU(),
            nn.Conv2d(mid, 1, rng, layout=layout), nn.BatchNorm2d(1, layout=layout), nn.ReLU(),
            nn.BoxSmooth2d(), nn.Sigmoid(),
        )

    def children(self):
        return [("body", self.body)]

    def forward(self, f_m, train=True):
        return self.body.forward(f_m, train)

    def backward(self, grad_out):
        return self.body.backward(grad_out)


class _Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng, input_grad: bool) -> None:
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone(cfg, rng, input_grad)
        self.gap = nn.GlobalAvgPool(layout="CNHW")

    def _check(self, x):
        c, h, w = self.cfg.channels, self.cfg.height, self.cfg.width
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise ValueError(f"encoder expects [n, {c}, {h}, {w}], got {list(x.shape)}")

    def _input_grad(self, g):
        return None if g is None else _to_cnhw(g)


class GlobalEncoder(_Encoder):
    """Backbone then global average pooling."""

    def __init__(self, cfg: EncoderConfig, rng, input_grad: bool = False) -> None:
        super().__init__(cfg, rng, input_grad)

    def children(self):
        return [("backbone", self.backbone)]

    def forward(self, x, train=True):
        self._check(x)
        return self.gap.forward(self.backbone.forward(_to_cnhw(x), train))

    def backward(self, grad_out):
        return self._input_grad(self.backbone.backward(self.gap.backward(grad_out)))


class LocalEncoder(_Encoder):
    """Backbone map ``f_m`` gated elementwise by ``f_s = attention(f_m)``, then GAP.

    ``attention_override`` (a constant) replaces ``f_s``; used by tests.
    ``last_map`` holds the most recent ``f_s`` as [n, 1, h, w].
    """

    def __init__(self, cfg: EncoderConfig, rng, input_grad: bool = False) -> None:
        super().__init__(cfg, rng, input_grad)
        self.attention = AttentionBlock(cfg.feature_dim, rng, layout="CNHW")
        self.attention_override: float | None = None
        self.last_map: np.ndarray | None = None

    def children(self):
        return [("backbone", self.backbone), ("attention", self.attention)]

    def forward(self, x, train=True):
        self._check(x)
        f_m = self.backbone.forward(_to_cnhw(x), train)
        if self.attention_override is None:
            f_s = self.attention.forward(f_m, train)
        else:
            f_s = np.full((1,) + f_m.shape[1:], self.attention_override, dtype=f_m.dtype)
        self._cache = (f_m, f_s)
        self.last_map = _to_cnhw(f_s)
        return self.gap.forward(f_m * f_s)

    def backward(self, grad_out):
        f_m, f_s = self._cache
        g = self.gap.backward(grad_out)
        g_fm = g * f_s
        if self.attention_override is None:
            g_fs = (g * f_m).sum(axis=0, keepdims=True)
            g_fm = g_fm + self.attention.backward(g_fs)
        return self._input_grad(self.backbone.backward(g_fm))


class Projector(Module):
    """dense -> relu -> dense [-> relu], then optional L2 normalisation.

    A trailing relu lets whole rows die at zero, which the normalisation
    cannot handle, so it is off unless ``final_relu`` is set.
    """

    def __init__(self, d_in: int, widths=(128, 32), rng=None, normalize: bool = True,
                 final_relu: bool = False) -> None:
        super().__init__()
        p1, p2 = widths
        if min(p1, p2) < 2:
            raise ValueError("projector widths must be at least 2")
        layers = [nn.Dense(d_in, p1, rng), nn.ReLU(), nn.Dense(p1, p2, rng)]
        if final_relu:
            layers.append(nn.ReLU())
        if normalize:
            layers.append(nn.L2Normalize())
        self.net = nn.Sequential(*layers)
        self.normalize = normalize

    def children(self):
        return [("net", self.net)]

    def forward(self, x, train=True):
        return self.net.forward(x, train)

    def backward(self, grad_out):
        return self.net.backward(grad_out)


class FusionRegressor(Module):
    """Concatenate (local, global) features -> dense/relu x 2 -> linear(1)."""

    def __init__(self, in_widths: tuple[int | None, int | None], widths=(128, 32), rng=None) -> None:
        super().__init__()
        self.in_widths = tuple(in_widths)
        d_in = sum(w for w in self.in_widths if w)
        if d_in == 0:
            raise ValueError("fusion regressor needs at least one input")
        p1, p2 = widths
        self.net = nn.Sequential(nn.Dense(d_in, p1, rng), nn.ReLU(), nn.Dense(p1, p2, rng), nn.ReLU(),
                                 nn.Dense(p2, 1, rng))

    def children(self):
        return [("net", self.net)]

    def forward(self, feat_local, feat_global=None, train=True):
        for name, width, feat in zip(("local", "global"), self.in_widths, (feat_local, feat_global)):
            if width:
                if feat is None or feat.ndim != 2 or feat.shape[1] != width:
                    got = None if feat is None else list(feat.shape)
                    raise ValueError(f"{name} features must be [n, {width}], got {got}")
        parts = [f for w, f in zip(self.in_widths, (feat_local, feat_global)) if w]
        x = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        return self.net.forward(x, train)[:, 0]

    def backward(self, grad_out):
        g = self.net.backward(grad_out[:, None])
        out, start = [], 0
        for w in self.in_widths:
            if w:
                out.append(g[:, start:start + w])
                start += w
            else:
                out.append(None)
        return tuple(out)


def make_projector(cfg: ModelConfig, rng) -> Projector:
    return Projector(cfg.encoder.feature_dim, cfg.projector, rng, cfg.normalize_projections,
                     cfg.projector_final_relu)


def attention_map(f_m, block: AttentionBlock, train=False):
    return block.forward(f_m, train)


def fuse_and_regress(feat_local, feat_global, regressor: FusionRegressor, train=False):
    return regressor.forward(feat_local, feat_global, train)


def project(features, projector: Projector, train=False):
    return projector.forward(features, train)


class DCOLModel(Module):
    """All trainable parts of the dual-encoder pipeline."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0,
                 use_local: bool = True, use_global: bool = True, dtype=np.float32) -> None:
        super().__init__()
        self.cfg = cfg
        rng = make_rng(seed)
        d = cfg.encoder.feature_dim
        self.local = LocalEncoder(cfg.encoder, rng)
        self.global_ = GlobalEncoder(cfg.encoder, rng)
        self.proj_local = make_projector(cfg, rng)
        self.proj_global = make_projector(cfg, rng)
        self.regressor = FusionRegressor((d if use_local else None, d if use_global else None),
                                         cfg.fusion, rng)
        self.astype(dtype)

    def children(self):
        return [("local", self.local), ("global", self.global_), ("proj_local", self.proj_local),
                ("proj_global", self.proj_global), ("regressor", self.regressor)]

    def encoders(self) -> list[tuple[str, Module]]:
        out = []
        if self.regressor.in_widths[0]:
            out.append(("local", self.local))
        if self.regressor.in_widths[1]:
            out.append(("global", self.global_))
        return out

    def features(self, x, train=False):
        fl = self.local.forward(x, train) if self.regressor.in_widths[0] else None
        fg = self.global_.forward(x, train) if self.regressor.in_widths[1] else None
        return fl, fg

    def predict(self, x, batch_size: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch_size):
            xb = np.asarray(x[i:i + batch_size], dtype=self.dtype)
            fl, fg = self.features(xb, train=False)
            out.append(self.regressor.forward(fl, fg, train=False))
        return np.concatenate(out) if out else np.zeros(0, dtype=self.dtype)

    @property
    def dtype(self):
        return self.regressor.net.layers[0].params["W"].dtype


# -- parameter plumbing -----------------------------------------------------

def named_tensors(module, buffers: bool = True) -> Iterator[tuple[str, np.ndarray]]:
    for lname, layer in nn.iter_layers(module):
        for k, v in layer.params.items():
            yield f"{lname}.{k}", v
        if buffers:
            for k, v in layer.buffers.items():
                yield f"{lname}.{k}", v


def named_params(module) -> Iterator[tuple[str, nn.Layer, str]]:
    """``(name, layer, key)`` for every trainable array; ``layer.params[key]`` is the array."""
    for lname, layer in nn.iter_layers(module):
        for k in layer.params:
            yield f"{lname}.{k}", layer, k


def param_count(module) -> int:
    return int(sum(v.size for _, layer, k in named_params(module) for v in [layer.params[k]]))


def get_state(module) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in named_tensors(module)}


def set_state(module, state: dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
    for lname, layer in nn.iter_layers(module):
        for store in (layer.params, layer.buffers):
            for k in store:
                key = f"{prefix}{lname}.{k}"
                if key not in state:
                    if strict:
                        raise KeyError(f"checkpoint lacks tensor {key}")
                    continue
                v = state[key]
                if v.shape != store[k].shape:
                    raise ValueError(f"shape mismatch for {key}: checkpoint {v.shape}, model {store[k].shape}")
                store[k] = v.astype(store[k].dtype, copy=True)


def state_checksum(module) -> str:
    h = hashlib.sha256()
    for name, v in named_tensors(module):
        h.update(name.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


# -- DCOL1 checkpoint files -------------------------------------------------
# layout: b"DCOL1\n", 8-byte little-endian header length, UTF-8 JSON header,
# then the float32 little-endian payload; header offsets partition the payload.

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict | None = None,
                    metadata: dict | None = None) -> None:
    entries, offset, chunks = [], 0, []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
        chunks.append(arr.tobytes())
    header = {"format": "DCOL1", "config": config or {}, "metadata": metadata or {},
              "tensors": entries, "payload_bytes": offset}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Return ``(tensors, config, metadata)``; tensors are float32."""
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a DCOL1 checkpoint")
    p = len(CHECKPOINT_MAGIC)
    if len(buf) < p + 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", buf[p:p + 8])
    p += 8
    try:
        header = json.loads(buf[p:p + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from None
    payload = buf[p + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    tensors, expect = {}, 0
    for e in header["tensors"]:
        if e["offset"] != expect:
            raise CheckpointError(f"{path}: tensor {e['name']} offset {e['offset']} breaks the partition")
        arr = np.frombuffer(payload, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
        expect += e["nbytes"]
    if expect != len(payload):
        raise CheckpointError(f"{path}: manifest covers {expect} of {len(payload)} payload bytes")
    return tensors, header.get("config", {}), header.get("metadata", {})
