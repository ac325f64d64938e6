"""Motion planning transformer: query encoding, CNN tokenizer, encoder, anchor classifier.

The network maps a (2, H, W) input (free-space channel + start/goal channel) to
one 2-way logit per anchor. Anchors tile the map with a pitch equal to the
feature-extractor stride.
"""
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, register_gradcheck
from .worldgen import Costmap

CHECKPOINT_MAGIC = b"MPTC"
CHECKPOINT_VERSION = 1


class QueryError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class CheckpointError(IOError):
    pass


def default_feature_layers(d_model: int) -> List[list]:
    return [["conv", 6, 5, 1], ["pool", 2], ["relu"],
            ["conv", 16, 5, 1], ["pool", 2], ["relu"],
            ["conv", d_model, 5, 5]]


@dataclass
class ModelConfig:
    d_model: int = 512
    n_layers: int = 6
    n_heads: int = 3
    d_k: int = 512
    d_v: int = 256
    mlp_hidden: Optional[int] = None
    dropout_rate: float = 0.1
    max_tokens: int = 1600
    patch_px: int = 20
    in_channels: int = 2
    feature_layers: Optional[List[list]] = None

    def __post_init__(self):
        if self.mlp_hidden is None:
            self.mlp_hidden = 2 * self.d_model
        if self.feature_layers is None:
            self.feature_layers = default_feature_layers(self.d_model)
        self.feature_layers = [list(l) for l in self.feature_layers]
        for name in ("d_model", "n_layers", "n_heads", "d_k", "d_v", "mlp_hidden", "max_tokens", "patch_px"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        convs = [l for l in self.feature_layers if l[0] == "conv"]
        if not convs or convs[-1][1] != self.d_model:
            raise ValueError("last feature conv must output d_model channels")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(d_model=64, n_layers=2, n_heads=1, d_k=64, d_v=64, dropout_rate=0.1)
        base.update(kw)
        return cls(**base)


# --- geometry of the feature stack ------------------------------------------

def total_stride(layers) -> int:
    s = 1
    for l in layers:
        if l[0] == "conv":
            s *= l[3]
        elif l[0] == "pool":
            s *= l[1]
    return s


def receptive_field(layers) -> int:
    r = 1
    for l in reversed(layers):
        if l[0] == "conv":
            r = (r - 1) * l[3] + l[2]
        elif l[0] == "pool":
            r = (r - 1) * l[1] + l[1]
    return r


def _stack_extent(n: int, layers) -> Optional[int]:
    """Output extent, or None if the stack cannot run on n pixels without cropping."""
    for l in layers:
        if l[0] == "conv":
            if n < l[2]:
                return None
            n = (n - l[2]) // l[3] + 1
        elif l[0] == "pool":
            if n % l[1]:
                return None
            n //= l[1]
    return n


def compatible_extent(n: int, layers) -> int:
    """Largest m <= n the stack accepts (pool inputs divisible)."""
    for m in range(n, 0, -1):
        if _stack_extent(m, layers):
            return m
    raise ad.ShapeError(f"extent {n} too small for the feature stack")


@dataclass
class AnchorGrid:
    rows: int
    cols: int
    stride_px: int
    offset_px: float
    height: int
    width: int
    resolution: float = 0.05

    @property
    def n_tokens(self) -> int:
        return self.rows * self.cols

    def cell(self, t: int) -> Tuple[int, int]:
        return divmod(int(t), self.cols)

    def token(self, row: int, col: int) -> int:
        return row * self.cols + col

    def centers_px(self) -> np.ndarray:
        """(n_tokens, 2) anchor centres as (x_px, y_px) in continuous pixel units."""
        r, c = np.divmod(np.arange(self.n_tokens), self.cols)
        return np.stack([self.offset_px + c * self.stride_px, self.offset_px + r * self.stride_px], axis=1).astype(float)

    def centers_m(self) -> np.ndarray:
        return self.centers_px() * self.resolution

    def pixel_tokens(self) -> np.ndarray:
        """(H, W) token id owning each pixel (nearest anchor; the far remnant joins the last row/col)."""
        rr = np.minimum(np.arange(self.height) // self.stride_px, self.rows - 1)
        cc = np.minimum(np.arange(self.width) // self.stride_px, self.cols - 1)
        return rr[:, None] * self.cols + cc[None, :]


def anchor_grid(cfg: "ModelConfig", height: int, width: int, resolution: float = 0.05) -> AnchorGrid:
    """Token grid the model produces for an H x W map, without running it."""
    layers = cfg.feature_layers
    rows = _stack_extent(compatible_extent(height, layers), layers)
    cols = _stack_extent(compatible_extent(width, layers), layers)
    s = total_stride(layers)
    return AnchorGrid(rows, cols, s, s / 2.0, height, width, resolution)


@dataclass
class MaskGrid:
    mask: np.ndarray  # (H, W) bool
    tau: float
    selected: np.ndarray  # token ids
    forced: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def popcount(self) -> int:
        return int(self.mask.sum())


def patch_slices(center_rc: Tuple[int, int], p_px: int, shape) -> Tuple[slice, slice]:
    r, c = center_rc
    h, w = shape
    r0, c0 = r - p_px // 2, c - p_px // 2
    return slice(max(r0, 0), min(r0 + p_px, h)), slice(max(c0, 0), min(c0 + p_px, w))


def _checked_pixel(cmap: Costmap, pos, what: str) -> Tuple[int, int]:
    if not cmap.in_bounds(pos):
        raise QueryError(f"{what} {tuple(pos)} lies outside the map")
    return cmap.to_pixel(pos)


def encode_query(cmap: Costmap, start, goal, p_px: int = 20) -> np.ndarray:
    """(2, H, W) float32 input; start patch +1, goal patch -1, start wins on overlap."""
    s = _checked_pixel(cmap, start, "start")
    g = _checked_pixel(cmap, goal, "goal")
    x = np.zeros((2, cmap.height, cmap.width), dtype=np.float32)
    x[0] = cmap.values()
    x[1][patch_slices(g, p_px, cmap.occupancy.shape)] = -1.0
    x[1][patch_slices(s, p_px, cmap.occupancy.shape)] = 1.0
    return x


# --- parameters -------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    a = math.sqrt(1.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(np.float32)


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    c = cfg.in_channels
    for i, l in enumerate(cfg.feature_layers):
        if l[0] == "conv":
            shapes[f"fe.{i}.weight"] = (l[1], c, l[2], l[2])
            shapes[f"fe.{i}.bias"] = (l[1],)
            c = l[1]
    d, h = cfg.d_model, cfg.n_heads
    for i in range(cfg.n_layers):
        p = f"enc.{i}."
        shapes.update({
            p + "wq": (d, h * cfg.d_k), p + "bq": (h * cfg.d_k,),
            p + "wk": (d, h * cfg.d_k), p + "bk": (h * cfg.d_k,),
            p + "wv": (d, h * cfg.d_v), p + "bv": (h * cfg.d_v,),
            p + "wo": (h * cfg.d_v, d), p + "bo": (d,),
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "w1": (d, cfg.mlp_hidden), p + "b1": (cfg.mlp_hidden,),
            p + "w2": (cfg.mlp_hidden, d), p + "b2": (d,),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
        })
    shapes["cls.weight"] = (d, 2)
    shapes["cls.bias"] = (2,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> Dict[str, Tensor]:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, unit layernorm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            arr = np.ones(shape, dtype=np.float32)
        elif leaf.startswith("b") or leaf == "bias":
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            arr = _uniform(rng, shape, fan_in)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


# --- forward pieces ----------------------------------------------------------

def extract_features(x: Tensor, params: Dict[str, Tensor], cfg: ModelConfig,
                     resolution: float = 0.05) -> Tuple[Tensor, AnchorGrid]:
    """CNN tokenizer: (N,2,H,W) or (2,H,W) -> (N,T,d) or (T,d) tokens, row-major grid order."""
    squeeze = x.data.ndim == 3
    h, w = x.shape[-2:]
    h2, w2 = compatible_extent(h, cfg.feature_layers), compatible_extent(w, cfg.feature_layers)
    if (h2, w2) != (h, w):
        x = Tensor(x.data[..., :h2, :w2], dtype=x.dtype)
    out = x
    for i, l in enumerate(cfg.feature_layers):
        if l[0] == "conv":
            out = ad.conv2d(out, params[f"fe.{i}.weight"], params[f"fe.{i}.bias"], stride=l[3])
        elif l[0] == "pool":
            out = ad.maxpool2d(out, l[1])
        elif l[0] == "relu":
            out = ad.relu(out)
        else:
            raise ValueError(f"unknown feature layer {l!r}")
    if squeeze:
        out = ad.reshape(out, (1,) + out.shape)
    n, d, hl, wl = out.shape
    tokens = ad.transpose(ad.reshape(out, (n, d, hl * wl)), (0, 2, 1))
    if squeeze:
        tokens = ad.reshape(tokens, (hl * wl, d))
    stride = total_stride(cfg.feature_layers)
    grid = AnchorGrid(hl, wl, stride, stride / 2.0, h, w, resolution)
    return tokens, grid


_PE_CACHE: Dict[Tuple[int, int], np.ndarray] = {}


def positional_encoding(n_tokens: int, d_model: int, max_tokens: int = 1600) -> np.ndarray:
    """Fixed sinusoidal table over the flattened token index (float32)."""
    if n_tokens > max_tokens:
        raise CapacityError(f"{n_tokens} tokens exceed positional capacity {max_tokens}")
    key = (max_tokens, d_model)
    if key not in _PE_CACHE:
        pos = np.arange(max_tokens, dtype=np.float64)[:, None]
        i2 = np.arange(0, d_model, 2, dtype=np.float64)
        ang = pos / np.power(10000.0, i2 / d_model)
        pe = np.zeros((max_tokens, d_model))
        pe[:, 0::2] = np.sin(ang)
        pe[:, 1::2] = np.cos(ang[:, : d_model // 2])
        _PE_CACHE[key] = pe.astype(np.float32)
    return _PE_CACHE[key][:n_tokens]


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def msa(x: Tensor, p: Dict[str, Tensor], prefix: str, cfg: ModelConfig, attn_out: Optional[list] = None) -> Tensor:
    """Multi-head self-attention on (N, T, d). Heads use full-width d_k / d_v projections."""
    n, t, _ = x.shape
    h, dk, dv = cfg.n_heads, cfg.d_k, cfg.d_v

    def heads(z, dim):
        return ad.transpose(ad.reshape(z, (n, t, h, dim)), (0, 2, 1, 3))

    q = heads(_linear(x, p[prefix + "wq"], p[prefix + "bq"]), dk)
    k = heads(_linear(x, p[prefix + "wk"], p[prefix + "bk"]), dk)
    v = heads(_linear(x, p[prefix + "wv"], p[prefix + "bv"]), dv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    att = ad.softmax(scores, axis=-1)
    if attn_out is not None:
        attn_out.append(att.data)
    ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (n, t, h * dv))
    return _linear(ctx, p[prefix + "wo"], p[prefix + "bo"])


def mlp(x: Tensor, p: Dict[str, Tensor], prefix: str) -> Tensor:
    return _linear(ad.relu(_linear(x, p[prefix + "w1"], p[prefix + "b1"])), p[prefix + "w2"], p[prefix + "b2"])


def encoder_layer(x: Tensor, p, i: int, cfg: ModelConfig, training: bool, rng, attn_out=None) -> Tensor:
    pre = f"enc.{i}."
    a = ad.dropout(msa(x, p, pre, cfg, attn_out), cfg.dropout_rate, rng, training)
    x = ad.layernorm(ad.add(x, a), p[pre + "ln1.gain"], p[pre + "ln1.bias"])
    m = ad.dropout(mlp(x, p, pre), cfg.dropout_rate, rng, training)
    return ad.layernorm(ad.add(x, m), p[pre + "ln2.gain"], p[pre + "ln2.bias"])


def encoder_forward(tokens: Tensor, params, cfg: ModelConfig, training: bool = False,
                    rng: Optional[np.random.Generator] = None, use_positions: bool = True,
                    attn_out: Optional[list] = None) -> Tensor:
    squeeze = tokens.data.ndim == 2
    x = ad.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    if x.shape[-1] != cfg.d_model:
        raise ad.ShapeError(f"token dim {x.shape[-1]} != d_model {cfg.d_model}")
    if use_positions:
        pe = positional_encoding(x.shape[1], cfg.d_model, cfg.max_tokens).astype(x.dtype)
        x = ad.add(x, Tensor(pe, dtype=x.dtype))
    elif x.shape[1] > cfg.max_tokens:
        raise CapacityError(f"{x.shape[1]} tokens exceed positional capacity {cfg.max_tokens}")
    if training and rng is None:
        raise ValueError("training mode needs an rng for dropout")
    for i in range(cfg.n_layers):
        x = encoder_layer(x, params, i, cfg, training, rng, attn_out)
    return ad.reshape(x, x.shape[1:]) if squeeze else x


def classify_anchors(encoded: Tensor, params) -> Tensor:
    """Shared per-token linear map (a 1x1 convolution over the token grid) to 2 logits."""
    return _linear(encoded, params["cls.weight"], params["cls.bias"])


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class MPTModel:
    def __init__(self, cfg: ModelConfig, params: Optional[Dict[str, Tensor]] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def forward(self, x: Tensor, training: bool = False, rng=None, resolution: float = 0.05,
                attn_out: Optional[list] = None) -> Tuple[Tensor, AnchorGrid]:
        tokens, grid = extract_features(x, self.params, self.cfg, resolution)
        enc = encoder_forward(tokens, self.params, self.cfg, training, rng, attn_out=attn_out)
        return classify_anchors(enc, self.params), grid

    def predict(self, cmap: Costmap, start, goal) -> Tuple[np.ndarray, AnchorGrid]:
        """Path probability per anchor, dropout off."""
        x = Tensor(encode_query(cmap, start, goal, self.cfg.patch_px))
        logits, grid = self.forward(x, training=False, resolution=cmap.resolution)
        grid.height, grid.width = cmap.height, cmap.width
        return softmax_np(logits.data.astype(np.float64))[:, 1], grid


def patch_mask(grid: AnchorGrid, tokens) -> np.ndarray:
    owner = grid.pixel_tokens()
    sel = np.zeros(grid.n_tokens, dtype=bool)
    sel[np.asarray(tokens, dtype=np.int64)] = True
    return sel[owner]


def build_mask(probs, grid: AnchorGrid, tau: float, start, goal, p_px: int) -> MaskGrid:
    """Union of patches of anchors with P(path) >= tau, plus start and goal patches.

    ``probs`` is either (T,) path probabilities or (T, 2) class probabilities.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    probs = np.asarray(probs)
    p_path = probs[:, 1] if probs.ndim == 2 else probs
    selected = np.flatnonzero(p_path >= tau)
    mask = patch_mask(grid, selected)
    forced = []
    for pos in (start, goal):
        rc = (int(math.floor(pos[1] / grid.resolution)), int(math.floor(pos[0] / grid.resolution)))
        mask[patch_slices(rc, p_px, mask.shape)] = True
        forced.append(rc)
    return MaskGrid(mask, tau, selected, forced)


def probability_image(p_path: np.ndarray, grid: AnchorGrid) -> np.ndarray:
    """Nearest-anchor upsampling to an (H, W) uint8 image, round(255 * P)."""
    vals = np.rint(255.0 * np.clip(p_path, 0.0, 1.0)).astype(np.uint8)
    return vals[grid.pixel_tokens()]


# --- checkpoint I/O ----------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, params: Dict[str, Tensor]) -> None:
    """MPTC v1: magic, u32 version, u64 header length, JSON header, raw LE float32.

    ``byte_offset`` in the header is relative to the first data byte.
    """
    tensors, blobs, off = {}, [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        b = arr.tobytes()
        tensors[name] = {"shape": list(arr.shape), "byte_offset": off, "byte_len": len(b)}
        blobs.append(b)
        off += len(b)
    header = json.dumps({"config": cfg.to_dict(), "tensors": tensors}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Tuple[ModelConfig, Dict[str, Tensor]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic or short file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    data = raw[16 + hlen:]
    expected = param_shapes(cfg)
    if set(entries) != set(expected):
        missing = sorted(set(expected) ^ set(entries))
        raise CheckpointError(f"{path}: tensor names differ from config: {missing[:5]}")
    params = {}
    for name, e in entries.items():
        shape = tuple(e["shape"])
        if shape != expected[name]:
            raise CheckpointError(f"{path}: {name} shape {shape} != config shape {expected[name]}")
        n = int(np.prod(shape)) * 4
        if e["byte_len"] != n:
            raise CheckpointError(f"{path}: {name} byte_len {e['byte_len']} != {n}")
        lo = e["byte_offset"]
        if lo < 0 or lo + n > len(data):
            raise CheckpointError(f"{path}: {name} data truncated")
        arr = np.frombuffer(data[lo:lo + n], dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    total = sum(e["byte_len"] for e in entries.values())
    if len(data) != total:
        raise CheckpointError(f"{path}: data section is {len(data)} bytes, expected {total}")
    return cfg, params


# --- gradcheck registrations for the assembled blocks ------------------------

_GC_CFG = ModelConfig(d_model=8, n_layers=1, n_heads=2, d_k=4, d_v=3, mlp_hidden=10, dropout_rate=0.0,
                      max_tokens=64, feature_layers=[["conv", 3, 5, 1], ["pool", 2], ["relu"],
                                                     ["conv", 4, 5, 1], ["pool", 2], ["relu"],
                                                     ["conv", 8, 5, 5]])


def _gc_params(rng, names):
    shapes = param_shapes(_GC_CFG)
    return [rng.normal(scale=0.5, size=shapes[n]) + (1.0 if n.endswith("gain") else 0.0) for n in names]


_MSA_NAMES = ["enc.0." + s for s in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
_MLP_NAMES = ["enc.0." + s for s in ("w1", "b1", "w2", "b2")]
_LAYER_NAMES = _MSA_NAMES + ["enc.0.ln1.gain", "enc.0.ln1.bias"] + _MLP_NAMES + ["enc.0.ln2.gain", "enc.0.ln2.bias"]


@register_gradcheck("msa_block")
def _gc_msa(rng):
    def fn(x, *ps):
        return msa(x, dict(zip(_MSA_NAMES, ps)), "enc.0.", _GC_CFG)
    return [rng.normal(size=(2, 5, 8))] + _gc_params(rng, _MSA_NAMES), fn


@register_gradcheck("mlp_block")
def _gc_mlp(rng):
    def fn(x, *ps):
        return mlp(x, dict(zip(_MLP_NAMES, ps)), "enc.0.")
    # keep hidden pre-activations away from the relu kink
    arrays = [rng.normal(size=(2, 5, 8))] + _gc_params(rng, _MLP_NAMES)
    arrays[2] = arrays[2] + np.sign(arrays[2]) * 0.3
    return arrays, fn


@register_gradcheck("encoder_layer")
def _gc_layer(rng):
    def fn(x, *ps):
        return encoder_layer(x, dict(zip(_LAYER_NAMES, ps)), 0, _GC_CFG, False, None)
    arrays = [rng.normal(size=(1, 4, 8))] + _gc_params(rng, _LAYER_NAMES)
    return arrays, fn


_FE_NAMES = [f"fe.{i}.{s}" for i in (0, 3, 6) for s in ("weight", "bias")]


@register_gradcheck("feature_extractor")
def _gc_fe(rng):
    def fn(x, *ps):
        return extract_features(x, dict(zip(_FE_NAMES, ps)), _GC_CFG)[0]
    return [rng.normal(size=(2, 52, 52))] + _gc_params(rng, _FE_NAMES), fn


@register_gradcheck("classifier")
def _gc_cls(rng):
    def fn(x, w, b):
        return classify_anchors(x, {"cls.weight": w, "cls.bias": b})
    return [rng.normal(size=(6, 8)), rng.normal(size=(8, 2)), rng.normal(size=(2,))], fn
