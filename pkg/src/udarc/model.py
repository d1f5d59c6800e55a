"""Miniature post-LN transformer encoder with shared and task-specific layers.

The bottom ``num_layers - n_task_specific`` layers are shared. The top
``n_task_specific`` layers exist twice, once for reading comprehension and
once for language modeling, cloned from the same initial weights. Parameters
live in one flat ``name -> Tensor`` mapping whose prefixes define the groups:

* ``embeddings.*``, ``shared.*``     -> shared group
* ``rc.*``, ``rc_head.*``            -> RC group
* ``lm.*``, ``mlm_head.*``, ``nsp_head.*`` -> LM group
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LAYER_PARAMS = (
    ("attn.qkv.weight", "hh3"), ("attn.qkv.bias", "3h"),
    ("attn.out.weight", "hh"), ("attn.out.bias", "h"),
    ("attn.ln.gain", "one"), ("attn.ln.bias", "h"),
    ("ffn.in.weight", "hf"), ("ffn.in.bias", "f"),
    ("ffn.out.weight", "fh"), ("ffn.out.bias", "h"),
    ("ffn.ln.gain", "one"), ("ffn.ln.bias", "h"),
)


class ConfigError(ValueError):
    pass


class TaskRoute(enum.Enum):
    RC = "rc"
    LM = "lm"
    NSP_LM = "nsp_lm"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ff_dim: int = 256
    max_position: int = 512
    n_task_specific: int = 1
    dropout: float = 0.0
    gelu_approximate: bool = False
    tie_mlm_weights: bool = False
    layer_norm_eps: float = 1e-12

    def validate(self) -> None:
        for name in ("vocab_size", "hidden", "num_layers", "num_heads", "ff_dim", "max_position"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.n_task_specific <= self.num_layers:
            raise ConfigError(f"n_task_specific={self.n_task_specific} must lie in [0, num_layers={self.num_layers}]")
        if self.hidden % self.num_heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    @property
    def num_shared(self) -> int:
        return self.num_layers - self.n_task_specific

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def param_group(name: str) -> str:
    head = name.split(".", 1)[0]
    if head in ("embeddings", "shared"):
        return "shared"
    if head in ("rc", "rc_head"):
        return "rc"
    if head in ("lm", "mlm_head", "nsp_head"):
        return "lm"
    raise KeyError(f"parameter {name!r} belongs to no group")


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self.tensors)
        return [n for n in self.tensors if param_group(n) == group]

    def manifest(self) -> dict[str, list[str]]:
        return {g: self.names(g) for g in ("shared", "rc", "lm")}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def snapshot(self, group: str | None = None) -> dict[str, np.ndarray]:
        return {n: self.tensors[n].data.copy() for n in self.names(group)}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.copy(), requires_grad=True, name=n)
                                         for n, t in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _layer_arrays(config: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    h, f = config.hidden, config.ff_dim
    shapes = {"hh3": (h, 3 * h), "3h": (3 * h,), "hh": (h, h), "h": (h,), "hf": (h, f), "f": (f,),
              "fh": (f, h), "one": (h,)}
    out = {}
    for name, kind in LAYER_PARAMS:
        if kind == "one":
            out[name] = np.ones(shapes[kind])
        elif name.endswith("weight"):
            out[name] = _truncated_normal(rng, shapes[kind])
        else:
            out[name] = np.zeros(shapes[kind])
    return out


def _head_arrays(config: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    h, v = config.hidden, config.vocab_size
    arrays = {
        "rc_head.weight": _truncated_normal(rng, (h, 2)),
        "rc_head.bias": np.zeros(2),
        "mlm_head.transform.weight": _truncated_normal(rng, (h, h)),
        "mlm_head.transform.bias": np.zeros(h),
        "mlm_head.ln.gain": np.ones(h),
        "mlm_head.ln.bias": np.zeros(h),
    }
    if not config.tie_mlm_weights:
        arrays["mlm_head.decoder.weight"] = _truncated_normal(rng, (h, v))
    arrays["mlm_head.decoder.bias"] = np.zeros(v)
    arrays["nsp_head.weight"] = _truncated_normal(rng, (h, 2))
    arrays["nsp_head.bias"] = np.zeros(2)
    return arrays


def init_params(config: EncoderConfig, rng: np.random.Generator | int = 0) -> ModelParams:
    """Random base encoder whose top ``n_task_specific`` layers are cloned into RC and LM copies."""
    config.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    h = config.hidden
    arrays = {
        "embeddings.token": _truncated_normal(rng, (config.vocab_size, h)),
        "embeddings.segment": _truncated_normal(rng, (2, h)),
        "embeddings.position": _truncated_normal(rng, (config.max_position, h)),
        "embeddings.ln.gain": np.ones(h),
        "embeddings.ln.bias": np.zeros(h),
    }
    base = [_layer_arrays(config, rng) for _ in range(config.num_layers)]
    arrays.update(_head_arrays(config, rng))
    _place_layers(arrays, config, base)
    return _wrap(config, arrays)


def _place_layers(arrays: dict, config: EncoderConfig, base: list[dict[str, np.ndarray]]) -> None:
    for i, layer in enumerate(base[:config.num_shared]):
        for k, v in layer.items():
            arrays[f"shared.{i}.{k}"] = v
    for j, layer in enumerate(base[config.num_shared:]):
        for k, v in layer.items():
            arrays[f"rc.{j}.{k}"] = v.copy()
            arrays[f"lm.{j}.{k}"] = v.copy()


_ORDER = {"embeddings": 0, "shared": 1, "rc": 2, "rc_head": 3, "lm": 4, "mlm_head": 5, "nsp_head": 6}


def _sort_key(name: str):
    parts = name.split(".")
    layer = int(parts[1]) if len(parts) > 1 and parts[1].isdigit() else -1
    return _ORDER[parts[0]], layer, name


def _wrap(config: EncoderConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    return ModelParams(config, {n: Tensor(arrays[n], requires_grad=True, name=n) for n in sorted(arrays, key=_sort_key)})


def base_layers(params: ModelParams, route: TaskRoute = TaskRoute.LM) -> list[dict[str, np.ndarray]]:
    """The full layer stack seen by ``route`` as plain arrays."""
    c = params.config
    prefix = "rc" if route is TaskRoute.RC else "lm"
    stack = [f"shared.{i}" for i in range(c.num_shared)] + [f"{prefix}.{j}" for j in range(c.n_task_specific)]
    return [{k: params[f"{p}.{k}"].data.copy() for k, _ in LAYER_PARAMS} for p in stack]


def from_base(base: ModelParams, n_task_specific: int, rng: np.random.Generator | int = 0) -> ModelParams:
    """Re-partition a pretrained checkpoint for a new ``n_task_specific``.

    The LM-route stack of ``base`` is the pretrained encoder; its top layers
    are cloned into fresh RC and LM copies. Embeddings and LM heads carry
    over; the RC head is newly initialized.
    """
    config = EncoderConfig.from_dict({**base.config.to_dict(), "n_task_specific": n_task_specific})
    config.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    carried = ("embeddings.", "mlm_head.", "nsp_head.")
    arrays = {n: t.data.copy() for n, t in base.tensors.items() if n.startswith(carried)}
    arrays["rc_head.weight"] = _truncated_normal(rng, (config.hidden, 2))
    arrays["rc_head.bias"] = np.zeros(2)
    _place_layers(arrays, config, base_layers(base, TaskRoute.LM))
    return _wrap(config, arrays)


def reclone_rc_layers(params: ModelParams) -> None:
    """Overwrite the RC-specific layers with copies of the LM-specific ones."""
    for j in range(params.config.n_task_specific):
        for k, _ in LAYER_PARAMS:
            params[f"rc.{j}.{k}"].data = params[f"lm.{j}.{k}"].data.copy()


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _layer_forward(params: ModelParams, prefix: str, x: Tensor, key_mask: np.ndarray,
                   rng: np.random.Generator | None) -> Tensor:
    c = params.config
    rate = c.dropout if rng is not None else 0.0
    p = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    b, s, h = x.shape
    nh, d = c.num_heads, c.hidden // c.num_heads
    qkv = nx.linear(x, p("attn.qkv.weight"), p("attn.qkv.bias"))
    qkv = nx.transpose(nx.reshape(qkv, (b, s, 3, nh, d)), (2, 0, 3, 1, 4))  # 3, b, nh, s, d
    q, k, v = (nx.reshape(nx.take_first(qkv, i), (b, nh, s, d)) for i in range(3))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    probs = nx.softmax_rows(scores, key_mask)
    probs = nx.dropout(probs, rate, rng)
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (b, s, h))
    attn = nx.dropout(nx.linear(ctx, p("attn.out.weight"), p("attn.out.bias")), rate, rng)
    x = nx.layer_norm(nx.add(x, attn), p("attn.ln.gain"), p("attn.ln.bias"), c.layer_norm_eps)
    ff = nx.gelu(nx.linear(x, p("ffn.in.weight"), p("ffn.in.bias")), c.gelu_approximate)
    ff = nx.dropout(nx.linear(ff, p("ffn.out.weight"), p("ffn.out.bias")), rate, rng)
    return nx.layer_norm(nx.add(x, ff), p("ffn.ln.gain"), p("ffn.ln.bias"), c.layer_norm_eps)


def encode(params: ModelParams, input_ids, segment_ids, attention_mask, route: TaskRoute,
           rng: np.random.Generator | None = None) -> Tensor:
    """Contextual encodings ``(batch, seq, hidden)``; 1-D inputs give ``(seq, hidden)``.

    Dropout is applied only when ``rng`` is given (training); without it the
    pass is deterministic inference.
    """
    c = params.config
    ids = np.asarray(input_ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    segs = np.asarray(segment_ids, dtype=np.int64).reshape(ids.shape)
    mask = np.asarray(attention_mask).reshape(ids.shape).astype(bool)
    b, s = ids.shape
    if s > c.max_position:
        raise IndexError(f"sequence length {s} exceeds max_position {c.max_position}")
    if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
        raise IndexError(f"token id out of range [0, {c.vocab_size})")
    x = nx.add(nx.embedding(params["embeddings.token"], ids), nx.embedding(params["embeddings.segment"], segs))
    pos = nx.embedding(params["embeddings.position"], np.broadcast_to(np.arange(s), (b, s)))
    x = nx.layer_norm(nx.add(x, pos), params["embeddings.ln.gain"], params["embeddings.ln.bias"], c.layer_norm_eps)
    x = nx.dropout(x, c.dropout if rng is not None else 0.0, rng)
    key_mask = mask[:, None, None, :]
    for i in range(c.num_shared):
        x = _layer_forward(params, f"shared.{i}", x, key_mask, rng)
    prefix = "rc" if route is TaskRoute.RC else "lm"
    for j in range(c.n_task_specific):
        x = _layer_forward(params, f"{prefix}.{j}", x, key_mask, rng)
    return nx.reshape(x, (s, c.hidden)) if single else x


def _stack(features, attr: str) -> np.ndarray:
    return np.stack([np.asarray(getattr(f, attr)) for f in features])


def collate(features, attrs=("input_ids", "segment_ids", "attention_mask")) -> dict[str, np.ndarray]:
    """Stack feature arrays and trim trailing columns that are padding in every row."""
    if not isinstance(features, (list, tuple)):
        features = [features]
    out = {a: _stack(features, a) for a in attrs}
    mask = out["attention_mask"]
    used = mask.any(axis=0)
    width = int(np.nonzero(used)[0].max()) + 1 if used.any() else 1
    return {a: v[:, :width] for a, v in out.items()}


def forward_rc(params: ModelParams, features, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Start and end scores per position. Padding positions are pushed to MASK_VALUE.

    Accepts one feature (returns ``(seq,)`` tensors) or a list (``(batch, seq)``).
    """
    single = not isinstance(features, (list, tuple))
    batch = collate(features)
    enc = encode(params, batch["input_ids"], batch["segment_ids"], batch["attention_mask"], TaskRoute.RC, rng)
    logits = nx.linear(enc, params["rc_head.weight"], params["rc_head.bias"])
    keep = batch["attention_mask"].astype(bool)
    start = nx.masked_fill(nx.take_last(logits, 0), keep)
    end = nx.masked_fill(nx.take_last(logits, 1), keep)
    if single:
        s = start.shape[1]
        start, end = nx.reshape(start, (s,)), nx.reshape(end, (s,))
    return start, end


def _mlm_logits(params: ModelParams, hidden_rows: Tensor) -> Tensor:
    c = params.config
    h = nx.linear(hidden_rows, params["mlm_head.transform.weight"], params["mlm_head.transform.bias"])
    h = nx.layer_norm(nx.gelu(h, c.gelu_approximate), params["mlm_head.ln.gain"], params["mlm_head.ln.bias"],
                      c.layer_norm_eps)
    if c.tie_mlm_weights:
        weight = nx.transpose(params["embeddings.token"], (1, 0))
    else:
        weight = params["mlm_head.decoder.weight"]
    return nx.linear(h, weight, params["mlm_head.decoder.bias"])


def forward_lm(params: ModelParams, features, rng: np.random.Generator | None = None,
               with_nsp: bool = False):
    """MLM logits at labeled positions only, ``(num_labeled, vocab)``, plus their labels.

    With ``with_nsp`` the NSP logits ``(batch, 2)`` from the [CLS] encoding are
    returned as a third element.
    """
    attrs = ("input_ids", "segment_ids", "attention_mask", "mlm_labels")
    batch = collate(features, attrs)
    route = TaskRoute.NSP_LM if with_nsp else TaskRoute.LM
    enc = encode(params, batch["input_ids"], batch["segment_ids"], batch["attention_mask"], route, rng)
    b, s, h = enc.shape
    labels = batch["mlm_labels"].reshape(-1)
    where = np.nonzero(labels >= 0)[0]
    flat = nx.reshape(enc, (b * s, h))
    if where.size:
        logits = _mlm_logits(params, nx.gather_rows(flat, where))
    else:
        logits = Tensor(np.zeros((0, params.config.vocab_size)))
    if not with_nsp:
        return logits, labels[where]
    cls_rows = nx.gather_rows(flat, np.arange(b) * s)
    nsp = nx.linear(cls_rows, params["nsp_head.weight"], params["nsp_head.bias"])
    return logits, labels[where], nsp


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def rc_loss(start_logits: Tensor, end_logits: Tensor, start_position, end_position) -> Tensor:
    """Mean of the start and end cross-entropies."""
    if start_logits.data.ndim == 1:
        start_logits = nx.reshape(start_logits, (1, start_logits.shape[0]))
        end_logits = nx.reshape(end_logits, (1, end_logits.shape[0]))
    ls = nx.cross_entropy_logits(start_logits, np.atleast_1d(start_position))
    le = nx.cross_entropy_logits(end_logits, np.atleast_1d(end_position))
    return nx.scale(nx.add(ls, le), 0.5)


def lm_loss(mlm_logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if mlm_logits.shape[0] != labels.shape[0]:
        raise nx.DimensionError(f"lm_loss: {mlm_logits.shape[0]} logit rows for {labels.shape[0]} labels")
    if labels.size == 0:
        return Tensor(np.array(0.0))
    return nx.cross_entropy_logits(mlm_logits, labels)


def nsp_loss(nsp_logits: Tensor, is_next) -> Tensor:
    # class 0 = is next, as in the backbone convention
    targets = np.where(np.atleast_1d(np.asarray(is_next, dtype=bool)), 0, 1)
    return nx.cross_entropy_logits(nsp_logits, targets)
