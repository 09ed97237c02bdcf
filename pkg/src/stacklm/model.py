"""Depth-parameterized transformer families and exact parameter accounting.

Three families share the same pre-layer-norm block: a decoder-only stack
with causal self-attention, an encoder-only stack with a masked-token head,
a pooler and a two-way segment-order head, and an encoder-decoder stack
whose decoder blocks add cross-attention.  ``parameter_inventory`` is the
single source of truth for parameter names and shapes; ``build_model``
instantiates exactly that inventory and ``count_params`` sums it, so the
analytic count always equals the instantiated element count.

Initialization: weights are drawn from Normal(0, 0.02); the projections
feeding a residual connection (attention output, second MLP matrix,
cross-attention output) are scaled by an extra 1/sqrt(2N) where N is the
total number of transformer layers.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import DropoutRng, Tensor

FAMILIES = ("decoder-only", "encoder-only", "encoder-decoder")

INIT_STD = 0.02
LAYER_NORM_EPS = 1e-5
MLP_WIDTH_FACTOR = 4
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class ModelConfig:
    """One row of the reference model table."""

    family: str
    n_layers: int
    d_layer: int
    n_heads: int
    d_head: int
    vocab_size: int
    max_seq_len: int = 0  # 0 resolves to the family default (512 encoder-only, 1024 otherwise)
    dropout_p: float = 0.1
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.n_layers < 0 or self.d_layer <= 0 or self.n_heads <= 0 or self.d_head <= 0:
            raise ConfigError("layer count must be >= 0 and widths positive")
        if self.family == "encoder-decoder" and self.n_layers % 2 != 0:
            raise ConfigError(f"encoder-decoder needs an even layer count, got {self.n_layers}")
        if self.max_seq_len == 0:
            self.max_seq_len = 512 if self.family == "encoder-only" else 1024
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.n_heads * self.d_head != self.d_layer:
            warnings.warn(
                f"n_heads * d_head = {self.n_heads * self.d_head} does not equal "
                f"d_layer = {self.d_layer}; attention will use width {self.n_heads * self.d_head}",
                stacklevel=2,
            )

    @property
    def d_attn(self) -> int:
        return self.n_heads * self.d_head

    @property
    def d_mlp(self) -> int:
        return MLP_WIDTH_FACTOR * self.d_layer


def _block_inventory(prefix: str, cfg: ModelConfig, cross: bool):
    d, da, dm = cfg.d_layer, cfg.d_attn, cfg.d_mlp
    inv = [
        (f"{prefix}.ln1.gain", (d,), "ones"),
        (f"{prefix}.ln1.bias", (d,), "zeros"),
        (f"{prefix}.attn.w_qkv", (d, 3 * da), "normal"),
        (f"{prefix}.attn.b_qkv", (3 * da,), "zeros"),
        (f"{prefix}.attn.w_out", (da, d), "residual"),
        (f"{prefix}.attn.b_out", (d,), "zeros"),
    ]
    if cross:
        inv += [
            (f"{prefix}.ln_cross.gain", (d,), "ones"),
            (f"{prefix}.ln_cross.bias", (d,), "zeros"),
            (f"{prefix}.cross.w_q", (d, da), "normal"),
            (f"{prefix}.cross.b_q", (da,), "zeros"),
            (f"{prefix}.cross.w_k", (d, da), "normal"),
            (f"{prefix}.cross.b_k", (da,), "zeros"),
            (f"{prefix}.cross.w_v", (d, da), "normal"),
            (f"{prefix}.cross.b_v", (da,), "zeros"),
            (f"{prefix}.cross.w_out", (da, d), "residual"),
            (f"{prefix}.cross.b_out", (d,), "zeros"),
        ]
    inv += [
        (f"{prefix}.ln2.gain", (d,), "ones"),
        (f"{prefix}.ln2.bias", (d,), "zeros"),
        (f"{prefix}.mlp.w_fc", (d, dm), "normal"),
        (f"{prefix}.mlp.b_fc", (dm,), "zeros"),
        (f"{prefix}.mlp.w_proj", (dm, d), "residual"),
        (f"{prefix}.mlp.b_proj", (d,), "zeros"),
    ]
    return inv


def parameter_inventory(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Every named parameter with its shape and init kind, in build order."""
    d, v = cfg.d_layer, cfg.vocab_size
    inv = [("tok_emb", (v, d), "normal"), ("pos_emb", (cfg.max_seq_len, d), "normal")]
    if cfg.family == "encoder-only":
        inv += [
            ("type_emb", (2, d), "normal"),
            ("emb_ln.gain", (d,), "ones"),
            ("emb_ln.bias", (d,), "zeros"),
        ]
    if cfg.family == "encoder-decoder":
        half = cfg.n_layers // 2
        for i in range(half):
            inv += _block_inventory(f"enc{i}", cfg, cross=False)
        inv += [("enc_final.gain", (d,), "ones"), ("enc_final.bias", (d,), "zeros")]
        for i in range(half):
            inv += _block_inventory(f"dec{i}", cfg, cross=True)
        inv += [("final.gain", (d,), "ones"), ("final.bias", (d,), "zeros")]
    else:
        for i in range(cfg.n_layers):
            inv += _block_inventory(f"block{i}", cfg, cross=False)
        inv += [("final.gain", (d,), "ones"), ("final.bias", (d,), "zeros")]
    if cfg.family == "encoder-only":
        inv += [
            ("mlm.w_transform", (d, d), "normal"),
            ("mlm.b_transform", (d,), "zeros"),
            ("mlm.ln.gain", (d,), "ones"),
            ("mlm.ln.bias", (d,), "zeros"),
            ("mlm.bias", (v,), "zeros"),
            ("pooler.w", (d, d), "normal"),
            ("pooler.b", (d,), "zeros"),
            ("sop.w", (d, 2), "normal"),
            ("sop.b", (2,), "zeros"),
        ]
    if not cfg.tie_embeddings:
        inv.append(("lm_head", (d, v), "normal"))
    return inv


def count_params(cfg: ModelConfig) -> int:
    """Analytic parameter total; equals the instantiated element count."""
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_inventory(cfg))


def block_param_count(cfg: ModelConfig) -> int:
    """Parameters contributed by the transformer blocks alone."""
    per_layer = ModelConfig(
        family=cfg.family,
        n_layers=2 if cfg.family == "encoder-decoder" else 1,
        d_layer=cfg.d_layer,
        n_heads=cfg.n_heads,
        d_head=cfg.d_head,
        vocab_size=cfg.vocab_size,
        max_seq_len=cfg.max_seq_len,
        dropout_p=cfg.dropout_p,
        tie_embeddings=cfg.tie_embeddings,
    )
    zero = ModelConfig(
        family=cfg.family,
        n_layers=0,
        d_layer=cfg.d_layer,
        n_heads=cfg.n_heads,
        d_head=cfg.d_head,
        vocab_size=cfg.vocab_size,
        max_seq_len=cfg.max_seq_len,
        dropout_p=cfg.dropout_p,
        tie_embeddings=cfg.tie_embeddings,
    )
    step = 2 if cfg.family == "encoder-decoder" else 1
    return (count_params(per_layer) - count_params(zero)) * (cfg.n_layers // step)


class ModelParams:
    """Named parameter tensors in inventory order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def element_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Instantiate every inventory entry with the documented initialization."""
    rng = np.random.default_rng(seed)
    residual_scale = 1.0 / np.sqrt(2.0 * max(cfg.n_layers, 1))
    tensors: dict[str, Tensor] = {}
    for name, shape, kind in parameter_inventory(cfg):
        if kind == "normal":
            data = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "residual":
            data = rng.normal(0.0, INIT_STD * residual_scale, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class ModelOutput:
    logits: Tensor
    sop_logits: Optional[Tensor] = None
    pooled: Optional[Tensor] = None


def _causal_mask(t: int, dtype) -> np.ndarray:
    mask = np.where(np.tri(t, dtype=bool), 0.0, T.MASK_VALUE).astype(dtype)
    return mask[None, None, :, :]


def _pad_mask(attention_mask: Optional[np.ndarray], dtype) -> Optional[np.ndarray]:
    if attention_mask is None:
        return None
    keep = np.asarray(attention_mask, dtype=dtype)
    return ((1.0 - keep) * T.MASK_VALUE)[:, None, None, :]


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    b, t, _ = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, d_head)), (0, 2, 1, 3))


def _join_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _self_attention(x, p, prefix, cfg, mask, rng, layer):
    qkv = T.add(T.matmul(x, p[f"{prefix}.attn.w_qkv"]), p[f"{prefix}.attn.b_qkv"])
    da = cfg.d_attn
    q = _split_heads(T.narrow(qkv, 2, 0, da), cfg.n_heads, cfg.d_head)
    k = _split_heads(T.narrow(qkv, 2, da, da), cfg.n_heads, cfg.d_head)
    v = _split_heads(T.narrow(qkv, 2, 2 * da, da), cfg.n_heads, cfg.d_head)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(cfg.d_head))
    probs = T.dropout(T.softmax(scores, additive_mask=mask), cfg.dropout_p, rng, layer, 0)
    ctx = _join_heads(T.matmul(probs, v))
    out = T.add(T.matmul(ctx, p[f"{prefix}.attn.w_out"]), p[f"{prefix}.attn.b_out"])
    return T.dropout(out, cfg.dropout_p, rng, layer, 1)


def _cross_attention(x, enc_out, p, prefix, cfg, mask, rng, layer):
    q = _split_heads(T.add(T.matmul(x, p[f"{prefix}.cross.w_q"]), p[f"{prefix}.cross.b_q"]), cfg.n_heads, cfg.d_head)
    k = _split_heads(T.add(T.matmul(enc_out, p[f"{prefix}.cross.w_k"]), p[f"{prefix}.cross.b_k"]), cfg.n_heads, cfg.d_head)
    v = _split_heads(T.add(T.matmul(enc_out, p[f"{prefix}.cross.w_v"]), p[f"{prefix}.cross.b_v"]), cfg.n_heads, cfg.d_head)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(cfg.d_head))
    probs = T.dropout(T.softmax(scores, additive_mask=mask), cfg.dropout_p, rng, layer, 3)
    ctx = _join_heads(T.matmul(probs, v))
    out = T.add(T.matmul(ctx, p[f"{prefix}.cross.w_out"]), p[f"{prefix}.cross.b_out"])
    return T.dropout(out, cfg.dropout_p, rng, layer, 4)


def _mlp(x, p, prefix, cfg, rng, layer):
    h = T.gelu(T.add(T.matmul(x, p[f"{prefix}.mlp.w_fc"]), p[f"{prefix}.mlp.b_fc"]))
    h = T.add(T.matmul(h, p[f"{prefix}.mlp.w_proj"]), p[f"{prefix}.mlp.b_proj"])
    return T.dropout(h, cfg.dropout_p, rng, layer, 2)


def _block(x, p, prefix, cfg, mask, rng, layer, enc_out=None, enc_mask=None):
    h = T.layer_norm(x, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"], LAYER_NORM_EPS)
    x = T.add(x, _self_attention(h, p, prefix, cfg, mask, rng, layer))
    if enc_out is not None:
        h = T.layer_norm(x, p[f"{prefix}.ln_cross.gain"], p[f"{prefix}.ln_cross.bias"], LAYER_NORM_EPS)
        x = T.add(x, _cross_attention(h, enc_out, p, prefix, cfg, enc_mask, rng, layer))
    h = T.layer_norm(x, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"], LAYER_NORM_EPS)
    return T.add(x, _mlp(h, p, prefix, cfg, rng, layer))


def _run_stack(x, p, cfg, prefixes, mask, rng, layer_offset, recompute, enc_out=None, enc_mask=None):
    # enc_out is captured by the block closure (not passed as a checkpoint
    # input) so its gradient accumulates in the same order with and without
    # recomputation.
    for i, prefix in enumerate(prefixes):
        layer = layer_offset + i

        def fn(h, prefix=prefix, layer=layer):
            return _block(h, p, prefix, cfg, mask, rng, layer, enc_out=enc_out, enc_mask=enc_mask)

        x = T.checkpoint(fn, x) if recompute else fn(x)
    return x


def _embed(p, cfg, ids, type_ids, rng, layer):
    b, t = ids.shape
    x = T.add(T.embedding_lookup(p["tok_emb"], ids), T.embedding_lookup(p["pos_emb"], np.arange(t)))
    if cfg.family == "encoder-only":
        if type_ids is None:
            type_ids = np.zeros_like(ids)
        x = T.add(x, T.embedding_lookup(p["type_emb"], type_ids))
        x = T.layer_norm(x, p["emb_ln.gain"], p["emb_ln.bias"], LAYER_NORM_EPS)
    return T.dropout(x, cfg.dropout_p, rng, layer, 0)


def _output_head(x, p, cfg):
    head = T.transpose(p["tok_emb"], (1, 0)) if cfg.tie_embeddings else p["lm_head"]
    return T.matmul(x, head)


def forward(
    params: ModelParams,
    cfg: ModelConfig,
    ids: np.ndarray,
    *,
    mode: str = "eval",
    source_ids: Optional[np.ndarray] = None,
    type_ids: Optional[np.ndarray] = None,
    attention_mask: Optional[np.ndarray] = None,
    source_attention_mask: Optional[np.ndarray] = None,
    rng: Optional[DropoutRng] = None,
    recompute: bool = False,
) -> ModelOutput:
    """Run the stack for one batch of token ids.

    ``ids`` is (batch, seq) or (seq,); for encoder-decoder models it is the
    decoder input and ``source_ids`` feeds the encoder.  ``mode`` is
    ``train`` (dropout active, requires ``rng`` when dropout_p > 0) or
    ``eval``.  ``attention_mask`` marks real positions with 1 (padding 0).
    """
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    ids = np.asarray(ids)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
        if type_ids is not None:
            type_ids = np.asarray(type_ids)[None, :]
    if ids.shape[1] > cfg.max_seq_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if mode == "eval":
        rng = None
    elif cfg.dropout_p > 0.0 and rng is None:
        raise InputError("training mode with dropout needs a DropoutRng")
    dtype = params["tok_emb"].dtype

    if cfg.family == "encoder-decoder":
        if source_ids is None:
            raise InputError("encoder-decoder forward needs source_ids")
        source_ids = np.asarray(source_ids)
        if squeeze:
            source_ids = source_ids[None, :]
        if source_ids.shape[1] > cfg.max_seq_len:
            raise InputError(f"source length {source_ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
        half = cfg.n_layers // 2
        src_mask = _pad_mask(source_attention_mask, dtype)
        enc = _embed(params, cfg, source_ids, None, rng, cfg.n_layers)
        enc = _run_stack(enc, params, cfg, [f"enc{i}" for i in range(half)], src_mask, rng, 0, recompute)
        enc = T.layer_norm(enc, params["enc_final.gain"], params["enc_final.bias"], LAYER_NORM_EPS)
        causal = _causal_mask(ids.shape[1], dtype)
        # decoder attends every encoder position; pad masking reuses the source mask
        cross_mask = src_mask
        dec = _embed(params, cfg, ids, None, rng, cfg.n_layers + 1)
        dec = _run_stack(
            dec, params, cfg, [f"dec{i}" for i in range(half)], causal, rng, half, recompute,
            enc_out=enc, enc_mask=cross_mask,
        )
        dec = T.layer_norm(dec, params["final.gain"], params["final.bias"], LAYER_NORM_EPS)
        logits = _output_head(dec, params, cfg)
        if squeeze:
            logits = T.reshape(logits, logits.shape[1:])
        return ModelOutput(logits=logits)

    causal = cfg.family == "decoder-only"
    mask = _causal_mask(ids.shape[1], dtype) if causal else None
    pad = _pad_mask(attention_mask, dtype)
    if pad is not None:
        mask = pad if mask is None else mask + pad
    x = _embed(params, cfg, ids, type_ids, rng, cfg.n_layers)
    x = _run_stack(x, params, cfg, [f"block{i}" for i in range(cfg.n_layers)], mask, rng, 0, recompute)
    x = T.layer_norm(x, params["final.gain"], params["final.bias"], LAYER_NORM_EPS)

    if cfg.family == "decoder-only":
        logits = _output_head(x, params, cfg)
        if squeeze:
            logits = T.reshape(logits, logits.shape[1:])
        return ModelOutput(logits=logits)

    h = T.layer_norm(
        T.gelu(T.add(T.matmul(x, params["mlm.w_transform"]), params["mlm.b_transform"])),
        params["mlm.ln.gain"],
        params["mlm.ln.bias"],
        LAYER_NORM_EPS,
    )
    logits = T.add(_output_head(h, params, cfg), params["mlm.bias"])
    pooled = T.tanh(T.add(T.matmul(T.select(x, 0, 1), params["pooler.w"]), params["pooler.b"]))
    sop_logits = T.add(T.matmul(pooled, params["sop.w"]), params["sop.b"])
    if squeeze:
        logits = T.reshape(logits, logits.shape[1:])
    return ModelOutput(logits=logits, sop_logits=sop_logits, pooled=pooled)


# ---------------------------------------------------------------------------
# Config files and checkpoints
# ---------------------------------------------------------------------------


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, source: str = "<config>") -> ModelConfig:
    """Parse the ``key = value`` config grammar (``#`` starts a comment)."""
    known = {f.name: f.type for f in fields(ModelConfig)}
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        raw[key] = value
    kwargs = {}
    for key, value in raw.items():
        if key == "family":
            kwargs[key] = value
        elif key == "dropout_p":
            kwargs[key] = float(value)
        elif key == "tie_embeddings":
            if value.lower() not in ("true", "false"):
                raise ConfigError(f"{source}: tie_embeddings must be true or false, got {value!r}")
            kwargs[key] = value.lower() == "true"
        else:
            kwargs[key] = int(value)
    try:
        return ModelConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_text(fh.read(), source=path)


def save_config(cfg: ModelConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))


def save_checkpoint(path: str, params: ModelParams, cfg: ModelConfig, extra: Optional[dict] = None) -> None:
    """Versioned checkpoint: named parameter arrays plus the config."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config_to_text(cfg),
        "extra": extra or {},
    }
    arrays = {f"param:{name}": t.data for name, t in params.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig, dict]:
    with np.load(path) as archive:
        meta = json.loads(archive["meta"].tobytes().decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')!r}")
        cfg = config_from_text(meta["config"], source=path)
        expected = {name: shape for name, shape, _ in parameter_inventory(cfg)}
        tensors = {}
        for key in archive.files:
            if not key.startswith("param:"):
                continue
            name = key[len("param:"):]
            arr = archive[key]
            if name in expected and arr.shape != expected[name]:
                raise ConfigError(f"checkpoint parameter {name} has shape {arr.shape}, expected {expected[name]}")
            tensors[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        missing = set(expected) - set(tensors)
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
    return ModelParams(tensors), cfg, meta["extra"]
