"""Self-contained toy multimodal transformer.

A small vision encoder (pre-LN blocks, bidirectional attention, final
LayerNorm) feeds a projector into a small causal LLM stack (RMS-normed
blocks with rotary phases).  Everything is float64 and deterministic in the
seed.  The vision down-projections are seeded with alternating positive and
negative column means so rotation concentrates real outlier mass into the
first row; the LLM down-projections get exactly zero column means so they
never trigger the split.

Forward passes accept hook functions so the quantized pipeline can swap in
fake-quantized weights, activation grids, and split-kernel down-projections
without duplicating the control flow.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

from . import fileio
from .hadamard import fht
from .msq_aifs import attention_forward
from .numerics import (
    MASK_FREE,
    NormParams,
    as_tensor,
    check_finite,
    matmul,
)

THETA_BASE = 10000.0

LAYER_KIND = "layer"
RMS_KIND = "rms"


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ToyMllmConfig:
    d_model: int = 64
    n_heads: int = 4
    vision_blocks: int = 2
    llm_blocks: int = 2
    mlp_ratio: int = 4
    seed: int = 0
    vision_weight_mean_bias: float = 0.02

    def __post_init__(self):
        if not _is_pow2(self.d_model):
            raise ValueError(f"d_model must be a power of two, got {self.d_model}")
        if not _is_pow2(self.d_model * self.mlp_ratio):
            raise ValueError(
                f"d_model * mlp_ratio must be a power of two, got {self.d_model * self.mlp_ratio}"
            )
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(
                f"n_heads={self.n_heads} must divide d_model={self.d_model}"
            )
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary phases")
        if self.vision_blocks < 1 or self.llm_blocks < 1:
            raise ValueError("need at least one block in each part")
        if self.mlp_ratio < 1:
            raise ValueError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if not self.vision_weight_mean_bias > 0.0:
            raise ValueError(
                f"vision_weight_mean_bias must be > 0, got {self.vision_weight_mean_bias}"
            )

    @property
    def d_ff(self) -> int:
        return self.d_model * self.mlp_ratio

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "vision_blocks": self.vision_blocks,
            "llm_blocks": self.llm_blocks,
            "mlp_ratio": self.mlp_ratio,
            "seed": self.seed,
            "vision_weight_mean_bias": self.vision_weight_mean_bias,
        }


@dataclass
class Linear:
    """y = x @ w + b with w of shape (d_in, d_out)."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = as_tensor(self.w)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.b.shape[0] != self.w.shape[1]:
            raise ValueError(
                f"bias length {self.b.shape[0]} != output width {self.w.shape[1]}"
            )


@dataclass
class Norm:
    kind: str
    params: NormParams

    def __post_init__(self):
        if self.kind not in (LAYER_KIND, RMS_KIND):
            raise ValueError(f"unknown norm kind {self.kind!r}")


@dataclass
class Block:
    attn_norm: Norm
    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    mlp_norm: Norm
    w_up: Linear
    w_down: Linear
    causal: bool
    rope: bool
    online_fht: bool = False


@dataclass
class ToyMllm:
    config: ToyMllmConfig
    vision_embed: Linear
    vision_blocks: list
    vision_post_norm: Norm
    projector: Linear
    text_embed: Linear
    llm_blocks: list
    llm_final_norm: Norm
    head: Linear
    vision_rotated: bool = False
    llm_rotated: bool = False
    recentered: bool = False


# ===== construction =====


def _linear(rng, d_in: int, d_out: int, std: float, bias_std: float = 0.01) -> Linear:
    return Linear(
        w=rng.normal(0.0, std, size=(d_in, d_out)),
        b=rng.normal(0.0, bias_std, size=d_out),
    )


def _norm(rng, kind: str, d: int) -> Norm:
    alpha = 1.0 + 0.1 * rng.normal(size=d)
    beta = 0.05 * rng.normal(size=d) if kind == LAYER_KIND else np.zeros(d)
    return Norm(kind=kind, params=NormParams(alpha=alpha, beta=beta, eps=1e-6))


def _block(rng, cfg: ToyMllmConfig, kind: str, causal: bool, down: Linear) -> Block:
    d = cfg.d_model
    std = d ** -0.5
    return Block(
        attn_norm=_norm(rng, kind, d),
        wq=_linear(rng, d, d, std),
        wk=_linear(rng, d, d, std),
        wv=_linear(rng, d, d, std),
        wo=_linear(rng, d, d, std),
        mlp_norm=_norm(rng, kind, d),
        w_up=_linear(rng, d, cfg.d_ff, std),
        w_down=down,
        causal=causal,
        rope=causal,
    )


def build_toy_mllm(cfg: ToyMllmConfig) -> ToyMllm:
    """Deterministically materialize the model from its config."""
    rng = np.random.default_rng(cfg.seed)
    d, d_ff = cfg.d_model, cfg.d_ff

    def vision_down() -> Linear:
        lin = _linear(rng, d_ff, d, 0.02)
        signs = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
        lin.w = lin.w + cfg.vision_weight_mean_bias * signs[None, :]
        return lin

    def llm_down() -> Linear:
        lin = _linear(rng, d_ff, d, d_ff ** -0.5)
        lin.w = lin.w - lin.w.mean(axis=0, keepdims=True)
        return lin

    vision_blocks = [
        _block(rng, cfg, LAYER_KIND, causal=False, down=vision_down())
        for _ in range(cfg.vision_blocks)
    ]
    llm_blocks = [
        _block(rng, cfg, RMS_KIND, causal=True, down=llm_down())
        for _ in range(cfg.llm_blocks)
    ]
    return ToyMllm(
        config=cfg,
        vision_embed=_linear(rng, d, d, 1.0 / 80.0),
        vision_blocks=vision_blocks,
        vision_post_norm=_norm(rng, LAYER_KIND, d),
        projector=_linear(rng, d, d, 1.0),
        text_embed=_linear(rng, d, d, 0.15),
        llm_blocks=llm_blocks,
        llm_final_norm=_norm(rng, RMS_KIND, d),
        head=_linear(rng, d, d, d ** -0.5),
    )


def copy_model(model: ToyMllm) -> ToyMllm:
    return copy.deepcopy(model)


# ===== named traversal =====


def iter_linears(model: ToyMllm):
    """Yield (name, Linear) for every projection, in a fixed order."""
    yield "vision_embed", model.vision_embed
    for i, blk in enumerate(model.vision_blocks):
        for tag in ("wq", "wk", "wv", "wo", "w_up", "w_down"):
            yield f"vision.{i}.{tag}", getattr(blk, tag)
    yield "projector", model.projector
    yield "text_embed", model.text_embed
    for i, blk in enumerate(model.llm_blocks):
        for tag in ("wq", "wk", "wv", "wo", "w_up", "w_down"):
            yield f"llm.{i}.{tag}", getattr(blk, tag)
    yield "head", model.head


def iter_norms(model: ToyMllm):
    for i, blk in enumerate(model.vision_blocks):
        yield f"vision.{i}.attn_norm", blk.attn_norm
        yield f"vision.{i}.mlp_norm", blk.mlp_norm
    yield "vision_post_norm", model.vision_post_norm
    for i, blk in enumerate(model.llm_blocks):
        yield f"llm.{i}.attn_norm", blk.attn_norm
        yield f"llm.{i}.mlp_norm", blk.mlp_norm
    yield "llm_final_norm", model.llm_final_norm


def model_fingerprint(model: ToyMllm) -> str:
    """Stable hash of every weight, for pairing calibration with a model."""
    h = hashlib.sha256()
    for name, lin in iter_linears(model):
        h.update(name.encode())
        h.update(np.ascontiguousarray(lin.w).tobytes())
        h.update(np.ascontiguousarray(lin.b).tobytes())
    for name, norm in iter_norms(model):
        h.update(name.encode())
        h.update(norm.kind.encode())
        h.update(np.ascontiguousarray(norm.params.alpha).tobytes())
        h.update(np.ascontiguousarray(norm.params.beta).tobytes())
    return h.hexdigest()[:16]


# ===== forward =====


def _identity_weight(name: str, w: np.ndarray) -> np.ndarray:
    return w


def _identity_act(name: str, x: np.ndarray) -> np.ndarray:
    return x


@dataclass
class ForwardHooks:
    """Interception points for the quantized simulation.

    weight_fn maps (layer name, weight) to the effective weight.  act_fn is
    applied to each block input.  down_fn, when set, replaces the bias-free
    x @ w_down product of layers it knows (it receives post-transform
    activations and must return the projected output).
    """

    weight_fn: Callable = _identity_weight
    act_fn: Callable = _identity_act
    down_fn: Callable | None = None


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def norm_forward(norm: Norm, x: np.ndarray) -> np.ndarray:
    from .numerics import layer_norm, rms_norm

    if norm.kind == LAYER_KIND:
        return layer_norm(x, norm.params)
    return rms_norm(x, norm.params)


def block_forward(
    name: str,
    block: Block,
    x: np.ndarray,
    n_heads: int,
    mask: np.ndarray,
    positions: np.ndarray | None,
    hooks: ForwardHooks | None = None,
) -> np.ndarray:
    """One pre-norm transformer block over a (tokens, d_model) input."""
    hooks = hooks or ForwardHooks()
    x = hooks.act_fn(f"{name}.input", x)

    h = norm_forward(block.attn_norm, x)
    attn = attention_forward(
        h,
        hooks.weight_fn(f"{name}.wq", block.wq.w), block.wq.b,
        hooks.weight_fn(f"{name}.wk", block.wk.w), block.wk.b,
        hooks.weight_fn(f"{name}.wv", block.wv.w), block.wv.b,
        hooks.weight_fn(f"{name}.wo", block.wo.w), block.wo.b,
        n_heads=n_heads,
        mask=mask,
        positions=positions if block.rope else None,
        theta_base=THETA_BASE,
    )
    x = x + attn

    h = norm_forward(block.mlp_norm, x)
    u = gelu(matmul(h, hooks.weight_fn(f"{name}.w_up", block.w_up.w)) + block.w_up.b)
    if block.online_fht:
        u = fht(u, axis=1)
    down_name = f"{name}.w_down"
    if hooks.down_fn is not None:
        mlp = hooks.down_fn(down_name, u)
    else:
        mlp = matmul(u, hooks.weight_fn(down_name, block.w_down.w))
    x = x + mlp + block.w_down.b
    return x


def vision_encode(
    model: ToyMllm, rows: np.ndarray, hooks: ForwardHooks | None = None
) -> np.ndarray:
    """Visual token rows through embed, blocks, final norm, projector."""
    hooks = hooks or ForwardHooks()
    cfg = model.config
    rows = as_tensor(rows)
    x = matmul(rows, hooks.weight_fn("vision_embed", model.vision_embed.w))
    x = x + model.vision_embed.b
    mask = np.full((x.shape[0], x.shape[0]), MASK_FREE)
    for i, blk in enumerate(model.vision_blocks):
        x = block_forward(
            f"vision.{i}", blk, x, cfg.n_heads, mask, positions=None, hooks=hooks
        )
    x = norm_forward(model.vision_post_norm, x)
    x = matmul(x, hooks.weight_fn("projector", model.projector.w)) + model.projector.b
    return x


def embed_tokens(
    model: ToyMllm,
    sample: np.ndarray,
    modality: np.ndarray,
    hooks: ForwardHooks | None = None,
) -> np.ndarray:
    """Per-token embedding: visual rows via the vision path, text rows via
    the text projection, reassembled in original order."""
    hooks = hooks or ForwardHooks()
    sample = as_tensor(sample)
    modality = np.asarray(modality, dtype=np.int64).reshape(-1)
    if modality.shape[0] != sample.shape[0]:
        raise ValueError(
            f"modality length {modality.shape[0]} != token count {sample.shape[0]}"
        )
    out = np.zeros((sample.shape[0], model.config.d_model))
    vis_idx = np.flatnonzero(modality == 1)
    txt_idx = np.flatnonzero(modality == 0)
    if vis_idx.size:
        out[vis_idx] = vision_encode(model, sample[vis_idx], hooks)
    if txt_idx.size:
        w = hooks.weight_fn("text_embed", model.text_embed.w)
        out[txt_idx] = matmul(sample[txt_idx], w) + model.text_embed.b
    return out


def llm_stack(
    model: ToyMllm,
    x: np.ndarray,
    mask: np.ndarray,
    positions: np.ndarray,
    hooks: ForwardHooks | None = None,
) -> np.ndarray:
    """LLM blocks, final norm, head over an already-embedded sequence."""
    hooks = hooks or ForwardHooks()
    cfg = model.config
    for i, blk in enumerate(model.llm_blocks):
        x = block_forward(
            f"llm.{i}", blk, x, cfg.n_heads, mask, positions=positions, hooks=hooks
        )
    x = norm_forward(model.llm_final_norm, x)
    x = matmul(x, hooks.weight_fn("head", model.head.w)) + model.head.b
    return check_finite(x, "model output")


def model_forward(
    model: ToyMllm,
    sample: np.ndarray,
    modality: np.ndarray,
    hooks: ForwardHooks | None = None,
) -> np.ndarray:
    """Full reference pass in natural token order with a causal mask."""
    from .msq_aifs import standard_causal_mask

    x = embed_tokens(model, sample, modality, hooks)
    length = x.shape[0]
    return llm_stack(
        model,
        x,
        mask=standard_causal_mask(length),
        positions=np.arange(length),
        hooks=hooks,
    )


# ===== file round trip =====


def model_to_dict(model: ToyMllm) -> dict:
    tensors = {}
    for name, lin in iter_linears(model):
        tensors[f"{name}.w"] = fileio.tensor_to_b64(lin.w)
        tensors[f"{name}.b"] = fileio.tensor_to_b64(lin.b[None, :])
    norms = {}
    for name, norm in iter_norms(model):
        norms[name] = {
            "kind": norm.kind,
            "alpha": fileio.tensor_to_b64(norm.params.alpha[None, :]),
            "beta": fileio.tensor_to_b64(norm.params.beta[None, :]),
            "eps": norm.params.eps,
        }
    flags = {
        "vision_rotated": model.vision_rotated,
        "llm_rotated": model.llm_rotated,
        "recentered": model.recentered,
        "online_fht": {
            f"vision.{i}": blk.online_fht for i, blk in enumerate(model.vision_blocks)
        }
        | {f"llm.{i}": blk.online_fht for i, blk in enumerate(model.llm_blocks)},
    }
    return {
        "config": model.config.to_dict(),
        "tensors": tensors,
        "norms": norms,
        "flags": flags,
        "fingerprint": model_fingerprint(model),
    }


def model_from_dict(d: dict) -> ToyMllm:
    cfg = ToyMllmConfig(**d["config"])
    model = build_toy_mllm(cfg)

    def lin(name: str) -> Linear:
        w = fileio.tensor_from_b64(d["tensors"][f"{name}.w"])
        b = fileio.tensor_from_b64(d["tensors"][f"{name}.b"])[0]
        return Linear(w=w, b=b)

    def norm(name: str) -> Norm:
        nd = d["norms"][name]
        return Norm(
            kind=nd["kind"],
            params=NormParams(
                alpha=fileio.tensor_from_b64(nd["alpha"])[0],
                beta=fileio.tensor_from_b64(nd["beta"])[0],
                eps=nd["eps"],
            ),
        )

    model.vision_embed = lin("vision_embed")
    model.projector = lin("projector")
    model.text_embed = lin("text_embed")
    model.head = lin("head")
    model.vision_post_norm = norm("vision_post_norm")
    model.llm_final_norm = norm("llm_final_norm")
    for part, blocks in (("vision", model.vision_blocks), ("llm", model.llm_blocks)):
        for i, blk in enumerate(blocks):
            for tag in ("wq", "wk", "wv", "wo", "w_up", "w_down"):
                setattr(blk, tag, lin(f"{part}.{i}.{tag}"))
            blk.attn_norm = norm(f"{part}.{i}.attn_norm")
            blk.mlp_norm = norm(f"{part}.{i}.mlp_norm")
            blk.online_fht = d["flags"]["online_fht"].get(f"{part}.{i}", False)
    model.vision_rotated = d["flags"]["vision_rotated"]
    model.llm_rotated = d["flags"]["llm_rotated"]
    model.recentered = d["flags"]["recentered"]
    expect = d.get("fingerprint")
    actual = model_fingerprint(model)
    if expect is not None and expect != actual:
        raise ValueError(
            f"model file fingerprint {expect} does not match content {actual}"
        )
    return model
