"""Modality-aware static quantization and visual-first sequence reordering.

A mixed sequence interleaves visual and text token rows whose magnitudes
differ by more than an order of magnitude, so one shared static scale wrecks
the text side.  Calibration here keeps one scale pair: one for visual rows,
one for text rows.  To keep those segments contiguous at runtime, sequences
are reordered visual-first with a stable permutation, and causality of the
ORIGINAL order is preserved by conjugating the causal mask with that
permutation.  Rotary phases travel with the tokens: each token keeps the
angle of its original position.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    MASK_BLOCKED,
    MASK_FREE,
    as_tensor,
    check_finite,
    masked_softmax_rows,
    matmul,
)
from .quantizer import (
    Granularity,
    QuantParams,
    compute_params_absmax,
    fake_quant,
)

TEXT = 0
VISUAL = 1


@dataclass
class ModalityLayout:
    """Per-token modality tags for one sequence, 0 text / 1 visual."""

    modality: np.ndarray

    def __post_init__(self):
        self.modality = np.asarray(self.modality, dtype=np.int64).reshape(-1)
        if self.modality.shape[0] == 0:
            raise ValueError("layout must contain at least one token")
        if not np.isin(self.modality, (TEXT, VISUAL)).all():
            raise ValueError("modality tags must be 0 (text) or 1 (visual)")

    def __len__(self) -> int:
        return int(self.modality.shape[0])

    @property
    def visual_count(self) -> int:
        return int((self.modality == VISUAL).sum())

    def visual_spans(self) -> list[tuple[int, int]]:
        """Maximal runs of visual tokens as inclusive (start, end) pairs."""
        spans = []
        start = None
        for i, m in enumerate(self.modality):
            if m == VISUAL and start is None:
                start = i
            elif m == TEXT and start is not None:
                spans.append((start, i - 1))
                start = None
        if start is not None:
            spans.append((start, len(self) - 1))
        return spans

    def single_span(self) -> tuple[int, int] | None:
        """The one visual span if there is exactly one, else None."""
        spans = self.visual_spans()
        return spans[0] if len(spans) == 1 else None


def layout_from_string(text: str) -> ModalityLayout:
    """Shorthand builder: 'tvvt' means text, visual, visual, text."""
    tags = []
    for ch in text:
        if ch == "t":
            tags.append(TEXT)
        elif ch == "v":
            tags.append(VISUAL)
        else:
            raise ValueError(f"layout characters must be 't' or 'v', got {ch!r}")
    return ModalityLayout(np.array(tags))


@dataclass
class AifsPlan:
    """Stable visual-first permutation for one layout.

    perm[i] is the original index of the token occupying reordered slot i.
    position_ids equals perm: every token carries its original position into
    the rotary encoder.
    """

    layout: ModalityLayout
    perm: np.ndarray
    inverse: np.ndarray
    m_count: int

    @property
    def position_ids(self) -> np.ndarray:
        return self.perm


def build_aifs_plan(layout: ModalityLayout) -> AifsPlan:
    """Visual-first stable reorder: visual tokens keep their relative order,
    then text tokens keep theirs."""
    tags = layout.modality
    perm = np.concatenate(
        [np.flatnonzero(tags == VISUAL), np.flatnonzero(tags == TEXT)]
    ).astype(np.int64)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.shape[0])
    return AifsPlan(
        layout=layout, perm=perm, inverse=inverse, m_count=layout.visual_count
    )


# ===== masks =====


def standard_causal_mask(length: int) -> np.ndarray:
    """Lower-triangular additive mask for the natural token order."""
    if length < 1:
        raise ValueError(f"mask length must be >= 1, got {length}")
    mask = np.full((length, length), MASK_BLOCKED)
    mask[np.tril_indices(length)] = MASK_FREE
    return mask


def unified_causal_mask(m: int, n: int, length: int) -> np.ndarray:
    """Closed-form mask for a visual-first reorder of one visual span.

    The sequence originally holds one contiguous visual span at positions
    [m, n] (inclusive, zero-based).  After the reorder, slot i is unmasked at
    slot j when:

        i <= n - m       (visual rows):   j <= i  or  n - m < j <= n
        n - m < i <= n   (earlier text):  n - m < j <= i
        i > n            (later text):    j <= i

    An empty span, encoded as n == m - 1, degrades to the standard causal
    mask through the same three cases.

    Args:
        m: original start of the visual span, 0 <= m <= length.
        n: original end of the visual span, m - 1 <= n < length.
        length: sequence length.

    Returns:
        Additive mask of shape (length, length).
    """
    if length < 1:
        raise ValueError(f"mask length must be >= 1, got {length}")
    if not (0 <= m <= length):
        raise ValueError(f"span start {m} outside [0, {length}]")
    if not (m - 1 <= n < length):
        raise ValueError(f"span end {n} outside [{m - 1}, {length - 1}]")
    mask = np.full((length, length), MASK_BLOCKED)
    width = n - m
    for i in range(length):
        if i <= width:
            js = np.arange(0, i + 1)
            tail = np.arange(width + 1, n + 1)
            mask[i, js] = MASK_FREE
            mask[i, tail] = MASK_FREE
        elif i <= n:
            mask[i, width + 1 : i + 1] = MASK_FREE
        else:
            mask[i, : i + 1] = MASK_FREE
    return mask


def permuted_mask_oracle(perm: np.ndarray, length: int) -> np.ndarray:
    """Causal mask conjugated by a permutation: M'[i, j] = M[perm[i], perm[j]].

    This is the definitional reference the closed form must reproduce, and
    the mask builder for layouts with several visual spans.
    """
    perm = np.asarray(perm, dtype=np.int64).reshape(-1)
    if perm.shape[0] != length or sorted(perm.tolist()) != list(range(length)):
        raise ValueError(f"perm must be a permutation of 0..{length - 1}")
    base = standard_causal_mask(length)
    return base[np.ix_(perm, perm)]


def mask_for_plan(plan: AifsPlan) -> np.ndarray:
    """Reordered-space mask for a plan.

    Single-span layouts (and all-text or all-visual ones) use the closed
    form; layouts with several visual spans fall back to conjugation, which
    is what the closed form is proven against anyway.
    """
    length = len(plan.layout)
    spans = plan.layout.visual_spans()
    if len(spans) == 0:
        return unified_causal_mask(0, -1, length)
    if len(spans) == 1:
        return unified_causal_mask(spans[0][0], spans[0][1], length)
    return permuted_mask_oracle(plan.perm, length)


# ===== rotary phases =====


def rope_rotate(
    x: np.ndarray, positions: np.ndarray, theta_base: float = 10000.0
) -> np.ndarray:
    """Rotate adjacent feature pairs of one head by position-dependent angles.

    Pair t of a d-wide head turns by positions * theta_base^(-2t/d).
    Position 0 is the identity.

    Args:
        x: head tensor of shape (tokens, d), d even.
        positions: integer positions, shape (tokens,).
        theta_base: frequency base.

    Returns:
        Rotated tensor, same shape.
    """
    x = as_tensor(x)
    d = x.shape[1]
    if d % 2 != 0:
        raise ValueError(f"head dimension must be even for pairwise rotation, got {d}")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    if positions.shape[0] != x.shape[0]:
        raise ValueError(
            f"positions length {positions.shape[0]} != token count {x.shape[0]}"
        )
    freqs = theta_base ** (-2.0 * np.arange(d // 2) / d)
    ang = positions[:, None] * freqs[None, :]
    c, s = np.cos(ang), np.sin(ang)
    x1, x2 = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = x1 * c - x2 * s
    out[:, 1::2] = x1 * s + x2 * c
    return out


def remap_rope(
    plan: AifsPlan, q: np.ndarray, k: np.ndarray, theta_base: float = 10000.0
) -> tuple[np.ndarray, np.ndarray]:
    """Apply rotary phases to reordered q/k using original positions.

    Because each token keeps its original angle, reordered attention scores
    equal the naturally ordered scores conjugated by the permutation.
    """
    return (
        rope_rotate(q, plan.position_ids, theta_base),
        rope_rotate(k, plan.position_ids, theta_base),
    )


# ===== attention primitive =====


def attention_forward(
    x: np.ndarray,
    wq: np.ndarray,
    bq: np.ndarray,
    wk: np.ndarray,
    bk: np.ndarray,
    wv: np.ndarray,
    bv: np.ndarray,
    wo: np.ndarray,
    bo: np.ndarray,
    n_heads: int,
    mask: np.ndarray,
    positions: np.ndarray | None = None,
    theta_base: float = 10000.0,
) -> np.ndarray:
    """Multi-head attention over a pre-normalized input.

    positions=None skips rotary phases (bidirectional vision blocks use a
    free mask and no positional rotation).

    Args:
        x: input of shape (tokens, d_model).
        wq..bo: projection weights, (d_model, d_model) and (d_model,) each.
        n_heads: head count, must divide d_model.
        mask: additive mask of shape (tokens, tokens).
        positions: per-token rotary positions, or None.
        theta_base: rotary frequency base.

    Returns:
        Attention output of shape (tokens, d_model), pre-residual.
    """
    x = as_tensor(x)
    d = x.shape[1]
    if d % n_heads != 0:
        raise ValueError(f"n_heads={n_heads} must divide d_model={d}")
    d_head = d // n_heads
    q = matmul(x, wq) + bq
    k = matmul(x, wk) + bk
    v = matmul(x, wv) + bv
    out = np.empty_like(x)
    inv_sqrt = 1.0 / np.sqrt(d_head)
    for h in range(n_heads):
        sl = slice(h * d_head, (h + 1) * d_head)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        if positions is not None:
            qh = rope_rotate(qh, positions, theta_base)
            kh = rope_rotate(kh, positions, theta_base)
        scores = matmul(qh, np.ascontiguousarray(kh.T)) * inv_sqrt
        probs = masked_softmax_rows(scores, mask)
        out[:, sl] = matmul(probs, vh)
    return matmul(out, wo) + bo


def aifs_attention(
    x: np.ndarray,
    layout: ModalityLayout,
    wq: np.ndarray,
    bq: np.ndarray,
    wk: np.ndarray,
    bk: np.ndarray,
    wv: np.ndarray,
    bv: np.ndarray,
    wo: np.ndarray,
    bo: np.ndarray,
    n_heads: int,
    theta_base: float = 10000.0,
) -> np.ndarray:
    """Causal attention via reorder, unified mask, original phases, restore.

    Output rows come back in the original token order and must match a
    naive causal pass over the unordered sequence.
    """
    plan = build_aifs_plan(layout)
    x = as_tensor(x)
    x_r = x[plan.perm]
    out_r = attention_forward(
        x_r,
        wq, bq, wk, bk, wv, bv, wo, bo,
        n_heads=n_heads,
        mask=mask_for_plan(plan),
        positions=plan.position_ids,
        theta_base=theta_base,
    )
    return out_r[plan.inverse]


# ===== modality-split static quantization =====


@dataclass
class ScaleOpCounter:
    """Counts activation scale applications during a forward pass."""

    scale_ops: int = 0

    def bump(self, n: int) -> None:
        self.scale_ops += n

    def reset(self) -> None:
        self.scale_ops = 0


@dataclass
class MsqParams:
    """One static per-tensor grid per modality segment."""

    bits: int
    symmetric: bool
    visual: QuantParams
    text: QuantParams

    @property
    def s_v(self) -> float:
        return float(self.visual.scales[0])

    @property
    def s_t(self) -> float:
        return float(self.text.scales[0])


def _segment_params(lo: float, hi: float, bits: int, symmetric: bool) -> QuantParams:
    probe = np.array([[lo, hi]])
    return compute_params_absmax(probe, bits, Granularity.PER_TENSOR, symmetric)


def calibrate_msq(
    samples,
    bits: int,
    symmetric: bool = True,
) -> MsqParams:
    """Separate static scales for visual and text rows of a token stream.

    Accumulates per-modality min/max over all samples in one pass, so the
    result does not depend on sample order.  A modality absent from every
    sample gets the sentinel unit scale and a warning.

    Args:
        samples: iterable of (tensor, ModalityLayout) pairs; tensor rows are
            token activations aligned with the layout.
        bits: grid width for both segments.
        symmetric: zero-point-free grids when True.

    Returns:
        MsqParams with one PER_TENSOR grid per modality.
    """
    bounds = {VISUAL: [np.inf, -np.inf], TEXT: [np.inf, -np.inf]}
    seen = {VISUAL: 0, TEXT: 0}
    count = 0
    for tensor, layout in samples:
        tensor = check_finite(as_tensor(tensor), "calibration tensor")
        if tensor.shape[0] != len(layout):
            raise ValueError(
                f"sample has {tensor.shape[0]} rows but layout tags {len(layout)} tokens"
            )
        for modality in (VISUAL, TEXT):
            rows = tensor[layout.modality == modality]
            if rows.size:
                bounds[modality][0] = min(bounds[modality][0], float(rows.min()))
                bounds[modality][1] = max(bounds[modality][1], float(rows.max()))
                seen[modality] += rows.shape[0]
        count += 1
    if count == 0:
        raise ValueError("calibration stream is empty")

    params = {}
    names = {VISUAL: "visual", TEXT: "text"}
    for modality in (VISUAL, TEXT):
        if seen[modality] == 0:
            warnings.warn(
                f"no {names[modality]} tokens in calibration stream, "
                "using unit-scale sentinel"
            )
            params[modality] = _segment_params(0.0, 0.0, bits, symmetric)
        else:
            lo, hi = bounds[modality]
            params[modality] = _segment_params(lo, hi, bits, symmetric)
    return MsqParams(
        bits=bits, symmetric=symmetric, visual=params[VISUAL], text=params[TEXT]
    )


def quantize_msq(
    x: np.ndarray,
    plan,
    params: MsqParams,
    counter: ScaleOpCounter | None = None,
) -> np.ndarray:
    """Fake-quantize a reordered sequence with its two static segment grids.

    Rows [0, m_count) take the visual grid, the rest the text grid.  Exactly
    two scale applications are counted per call, the static cost model this
    mechanism exists for.

    Args:
        x: activations, shape (tokens, d).
        plan: AifsPlan for the sequence, a bare int giving the visual
            prefix length (padded batches tag their pad rows visual), or a
            boolean row mask marking visual rows wherever they sit, for
            sequences left in their original interleaved order.
        params: calibrated segment grids.
        counter: optional scale-application counter.

    Returns:
        Fake-quantized tensor, same shape as x.
    """
    x = as_tensor(x)
    if isinstance(plan, np.ndarray):
        vis = np.asarray(plan, dtype=bool)
        if vis.shape != (x.shape[0],):
            raise ValueError(
                f"visual row mask has shape {vis.shape}, expected ({x.shape[0]},)"
            )
        out = np.empty_like(x)
        if vis.any():
            out[vis] = fake_quant(x[vis], params.visual)
        if not vis.all():
            out[~vis] = fake_quant(x[~vis], params.text)
        if counter is not None:
            counter.bump(2)
        return out
    m = plan.m_count if isinstance(plan, AifsPlan) else int(plan)
    if not (0 <= m <= x.shape[0]):
        raise ValueError(f"visual prefix {m} outside [0, {x.shape[0]}]")
    out = np.empty_like(x)
    if m > 0:
        out[:m] = fake_quant(x[:m], params.visual)
    if m < x.shape[0]:
        out[m:] = fake_quant(x[m:], params.text)
    if counter is not None:
        counter.bump(2)
    return out


def quantize_dynamic_per_token(
    x: np.ndarray,
    bits: int,
    symmetric: bool = True,
    counter: ScaleOpCounter | None = None,
) -> np.ndarray:
    """Per-token dynamic baseline: one fresh scale per row, every call."""
    x = as_tensor(x)
    params = compute_params_absmax(x, bits, Granularity.PER_TOKEN, symmetric)
    if counter is not None:
        counter.bump(x.shape[0])
    return fake_quant(x, params)


# ===== batched padding =====


@dataclass
class PaddedSeq:
    """One sequence of a left-padded batch, in reordered coordinates.

    Slots [0, pad) are pad rows that only self-attend; the per-sequence
    reordered mask sits in the bottom-right block.  Pad rows are tagged
    visual, so the visual prefix for segment quantization is pad + m_count.
    """

    pad: int
    plan: AifsPlan
    mask: np.ndarray
    position_ids: np.ndarray
    padded_m_count: int


def multibatch_masks(
    lengths: list[int], layouts: list[ModalityLayout]
) -> list[PaddedSeq]:
    """Left-pad a batch to its max length with leak-free masks.

    Pad keys are blocked for every real query, and each pad query attends
    only to itself, so no softmax row is ever empty.  Real rows keep their
    single-sequence mask and original rotary positions, which is what makes
    padded outputs match unpadded runs on the real positions.

    Args:
        lengths: per-sequence token counts.
        layouts: per-sequence modality layouts, aligned with lengths.

    Returns:
        One PaddedSeq per input sequence.
    """
    if len(lengths) == 0:
        raise ValueError("batch is empty")
    if len(lengths) != len(layouts):
        raise ValueError(
            f"got {len(lengths)} lengths but {len(layouts)} layouts"
        )
    for i, (length, layout) in enumerate(zip(lengths, layouts)):
        if length != len(layout):
            raise ValueError(
                f"sequence {i}: length {length} != layout size {len(layout)}"
            )
    l_max = max(lengths)
    out = []
    for length, layout in zip(lengths, layouts):
        pad = l_max - length
        plan = build_aifs_plan(layout)
        mask = np.full((l_max, l_max), MASK_BLOCKED)
        for p in range(pad):
            mask[p, p] = MASK_FREE
        mask[pad:, pad:] = mask_for_plan(plan)
        positions = np.concatenate(
            [np.zeros(pad, dtype=np.int64), plan.position_ids]
        )
        out.append(
            PaddedSeq(
                pad=pad,
                plan=plan,
                mask=mask,
                position_ids=positions,
                padded_m_count=pad + plan.m_count,
            )
        )
    return out
