"""Staged quantization pipeline over the toy multimodal model.

The driver runs seven stages in a fixed order: rotate the LLM part,
freeze its weight grids, calibrate activations (modality-split grids for
LLM block inputs, plain static grids for vision block inputs, always
through the still-float vision path), rewrite the vision encoder's norms,
rotate the vision part, freeze its weight grids, then build the
outlier-row split plans for every down-projection.  Each stage checks its
real preconditions, so running them out of order fails loudly instead of
silently producing a model quantized in the wrong coordinates.

Weight grids are plain round-to-nearest absmax; no error-compensating
sequential solver is used, and every report says so.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np

from .model import (
    ForwardHooks,
    ToyMllm,
    ToyMllmConfig,
    build_toy_mllm,
    embed_tokens,
    iter_linears,
    llm_stack,
    model_fingerprint,
    model_forward,
    model_from_dict,
    model_to_dict,
)
from .msq_aifs import (
    TEXT,
    VISUAL,
    AifsPlan,
    ModalityLayout,
    MsqParams,
    ScaleOpCounter,
    build_aifs_plan,
    calibrate_msq,
    layout_from_string,
    mask_for_plan,
    quantize_dynamic_per_token,
    quantize_msq,
    standard_causal_mask,
)
from .norm_rewrite import preln_to_rmsnorm
from .numerics import as_tensor, matmul
from .quantizer import (
    SUPPORTED_BITS,
    Granularity,
    QuantParams,
    QuantizedTensor,
    calibrate_static,
    compute_params_absmax,
    dequantize,
    fake_quant,
    params_from_dict,
    params_to_dict,
    quantize,
)
from .rms import RmsSplitPlan, build_split_plan, compliance_ratio, rms_forward
from .rotation import RotationSet, build_rotation_set, rotate_model_offline
from . import fileio

SCHEMA_VERSION = 1

WEIGHT_SOLVER_NOTE = (
    "rtn-absmax: weights snapped to the nearest grid point; "
    "no error-compensating sequential solver"
)

GRANULARITIES = ("per_channel", "per_group")


@dataclass
class PipelineConfig:
    """Model config plus every quantization switch, one flat JSON object."""

    model: ToyMllmConfig = field(default_factory=ToyMllmConfig)
    bits_w: int = 8
    bits_a: int = 8
    weight_granularity: str = "per_channel"
    group_size: int = 128
    symmetric_activations: bool = True
    rms: bool = True
    aifs: bool = True
    randomized_rotation: bool = False
    rotation_seed: int = 0
    split_bits: int | None = None

    def __post_init__(self):
        if self.bits_w not in SUPPORTED_BITS:
            raise ValueError(f"bits_w must be one of {SUPPORTED_BITS}, got {self.bits_w}")
        if self.bits_a not in SUPPORTED_BITS:
            raise ValueError(f"bits_a must be one of {SUPPORTED_BITS}, got {self.bits_a}")
        if self.weight_granularity not in GRANULARITIES:
            raise ValueError(
                f"weight_granularity must be one of {GRANULARITIES}, "
                f"got {self.weight_granularity!r}"
            )
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.split_bits is not None and self.split_bits not in SUPPORTED_BITS:
            raise ValueError(
                f"split_bits must be one of {SUPPORTED_BITS} or null, got {self.split_bits}"
            )

    @property
    def rms_effective(self) -> bool:
        # The randomized rotation breaks the positive-mean assumption the
        # outlier trigger relies on, so it forces the split off.
        return self.rms and not self.randomized_rotation

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d.update(
            bits_w=self.bits_w,
            bits_a=self.bits_a,
            weight_granularity=self.weight_granularity,
            group_size=self.group_size,
            symmetric_activations=self.symmetric_activations,
            rms=self.rms,
            aifs=self.aifs,
            randomized_rotation=self.randomized_rotation,
            rotation_seed=self.rotation_seed,
            split_bits=self.split_bits,
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        model_keys = set(ToyMllmConfig().to_dict())
        quant_keys = {
            "bits_w", "bits_a", "weight_granularity", "group_size",
            "symmetric_activations", "rms", "aifs",
            "randomized_rotation", "rotation_seed", "split_bits",
        }
        unknown = set(d) - model_keys - quant_keys
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        model_cfg = ToyMllmConfig(**{k: v for k, v in d.items() if k in model_keys})
        quant = {k: v for k, v in d.items() if k in quant_keys}
        return cls(model=model_cfg, **quant)


# ===== synthetic data =====


def generate_synthetic_samples(
    count: int,
    length: int,
    layout_spec=None,
    seed: int = 0,
    d_model: int = 64,
) -> list:
    """Seeded mixed-modality calibration samples.

    Visual token rows draw from Uniform(-20, 10) and text rows from
    Uniform(-0.5, 0.5), the magnitude gap the modality-split scales exist
    for.  layout_spec may be None (a fresh random single visual span per
    sample, both modalities present when length > 1), a layout string like
    'tvvt', or a ModalityLayout applied to every sample.

    Returns:
        List of (tensor, ModalityLayout) pairs, tensor shape (length, d_model).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    if isinstance(layout_spec, str):
        layout_spec = layout_from_string(layout_spec)
    if isinstance(layout_spec, ModalityLayout) and len(layout_spec) != length:
        raise ValueError(
            f"layout length {len(layout_spec)} != sample length {length}"
        )
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        if layout_spec is not None:
            layout = layout_spec
        elif length == 1:
            layout = ModalityLayout(np.array([TEXT]))
        else:
            v = int(rng.integers(1, length))
            start = int(rng.integers(0, length - v + 1))
            tags = np.full(length, TEXT)
            tags[start : start + v] = VISUAL
            layout = ModalityLayout(tags)
        rows = rng.uniform(-0.5, 0.5, size=(length, d_model))
        vis = layout.modality == VISUAL
        rows[vis] = rng.uniform(-20.0, 10.0, size=(int(vis.sum()), d_model))
        samples.append((rows, layout))
    return samples


# ===== calibration =====


@dataclass
class CalibrationResult:
    """Frozen activation grids, tied to a specific float model."""

    fingerprint: str
    msq: list
    vision_act: list
    sample_count: int
    bits_a: int
    symmetric: bool
    aifs: bool

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "calibration",
            "fingerprint": self.fingerprint,
            "sample_count": self.sample_count,
            "bits_a": self.bits_a,
            "symmetric": self.symmetric,
            "aifs": self.aifs,
            "msq": [
                {"visual": params_to_dict(m.visual), "text": params_to_dict(m.text)}
                for m in self.msq
            ],
            "vision_act": [params_to_dict(p) for p in self.vision_act],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        if d.get("kind") != "calibration":
            raise ValueError(f"not a calibration file (kind={d.get('kind')!r})")
        msq = [
            MsqParams(
                bits=d["bits_a"],
                symmetric=d["symmetric"],
                visual=params_from_dict(m["visual"]),
                text=params_from_dict(m["text"]),
            )
            for m in d["msq"]
        ]
        return cls(
            fingerprint=d["fingerprint"],
            msq=msq,
            vision_act=[params_from_dict(p) for p in d["vision_act"]],
            sample_count=d["sample_count"],
            bits_a=d["bits_a"],
            symmetric=d["symmetric"],
            aifs=d["aifs"],
        )


def calibrate_pipeline(
    float_model: ToyMllm, samples: list, pcfg: PipelineConfig
) -> CalibrationResult:
    """Collect activation grids from float forwards of the rotated model.

    The LLM part is rotated first so block inputs live in their final
    coordinates; the vision path stays float and untouched, which is the
    calibration contract for the LLM grids.
    """
    if len(samples) == 0:
        raise ValueError("calibration needs at least one sample")
    rset = build_rotation_set(
        pcfg.model.d_model,
        randomized=pcfg.randomized_rotation,
        seed=pcfg.rotation_seed,
    )
    work, _ = rotate_model_offline(float_model, rset, parts=("llm",))

    llm_inputs: list[list] = [[] for _ in work.llm_blocks]
    vision_inputs: list[list] = [[] for _ in work.vision_blocks]

    def recorder(name: str, x: np.ndarray) -> np.ndarray:
        part, idx = name.split(".")[0], int(name.split(".")[1])
        if part == "llm":
            llm_inputs[idx].append(x)
        elif part == "vision":
            vision_inputs[idx].append(x)
        return x

    hooks = ForwardHooks(act_fn=recorder)
    reordered_layouts = []
    for rows, layout in samples:
        x = embed_tokens(work, rows, layout.modality, hooks)
        if pcfg.aifs:
            plan = build_aifs_plan(layout)
            x = x[plan.perm]
            mask = mask_for_plan(plan)
            positions = plan.position_ids
            tags = np.concatenate(
                [np.full(plan.m_count, VISUAL), np.full(len(layout) - plan.m_count, TEXT)]
            )
        else:
            mask = standard_causal_mask(len(layout))
            positions = np.arange(len(layout))
            tags = layout.modality
        reordered_layouts.append(ModalityLayout(tags))
        llm_stack(work, x, mask, positions, hooks)

    msq = [
        calibrate_msq(
            zip(llm_inputs[i], reordered_layouts),
            pcfg.bits_a,
            symmetric=pcfg.symmetric_activations,
        )
        for i in range(len(work.llm_blocks))
    ]
    vision_act = [
        calibrate_static(vision_inputs[i], pcfg.bits_a, symmetric=pcfg.symmetric_activations)
        for i in range(len(work.vision_blocks))
    ]
    return CalibrationResult(
        fingerprint=model_fingerprint(float_model),
        msq=msq,
        vision_act=vision_act,
        sample_count=len(samples),
        bits_a=pcfg.bits_a,
        symmetric=pcfg.symmetric_activations,
        aifs=pcfg.aifs,
    )


# ===== staged transform =====

LLM_WEIGHTS = ("wq", "wk", "wv", "wo", "w_up")


@dataclass
class QuantizeState:
    pcfg: PipelineConfig
    float_model: ToyMllm
    model: ToyMllm
    rset: RotationSet
    snapshots: dict = field(default_factory=dict)
    weight_q: dict = field(default_factory=dict)
    calib: CalibrationResult | None = None
    plans: dict = field(default_factory=dict)
    done: list = field(default_factory=list)

    def require(self, *stages: str) -> None:
        missing = [s for s in stages if s not in self.done]
        if missing:
            raise ValueError(
                f"stage order violation: {missing} must run first (done: {self.done})"
            )

    def forbid(self, stage: str, reason: str) -> None:
        if stage in self.done:
            raise ValueError(f"stage order violation: {reason}")

    def mark(self, stage: str) -> None:
        if stage in self.done:
            raise ValueError(f"stage {stage!r} already ran")
        self.done.append(stage)


def new_state(float_model: ToyMllm, pcfg: PipelineConfig) -> QuantizeState:
    rset = build_rotation_set(
        pcfg.model.d_model,
        randomized=pcfg.randomized_rotation,
        seed=pcfg.rotation_seed,
    )
    return QuantizeState(
        pcfg=pcfg, float_model=float_model, model=float_model, rset=rset
    )


def stage_rotate_llm(state: QuantizeState) -> None:
    state.model, snaps = rotate_model_offline(state.model, state.rset, parts=("llm",))
    state.snapshots.update(snaps)
    state.mark("rotate_llm")


def _quantize_weight(state: QuantizeState, name: str, w: np.ndarray) -> None:
    pcfg = state.pcfg
    if pcfg.weight_granularity == "per_group":
        params = compute_params_absmax(
            np.ascontiguousarray(w.T),
            pcfg.bits_w,
            Granularity.PER_GROUP,
            symmetric=True,
            group_size=pcfg.group_size,
        )
    else:
        params = compute_params_absmax(
            np.ascontiguousarray(w.T), pcfg.bits_w, Granularity.PER_CHANNEL, symmetric=True
        )
    state.weight_q[name] = quantize(np.ascontiguousarray(w.T), params)


def stage_quantize_llm_weights(state: QuantizeState) -> None:
    state.require("rotate_llm")
    for name, lin in iter_linears(state.model):
        part = name.split(".")[0]
        if part not in ("llm", "text_embed", "head"):
            continue
        if name.endswith(".w_down") and state.pcfg.rms_effective:
            continue  # covered by its split plan
        _quantize_weight(state, name, lin.w)
    state.mark("quantize_llm_weights")


def stage_calibrate(state: QuantizeState, samples: list) -> None:
    state.require("rotate_llm")
    state.forbid(
        "vision_rewrite",
        "activation calibration must see the float vision path, "
        "but the vision rewrite already ran",
    )
    state.calib = calibrate_pipeline(state.float_model, samples, state.pcfg)
    state.mark("calibrate")


def stage_set_calibration(state: QuantizeState, calib: CalibrationResult) -> None:
    state.require("rotate_llm")
    state.forbid(
        "vision_rewrite",
        "calibration must be attached before the vision rewrite stage",
    )
    expect = model_fingerprint(state.float_model)
    if calib.fingerprint != expect:
        raise ValueError(
            f"calibration was made for model {calib.fingerprint}, "
            f"this model is {expect}"
        )
    if calib.bits_a != state.pcfg.bits_a:
        raise ValueError(
            f"calibration used bits_a={calib.bits_a}, config says {state.pcfg.bits_a}"
        )
    if calib.aifs != state.pcfg.aifs:
        raise ValueError(
            f"calibration used aifs={calib.aifs}, config says {state.pcfg.aifs}"
        )
    state.calib = calib
    state.mark("calibrate")


def stage_vision_rewrite(state: QuantizeState) -> None:
    state.model = preln_to_rmsnorm(state.model)
    state.mark("vision_rewrite")


def stage_rotate_vision(state: QuantizeState) -> None:
    state.require("vision_rewrite")
    state.model, snaps = rotate_model_offline(state.model, state.rset, parts=("vision",))
    state.snapshots.update(snaps)
    state.mark("rotate_vision")


def stage_quantize_vision_weights(state: QuantizeState) -> None:
    state.require("rotate_vision")
    for name, lin in iter_linears(state.model):
        part = name.split(".")[0]
        if part not in ("vision", "vision_embed", "projector"):
            continue
        if name.endswith(".w_down") and state.pcfg.rms_effective:
            continue
        _quantize_weight(state, name, lin.w)
    state.mark("quantize_vision_weights")


def stage_build_rms_plans(state: QuantizeState) -> None:
    state.require("rotate_llm", "rotate_vision")
    if not state.pcfg.rms_effective:
        raise ValueError(
            "split plans are disabled (rms off or randomized rotation active)"
        )
    for name, lin in iter_linears(state.model):
        if not name.endswith(".w_down"):
            continue
        state.plans[name] = build_split_plan(
            name,
            w_rotated=lin.w,
            w_original=state.snapshots[name],
            bits=state.pcfg.bits_w,
            split_bits=state.pcfg.split_bits,
        )
    state.mark("build_rms_plans")


def apply_lossless_stack(
    float_model: ToyMllm, pcfg: PipelineConfig
) -> tuple[ToyMllm, RotationSet, dict]:
    """Rewrite plus both rotations, no quantization: the float-equivalent
    transform stack.  Returns (transformed model, rotations, snapshots)."""
    state = new_state(float_model, pcfg)
    stage_rotate_llm(state)
    stage_vision_rewrite(state)
    stage_rotate_vision(state)
    return state.model, state.rset, state.snapshots


# ===== quantized model =====


@dataclass
class QuantizedModel:
    """Transformed model plus every frozen grid, ready to simulate."""

    pcfg: PipelineConfig
    float_model: ToyMllm
    model: ToyMllm
    weight_q: dict
    plans: dict
    msq: list
    vision_act: list
    stage_log: list
    counter: ScaleOpCounter = field(default_factory=ScaleOpCounter)
    eff_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.eff_weights:
            self.eff_weights = {
                name: np.ascontiguousarray(dequantize(qt).T)
                for name, qt in self.weight_q.items()
            }

    def forward(
        self,
        sample: np.ndarray,
        modality: np.ndarray,
        dynamic: bool = False,
        weights_on: bool = True,
        acts_on: bool = True,
    ) -> np.ndarray:
        """Simulated quantized pass, output rows in the original order.

        dynamic swaps the static modality-split grids for per-token grids
        computed on the fly.  weights_on/acts_on=False give pass-through
        paths used by the equivalence tests.
        """
        self.counter.reset()
        layout = ModalityLayout(np.asarray(modality))
        plan = build_aifs_plan(layout) if self.pcfg.aifs else None
        pcfg = self.pcfg

        def weight_fn(name: str, w: np.ndarray) -> np.ndarray:
            if weights_on and name in self.eff_weights:
                return self.eff_weights[name]
            return w

        down_fn = None
        if self.plans:
            def down_fn(name: str, u: np.ndarray) -> np.ndarray:
                return rms_forward(u, self.plans[name], quantize_weights=weights_on)

        def act_fn(name: str, x: np.ndarray) -> np.ndarray:
            if not acts_on or not name.endswith(".input"):
                return x
            part, idx = name.split(".")[0], int(name.split(".")[1])
            if part == "vision":
                return fake_quant(x, self.vision_act[idx])
            if part == "llm":
                if dynamic:
                    return quantize_dynamic_per_token(
                        x, pcfg.bits_a, pcfg.symmetric_activations, self.counter
                    )
                seg = plan if plan is not None else (layout.modality == VISUAL)
                return quantize_msq(x, seg, self.msq[idx], self.counter)
            return x

        hooks = ForwardHooks(weight_fn=weight_fn, act_fn=act_fn, down_fn=down_fn)
        x = embed_tokens(self.model, sample, modality, hooks)
        if plan is not None:
            x = x[plan.perm]
            mask = mask_for_plan(plan)
            positions = plan.position_ids
        else:
            mask = standard_causal_mask(x.shape[0])
            positions = np.arange(x.shape[0])
        out = llm_stack(self.model, x, mask, positions, hooks)
        if plan is not None:
            out = out[plan.inverse]
        return out


def mquant_quantize(
    float_model: ToyMllm,
    pcfg: PipelineConfig,
    samples: list | None = None,
    calib: CalibrationResult | None = None,
) -> QuantizedModel:
    """Run the full staged pipeline and assemble the quantized model.

    Exactly one of samples (calibrate here) or calib (precomputed grids)
    must be provided.
    """
    if (samples is None) == (calib is None):
        raise ValueError("provide exactly one of samples or calib")
    state = new_state(float_model, pcfg)
    stage_rotate_llm(state)
    stage_quantize_llm_weights(state)
    if samples is not None:
        stage_calibrate(state, samples)
    else:
        stage_set_calibration(state, calib)
    stage_vision_rewrite(state)
    stage_rotate_vision(state)
    stage_quantize_vision_weights(state)
    if pcfg.rms_effective:
        stage_build_rms_plans(state)
    return QuantizedModel(
        pcfg=pcfg,
        float_model=state.float_model,
        model=state.model,
        weight_q=state.weight_q,
        plans=state.plans,
        msq=state.calib.msq,
        vision_act=state.calib.vision_act,
        stage_log=list(state.done),
    )


# ===== evaluation =====


def cosine_and_mse(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Flattened cosine similarity and mean squared error.

    Bitwise-equal inputs short-circuit to exactly (1.0, 0.0) so a model
    compared against itself reports perfect agreement, not 1 - 1e-16.
    """
    a = as_tensor(a).reshape(-1)
    b = as_tensor(b).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return 1.0, 0.0
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0, float(np.mean((a - b) ** 2))
    return float(np.dot(a, b) / (na * nb)), float(np.mean((a - b) ** 2))


def evaluate(qm: QuantizedModel, samples: list, dynamic: bool = False) -> dict:
    """Quantized outputs against the float reference, as a report dict."""
    if len(samples) == 0:
        raise ValueError("evaluation needs at least one sample")
    per_sample = []
    for rows, layout in samples:
        ref = model_forward(qm.float_model, rows, layout.modality)
        out = qm.forward(rows, layout.modality, dynamic=dynamic)
        cos, mse = cosine_and_mse(out, ref)
        per_sample.append(
            {
                "length": int(rows.shape[0]),
                "cosine": cos,
                "mse": mse,
                "scale_ops": qm.counter.scale_ops,
            }
        )
    cosines = [s["cosine"] for s in per_sample]
    mses = [s["mse"] for s in per_sample]
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "eval",
        "config": qm.pcfg.to_dict(),
        "weight_solver": WEIGHT_SOLVER_NOTE,
        "stages": list(qm.stage_log),
        "activation_mode": "dynamic_per_token" if dynamic else "static_msq",
        "per_layer": {
            name: params_to_dict(qt.params) for name, qt in sorted(qm.weight_q.items())
        },
        "activations": {
            "msq": [
                {"visual": params_to_dict(m.visual), "text": params_to_dict(m.text)}
                for m in qm.msq
            ],
            "vision": [params_to_dict(p) for p in qm.vision_act],
        },
        "rms_compliance": compliance_ratio(list(qm.plans.values())),
        "counters": {
            "scale_ops_by_sample": [s["scale_ops"] for s in per_sample],
            "scale_ops_total": int(sum(s["scale_ops"] for s in per_sample)),
        },
        "metrics": {
            "samples": len(samples),
            "cosine_mean": float(np.mean(cosines)),
            "cosine_min": float(np.min(cosines)),
            "mse_mean": float(np.mean(mses)),
            "per_sample": per_sample,
        },
    }


def bench(qm: QuantizedModel, lengths: list, seed: int = 0) -> dict:
    """Static vs dynamic activation paths across sequence lengths.

    Scale-op counts are the contract; wall-clock seconds are informational
    only and never asserted anywhere.
    """
    if len(lengths) == 0:
        raise ValueError("bench needs at least one length")
    entries = []
    for length in lengths:
        sample, layout = generate_synthetic_samples(
            1, int(length), seed=seed + int(length), d_model=qm.pcfg.model.d_model
        )[0]
        entry = {"length": int(length)}
        for mode, dynamic in (("static", False), ("dynamic", True)):
            t0 = time.perf_counter()
            qm.forward(sample, layout.modality, dynamic=dynamic)
            seconds = time.perf_counter() - t0
            entry[mode] = {
                "scale_ops": qm.counter.scale_ops,
                "seconds": seconds,
            }
        entries.append(entry)
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "bench",
        "config": qm.pcfg.to_dict(),
        "weight_solver": WEIGHT_SOLVER_NOTE,
        "llm_blocks": len(qm.model.llm_blocks),
        "note": "seconds are informational; scale_ops are the asserted contract",
        "entries": entries,
    }


# ===== qmodel round trip =====


def _plan_to_dict(plan: RmsSplitPlan) -> dict:
    return {
        "layer_id": plan.layer_id,
        "triggered": plan.triggered,
        "columns": list(plan.columns),
        "bits": plan.bits,
        "split_bits": plan.split_bits,
        "main_weight": fileio.tensor_to_b64(plan.main_weight),
        "split_row": (
            fileio.tensor_to_b64(plan.split_row[None, :])
            if plan.split_row is not None
            else None
        ),
        "main_params": params_to_dict(plan.main_params),
        "split_params": (
            params_to_dict(plan.split_params) if plan.split_params is not None else None
        ),
    }


def _plan_from_dict(d: dict) -> RmsSplitPlan:
    return RmsSplitPlan(
        layer_id=d["layer_id"],
        triggered=d["triggered"],
        columns=list(d["columns"]),
        main_weight=fileio.tensor_from_b64(d["main_weight"]),
        split_row=(
            fileio.tensor_from_b64(d["split_row"])[0] if d["split_row"] else None
        ),
        bits=d["bits"],
        main_params=params_from_dict(d["main_params"]),
        split_params=(
            params_from_dict(d["split_params"]) if d["split_params"] else None
        ),
        split_bits=d["split_bits"],
    )


def qmodel_to_dict(qm: QuantizedModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "qmodel",
        "config": qm.pcfg.to_dict(),
        "float_model": model_to_dict(qm.float_model),
        "model": model_to_dict(qm.model),
        "weights": {
            name: {
                # int32 codes ride in the float64 container; they are exact.
                "values": fileio.tensor_to_b64(qt.values.astype(np.float64)),
                "params": params_to_dict(qt.params),
            }
            for name, qt in sorted(qm.weight_q.items())
        },
        "plans": [_plan_to_dict(p) for _, p in sorted(qm.plans.items())],
        "msq": [
            {"visual": params_to_dict(m.visual), "text": params_to_dict(m.text)}
            for m in qm.msq
        ],
        "msq_meta": {
            "bits": qm.msq[0].bits if qm.msq else qm.pcfg.bits_a,
            "symmetric": (
                qm.msq[0].symmetric if qm.msq else qm.pcfg.symmetric_activations
            ),
        },
        "vision_act": [params_to_dict(p) for p in qm.vision_act],
        "stage_log": list(qm.stage_log),
    }


def qmodel_from_dict(d: dict) -> QuantizedModel:
    if d.get("kind") != "qmodel":
        raise ValueError(f"not a quantized model file (kind={d.get('kind')!r})")
    pcfg = PipelineConfig.from_dict(d["config"])
    weight_q = {}
    for name, entry in d["weights"].items():
        values = fileio.tensor_from_b64(entry["values"]).astype(np.int32)
        weight_q[name] = QuantizedTensor(
            values=values, params=params_from_dict(entry["params"])
        )
    meta = d["msq_meta"]
    msq = [
        MsqParams(
            bits=meta["bits"],
            symmetric=meta["symmetric"],
            visual=params_from_dict(m["visual"]),
            text=params_from_dict(m["text"]),
        )
        for m in d["msq"]
    ]
    return QuantizedModel(
        pcfg=pcfg,
        float_model=model_from_dict(d["float_model"]),
        model=model_from_dict(d["model"]),
        weight_q=weight_q,
        plans={p["layer_id"]: _plan_from_dict(p) for p in d["plans"]},
        msq=msq,
        vision_act=[params_from_dict(p) for p in d["vision_act"]],
        stage_log=list(d["stage_log"]),
    )
