"""Desk-scale recurrent blocks for calibration capture and plan evaluation.

Each block runs two residual stages. Time mixing blends every token with
its predecessor, projects to receptance/key/value, and aggregates values
across time with exponentially decayed attention-like weights (plus a
bonus for the current token). Channel mixing is a gated squared-ReLU
feed-forward on the same token blend. The simulator exists so that a
quantization plan can be judged by output error, not weight error.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import kernels
from .errors import BudgetError, NumericalError, ShapeError, ValidationError
from .proxy import (
    Method,
    PlanEntry,
    QuantPlan,
    SQ_BPW_SETTING,
    VQ_BPW_SETTING,
    quantizable_names,
    score_tensor,
)
from .squant import CalibrationSet, SQTensor, gptq_quantize, sq_dequantize, sq_quantize_rtn
from .tensor_store import ModelBundle, QuantConfig, TensorKind, WeightTensor
from .vquant import (
    ActivationSummary,
    VQTensor,
    activation_summary,
    derive_seed,
    quantize_elementwise_mul,
    vq_dequantize,
    vq_quantize,
)

MATRIX_SUFFIXES = (
    "att.w_r",
    "att.w_k",
    "att.w_v",
    "att.w_o",
    "ffn.w_r",
    "ffn.w_k",
    "ffn.w_v",
)
VECTOR_SUFFIXES = (
    "att.mu_r",
    "att.mu_k",
    "att.mu_v",
    "att.decay",
    "att.bonus",
    "ffn.mu_r",
    "ffn.mu_k",
)
EXHAUSTIVE_LIMIT = 14


@dataclass
class RwkvBlockParams:
    """One block's weights: four time-mix and three channel-mix matrices."""

    w_r: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    mu_r: np.ndarray
    mu_k: np.ndarray
    mu_v: np.ndarray
    decay: np.ndarray
    bonus: np.ndarray
    ffn_w_r: np.ndarray
    ffn_w_k: np.ndarray
    ffn_w_v: np.ndarray
    ffn_mu_r: np.ndarray
    ffn_mu_k: np.ndarray

    @property
    def dim(self) -> int:
        return self.w_r.shape[0]

    def validate(self) -> None:
        d = self.dim
        for name in ("w_r", "w_k", "w_v", "w_o", "ffn_w_r", "ffn_w_k", "ffn_w_v"):
            if getattr(self, name).shape != (d, d):
                raise ValidationError(f"{name} must be ({d}, {d})")
        for name in ("mu_r", "mu_k", "mu_v", "decay", "bonus", "ffn_mu_r", "ffn_mu_k"):
            if getattr(self, name).shape != (d,):
                raise ValidationError(f"{name} must be length {d}")
            if not np.isfinite(getattr(self, name)).all():
                raise ValidationError(f"{name} must be finite")
        if (self.decay <= 0).any():
            raise ValidationError("decay must be positive")


@dataclass
class SequenceBatch:
    """One sequence of T hidden states."""

    x: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValidationError("sequence must be (T, D) with T >= 1")
        if not np.isfinite(self.x).all():
            raise ValidationError("sequence values must be finite")

    @property
    def steps(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass
class CaptureResult:
    """Exact quantizer inputs observed during forward passes.

    matmul maps each matrix name to the rows it multiplied; elemmul maps
    each mix vector name to the activation rows it scaled (both the
    current token and the shifted one, since one vector serves both).
    """

    matmul: dict[str, CalibrationSet] = field(default_factory=dict)
    elemmul: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class EvalReport:
    """Output-space error plus per-tensor weight reconstruction error."""

    end_to_end: float
    per_tensor: dict[str, float]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    with np.errstate(over="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
    return out


def _shift_rows(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    out[1:] = x[:-1]
    return out


def token_shift(seq: SequenceBatch) -> SequenceBatch:
    """Previous-token view: a zero row, then every state but the last."""
    return SequenceBatch(_shift_rows(seq.x))


def _mix(mu: np.ndarray, cur: np.ndarray, prev: np.ndarray) -> np.ndarray:
    return mu * cur + (1.0 - mu) * prev


def _time_mix_arrays(
    p: RwkvBlockParams, x: np.ndarray, capture: dict | None = None, prefix: str = ""
) -> np.ndarray:
    prev = _shift_rows(x)
    xm_r = _mix(p.mu_r, x, prev)
    xm_k = _mix(p.mu_k, x, prev)
    xm_v = _mix(p.mu_v, x, prev)
    r = xm_r @ p.w_r.T
    k = xm_k @ p.w_k.T
    v = xm_v @ p.w_v.T
    wkv = kernels.wkv_sequence(k, v, p.decay, p.bonus)
    gated = _sigmoid(r) * wkv
    with np.errstate(over="ignore", invalid="ignore"):
        o = gated @ p.w_o.T
    if not np.isfinite(o).all():
        raise NumericalError("time mixing produced non-finite values")
    if capture is not None:
        capture[f"{prefix}att.w_r"].append(xm_r)
        capture[f"{prefix}att.w_k"].append(xm_k)
        capture[f"{prefix}att.w_v"].append(xm_v)
        capture[f"{prefix}att.w_o"].append(gated)
        for mu_name in ("att.mu_r", "att.mu_k", "att.mu_v"):
            capture[f"{prefix}{mu_name}"].append(x)
            capture[f"{prefix}{mu_name}"].append(prev)
    return o


def _channel_mix_arrays(
    p: RwkvBlockParams, x: np.ndarray, capture: dict | None = None, prefix: str = ""
) -> np.ndarray:
    prev = _shift_rows(x)
    xm_r = _mix(p.ffn_mu_r, x, prev)
    xm_k = _mix(p.ffn_mu_k, x, prev)
    r = xm_r @ p.ffn_w_r.T
    k = xm_k @ p.ffn_w_k.T
    hidden = np.square(np.maximum(k, 0.0))
    o = _sigmoid(r) * (hidden @ p.ffn_w_v.T)
    if capture is not None:
        capture[f"{prefix}ffn.w_r"].append(xm_r)
        capture[f"{prefix}ffn.w_k"].append(xm_k)
        capture[f"{prefix}ffn.w_v"].append(hidden)
        for mu_name in ("ffn.mu_r", "ffn.mu_k"):
            capture[f"{prefix}{mu_name}"].append(x)
            capture[f"{prefix}{mu_name}"].append(prev)
    return o


def time_mixing(p: RwkvBlockParams, seq: SequenceBatch) -> SequenceBatch:
    """Cross-token stage outputs (without the residual add)."""
    if seq.dim != p.dim:
        raise ShapeError(f"sequence dim {seq.dim} does not match block dim {p.dim}")
    return SequenceBatch(_time_mix_arrays(p, seq.x))


def channel_mixing(p: RwkvBlockParams, seq: SequenceBatch) -> SequenceBatch:
    """Per-token gated squared-ReLU stage outputs (without the residual add)."""
    if seq.dim != p.dim:
        raise ShapeError(f"sequence dim {seq.dim} does not match block dim {p.dim}")
    return SequenceBatch(_channel_mix_arrays(p, seq.x))


def forward(
    model: list[RwkvBlockParams], seq: SequenceBatch, _capture: dict | None = None
) -> SequenceBatch:
    """Residual wiring: x += time_mixing(x); x += channel_mixing(x) per block."""
    x = seq.x
    for i, p in enumerate(model):
        if x.shape[1] != p.dim:
            raise ShapeError(f"sequence dim {x.shape[1]} does not match block dim {p.dim}")
        prefix = f"block{i}."
        x = x + _time_mix_arrays(p, x, _capture, prefix)
        x = x + _channel_mix_arrays(p, x, _capture, prefix)
    return SequenceBatch(x)


def bundle_to_blocks(bundle: ModelBundle) -> list[RwkvBlockParams]:
    """Assemble per-block parameters from the flat tensor bundle."""
    prefixes = sorted(
        {n.split(".", 1)[0] for n in bundle.names() if n.startswith("block")},
        key=lambda s: int(s[5:]),
    )
    if not prefixes:
        raise ValidationError("bundle holds no block tensors")
    if prefixes != [f"block{i}" for i in range(len(prefixes))]:
        raise ValidationError("block indices must be contiguous from 0")
    blocks = []
    for pre in prefixes:
        def get(suffix: str) -> np.ndarray:
            return bundle.tensor(f"{pre}.{suffix}").data.astype(np.float64)

        p = RwkvBlockParams(
            w_r=get("att.w_r"),
            w_k=get("att.w_k"),
            w_v=get("att.w_v"),
            w_o=get("att.w_o"),
            mu_r=get("att.mu_r"),
            mu_k=get("att.mu_k"),
            mu_v=get("att.mu_v"),
            decay=get("att.decay"),
            bonus=get("att.bonus"),
            ffn_w_r=get("ffn.w_r"),
            ffn_w_k=get("ffn.w_k"),
            ffn_w_v=get("ffn.w_v"),
            ffn_mu_r=get("ffn.mu_r"),
            ffn_mu_k=get("ffn.mu_k"),
        )
        p.validate()
        blocks.append(p)
    return blocks


def _as_sequences(inputs) -> list[np.ndarray]:
    if isinstance(inputs, SequenceBatch):
        return [inputs.x]
    if isinstance(inputs, np.ndarray):
        if inputs.ndim == 2:
            return [SequenceBatch(inputs).x]
        if inputs.ndim == 3:
            return [SequenceBatch(s).x for s in inputs]
        raise ShapeError("inputs must be (T, D) or (S, T, D)")
    return [s.x if isinstance(s, SequenceBatch) else SequenceBatch(s).x for s in inputs]


def capture_calibration(bundle: ModelBundle, inputs) -> CaptureResult:
    """Run the model over inputs, recording every quantizer-relevant input."""
    blocks = bundle_to_blocks(bundle)
    raw: dict[str, list[np.ndarray]] = {}
    for i in range(len(blocks)):
        for s in MATRIX_SUFFIXES + VECTOR_SUFFIXES:
            raw[f"block{i}.{s}"] = []
    for seq in _as_sequences(inputs):
        forward(blocks, SequenceBatch(seq), _capture=raw)
    result = CaptureResult()
    vector_names = {f"block{i}.{s}" for i in range(len(blocks)) for s in VECTOR_SUFFIXES}
    for name, rows in raw.items():
        if not rows:
            continue
        stacked = np.vstack(rows)
        if name in vector_names:
            result.elemmul[name] = stacked
        else:
            result.matmul[name] = CalibrationSet(stacked)
    return result


def evaluate_quantization(bundle: ModelBundle, quantized: ModelBundle, inputs) -> EvalReport:
    """Mean squared-Frobenius output gap plus per-tensor weight error."""
    ref = bundle_to_blocks(bundle)
    alt = bundle_to_blocks(quantized)
    if len(ref) != len(alt) or ref[0].dim != alt[0].dim:
        raise ValidationError("models must share the same architecture")
    seqs = _as_sequences(inputs)
    total = 0.0
    for seq in seqs:
        ya = forward(ref, SequenceBatch(seq)).x
        yb = forward(alt, SequenceBatch(seq)).x
        diff = ya - yb
        total += float(np.sum(diff * diff))
    per_tensor = {}
    names = set(bundle.names()) & set(quantized.names())
    for name in sorted(names):
        a = bundle.tensor(name).data.astype(np.float64)
        b = quantized.tensor(name).data.astype(np.float64)
        if a.shape != b.shape:
            raise ValidationError(f"tensor {name} changed shape")
        per_tensor[name] = float(np.mean((a - b) ** 2))
    return EvalReport(total / len(seqs), per_tensor)


# ---------------------------------------------------------------------------
# synthetic models

UNIFORM_HALF_WIDTH = 0.5
ROW_WIDTH_LO = 0.7
CLUSTER_COUNT = 8
CLUSTER_SIGMA = 0.0045
SPIKE_BASE = 0.9
SPIKE_JITTER = 0.25
MATRIX_GAIN_NUM = 0.8
PROFILES = ("uniform", "clustered", "outlier", "mixed")


def _uniform_matrix(rng: np.random.Generator, shape) -> np.ndarray:
    # rows get individual ranges: the regime where per-group scales shine
    widths = np.linspace(ROW_WIDTH_LO, 1.0, shape[0]) * UNIFORM_HALF_WIDTH
    return rng.uniform(-1.0, 1.0, size=shape) * widths[:, None]


def _clustered_matrix(rng: np.random.Generator, shape) -> np.ndarray:
    centers = rng.uniform(-1.0, 1.0, size=CLUSTER_COUNT)
    picks = rng.integers(0, CLUSTER_COUNT, size=shape)
    return centers[picks] + rng.normal(0.0, CLUSTER_SIGMA, size=shape)


def _outlier_matrix(rng: np.random.Generator, shape) -> np.ndarray:
    base = _uniform_matrix(rng, shape)
    rows, cols = shape
    spots = rng.integers(0, cols, size=rows)
    signs = rng.choice([-1.0, 1.0], size=rows)
    base[np.arange(rows), spots] = signs * (SPIKE_BASE + rng.uniform(0.0, SPIKE_JITTER, size=rows))
    return base


_PROFILE_DRAWS = {
    "uniform": _uniform_matrix,
    "clustered": _clustered_matrix,
    "outlier": _outlier_matrix,
}


def synth_matrix(profile: str, shape, rng: np.random.Generator) -> np.ndarray:
    """Draw a matrix from a named weight-distribution profile, gain-scaled."""
    draw = _PROFILE_DRAWS[profile]
    gain = MATRIX_GAIN_NUM / math.sqrt(shape[1])
    return (draw(rng, shape) * gain).astype(np.float32)


def gen_model(
    blocks: int, dim: int, seed: int, profile: str = "uniform"
) -> ModelBundle:
    """Synthesize a model whose quantizable matrices follow a profile.

    uniform/clustered/outlier apply the profile to every projection
    matrix and mark them all quantizable; mixed rotates through the
    three profiles, one designated matrix per block.
    """
    if profile not in PROFILES:
        raise ValidationError(f"unknown profile {profile!r}")
    if blocks < 1 or dim < 2:
        raise ValidationError("need blocks >= 1 and dim >= 2")
    bundle = ModelBundle()
    whitelist: list[str] = []
    rotation = ("uniform", "clustered", "outlier")
    for i in range(blocks):
        pre = f"block{i}"
        for s in MATRIX_SUFFIXES:
            name = f"{pre}.{s}"
            rng = np.random.default_rng(derive_seed(seed, name))
            if profile == "mixed":
                if s == "att.w_o":
                    mat = synth_matrix(rotation[i % 3], (dim, dim), rng)
                    whitelist.append(name)
                else:
                    mat = synth_matrix("uniform", (dim, dim), rng)
            else:
                mat = synth_matrix(profile, (dim, dim), rng)
                whitelist.append(name)
            bundle.add(WeightTensor(name, mat), TensorKind.MATMUL)
        ramps = {
            "att.mu_r": np.linspace(0.15, 0.85, dim),
            "att.mu_k": np.linspace(0.2, 0.9, dim),
            "att.mu_v": np.linspace(0.1, 0.8, dim),
            "att.decay": np.linspace(0.4, 1.6, dim),
            "att.bonus": np.linspace(-0.3, 0.6, dim),
            "ffn.mu_r": np.linspace(0.25, 0.95, dim),
            "ffn.mu_k": np.linspace(0.05, 0.75, dim),
        }
        for s, vec in ramps.items():
            bundle.add(
                WeightTensor(f"{pre}.{s}", vec.astype(np.float32)), TensorKind.ELEMMUL
            )
    bundle.metadata["quantize"] = json.dumps(whitelist)
    bundle.metadata["profile"] = profile
    bundle.metadata["blocks"] = str(blocks)
    bundle.metadata["dim"] = str(dim)
    bundle.metadata["seed"] = str(seed)
    bundle.validate()
    return bundle


SEQ_SMOOTHING = 0.75
SEQ_SCALE = 2.0


def gen_sequences(n_seqs: int, steps: int, dim: int, seed: int) -> np.ndarray:
    """Input batch of smoothed random walks, one (T, D) slice per sequence.

    Adjacent steps are correlated, so calibration second-moment matrices
    pick up off-diagonal structure instead of collapsing to a multiple of
    the identity.
    """
    rng = np.random.default_rng(derive_seed(seed, "sequences"))
    out = np.empty((n_seqs, steps, dim))
    x = rng.uniform(-1.0, 1.0, size=(n_seqs, dim))
    for t in range(steps):
        x = SEQ_SMOOTHING * x + (1.0 - SEQ_SMOOTHING) * rng.uniform(
            -1.0, 1.0, size=(n_seqs, dim)
        )
        out[:, t] = x
    return out * SEQ_SCALE


# ---------------------------------------------------------------------------
# plan execution

def quantize_tensor(
    w: WeightTensor,
    kind: TensorKind,
    method: Method,
    config: QuantConfig,
    calib: CalibrationSet | None = None,
    mu_samples: np.ndarray | None = None,
    use_rtn: bool = False,
) -> tuple[SQTensor | VQTensor, bool]:
    """Quantize one tensor per the plan; returns (artifact, fell_back).

    fell_back is set when a calibration-aware path was expected but no
    capture was available for the tensor.
    """
    seed = derive_seed(config.seed, w.name)
    if method is Method.SQ:
        if use_rtn or kind is TensorKind.ELEMMUL:
            return sq_quantize_rtn(w, config.sq_bits, config.sq_group), False
        if calib is None:
            return sq_quantize_rtn(w, config.sq_bits, config.sq_group), True
        return gptq_quantize(w, calib, config.sq_bits, config.sq_group), False
    if kind is TensorKind.ELEMMUL:
        if mu_samples is None:
            return vq_quantize(w, config.vq_index_bits, config.vq_dim, seed), True
        summary = activation_summary(mu_samples, config.clip_lo, config.clip_hi)
        return (
            quantize_elementwise_mul(
                w, summary, config.vq_index_bits, config.vq_dim, seed
            ),
            False,
        )
    return vq_quantize(w, config.vq_index_bits, config.vq_dim, seed), False


def dequantize_artifact(artifact: SQTensor | VQTensor) -> WeightTensor:
    if isinstance(artifact, SQTensor):
        return sq_dequantize(artifact)
    return vq_dequantize(artifact)


def apply_methods(
    bundle: ModelBundle,
    methods: dict[str, Method],
    config: QuantConfig,
    capture: CaptureResult | None = None,
    use_rtn: bool = False,
    jobs: int = 1,
) -> tuple[ModelBundle, dict[str, SQTensor | VQTensor], list[str]]:
    """Quantize the chosen tensors, returning the dequantized model too.

    Results are independent of the job count because every tensor owns a
    seed derived from its name.
    """
    capture = capture or CaptureResult()

    def work(name: str):
        w = bundle.tensor(name)
        return quantize_tensor(
            w,
            bundle.kind(name),
            methods[name],
            config,
            calib=capture.matmul.get(name),
            mu_samples=capture.elemmul.get(name),
            use_rtn=use_rtn,
        )

    names = list(methods)
    if jobs > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, names))
    else:
        results = [work(n) for n in names]

    artifacts: dict[str, SQTensor | VQTensor] = {}
    fallbacks: list[str] = []
    out = ModelBundle(metadata=dict(bundle.metadata))
    for name, (artifact, fell_back) in zip(names, results):
        artifacts[name] = artifact
        if fell_back:
            fallbacks.append(name)
    for t in bundle:
        if t.name in artifacts:
            out.add(dequantize_artifact(artifacts[t.name]), bundle.kind(t.name))
        else:
            out.add(WeightTensor(t.name, t.data.copy()), bundle.kind(t.name))
    return out, artifacts, sorted(fallbacks)


def exhaustive_plan(bundle: ModelBundle, inputs, config: QuantConfig | None = None) -> QuantPlan:
    """Try every SQ/VQ assignment and keep the lowest output error.

    Ties prefer more SQ, then the lexically earliest assignment over the
    sorted tensor names.
    """
    config = config or QuantConfig()
    names = sorted(quantizable_names(bundle))
    m = len(names)
    if m > EXHAUSTIVE_LIMIT:
        raise BudgetError(f"{m} tensors exceed the exhaustive limit of {EXHAUSTIVE_LIMIT}")
    scores = {n: score_tensor(bundle.tensor(n), config.taylor_order) for n in names}
    if m == 0:
        return QuantPlan([], math.nan, math.nan, math.nan, Fraction(0))

    capture = capture_calibration(bundle, inputs)
    variants: dict[str, dict[Method, WeightTensor]] = {}
    for n in names:
        variants[n] = {}
        for method in (Method.SQ, Method.VQ):
            artifact, _ = quantize_tensor(
                bundle.tensor(n),
                bundle.kind(n),
                method,
                config,
                calib=capture.matmul.get(n),
                mu_samples=capture.elemmul.get(n),
            )
            variants[n][method] = dequantize_artifact(artifact)

    seqs = _as_sequences(inputs)
    ref = bundle_to_blocks(bundle)
    ref_out = [forward(ref, SequenceBatch(seq)).x for seq in seqs]

    best = None
    for mask in range(1 << m):
        assign = tuple(
            Method.SQ if (mask >> i) & 1 == 0 else Method.VQ for i in range(m)
        )
        trial = ModelBundle(metadata=dict(bundle.metadata))
        lut = dict(zip(names, assign))
        for t in bundle:
            if t.name in lut:
                trial.add(variants[t.name][lut[t.name]], bundle.kind(t.name))
            else:
                trial.add(t, bundle.kind(t.name))
        alt = bundle_to_blocks(trial)
        total = 0.0
        for seq, ya in zip(seqs, ref_out):
            diff = ya - forward(alt, SequenceBatch(seq)).x
            total += float(np.sum(diff * diff))
        mse = total / len(seqs)
        n_sq = sum(1 for a in assign if a is Method.SQ)
        key = (mse, -n_sq, tuple(a.value for a in assign))
        if best is None or key < best[0]:
            best = (key, assign)

    assert best is not None
    assignment = dict(zip(names, best[1]))
    entries = []
    sq_count = 0
    total_elems = 0
    weighted = Fraction(0)
    for n in names:
        method = assignment[n]
        sq_count += method is Method.SQ
        bpw = SQ_BPW_SETTING if method is Method.SQ else VQ_BPW_SETTING
        size = int(np.prod(bundle.tensor(n).shape))
        total_elems += size
        weighted += bpw * size
        s = scores[n]
        entries.append(PlanEntry(n, s.pc, s.pf, method, bpw, size))
    avg = weighted / total_elems if total_elems else Fraction(0)
    return QuantPlan(entries, math.nan, math.nan, sq_count / m, avg)
