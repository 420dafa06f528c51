"""Weight bundle container: types, validation, and file round-tripping.

The on-disk layout is the safetensors container: an 8-byte little-endian
unsigned header length, a JSON header mapping tensor names to
``{"dtype", "shape", "data_offsets"}`` entries plus an optional
``__metadata__`` string map, followed by a raw little-endian row-major
byte buffer. Only F32 and F16 payloads are accepted; F16 is widened to
F32 at load time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    IoError,
    ValidationError,
)

_DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2")}


class TensorKind(str, Enum):
    """How a weight participates in the forward pass."""

    MATMUL = "matmul"
    ELEMMUL = "elemmul"


@dataclass
class WeightTensor:
    """A named row-major float32 weight array."""

    name: str
    data: np.ndarray

    def __post_init__(self) -> None:
        if np.ndim(self.data) == 0:
            raise ValidationError(f"tensor {self.name!r} must have rank >= 1")
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if any(s <= 0 for s in arr.shape):
            raise ValidationError(f"tensor {self.name!r} has empty dimension {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError(f"tensor {self.name!r} carries non-finite values")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WeightTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass
class ModelBundle:
    """An ordered set of weight tensors with per-tensor kinds and metadata."""

    tensors: list[WeightTensor] = field(default_factory=list)
    kinds: dict[str, TensorKind] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __iter__(self) -> Iterator[WeightTensor]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    def tensor(self, name: str) -> WeightTensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise ValidationError(f"no tensor named {name!r}")

    def kind(self, name: str) -> TensorKind:
        try:
            return self.kinds[name]
        except KeyError:
            raise ValidationError(f"no kind recorded for tensor {name!r}") from None

    def add(self, tensor: WeightTensor, kind: TensorKind) -> None:
        self.tensors.append(tensor)
        self.kinds[tensor.name] = TensorKind(kind)

    def validate(self) -> None:
        """Raise ValidationError on duplicate names or missing kinds."""
        seen: set[str] = set()
        for t in self.tensors:
            if t.name in seen:
                raise ValidationError(f"duplicate tensor name {t.name!r}")
            seen.add(t.name)
            if t.name not in self.kinds:
                raise ValidationError(f"tensor {t.name!r} has no kind")
            TensorKind(self.kinds[t.name])
        for name in self.kinds:
            if name not in seen:
                raise ValidationError(f"kind recorded for unknown tensor {name!r}")


_AUTO = "auto"


@dataclass
class QuantConfig:
    """Knobs shared by the planning and quantization pipeline.

    ``tau_c``/``tau_f`` accept either a nonnegative float or the string
    ``"auto"``, in which case thresholds are calibrated from
    ``sq_fraction``.
    """

    sq_bits: int = 3
    sq_group: int = 64
    vq_index_bits: int = 12
    vq_dim: int = 4
    taylor_order: int = 4
    tau_c: float | str = _AUTO
    tau_f: float | str = _AUTO
    sq_fraction: float | None = 0.9
    clip_lo: float = 1.0
    clip_hi: float = 99.0
    seed: int = 0

    def validate(self) -> None:
        if self.sq_bits < 2:
            raise ConfigError(f"sq_bits must be >= 2, got {self.sq_bits}")
        if self.sq_group < 1:
            raise ConfigError(f"sq_group must be >= 1, got {self.sq_group}")
        if self.vq_index_bits < 1:
            raise ConfigError(f"vq_index_bits must be >= 1, got {self.vq_index_bits}")
        if self.vq_dim < 1:
            raise ConfigError(f"vq_dim must be >= 1, got {self.vq_dim}")
        if self.taylor_order < 2:
            raise ConfigError(f"taylor_order must be >= 2, got {self.taylor_order}")
        for label, tau in (("tau_c", self.tau_c), ("tau_f", self.tau_f)):
            if isinstance(tau, str):
                if tau != _AUTO:
                    raise ConfigError(f"{label} must be a number or 'auto', got {tau!r}")
            elif not np.isfinite(tau) or tau < 0:
                raise ConfigError(f"{label} must be nonnegative and finite, got {tau}")
        if self.tau_c == _AUTO or self.tau_f == _AUTO:
            if self.sq_fraction is None:
                raise ConfigError("auto thresholds require sq_fraction")
        if self.sq_fraction is not None and not 0.0 <= self.sq_fraction <= 1.0:
            raise ConfigError(f"sq_fraction must lie in [0, 1], got {self.sq_fraction}")
        if not 0.0 <= self.clip_lo <= 100.0 or not 0.0 <= self.clip_hi <= 100.0:
            raise ConfigError("clip percentiles must lie in [0, 100]")
        if self.clip_lo >= self.clip_hi:
            raise ConfigError(
                f"clip_lo must be below clip_hi, got ({self.clip_lo}, {self.clip_hi})"
            )
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "QuantConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "sq_bits": self.sq_bits,
            "sq_group": self.sq_group,
            "vq_index_bits": self.vq_index_bits,
            "vq_dim": self.vq_dim,
            "taylor_order": self.taylor_order,
            "tau_c": self.tau_c,
            "tau_f": self.tau_f,
            "sq_fraction": self.sq_fraction,
            "clip_lo": self.clip_lo,
            "clip_hi": self.clip_hi,
            "seed": self.seed,
        }


def _default_kind(shape: tuple[int, ...]) -> TensorKind:
    return TensorKind.MATMUL if len(shape) >= 2 else TensorKind.ELEMMUL


def load_bundle(path) -> ModelBundle:
    """Read a container file into a ModelBundle.

    All payloads come back as float32; tensor order follows the header.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    if len(blob) < 8:
        raise FormatError("file too short for header length field")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise FormatError("header length field exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")

    raw_meta = header.pop("__metadata__", {})
    if not isinstance(raw_meta, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in raw_meta.items()
    ):
        raise FormatError("__metadata__ must map strings to strings")

    buffer = blob[8 + header_len :]
    entries = []
    for name, info in header.items():
        if not isinstance(info, dict):
            raise FormatError(f"entry for {name!r} must be an object")
        try:
            dtype_tag = info["dtype"]
            shape = info["shape"]
            offsets = info["data_offsets"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"entry for {name!r} is missing {exc}") from exc
        if dtype_tag not in _DTYPES:
            raise FormatError(f"unsupported dtype {dtype_tag!r} for {name!r}")
        if (
            not isinstance(shape, list)
            or not shape
            or not all(isinstance(s, int) and s > 0 for s in shape)
        ):
            raise FormatError(f"shape for {name!r} must be positive integers, got {shape}")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
        ):
            raise FormatError(f"data_offsets for {name!r} must be [begin, end]")
        begin, end = offsets
        dtype = _DTYPES[dtype_tag]
        count = 1
        for s in shape:
            count *= s
        if not 0 <= begin <= end <= len(buffer):
            raise FormatError(f"data_offsets for {name!r} fall outside the buffer")
        if end - begin != count * dtype.itemsize:
            raise FormatError(f"data_offsets for {name!r} do not match shape")
        entries.append((name, dtype, tuple(shape), begin, end))

    spans = sorted((b, e, n) for n, _, _, b, e in entries)
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise FormatError(f"tensors {n0!r} and {n1!r} overlap in the buffer")

    kinds_meta: dict[str, str] = {}
    if "kinds" in raw_meta:
        try:
            kinds_meta = json.loads(raw_meta["kinds"])
        except json.JSONDecodeError as exc:
            raise FormatError(f"kinds metadata is not valid JSON: {exc}") from exc
        if not isinstance(kinds_meta, dict):
            raise FormatError("kinds metadata must be a JSON object")

    bundle = ModelBundle(metadata=dict(raw_meta))
    for name, dtype, shape, begin, end in entries:
        flat = np.frombuffer(buffer[begin:end], dtype=dtype)
        arr = flat.reshape(shape).astype(np.float32)
        if not np.isfinite(arr).all():
            raise DataError(f"tensor {name!r} carries non-finite values")
        if name in kinds_meta:
            try:
                kind = TensorKind(kinds_meta[name])
            except ValueError as exc:
                raise FormatError(f"unknown kind {kinds_meta[name]!r} for {name!r}") from exc
        else:
            kind = _default_kind(shape)
        bundle.add(WeightTensor(name, arr), kind)
    return bundle


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write a ModelBundle so load_bundle restores it bit-exactly."""
    bundle.validate()

    header: dict[str, object] = {}
    meta = dict(bundle.metadata)
    meta["kinds"] = json.dumps(
        {t.name: bundle.kinds[t.name].value for t in bundle.tensors}, sort_keys=True
    )
    header["__metadata__"] = meta

    chunks: list[bytes] = []
    cursor = 0
    for t in bundle.tensors:
        raw = np.ascontiguousarray(t.data, dtype=np.dtype("<f4")).tobytes()
        header[t.name] = {
            "dtype": "F32",
            "shape": list(t.shape),
            "data_offsets": [cursor, cursor + len(raw)],
        }
        chunks.append(raw)
        cursor += len(raw)

    payload = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
            for chunk in chunks:
                fh.write(chunk)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
