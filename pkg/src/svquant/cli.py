"""Batch front door: generate, inspect, plan, quantize, evaluate, report.

Every command reads and writes container or JSON files so runs can be
scripted and diffed. Reports are canonical JSON (sorted keys, two-space
indent, trailing newline); the CSV form is a flat projection of the
per-tensor rows. With identical inputs and seed, output files are
byte-identical regardless of --jobs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from fractions import Fraction

import numpy as np

from .errors import IoError, NumericalError, SvquantError, ValidationError
from .proxy import (
    Method,
    SQ_BPW_SETTING,
    VQ_BPW_SETTING,
    plan,
    score_tensor,
)
from .rwkv_sim import (
    apply_methods,
    capture_calibration,
    dequantize_artifact,
    evaluate_quantization,
    gen_model,
    gen_sequences,
)
from .squant import SQTensor
from .tensor_store import (
    ModelBundle,
    QuantConfig,
    TensorKind,
    WeightTensor,
    load_bundle,
    save_bundle,
)
from .vquant import ActivationSummary, Codebook, VQTensor, activation_summary, weighted_recon_loss

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

# offsets ensure synthesized calibration and held-out batches never collide
CALIB_SEED_OFFSET = 1
EVAL_SEED_OFFSET = 2


# ---------------------------------------------------------------------------
# config and serialization plumbing

def _effective_config(args) -> QuantConfig:
    """Defaults, overlaid by the config file, overlaid by flags."""
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError("config file must hold a JSON object")
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return QuantConfig.from_dict(raw)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _write_text(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc


def _emit(args, text: str) -> None:
    if getattr(args, "out", None):
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)


def _load_sequences(path: str) -> list[np.ndarray]:
    """Read a container of 2-D sequence tensors, ordered by numeric suffix."""
    bundle = load_bundle(path)

    def key(name: str):
        digits = "".join(ch for ch in name if ch.isdigit())
        return (int(digits) if digits else 0, name)

    seqs = []
    for name in sorted(bundle.names(), key=key):
        arr = bundle.tensor(name).data
        if arr.ndim != 2:
            raise ValidationError(f"sequence tensor {name!r} must be 2-D")
        seqs.append(arr.astype(np.float64))
    if not seqs:
        raise ValidationError(f"{path} holds no sequences")
    return seqs


def _model_dim(bundle: ModelBundle) -> int:
    if "dim" in bundle.metadata:
        return int(bundle.metadata["dim"])
    for t in bundle:
        if t.data.ndim == 2:
            return t.shape[1]
    raise ValidationError("cannot infer model width; no 2-D tensor present")


def _gather_sequences(args, bundle: ModelBundle, config: QuantConfig, which: str, seed_offset: int):
    """Sequences from a container file, or synthesized from count/steps flags."""
    path = getattr(args, which, None)
    count = getattr(args, f"{which}_count", 0)
    if path:
        return _load_sequences(path)
    if count:
        steps = getattr(args, f"{which}_steps")
        return gen_sequences(count, steps, _model_dim(bundle), config.seed + seed_offset)
    return None


# ---------------------------------------------------------------------------
# quantized container layout

def _quantized_container(
    bundle: ModelBundle,
    artifacts: dict[str, SQTensor | VQTensor],
    summaries: dict[str, ActivationSummary],
) -> ModelBundle:
    """Pack artifacts as auxiliary tensors next to the untouched weights."""
    out = ModelBundle(metadata=dict(bundle.metadata))
    qmeta: dict[str, dict] = {}
    for t in bundle:
        kind = bundle.kind(t.name)
        art = artifacts.get(t.name)
        if art is None:
            out.add(WeightTensor(t.name, t.data.copy()), kind)
            continue
        if isinstance(art, SQTensor):
            qmeta[t.name] = {
                "method": "sq",
                "bits": art.bits,
                "group": art.group,
                "shape": list(art.shape),
                "kind": kind.value,
            }
            out.add(WeightTensor(f"{t.name}.codes", art.codes), kind)
            out.add(WeightTensor(f"{t.name}.scales", art.scales), kind)
            out.add(WeightTensor(f"{t.name}.zeros", art.zeros), kind)
            out.add(WeightTensor(f"{t.name}.offsets", art.offsets), kind)
        else:
            entry = {
                "method": "vq",
                "k": art.codebook.k,
                "d": art.codebook.d,
                "pad": art.pad,
                "shape": list(art.shape),
                "kind": kind.value,
            }
            out.add(WeightTensor(f"{t.name}.indices", art.indices), kind)
            out.add(WeightTensor(f"{t.name}.codebook", art.codebook.entries), kind)
            summ = summaries.get(t.name)
            if summ is not None:
                entry["clip_lo"] = summ.clip_lo
                entry["clip_hi"] = summ.clip_hi
                entry["samples"] = summ.count
                out.add(WeightTensor(f"{t.name}.actweights", summ.weights), kind)
            qmeta[t.name] = entry
    out.metadata["quantized"] = json.dumps(qmeta, sort_keys=True)
    return out


def _unpack_container(
    path: str,
) -> tuple[ModelBundle, dict[str, SQTensor | VQTensor], dict[str, ActivationSummary]]:
    """Rebuild artifacts from a quantized container; plain bundles pass through."""
    raw = load_bundle(path)
    qmeta = json.loads(raw.metadata.get("quantized", "{}"))
    if not qmeta:
        return raw, {}, {}

    artifacts: dict[str, SQTensor | VQTensor] = {}
    summaries: dict[str, ActivationSummary] = {}
    deq = ModelBundle(metadata=dict(raw.metadata))
    aux = {t.name: t.data for t in raw}
    consumed: set[str] = set()

    for name, entry in sorted(qmeta.items()):
        kind = TensorKind(entry["kind"])
        shape = tuple(entry["shape"])
        if entry["method"] == "sq":
            parts = {s: aux.get(f"{name}.{s}") for s in ("codes", "scales", "zeros", "offsets")}
            if any(v is None for v in parts.values()):
                raise ValidationError(f"quantized tensor {name!r} is missing parts")
            art: SQTensor | VQTensor = SQTensor(
                name,
                parts["codes"].astype(np.uint8),
                parts["scales"].astype(np.float64),
                parts["zeros"].astype(np.float64),
                parts["offsets"].astype(np.float64),
                entry["bits"],
                entry["group"],
                shape,
            )
            consumed.update(f"{name}.{s}" for s in ("codes", "scales", "zeros", "offsets"))
        else:
            idx = aux.get(f"{name}.indices")
            book = aux.get(f"{name}.codebook")
            if idx is None or book is None:
                raise ValidationError(f"quantized tensor {name!r} is missing parts")
            cb = Codebook(book.astype(np.float64), entry["k"], entry["d"])
            art = VQTensor(name, idx.astype(np.int64).ravel(), cb, shape, entry["pad"])
            consumed.update((f"{name}.indices", f"{name}.codebook"))
            weights = aux.get(f"{name}.actweights")
            if weights is not None:
                summaries[name] = ActivationSummary(
                    weights.astype(np.float64),
                    entry["clip_lo"],
                    entry["clip_hi"],
                    entry["samples"],
                )
                consumed.add(f"{name}.actweights")
        artifacts[name] = art

    for t in raw:
        if t.name in consumed:
            continue
        deq.add(WeightTensor(t.name, t.data.copy()), raw.kind(t.name))
    for name in sorted(artifacts):
        deq.add(dequantize_artifact(artifacts[name]), TensorKind(qmeta[name]["kind"]))
    return deq, artifacts, summaries


# ---------------------------------------------------------------------------
# method assignment

def _planned_methods(args, bundle: ModelBundle, config: QuantConfig) -> dict[str, Method]:
    force = getattr(args, "force_method", "hybrid")
    if getattr(args, "plan", None):
        doc = _read_json(args.plan)
        entries = doc.get("entries") if isinstance(doc, dict) else None
        if not isinstance(entries, list):
            raise ValidationError("plan file must hold an object with an 'entries' list")
        have = set(bundle.names())
        methods: dict[str, Method] = {}
        for e in entries:
            name = e.get("name")
            if name not in have:
                raise ValidationError(f"plan names unknown tensor {name!r}")
            try:
                methods[name] = Method(e["method"])
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"bad plan entry for {name!r}: {exc}") from exc
    else:
        methods = {e.name: e.method for e in plan(bundle, config).entries}
    if force == "sq":
        methods = {n: Method.SQ for n in methods}
    elif force == "vq":
        methods = {n: Method.VQ for n in methods}
    return methods


def _plan_document(p, config: QuantConfig) -> dict:
    return {
        "entries": [
            {
                "name": e.name,
                "pc": float(e.pc),
                "pf": float(e.pf),
                "method": e.method.value,
                "bpw": float(e.predicted_bpw),
            }
            for e in p.entries
        ],
        "tau_c": float(p.tau_c),
        "tau_f": float(p.tau_f),
        "sq_fraction": float(p.sq_fraction) if p.entries else 0.0,
        "avg_bpw": float(p.avg_bpw),
        "config": config.to_dict(),
    }


# ---------------------------------------------------------------------------
# commands

def cmd_gen_model(args) -> int:
    config = _effective_config(args)
    bundle = gen_model(args.blocks, args.dim, config.seed, args.profile)
    save_bundle(bundle, args.out)
    print(f"wrote {args.out}: {len(bundle)} tensors, profile {args.profile}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    config = _effective_config(args)
    bundle = load_bundle(args.model)
    p = plan(bundle, config)
    rows = [
        {
            "name": e.name,
            "kind": bundle.kind(e.name).value,
            "pc": float(e.pc),
            "pf": float(e.pf),
            "method": e.method.value,
        }
        for e in sorted(p.entries, key=lambda e: e.name)
    ]
    report = {
        "config": config.to_dict(),
        "rows": rows,
        "tau_c": float(p.tau_c),
        "tau_f": float(p.tau_f),
    }
    _emit(args, _canonical(report))
    return EXIT_OK


def cmd_plan(args) -> int:
    config = _effective_config(args)
    bundle = load_bundle(args.model)
    p = plan(bundle, config)
    doc = _plan_document(p, config)
    force = args.force_method
    if force in ("sq", "vq"):
        bpw = SQ_BPW_SETTING if force == "sq" else VQ_BPW_SETTING
        sizes = {e.name: e.size for e in p.entries}
        weighted = Fraction(0)
        count = 0
        for e in doc["entries"]:
            e["method"] = force
            e["bpw"] = float(bpw)
            weighted += bpw * sizes[e["name"]]
            count += sizes[e["name"]]
        doc["avg_bpw"] = float(weighted / count) if count else 0.0
        doc["sq_fraction"] = 1.0 if force == "sq" else 0.0
    _emit(args, _canonical(doc))
    return EXIT_OK


def cmd_quantize(args) -> int:
    config = _effective_config(args)
    bundle = load_bundle(args.model)
    methods = _planned_methods(args, bundle, config)

    calib_seqs = _gather_sequences(args, bundle, config, "calib", CALIB_SEED_OFFSET)
    capture = capture_calibration(bundle, calib_seqs) if calib_seqs is not None else None

    deq, artifacts, fallbacks = apply_methods(
        bundle, methods, config, capture, use_rtn=args.rtn, jobs=args.jobs
    )
    if fallbacks:
        print(
            "warning: no calibration for "
            + ", ".join(fallbacks)
            + "; used uncompensated paths",
            file=sys.stderr,
        )

    summaries: dict[str, ActivationSummary] = {}
    if capture is not None:
        for name, method in methods.items():
            if method is Method.VQ and bundle.kind(name) is TensorKind.ELEMMUL:
                samples = capture.elemmul.get(name)
                if samples is not None:
                    summaries[name] = activation_summary(
                        samples, config.clip_lo, config.clip_hi
                    )

    container = _quantized_container(bundle, artifacts, summaries)
    save_bundle(container, args.out)
    n_sq = sum(1 for m in methods.values() if m is Method.SQ)
    print(f"wrote {args.out}: {n_sq} sq + {len(methods) - n_sq} vq tensors")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    config = _effective_config(args)
    bundle = load_bundle(args.model)
    deq, artifacts, summaries = _unpack_container(args.quantized)

    seqs = _gather_sequences(args, bundle, config, "seqs", EVAL_SEED_OFFSET)
    if seqs is None:
        raise ValidationError("eval needs --seqs or --seqs-count/--seqs-steps")

    ev = evaluate_quantization(bundle, deq, seqs)
    rows = []
    weighted_bits = Fraction(0)
    total_size = 0
    n_sq = 0
    for name in sorted(artifacts):
        art = artifacts[name]
        orig = bundle.tensor(name)
        scores = score_tensor(orig, config.taylor_order)
        method = Method.SQ if isinstance(art, SQTensor) else Method.VQ
        bpw = SQ_BPW_SETTING if method is Method.SQ else VQ_BPW_SETTING
        size = int(np.prod(orig.shape))
        weighted_bits += bpw * size
        total_size += size
        n_sq += method is Method.SQ
        wloss = None
        if name in summaries:
            wloss = float(weighted_recon_loss(orig, summaries[name], art))
        rows.append(
            {
                "name": name,
                "kind": deq.kind(name).value,
                "method": method.value,
                "pc": float(scores.pc),
                "pf": float(scores.pf),
                "bpw": float(bpw),
                "mse": float(ev.per_tensor[name]),
                "weighted_loss": wloss,
            }
        )
    aggregate = {
        "avg_bpw": float(weighted_bits / total_size) if total_size else 0.0,
        "sq_fraction": (n_sq / len(rows)) if rows else 0.0,
        "end_to_end_mse": float(ev.end_to_end),
    }
    report = {"config": config.to_dict(), "rows": rows, "aggregate": aggregate}
    if not args.no_timestamp:
        aggregate["wall_time"] = time.perf_counter() - started
        report["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    _emit(args, _canonical(report))
    if args.csv:
        _write_text(args.csv, _csv_projection(report))
    return EXIT_OK


_CSV_COLUMNS = ["name", "kind", "method", "pc", "pf", "bpw", "mse", "weighted_loss"]


def _csv_projection(report: dict) -> str:
    rows = report.get("rows")
    if not isinstance(rows, list):
        raise ValidationError("report holds no 'rows' list to project")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_COLUMNS)
    for row in rows:
        writer.writerow(["" if row.get(c) is None else row.get(c, "") for c in _CSV_COLUMNS])
    return buf.getvalue()


def cmd_report(args) -> int:
    report = _read_json(args.report)
    _write_text(args.csv, _csv_projection(report))
    print(f"wrote {args.csv}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring

def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON file with QuantConfig keys")
    shared.add_argument("--seed", type=int, help="override the config seed")
    shared.add_argument("--jobs", type=int, default=1, help="tensor-level parallelism")
    shared.add_argument(
        "--force-method",
        choices=("sq", "vq", "hybrid"),
        default="hybrid",
        help="override proxy selection for every tensor",
    )
    shared.add_argument(
        "--no-timestamp",
        action="store_true",
        help="omit timestamp and wall time so reports diff byte-for-byte",
    )

    parser = argparse.ArgumentParser(
        prog="svquant",
        description="Hybrid scalar/vector post-training weight quantization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", parents=[shared], help="synthesize a model container")
    p.add_argument("--out", required=True)
    p.add_argument("--blocks", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument(
        "--profile",
        choices=("uniform", "clustered", "outlier", "mixed"),
        default="uniform",
    )
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("inspect", parents=[shared], help="score tensors and show methods")
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("plan", parents=[shared], help="write a method-assignment plan")
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="plan path (stdout when omitted)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("quantize", parents=[shared], help="quantize per plan or proxies")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="quantized container path")
    p.add_argument("--plan", help="plan JSON from the plan command")
    p.add_argument("--calib", help="container of 2-D calibration sequences")
    p.add_argument("--calib-count", type=int, default=0, help="synthesize this many sequences")
    p.add_argument("--calib-steps", type=int, default=32)
    p.add_argument("--rtn", action="store_true", help="skip second-order compensation")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", parents=[shared], help="compare model and quantized outputs")
    p.add_argument("--model", required=True)
    p.add_argument("--quantized", required=True)
    p.add_argument("--seqs", help="container of 2-D held-out sequences")
    p.add_argument("--seqs-count", type=int, default=0, help="synthesize this many sequences")
    p.add_argument("--seqs-steps", type=int, default=32)
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.add_argument("--csv", help="also write the CSV projection here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[shared], help="project a JSON report to CSV")
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--csv", required=True, help="CSV output path")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SvquantError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
