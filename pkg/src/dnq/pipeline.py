"""The train -> search -> quantize -> eval workflow over files.

Every stage reads its inputs from disk (config, checkpoints, sequence files)
so the quantizer can run on a hand-written sequence without a search.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Optional

from . import __version__, codec, controller, net, quantizer
from .config import config_hash, path_of

log = logging.getLogger(__name__)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def dataset(cfg: dict) -> net.SyntheticData:
    d = cfg["data"]
    return net.make_synthetic_dataset(
        cfg["seed"], d["num_classes"], d["n_train"], d["n_eval"], tuple(d["shape"]), d["noise"]
    )


def _record_stage(cfg: dict, stage: str, inputs: list, outputs: list, seconds: float) -> None:
    path = path_of(cfg, "manifest")
    doc = json.loads(path.read_text()) if path.exists() else {}
    if doc.get("config_hash") not in (None, config_hash(cfg)):
        doc = {}
    doc["config_hash"] = config_hash(cfg)
    doc["tool_version"] = __version__
    doc.setdefault("stages", {})[stage] = {
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "wall_clock_s": round(seconds, 3),
    }
    _write_json(path, doc)


def _workdir(cfg: dict) -> Path:
    w = Path(cfg["paths"]["workdir"])
    w.mkdir(parents=True, exist_ok=True)
    return w


def cmd_train(cfg: dict) -> dict:
    t0 = time.perf_counter()
    _workdir(cfg)
    data = dataset(cfg)
    model = net.build_model(cfg["data"]["shape"], cfg["model"]["layers"], cfg["seed"])
    tc = cfg["train"]
    tlog = net.train(model, data.train, tc["steps"], tc["lr"], tc["batch_size"], seed=cfg["seed"] + 1)
    ckpt = path_of(cfg, "checkpoint")
    net.save_checkpoint(model, ckpt)
    report = {
        "final_batch_loss": tlog.losses[-1] if tlog.losses else None,
        "train_accuracy": net.accuracy(model, data.train),
        "eval_accuracy": net.accuracy(model, data.eval),
        "eval_loss": net.mean_loss(model, data.eval),
    }
    _write_json(path_of(cfg, "train_report"), report)
    _record_stage(cfg, "train", [], [ckpt, path_of(cfg, "train_report")], time.perf_counter() - t0)
    return report


def controller_config(cfg: dict) -> controller.ControllerConfig:
    c = cfg["controller"]
    return controller.ControllerConfig(
        iterations=c["iterations"],
        batch_size=c["batch_size"],
        lr=c["lr"],
        lam=c["lam"],
        mc_samples=c["mc_samples"],
        hidden=c["hidden"],
        cell=c["cell"],
        fixed_bits=c["fixed_bits"],
        eval_samples=c["eval_samples"],
        baseline=c["baseline"],
        seed=cfg["seed"],
    )


def cmd_search(cfg: dict, checkpoint: Optional[str] = None) -> controller.SearchResult:
    t0 = time.perf_counter()
    _workdir(cfg)
    ckpt = Path(checkpoint) if checkpoint else path_of(cfg, "checkpoint")
    model = net.load_checkpoint(ckpt)
    data = dataset(cfg)
    seq_path, log_path = path_of(cfg, "sequence"), path_of(cfg, "search_log")
    result = controller.train_controller(model, data.eval, controller_config(cfg), log_path=log_path)
    controller.write_sequence(seq_path, result, cfg["controller"]["lam"])
    _record_stage(cfg, "search", [ckpt], [seq_path, log_path], time.perf_counter() - t0)
    return result


def uniform_bitwidths(model: net.NetworkModel, bits: int) -> list[int]:
    return [bits] * len(model.quantizable_indices())


def quantizer_config(cfg: dict, metrics_path=None) -> quantizer.QuantizerConfig:
    q = cfg["quantizer"]
    return quantizer.QuantizerConfig(
        num_distance_clusters=q["num_distance_clusters"],
        retrain_steps=q["retrain_steps"],
        lr=q["lr"],
        batch_size=q["batch_size"],
        low_bit_threshold=q["low_bit_threshold"],
        recompute_distance_clusters=q.get("recompute_distance_clusters", True),
        seed=cfg["seed"],
        metrics_path=str(metrics_path) if metrics_path else None,
    )


def cmd_quantize(
    cfg: dict,
    checkpoint: Optional[str] = None,
    sequence: Optional[str] = None,
    uniform_bits: Optional[int] = None,
) -> dict:
    """Quantize a float checkpoint and pack it.

    Bit-widths come from a sequence file (the search output) or, in
    module-2-only mode, ``uniform_bits`` for every quantizable layer.
    """
    t0 = time.perf_counter()
    _workdir(cfg)
    ckpt = Path(checkpoint) if checkpoint else path_of(cfg, "checkpoint")
    model = net.load_checkpoint(ckpt)
    inputs = [ckpt]
    if uniform_bits is not None:
        bitwidths = uniform_bitwidths(model, uniform_bits)
    else:
        seq_path = Path(sequence) if sequence else path_of(cfg, "sequence")
        bitwidths = [int(b) for b in controller.read_sequence(seq_path)["bitwidths"]]
        inputs.append(seq_path)
    data = dataset(cfg)
    metrics_path = path_of(cfg, "metrics")
    result = quantizer.quantize_network(model, bitwidths, data.train, data.eval, quantizer_config(cfg, metrics_path))
    packed = codec.pack(result.model, bitwidths, {i: s.codebook.centroids for i, s in result.states.items()})
    packed_path, qckpt = path_of(cfg, "packed"), path_of(cfg, "quantized_checkpoint")
    packed_path.write_bytes(packed)
    net.save_checkpoint(result.model, qckpt)
    ratio = codec.compression_ratio(codec.CompressionSpec.for_model(model, bitwidths))
    acc = net.accuracy(result.model, data.eval)
    lam = cfg["controller"]["lam"]
    report = {
        "bitwidths": bitwidths,
        "mode": "uniform" if uniform_bits is not None else "sequence",
        "eval_accuracy": acc,
        "float_eval_accuracy": net.accuracy(model, data.eval),
        "compression_ratio": ratio,
        "measured_ratio": codec.measured_ratio(packed),
        "lambda": lam,
        "reward": acc + lam * ratio,
        "iterations": len(result.metrics),
        "packed_bytes": len(packed),
    }
    report_path = path_of(cfg, "quantize_report")
    _write_json(report_path, report)
    _record_stage(
        cfg, "quantize", inputs, [packed_path, qckpt, metrics_path, report_path], time.perf_counter() - t0
    )
    return report


def bit_summary(bits) -> str:
    return "-".join(str(b) for b in bits)


def cmd_eval(cfg: dict, packed: Optional[str] = None) -> dict:
    path = Path(packed) if packed else path_of(cfg, "packed")
    buf = path.read_bytes()
    model, bits, _ = codec.unpack(buf)
    data = dataset(cfg)
    return {
        "bitwidths": bit_summary(bits),
        "eval_accuracy": net.accuracy(model, data.eval),
        "compression_ratio": codec.compression_ratio(codec.CompressionSpec.for_model(model, bits)),
        "measured_ratio": codec.measured_ratio(buf),
    }


def cmd_export(packed: str, out: Optional[str] = None) -> codec.PackedLayout:
    """Decode a packed model; optionally write it back out as a float checkpoint."""
    buf = Path(packed).read_bytes()
    model, _, _ = codec.unpack(buf)
    if out:
        net.save_checkpoint(model, out)
    return codec.layout(buf)
