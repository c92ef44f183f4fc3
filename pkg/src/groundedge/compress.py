"""Global magnitude pruning, affine integer quantization and size accounting."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .nn import (NetworkModel, PARAM_NAMES, WEIGHT_NAMES, WindowDataset, model_from_dict,
                 model_to_dict, train)

FORMAT = "groundedge.compact"
FORMAT_VERSION = 1
FLOAT_BITS = 32
REFERENCE_SIZES = (141_837, 14_375)


@dataclass(frozen=True)
class PruneSchedule:
    """Polynomial sparsity ramp from ``s_i`` at step 0 to ``s_f`` at ``t_e``."""

    s_i: float = 0.0
    s_f: float = 0.9
    t_e: int = 1000
    p_exp: float = 3.0

    def __post_init__(self):
        if not 0 <= self.s_i <= self.s_f < 1:
            raise ValueError("need 0 <= s_i <= s_f < 1")
        if self.t_e < 1 or self.p_exp <= 0:
            raise ValueError("need t_e >= 1 and p_exp > 0")


def sparsity_at(schedule: PruneSchedule, t_i: float) -> float:
    """``s_f + (s_i - s_f) * (1 - t_i / t_e) ** p``, clamped to ``s_f`` past ``t_e``."""
    if t_i < 0:
        raise ValueError("step must be >= 0")
    frac = min(t_i / schedule.t_e, 1.0)
    return schedule.s_f + (schedule.s_i - schedule.s_f) * (1.0 - frac) ** schedule.p_exp


@dataclass(frozen=True)
class QuantParams:
    """Affine map ``r = S * (q - Z)`` for ``b``-bit unsigned integers.

    For a constant tensor ``S`` is 1 and ``Z = round(-min)``; every ``q`` is
    then 0, and ``Z`` may fall outside ``[0, 2**b - 1]``.
    """

    scale: float
    zero_point: int
    bits: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.bits not in (4, 8, 16):
            raise ValueError("bits must be 4, 8 or 16")

    @property
    def q_max(self) -> int:
        return 2 ** self.bits - 1


def quantize(tensor, bits: int = 8) -> tuple[np.ndarray, QuantParams]:
    """Per-tensor affine quantization with ``q`` clamped to ``[0, 2**b - 1]``."""
    r = np.asarray(tensor, dtype=float)
    if bits not in (4, 8, 16):
        raise ValueError("bits must be 4, 8 or 16")
    if r.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    q_max = 2 ** bits - 1
    r_min, r_max = float(r.min()), float(r.max())
    if r_max == r_min:
        qp = QuantParams(1.0, int(np.round(-r_min)), bits)
    else:
        scale = (r_max - r_min) / q_max
        qp = QuantParams(scale, int(np.round(-r_min / scale)), bits)
    q = np.clip(np.round(r / qp.scale) + qp.zero_point, 0, q_max)
    return q.astype(np.int64), qp


def dequantize(q, qp: QuantParams) -> np.ndarray:
    return qp.scale * (np.asarray(q, dtype=float) - qp.zero_point)


def compression_ratio(s_f: float, bits: float) -> float:
    """Idealised ratio ``32 / ((1 - s_f) * b)``."""
    if not 0 <= s_f < 1 or bits <= 0:
        raise ValueError("need 0 <= s_f < 1 and bits > 0")
    return FLOAT_BITS / ((1.0 - s_f) * bits)


@dataclass
class CompactModel:
    """Pruned (and optionally quantized) network.

    ``base`` holds the pruned float weights; ``masks`` mark surviving
    weights of each weight tensor. After :func:`quantize_model`, ``q`` and
    ``quant`` hold integer tensors and their parameters for every tensor.
    """

    base: NetworkModel
    masks: dict[str, np.ndarray]
    target_sparsity: float = 0.0
    threshold: float = 0.0
    q: dict[str, np.ndarray] = field(default_factory=dict)
    quant: dict[str, QuantParams] = field(default_factory=dict)

    @property
    def quantized(self) -> bool:
        return bool(self.q)

    @property
    def n_weights(self) -> int:
        return sum(self.masks[k].size for k in WEIGHT_NAMES)

    @property
    def n_zero(self) -> int:
        return sum(int(np.sum(self.base.params[k] == 0)) for k in WEIGHT_NAMES)

    @property
    def sparsity(self) -> float:
        return self.n_zero / self.n_weights

    def to_model(self) -> NetworkModel:
        """Float model used for inference (dequantized when quantized)."""
        model = self.base.copy()
        if self.quantized:
            for k in PARAM_NAMES:
                model.params[k] = dequantize(self.q[k], self.quant[k])
        for k, m in self.masks.items():
            model.params[k] = np.where(m, model.params[k], 0.0)
        return model


def global_threshold(model: NetworkModel, target: float) -> float:
    """Magnitude at the ``target`` quantile of all weights sorted ascending."""
    if not 0 <= target < 1:
        raise ValueError("target sparsity must lie in [0, 1)")
    mags = np.sort(np.concatenate([np.abs(model.params[k]).ravel() for k in WEIGHT_NAMES]))
    return float(mags[int(np.floor(target * len(mags)))])


def _apply_threshold(params: dict, theta: float) -> dict[str, np.ndarray]:
    masks = {}
    for k in WEIGHT_NAMES:
        masks[k] = np.abs(params[k]) >= theta
        params[k][~masks[k]] = 0.0
    return masks


def prune(model: NetworkModel | CompactModel, target_sparsity: float) -> CompactModel:
    """Zero every weight whose magnitude is below the global threshold.

    Biases are left untouched. Pruning an already pruned model at the same
    target changes nothing.
    """
    if isinstance(model, CompactModel):
        model = model.to_model()
    theta = global_threshold(model, target_sparsity)
    base = model.copy()
    masks = _apply_threshold(base.params, theta)
    return CompactModel(base, masks, target_sparsity, theta)


def quantize_model(compact: CompactModel, bits: int = 8) -> CompactModel:
    """Quantize every tensor; masked weights stay exactly zero."""
    q, quant = {}, {}
    for k in PARAM_NAMES:
        q[k], quant[k] = quantize(compact.base.params[k], bits)
    return CompactModel(compact.base.copy(), {k: v.copy() for k, v in compact.masks.items()},
                        compact.target_sparsity, compact.threshold, q, quant)


def compress(model: NetworkModel, sparsity: float = 0.9, bits: int = 8) -> CompactModel:
    return quantize_model(prune(model, sparsity), bits)


def dequantization_errors(compact: CompactModel) -> dict[str, tuple[float, float]]:
    """Per tensor: max abs error of the dequantized weights and ``S / 2``."""
    out = {}
    for k in PARAM_NAMES:
        err = np.abs(dequantize(compact.q[k], compact.quant[k]) - compact.base.params[k])
        out[k] = (float(err.max()), compact.quant[k].scale / 2)
    return out


def prune_during_training(model: NetworkModel, dataset: WindowDataset, schedule: PruneSchedule,
                          epochs: int, batch_size: int = 32, lr: float = 0.01, seed: int = 0,
                          frequency: int = 50) -> tuple[CompactModel, dict]:
    """Fine-tune while raising sparsity along ``schedule``.

    Every ``frequency`` steps the global threshold for the scheduled
    sparsity is recomputed and weights under it are zeroed; in between,
    already pruned weights are held at zero.
    """
    state = {"masks": None}

    def hook(step, params):
        if step % frequency == 0 or step >= schedule.t_e:
            probe = NetworkModel(params)
            theta = global_threshold(probe, sparsity_at(schedule, step))
            state["masks"] = _apply_threshold(params, theta)
        elif state["masks"] is not None:
            for k, m in state["masks"].items():
                params[k][~m] = 0.0

    tuned, history = train(model, dataset, epochs=epochs, batch_size=batch_size, lr=lr, seed=seed,
                           step_hook=hook, fit_scaling=False)
    return prune(tuned, schedule.s_f), history


def size_report(compact: CompactModel) -> dict:
    """Byte accounting of the float model against sparse integer storage.

    Sparse storage keeps ``b`` bits per surviving weight, a one-bit mask per
    weight, ``b`` bits per bias and a float scale plus int zero point per
    tensor.
    """
    params = compact.base.params
    n_params = sum(v.size for v in params.values())
    bits = next(iter(compact.quant.values())).bits if compact.quantized else FLOAT_BITS
    n_nonzero = compact.n_weights - compact.n_zero
    n_bias = n_params - compact.n_weights
    compact_bits = (n_nonzero * bits + compact.n_weights + n_bias * bits
                    + len(PARAM_NAMES) * 2 * FLOAT_BITS)
    float_bytes = n_params * FLOAT_BITS // 8
    compact_bytes = int(np.ceil(compact_bits / 8))
    return {
        "n_params": int(n_params),
        "n_weights": int(compact.n_weights),
        "n_nonzero_weights": int(n_nonzero),
        "sparsity": compact.sparsity,
        "bits": bits,
        "float_bytes": int(float_bytes),
        "compact_bytes": compact_bytes,
        "realized_ratio": float_bytes / compact_bytes,
        "formula_ratio": compression_ratio(compact.target_sparsity, bits),
        "reference_ratio": REFERENCE_SIZES[0] / REFERENCE_SIZES[1],
    }


def _b64(a: np.ndarray, dtype) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype=dtype).tobytes()).decode("ascii")


def compact_to_dict(compact: CompactModel) -> dict:
    tensors = {}
    for k in PARAM_NAMES:
        entry = {"shape": list(compact.base.params[k].shape)}
        if compact.quantized:
            qp = compact.quant[k]
            dtype = "<u2" if qp.bits == 16 else "u1"
            entry.update(bits=qp.bits, scale=qp.scale, zero_point=qp.zero_point,
                         dtype=dtype, q=_b64(compact.q[k], dtype))
        if k in compact.masks:
            entry["mask"] = base64.b64encode(np.packbits(compact.masks[k].ravel())).decode("ascii")
        tensors[k] = entry
    return {"format": FORMAT, "version": FORMAT_VERSION, "target_sparsity": compact.target_sparsity,
            "threshold": compact.threshold, "model": model_to_dict(compact.base), "tensors": tensors}


def compact_from_dict(d: dict) -> CompactModel:
    if d.get("format") != FORMAT or d.get("version") != FORMAT_VERSION:
        raise ValueError("not a compact model file of a supported version")
    base = model_from_dict(d["model"])
    masks, q, quant = {}, {}, {}
    for k, entry in d["tensors"].items():
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        if "mask" in entry:
            bits = np.unpackbits(np.frombuffer(base64.b64decode(entry["mask"]), np.uint8))
            masks[k] = bits[:size].astype(bool).reshape(shape)
        if "q" in entry:
            raw = np.frombuffer(base64.b64decode(entry["q"]), np.dtype(entry["dtype"]))
            q[k] = raw.astype(np.int64).reshape(shape)
            quant[k] = QuantParams(entry["scale"], entry["zero_point"], entry["bits"])
    return CompactModel(base, masks, d["target_sparsity"], d["threshold"], q, quant)


def save_compact(compact: CompactModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(compact_to_dict(compact), fh)


def load_compact(path) -> CompactModel:
    with open(path, encoding="utf-8") as fh:
        return compact_from_dict(json.load(fh))
