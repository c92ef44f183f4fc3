"""Tiny convolutional edge-state classifier written directly in numpy.

Architecture (input window ``(100, 3)`` viewed as a one-channel image)::

    conv 16 x (3, 1), ReLU -> max-pool (2, 1)
    conv 32 x (3, 1), ReLU -> max-pool (2, 1)
    flatten -> dense 16, ReLU -> dense 2, softmax

Kernels use the ``(kh, kw, c_in, c_out)`` layout and flattening is row-major
over ``(height, width, channel)``. The training loss is binary
cross-entropy on the class-1 probability plus ``lam`` times the
disturbance-force term, which pulls the prediction towards 1 where the
measured disturbance clears its CFAR threshold and towards 0 elsewhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .physics import DisturbanceSeries, gate_detections
from .spectral import FusedFeatureSeries

FORMAT = "groundedge.model"
FORMAT_VERSION = 1
EPS = 1e-7
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
               "dense1_w", "dense1_b", "dense2_w", "dense2_b")
WEIGHT_NAMES = ("conv1_w", "conv2_w", "dense1_w", "dense2_w")


class TrainingFault(RuntimeError):
    pass


def layer_specs(window: int = 100, channels: int = 3) -> list[dict]:
    h1 = (window - 2) // 2
    h2 = (h1 - 2) // 2
    return [
        {"type": "reshape", "target": [window, channels, 1]},
        {"type": "conv2d", "filters": 16, "kernel": [3, 1], "activation": "relu"},
        {"type": "maxpool2d", "pool": [2, 1]},
        {"type": "conv2d", "filters": 32, "kernel": [3, 1], "activation": "relu"},
        {"type": "maxpool2d", "pool": [2, 1]},
        {"type": "flatten", "units": h2 * channels * 32},
        {"type": "dense", "units": 16, "activation": "relu"},
        {"type": "dense", "units": 2, "activation": "softmax"},
    ]


def param_shapes(window: int = 100, channels: int = 3) -> dict[str, tuple[int, ...]]:
    flat = layer_specs(window, channels)[5]["units"]
    return {
        "conv1_w": (3, 1, 1, 16), "conv1_b": (16,),
        "conv2_w": (3, 1, 16, 32), "conv2_b": (32,),
        "dense1_w": (flat, 16), "dense1_b": (16,),
        "dense2_w": (16, 2), "dense2_b": (2,),
    }


@dataclass
class NetworkModel:
    """Weights plus the input scaling applied before the first layer.

    Inputs are optionally passed through ``log1p`` and then standardised
    per channel with ``input_mean`` / ``input_std``.
    """

    params: dict[str, np.ndarray]
    lam: float = 0.5
    window: int = 100
    channels: int = 3
    log_input: bool = True
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(3))
    meta: dict = field(default_factory=dict)

    def copy(self) -> "NetworkModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()},
                       input_mean=self.input_mean.copy(), input_std=self.input_std.copy(),
                       meta=dict(self.meta))

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def preprocess(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.log_input:
            x = np.log1p(np.maximum(x, 0.0))
        return (x - self.input_mean) / self.input_std

    def fit_input_scaling(self, x: np.ndarray) -> None:
        """Set the per-channel standardisation from raw windows ``(B, W, C)``."""
        z = np.log1p(np.maximum(x, 0.0)) if self.log_input else np.asarray(x, dtype=float)
        flat = z.reshape(-1, z.shape[-1])
        self.input_mean = flat.mean(axis=0)
        sd = flat.std(axis=0)
        self.input_std = np.where(sd > 0, sd, 1.0)


def init_model(seed: int = 0, lam: float = 0.5, window: int = 100, channels: int = 3,
               log_input: bool = True) -> NetworkModel:
    """He-uniform weights (limit ``sqrt(6 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(window, channels).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            lim = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-lim, lim, size=shape)
    return NetworkModel(params, lam=lam, window=window, channels=channels, log_input=log_input,
                        input_mean=np.zeros(channels), input_std=np.ones(channels))


# -- layers -----------------------------------------------------------------

def _conv(x, w, b):
    """Valid (3, 1) convolution along axis 1 of ``x`` shaped (B, H, W, C)."""
    kh, _, c_in, c_out = w.shape
    h_out = x.shape[1] - kh + 1
    patches = np.concatenate([x[:, i:i + h_out] for i in range(kh)], axis=-1)
    return patches @ w.reshape(kh * c_in, c_out) + b, patches


def _conv_back(d_out, patches, w, x_shape):
    kh, _, c_in, c_out = w.shape
    h_out = d_out.shape[1]
    dw = np.tensordot(patches, d_out, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
    db = d_out.sum(axis=(0, 1, 2))
    d_patches = d_out @ w.reshape(kh * c_in, c_out).T
    dx = np.zeros(x_shape)
    for i in range(kh):
        dx[:, i:i + h_out] += d_patches[..., i * c_in:(i + 1) * c_in]
    return dx, dw, db


def _pool(x):
    b, h, w, c = x.shape
    p = h // 2
    pairs = x[:, :2 * p].reshape(b, p, 2, w, c)
    first = pairs[:, :, 0] >= pairs[:, :, 1]
    return np.where(first, pairs[:, :, 0], pairs[:, :, 1]), first


def _pool_back(d_out, first, x_shape):
    b, p, w, c = d_out.shape
    dx = np.zeros(x_shape)
    dx[:, 0:2 * p:2] = np.where(first, d_out, 0.0)
    dx[:, 1:2 * p:2] = np.where(first, 0.0, d_out)
    return dx


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(params, x):
    """Forward pass on preprocessed input ``(B, W, C)``; returns probs and cache."""
    a0 = x[..., None]
    z1, p1 = _conv(a0, params["conv1_w"], params["conv1_b"])
    r1 = np.maximum(z1, 0.0)
    m1, f1 = _pool(r1)
    z2, p2 = _conv(m1, params["conv2_w"], params["conv2_b"])
    r2 = np.maximum(z2, 0.0)
    m2, f2 = _pool(r2)
    flat = m2.reshape(len(x), -1)
    z3 = flat @ params["dense1_w"] + params["dense1_b"]
    r3 = np.maximum(z3, 0.0)
    z4 = r3 @ params["dense2_w"] + params["dense2_b"]
    probs = _softmax(z4)
    cache = (a0, z1, p1, r1, f1, m1, z2, p2, r2, f2, m2, flat, z3, r3)
    return probs, cache


def _backward(params, cache, d_logits):
    a0, z1, p1, r1, f1, m1, z2, p2, r2, f2, m2, flat, z3, r3 = cache
    g = {}
    g["dense2_w"] = r3.T @ d_logits
    g["dense2_b"] = d_logits.sum(axis=0)
    d3 = (d_logits @ params["dense2_w"].T) * (z3 > 0)
    g["dense1_w"] = flat.T @ d3
    g["dense1_b"] = d3.sum(axis=0)
    d_m2 = (d3 @ params["dense1_w"].T).reshape(m2.shape)
    d_r2 = _pool_back(d_m2, f2, r2.shape)
    d_z2 = d_r2 * (z2 > 0)
    d_m1, g["conv2_w"], g["conv2_b"] = _conv_back(d_z2, p2, params["conv2_w"], m1.shape)
    d_r1 = _pool_back(d_m1, f1, r1.shape)
    d_z1 = d_r1 * (z1 > 0)
    _, g["conv1_w"], g["conv1_b"] = _conv_back(d_z1, p1, params["conv1_w"], a0.shape)
    return g


def _check_input(model: NetworkModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (model.window, model.channels):
        raise ValueError(f"expected input ({model.window}, {model.channels}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def forward(model: NetworkModel, x) -> np.ndarray:
    """Class probabilities for one window ``(W, C)`` or a batch ``(B, W, C)``."""
    single = np.ndim(x) == 2
    xb = _check_input(model, x)
    probs, _ = _forward(model.params, model.preprocess(xb))
    return probs[0] if single else probs


def predict_batched(model: NetworkModel, x, batch: int = 1024) -> np.ndarray:
    x = _check_input(model, x)
    return np.concatenate([forward(model, x[i:i + batch]) for i in range(0, len(x), batch)]) \
        if len(x) else np.empty((0, 2))


# -- losses -----------------------------------------------------------------

def bce_loss(y, y_hat):
    """Binary cross-entropy with ``y_hat`` clamped to ``[1e-7, 1 - 1e-7]``."""
    p = np.clip(y_hat, EPS, 1 - EPS)
    return -y * np.log(p) - (1 - y) * np.log(1 - p)


def df_loss(y_hat, f_mag, T):
    """``exp(|y_hat - 1|) - 1`` where ``f_mag >= T``, else ``exp(|y_hat|) - 1``."""
    y_hat = np.asarray(y_hat, dtype=float)
    gate = np.asarray(f_mag) >= np.asarray(T)
    return np.where(gate, np.exp(np.abs(y_hat - 1.0)), np.exp(np.abs(y_hat))) - 1.0


@dataclass
class WindowSample:
    x: np.ndarray
    y: int
    f_mag: float
    T: float


@dataclass
class WindowDataset:
    """Stacked training windows.

    ``t_ref`` is the time of each window's last frame and ``flight`` the
    index of the flight it came from.
    """

    x: np.ndarray
    y: np.ndarray
    f_mag: np.ndarray
    T: np.ndarray
    t_ref: np.ndarray | None = None
    flight: np.ndarray | None = None

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> WindowSample:
        return WindowSample(self.x[i], int(self.y[i]), float(self.f_mag[i]), float(self.T[i]))

    def subset(self, idx) -> "WindowDataset":
        pick = (lambda a: None if a is None else a[idx])
        return WindowDataset(self.x[idx], self.y[idx], self.f_mag[idx], self.T[idx],
                             pick(self.t_ref), pick(self.flight))

    @classmethod
    def from_samples(cls, samples) -> "WindowDataset":
        samples = list(samples)
        return cls(np.stack([s.x for s in samples]), np.array([s.y for s in samples]),
                   np.array([s.f_mag for s in samples], float),
                   np.array([s.T for s in samples], float))

    @classmethod
    def concat(cls, parts) -> "WindowDataset":
        parts = [p for p in parts if len(p)]
        cat = (lambda name: None if any(getattr(p, name) is None for p in parts)
               else np.concatenate([getattr(p, name) for p in parts]))
        return cls(*(np.concatenate([getattr(p, n) for p in parts]) for n in ("x", "y", "f_mag", "T")),
                   cat("t_ref"), cat("flight"))


def total_loss(model: NetworkModel, batch: WindowDataset, lam: float | None = None) -> float:
    """Mean over the batch of ``L_S + lam * L_F``."""
    lam = model.lam if lam is None else lam
    y_hat = forward(model, batch.x)[:, 1]
    return float(np.mean(bce_loss(batch.y, y_hat) + lam * df_loss(y_hat, batch.f_mag, batch.T)))


def _loss_grad_logits(probs, y, f_mag, T, lam):
    y_hat = probs[:, 1]
    clipped = np.clip(y_hat, EPS, 1 - EPS)
    inside = (y_hat > EPS) & (y_hat < 1 - EPS)
    d_bce = np.where(inside, -y / clipped + (1 - y) / (1 - clipped), 0.0)
    gate = f_mag >= T
    d_df = np.where(gate, -np.exp(1.0 - y_hat), np.exp(y_hat))
    loss = bce_loss(y, y_hat) + lam * df_loss(y_hat, f_mag, T)
    d_yhat = (d_bce + lam * d_df) / len(y)
    d_z1 = d_yhat * y_hat * (1 - y_hat)
    return float(loss.mean()), np.column_stack([-d_z1, d_z1]), y_hat


def loss_and_grad(model: NetworkModel, batch: WindowDataset, lam: float | None = None):
    """Total loss and its gradient with respect to every parameter."""
    lam = model.lam if lam is None else lam
    x = model.preprocess(_check_input(model, batch.x))
    probs, cache = _forward(model.params, x)
    loss, d_logits, _ = _loss_grad_logits(probs, np.asarray(batch.y, float),
                                          np.asarray(batch.f_mag, float),
                                          np.asarray(batch.T, float), lam)
    return loss, _backward(model.params, cache, d_logits)


# -- training ---------------------------------------------------------------

def train(model: NetworkModel, dataset: WindowDataset, epochs: int = 200, batch_size: int = 32,
          lr: float = 0.01, seed: int = 0, momentum: float = 0.9, lam: float | None = None,
          step_hook=None, fit_scaling: bool = True, target_accuracy: float | None = None):
    """Mini-batch SGD with momentum.

    Parameters
    ----------
    step_hook : callable, optional
        ``hook(step, params)`` called after every update; may edit ``params``
        in place (used for pruning masks).
    fit_scaling : bool
        Fit the input standardisation on ``dataset`` before the first epoch.
    target_accuracy : float, optional
        Stop after the first epoch whose running accuracy reaches this value.

    Returns
    -------
    (NetworkModel, dict)
        Trained copy of the model and per-epoch ``loss`` / ``accuracy``
        (running values over each epoch).
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    model = model.copy()
    lam = model.lam if lam is None else lam
    history = {"loss": [], "accuracy": []}
    if epochs <= 0:
        return model, history
    if fit_scaling:
        model.fit_input_scaling(dataset.x)
    rng = np.random.default_rng(seed)
    params = model.params
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    x_all = model.preprocess(dataset.x)
    y_all = np.asarray(dataset.y, float)
    f_all = np.asarray(dataset.f_mag, float)
    t_all = np.asarray(dataset.T, float)
    n = len(dataset)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        tot_loss = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            probs, cache = _forward(params, x_all[idx])
            loss, d_logits, y_hat = _loss_grad_logits(probs, y_all[idx], f_all[idx],
                                                      t_all[idx], lam)
            if not math.isfinite(loss):
                raise TrainingFault(f"loss became {loss} at step {step}")
            grads = _backward(params, cache, d_logits)
            for k in params:
                velocity[k] *= momentum
                velocity[k] -= lr * grads[k]
                params[k] += velocity[k]
            step += 1
            if step_hook is not None:
                step_hook(step, params)
            if not all(np.isfinite(v).all() for v in params.values()):
                raise TrainingFault(f"weights became non-finite at step {step}")
            tot_loss += loss * len(idx)
            correct += int(np.sum((y_hat >= 0.5) == (y_all[idx] >= 0.5)))
        history["loss"].append(tot_loss / n)
        history["accuracy"].append(correct / n)
        if target_accuracy is not None and correct / n >= target_accuracy:
            break
    model.meta["epochs"] = model.meta.get("epochs", 0) + len(history["loss"])
    return model, history


def accuracy(model: NetworkModel, dataset: WindowDataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    pred = np.argmax(predict_batched(model, dataset.x), axis=1)
    return float(np.mean(pred == dataset.y))


def epochs_to_accuracy(history: dict, target: float = 0.95) -> int | None:
    """1-based epoch at which the running accuracy first reaches ``target``."""
    for i, a in enumerate(history["accuracy"]):
        if a >= target:
            return i + 1
    return None


# -- windows and edge detection ---------------------------------------------

def sliding_windows(c: np.ndarray, window: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Windows of ``c`` ``(n_frames, C)`` and the index of each window's last frame."""
    n = len(c)
    if n < window:
        raise ValueError(f"feature series of {n} frames shorter than window {window}")
    starts = np.arange(0, n - window + 1, stride)
    view = np.lib.stride_tricks.sliding_window_view(c, window, axis=0)
    return np.ascontiguousarray(view[starts].transpose(0, 2, 1)), starts + window - 1


def label_at(times, edge_times) -> np.ndarray:
    """State label: number of edges already passed, modulo 2."""
    edges = np.sort(np.asarray(edge_times, float))
    return (np.searchsorted(edges, np.asarray(times, float), side="right") % 2).astype(int)


def make_windows(features: FusedFeatureSeries, disturbance: DisturbanceSeries, edge_times,
                 window: int = 100, stride: int = 1, flight: int = 0) -> WindowDataset:
    """Training windows with labels and the disturbance gate at each window end."""
    x, last = sliding_windows(features.c, window, stride)
    t_ref = features.frame_times[last]
    idx = np.clip(np.searchsorted(disturbance.t, t_ref - 1e-9), 0, len(disturbance.t) - 1)
    return WindowDataset(x, label_at(t_ref, edge_times), disturbance.magnitude[idx],
                         disturbance.threshold[idx], t_ref, np.full(len(t_ref), flight))


def transitions_from_classes(classes, times) -> list[float]:
    """Midpoints between consecutive windows whose predicted classes differ."""
    classes = np.asarray(classes)
    times = np.asarray(times, float)
    change = np.nonzero(classes[1:] != classes[:-1])[0]
    return [float(0.5 * (times[i] + times[i + 1])) for i in change]


def detect_edges(model: NetworkModel, features: FusedFeatureSeries, stride: int = 1,
                 disturbance: DisturbanceSeries | None = None,
                 gate_window: float = 0.25) -> list[float]:
    """Edge times from class transitions over sliding windows.

    With ``disturbance`` given, transitions without a nearby CFAR alert are
    dropped.
    """
    x, last = sliding_windows(features.c, model.window, stride)
    classes = np.argmax(predict_batched(model, x), axis=1)
    found = transitions_from_classes(classes, features.frame_times[last])
    if disturbance is not None:
        found = gate_detections(found, disturbance, gate_window)
    return found


# -- serialisation ----------------------------------------------------------

def model_to_dict(model: NetworkModel) -> dict:
    return {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "layers": layer_specs(model.window, model.channels),
        "lambda": model.lam,
        "input": {"window": model.window, "channels": model.channels,
                  "log1p": model.log_input, "mean": model.input_mean.tolist(),
                  "std": model.input_std.tolist()},
        "weights": {k: {"shape": list(model.params[k].shape),
                        "data": model.params[k].ravel().tolist()} for k in PARAM_NAMES},
        "training": model.meta,
    }


def model_from_dict(d: dict) -> NetworkModel:
    if d.get("format") != FORMAT:
        raise ValueError("not a model file")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')}")
    inp = d["input"]
    shapes = param_shapes(inp["window"], inp["channels"])
    params = {}
    for k in PARAM_NAMES:
        arr = np.asarray(d["weights"][k]["data"], float).reshape(d["weights"][k]["shape"])
        if arr.shape != shapes[k]:
            raise ValueError(f"weight {k} has shape {arr.shape}, expected {shapes[k]}")
        params[k] = arr
    return NetworkModel(params, lam=d["lambda"], window=inp["window"], channels=inp["channels"],
                        log_input=inp["log1p"], input_mean=np.asarray(inp["mean"], float),
                        input_std=np.asarray(inp["std"], float), meta=dict(d.get("training", {})))


def save_model(model: NetworkModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> NetworkModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
