"""Feature-vector embedder with L2-normalised output, Adam, and checkpoints."""

from __future__ import annotations

import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

# Added to the first coordinate of a pre-normalisation vector whose norm
# falls below DEGENERATE_NORM.
ZERO_NORM_EPS = 1e-6
DEGENERATE_NORM = 1e-12
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Embedder:
    """MLP f(x) = normalize(W_L tanh(... tanh(W_1 x + b_1) ...) + b_L).

    With no hidden widths this is a linear map followed by normalisation.
    """

    sizes: tuple[int, ...]
    bias: bool = True
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, input_dim: int, embed_dim: int, hidden=(), bias: bool = True, seed: int = 0) -> Embedder:
        sizes = (int(input_dim), *map(int, hidden), int(embed_dim))
        rng = np.random.default_rng(seed)
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            params[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
            if bias:
                params[f"b{i}"] = np.zeros(fan_out)
        return cls(sizes, bias, params)

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def embed_dim(self) -> int:
        return self.sizes[-1]

    def copy(self) -> Embedder:
        return Embedder(self.sizes, self.bias, {k: v.copy() for k, v in self.params.items()})

    def forward(self, features: np.ndarray, keep_cache: bool = False, dtype=np.float64):
        """Embed rows of ``features``; returns float64 unit vectors (and the cache if asked)."""
        x = np.asarray(features, dtype=dtype)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected features of shape (n, {self.input_dim}), got {x.shape}")
        acts = [x]
        h = x
        for i in range(self.num_layers):
            h = h @ self.params[f"W{i}"].astype(dtype).T
            if self.bias:
                h = h + self.params[f"b{i}"].astype(dtype)
            if i < self.num_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        norms = np.linalg.norm(h, axis=1)
        bad = norms < DEGENERATE_NORM
        if np.any(bad):
            logger.warning("perturbing %d near-zero embeddings by %g", int(bad.sum()), ZERO_NORM_EPS)
            h = h.copy()
            h[bad, 0] += ZERO_NORM_EPS
            acts[-1] = h
            norms = np.linalg.norm(h, axis=1)
        y = (h / norms[:, None]).astype(np.float64)
        if keep_cache:
            return y, acts
        return y

    def backward(self, acts: list[np.ndarray], d_embeddings: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given the cache of :meth:`forward` and dL/d(embeddings)."""
        dtype = acts[0].dtype
        u = acts[-1]
        g = backward_through_normalization(np.asarray(d_embeddings, dtype=dtype), u)
        grads = {}
        for i in reversed(range(self.num_layers)):
            if i < self.num_layers - 1:
                # acts[i + 1] is tanh output for hidden layers
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[f"W{i}"] = (g.T @ acts[i]).astype(np.float64)
            if self.bias:
                grads[f"b{i}"] = g.sum(axis=0).astype(np.float64)
            if i > 0:
                g = g @ self.params[f"W{i}"].astype(dtype)
        return grads


def backward_through_normalization(d_y: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Adjoint of y = u / |u| row-wise: (I - y y^T) g / |u|."""
    d_y = np.atleast_2d(d_y)
    u = np.atleast_2d(u)
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norms < DEGENERATE_NORM):
        raise FloatingPointError("degenerate embedding: pre-normalisation norm below 1e-12")
    y = u / norms
    return (d_y - y * np.sum(y * d_y, axis=1, keepdims=True)) / norms


class Adam:
    """Adam with a step-decay learning-rate schedule."""

    def __init__(
        self,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        milestones=(),
        decay: float = 0.1,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.milestones = tuple(int(s) for s in milestones)
        self.decay = decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def current_lr(self) -> float:
        passed = sum(1 for s in self.milestones if self.t >= s)
        return self.lr * self.decay**passed

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        lr = self.current_lr()
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def save_checkpoint(path, model: Embedder, opt: Adam, config_hash: str = "", config: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "sizes": list(model.sizes),
        "bias": model.bias,
        "step": opt.t,
        "lr": opt.lr,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "milestones": list(opt.milestones),
        "decay": opt.decay,
        "config_hash": config_hash,
        "config": config or {},
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for k, v in model.params.items():
        arrays[f"param/{k}"] = v
    for k in opt.m:
        arrays[f"adam_m/{k}"] = opt.m[k]
        arrays[f"adam_v/{k}"] = opt.v[k]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Embedder, Adam, dict]:
    """Returns (model, optimizer, header); raises CheckpointError on any defect."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["header"]).decode())
            arrays = {k: z[k] for k in z.files if k != "header"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    sizes = tuple(header["sizes"])
    model = Embedder(sizes, header["bias"], {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("param/")})
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        w = model.params.get(f"W{i}")
        if w is None or w.shape != (fan_out, fan_in):
            raise CheckpointError(f"layer {i} weight missing or misshapen in {path}")
    opt = Adam(header["lr"], header["beta1"], header["beta2"], header["eps"], header["milestones"], header["decay"])
    opt.t = header["step"]
    opt.m = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    opt.v = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return model, opt, header
