"""Small numpy function approximators with hand-written reverse mode.

Everything is float64. A network is an :class:`ApproximatorSpec` (an
optional recurrent cell followed by dense layers) plus a flat
:class:`ParamVector`. ``forward`` returns the output and a cache;
``backward`` turns an upstream gradient into a flat parameter gradient and
the gradient with respect to the input.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

BCE_EPS = 1e-7


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# activation -> (f(z), f'(z) written in terms of the output y)
ACTIVATIONS = {
    "identity": (lambda z: z, lambda y: np.ones_like(y)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda y: (y > 0).astype(y.dtype)),
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda y: y * (1.0 - y)),
}


@dataclass(frozen=True)
class ApproximatorSpec:
    """``recurrent`` (hidden width) consumes a (T, B, input_dim) sequence
    and hands its last hidden state to the dense ``layers``."""

    input_dim: int
    layers: tuple = ()  # ((width, activation), ...)
    recurrent: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple((int(w), str(a)) for w, a in self.layers))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        for w, a in self.layers:
            if w < 1:
                raise ValueError("layer width must be positive")
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.recurrent is not None and self.recurrent < 1:
            raise ValueError("recurrent width must be positive")

    @property
    def output_dim(self) -> int:
        if self.layers:
            return self.layers[-1][0]
        return self.recurrent if self.recurrent is not None else self.input_dim

    def shapes(self) -> list:
        out = []
        d = self.input_dim
        if self.recurrent is not None:
            h = self.recurrent
            out += [("rW", (d + h, 4 * h)), ("rb", (4 * h,))]
            d = h
        for k, (w, _) in enumerate(self.layers):
            out += [(f"W{k}", (d, w)), (f"b{k}", (w,))]
            d = w
        return out

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "layers": [list(l) for l in self.layers], "recurrent": self.recurrent}

    @classmethod
    def from_dict(cls, d: dict) -> "ApproximatorSpec":
        return cls(d["input_dim"], tuple(tuple(l) for l in d["layers"]), d.get("recurrent"))


class ParamVector:
    """Flat float64 storage with named, fixed-shape views."""

    def __init__(self, shapes: Sequence, data: Optional[np.ndarray] = None):
        self.shapes = tuple((n, tuple(s)) for n, s in shapes)
        size = sum(int(np.prod(s)) for _, s in self.shapes)
        if data is None:
            data = np.zeros(size)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (size,):
            raise ValueError(f"expected {size} parameters, got shape {data.shape}")
        self.data = data
        self.views = {}
        off = 0
        for n, s in self.shapes:
            k = int(np.prod(s))
            self.views[n] = self.data[off : off + k].reshape(s)
            off += k

    def __getitem__(self, name):
        return self.views[name]

    def __len__(self):
        return self.data.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.shapes, self.data.copy())

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.shapes)


def init_params(spec: ApproximatorSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    p = ParamVector(spec.shapes())
    for name, shape in p.shapes:
        if len(shape) == 2:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            p[name][...] = rng.uniform(-lim, lim, size=shape)
    return p


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _lstm_forward(W, b, xs):
    T, B, _ = xs.shape
    H = b.size // 4
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    steps = []
    for t in range(T):
        hx = np.concatenate([xs[t], h], axis=1)
        z = hx @ W + b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        o = _sigmoid(z[:, 2 * H : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        steps.append((hx, c_prev, i, f, o, g, tc))
    return h, steps


def _lstm_backward(W, steps, dh, D):
    H = dh.shape[1]
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[1])
    dxs = np.zeros((len(steps), dh.shape[0], D))
    dc = np.zeros_like(dh)
    for t in range(len(steps) - 1, -1, -1):
        hx, c_prev, i, f, o, g, tc = steps[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [dc * g * i * (1 - i), dc * c_prev * f * (1 - f), do * o * (1 - o), dc * i * (1 - g * g)], axis=1
        )
        dW += hx.T @ dz
        db += dz.sum(axis=0)
        dhx = dz @ W.T
        dxs[t] = dhx[:, :D]
        dh = dhx[:, D:]
        dc = dc * f
    return dW, db, dxs


def forward(spec: ApproximatorSpec, params: ParamVector, x):
    """Evaluate the network. Dense input is (B, D) or (D,); recurrent input
    is (T, B, D) or (T, D)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = False
    if spec.recurrent is not None:
        if x.ndim == 2:
            x, squeeze = x[:, None, :], True
        if x.ndim != 3 or x.shape[2] != spec.input_dim:
            raise ValueError(f"expected (T, B, {spec.input_dim}) input, got {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("empty sequence")
    else:
        if x.ndim == 1:
            x, squeeze = x[None, :], True
        if x.ndim != 2 or x.shape[1] != spec.input_dim:
            raise ValueError(f"expected (B, {spec.input_dim}) input, got {x.shape}")
    cache = {"x": x, "squeeze": squeeze}
    h = x
    if spec.recurrent is not None:
        h, cache["steps"] = _lstm_forward(params["rW"], params["rb"], x)
    acts = [h]
    for k, (_, a) in enumerate(spec.layers):
        h = ACTIVATIONS[a][0](h @ params[f"W{k}"] + params[f"b{k}"])
        acts.append(h)
    cache["acts"] = acts
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite network output")
    return (h[0] if squeeze else h), cache


def backward(spec: ApproximatorSpec, params: ParamVector, cache: dict, dy):
    """Returns (flat parameter gradient, input gradient)."""
    dy = np.asarray(dy, dtype=np.float64)
    if cache["squeeze"]:
        dy = dy[None, :]
    grad = params.zeros_like()
    acts = cache["acts"]
    d = dy
    for k in range(len(spec.layers) - 1, -1, -1):
        a = spec.layers[k][1]
        dz = d * ACTIVATIONS[a][1](acts[k + 1])
        grad[f"W{k}"][...] = acts[k].T @ dz
        grad[f"b{k}"][...] = dz.sum(axis=0)
        d = dz @ params[f"W{k}"].T
    if spec.recurrent is not None:
        dW, db, dx = _lstm_backward(params["rW"], cache["steps"], d, spec.input_dim)
        grad["rW"][...] = dW
        grad["rb"][...] = db
        d = dx[:, 0, :] if cache["squeeze"] else dx
    elif cache["squeeze"]:
        d = d[0]
    return grad.data, d


class Network:
    """An ApproximatorSpec bound to its parameters."""

    def __init__(self, spec: ApproximatorSpec, params: Optional[ParamVector] = None, rng=None):
        self.spec = spec
        if params is None:
            params = init_params(spec, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    def forward(self, x):
        return forward(self.spec, self.params, x)

    def backward(self, cache, dy):
        return backward(self.spec, self.params, cache, dy)

    def __call__(self, x):
        return forward(self.spec, self.params, x)[0]

    def copy(self) -> "Network":
        return Network(self.spec, self.params.copy())


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(pred, target):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    n = max(diff.size, 1)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def bce(pred, label, eps: float = BCE_EPS):
    """Mean binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {label.shape}")
    p = np.clip(pred, eps, 1.0 - eps)
    n = max(p.size, 1)
    loss = -np.sum(label * np.log(p) + (1 - label) * np.log(1 - p)) / n
    grad = (p - label) / (p * (1 - p)) / n
    grad = np.where((pred < eps) | (pred > 1 - eps), 0.0, grad)
    return float(loss), grad


def bce_logits(z, label):
    """BCE of sigmoid(z); gradient w.r.t. the logits z (numerically stable)."""
    z = np.asarray(z, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    p = np.clip(_sigmoid(z), BCE_EPS, 1 - BCE_EPS)
    n = max(z.size, 1)
    loss = -np.sum(label * np.log(p) + (1 - label) * np.log(1 - p)) / n
    return float(loss), (_sigmoid(z) - label) / n


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class Optimizer:
    kind: str = "adam"  # or "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def optimize_step(opt: Optimizer, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One descent step; returns the new parameter array (input untouched)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError("parameter and gradient shapes differ")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient")
    if opt.kind == "sgd":
        opt.t += 1
        return params - opt.lr * grads
    if opt.m is None:
        opt.m = np.zeros_like(params)
        opt.v = np.zeros_like(params)
    opt.t += 1
    opt.m = opt.beta1 * opt.m + (1 - opt.beta1) * grads
    opt.v = opt.beta2 * opt.v + (1 - opt.beta2) * grads * grads
    mhat = opt.m / (1 - opt.beta1**opt.t)
    vhat = opt.v / (1 - opt.beta2**opt.t)
    return params - opt.lr * mhat / (np.sqrt(vhat) + opt.eps)


def apply_step(opt: Optimizer, net: Network, grads: np.ndarray) -> None:
    """In-place ``optimize_step`` on a network's parameter storage."""
    net.params.data[...] = optimize_step(opt, net.params.data, grads)


def soft_update(target, online, tau: float):
    """tau * online + (1 - tau) * target. Accepts arrays or Networks (in place)."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if isinstance(target, Network):
        target.params.data[...] = tau * online.params.data + (1 - tau) * target.params.data
        return target
    return tau * np.asarray(online, dtype=np.float64) + (1 - tau) * np.asarray(target, dtype=np.float64)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"EIRCKPT1"
CKPT_VERSION = 1


def save_checkpoint(path, entries: dict, meta: Optional[dict] = None) -> None:
    """``entries`` maps name -> Network or (Network, Optimizer).

    Layout: 8-byte magic, uint32 little-endian header length, UTF-8 JSON
    header, then the float64 little-endian blob the header indexes into.
    """
    blobs, header, off = [], {"version": CKPT_VERSION, "meta": meta or {}, "entries": []}, 0

    def put(arr):
        nonlocal off
        arr = np.ascontiguousarray(arr, dtype="<f8")
        blobs.append(arr.tobytes())
        ref = {"offset": off, "count": int(arr.size)}
        off += arr.size
        return ref

    for name in sorted(entries):
        item = entries[name]
        net, opt = item if isinstance(item, tuple) else (item, None)
        rec = {"name": name, "spec": net.spec.to_dict(), "params": put(net.params.data)}
        if opt is not None:
            rec["optimizer"] = {
                "kind": opt.kind, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                "eps": opt.eps, "t": opt.t,
                "m": put(opt.m) if opt.m is not None else None,
                "v": put(opt.v) if opt.v is not None else None,
            }
        header["entries"].append(rec)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns ({name: (Network, Optimizer or None)}, meta)."""
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    (n,) = struct.unpack("<I", buf[8:12])
    header = json.loads(buf[12 : 12 + n].decode("utf-8"))
    if header.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    blob = np.frombuffer(buf[12 + n :], dtype="<f8")

    def get(ref):
        return blob[ref["offset"] : ref["offset"] + ref["count"]].astype(np.float64)

    out = {}
    for rec in header["entries"]:
        spec = ApproximatorSpec.from_dict(rec["spec"])
        net = Network(spec, ParamVector(spec.shapes(), get(rec["params"])))
        opt = None
        if "optimizer" in rec:
            o = rec["optimizer"]
            opt = Optimizer(kind=o["kind"], lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], t=o["t"],
                            m=get(o["m"]) if o["m"] else None, v=get(o["v"]) if o["v"] else None)
        out[rec["name"]] = (net, opt)
    return out, header["meta"]
