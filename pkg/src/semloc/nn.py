"""Small fixed-architecture network kernel with hand-written backward passes.

Every layer is a pair of functions: ``*_forward`` returns ``(output, cache)``
and ``*_backward`` consumes the cache and an upstream gradient, accumulates
parameter gradients into a dict and returns the input gradient. All math is
float64 so the analytic gradients can be checked tightly against central
finite differences (see :func:`grad_check`).
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericalError

HEADS = 4
ATTN_LAYERS = 2
_CKPT_MAGIC = b"SLCKPT01"


class ParamStore:
    """Named float64 arrays with a deterministic initializer."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._rng = np.random.default_rng(self.seed)

    def add(self, name: str, shape, init: str = "he", fan_in: int | None = None):
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "he":
            fan = fan_in if fan_in is not None else shape[-1]
            value = self._rng.normal(0.0, np.sqrt(2.0 / fan), size=shape)
        elif init == "xavier":
            fan = fan_in if fan_in is not None else shape[-1]
            value = self._rng.normal(0.0, np.sqrt(1.0 / fan), size=shape)
        elif init == "residual":
            # Residual-branch outputs start near zero so stacked blocks stay close to identity.
            fan = fan_in if fan_in is not None else shape[-1]
            value = self._rng.normal(0.0, 0.1 / np.sqrt(fan), size=shape)
        elif init == "embed":
            value = self._rng.normal(0.0, 1.0, size=shape)
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.params[name] = value
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.params[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        out.params = OrderedDict((k, v.copy()) for k, v in self.params.items())
        return out

    def zero_(self) -> "ParamStore":
        for v in self.params.values():
            v[...] = 0.0
        return self

    def num_values(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def equals(self, other: "ParamStore") -> bool:
        if list(self.params) != list(other.params):
            return False
        return all(np.array_equal(a, other.params[k]) for k, a in self.params.items())


def save_checkpoint(path, store: ParamStore, metadata: dict | None = None) -> None:
    """Write a manifest (name, shape, offset) followed by raw little-endian float64 data."""
    entries = []
    offset = 0
    for name, value in store.items():
        entries.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += value.size
    manifest = {"format": 1, "seed": store.seed, "count": offset,
                "params": entries, "metadata": metadata or {}}
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for value in store.params.values():
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path, expected: ParamStore | None = None) -> tuple[ParamStore, dict]:
    """Inverse of :func:`save_checkpoint`; validates shapes against ``expected`` if given."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise DataError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt manifest ({exc})") from None
    if manifest.get("format") != 1:
        raise DataError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    data = np.frombuffer(blob[16 + hlen:], dtype="<f8")
    if data.size != manifest["count"]:
        raise DataError(f"{path}: expected {manifest['count']} values, found {data.size}")
    store = ParamStore(manifest["seed"])
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        store.params[entry["name"]] = data[entry["offset"]:entry["offset"] + n].reshape(shape).astype(np.float64)
    if expected is not None:
        for name, value in expected.items():
            if name not in store:
                raise DataError(f"{path}: missing parameter {name!r}")
            if store[name].shape != value.shape:
                raise DataError(f"{path}: parameter {name!r} has shape {store[name].shape}, "
                                f"expected {value.shape}")
        extra = set(store.params) - set(expected.params)
        if extra:
            raise DataError(f"{path}: unexpected parameters {sorted(extra)}")
    return store, manifest["metadata"]


# ---------------------------------------------------------------- MLP

def add_mlp(store: ParamStore, prefix: str, widths, final_relu: bool = False,
            last_init: str = "xavier") -> None:
    """Register a relu MLP with layer widths ``[in, h1, ..., out]``."""
    last = len(widths) - 2
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        init = "he" if i < last or final_relu else last_init
        store.add(f"{prefix}.W{i}", (fan_out, fan_in), init)
        store.add(f"{prefix}.b{i}", (fan_out,), "zeros")


def mlp_depth(store: ParamStore, prefix: str) -> int:
    n = 0
    while f"{prefix}.W{n}" in store:
        n += 1
    if n == 0:
        raise KeyError(f"missing parameter {prefix + '.W0'!r}")
    return n


def mlp_forward(store: ParamStore, prefix: str, x, final_relu: bool = False):
    """Affine layers with relu between them (and after the last if ``final_relu``)."""
    x = np.asarray(x, dtype=np.float64)
    depth = mlp_depth(store, prefix)
    acts = [x]
    h = x
    for i in range(depth):
        W = store[f"{prefix}.W{i}"]
        if h.shape[-1] != W.shape[1]:
            raise ValueError(f"shape mismatch at {prefix}.W{i}: input width {h.shape[-1]}, "
                             f"expected {W.shape[1]}")
        h = h @ W.T + store[f"{prefix}.b{i}"]
        if i < depth - 1 or final_relu:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, (prefix, depth, final_relu, acts)


def mlp_apply(store: ParamStore, prefix: str, x, final_relu: bool = False):
    return mlp_forward(store, prefix, x, final_relu)[0]


def mlp_backward(store: ParamStore, cache, dy, grads):
    prefix, depth, final_relu, acts = cache
    d = np.asarray(dy, dtype=np.float64)
    for i in reversed(range(depth)):
        if i < depth - 1 or final_relu:
            d = d * (acts[i + 1] > 0.0)
        W = store[f"{prefix}.W{i}"]
        a = acts[i]
        if a.ndim == 1:
            grads[f"{prefix}.W{i}"] += np.outer(d, a)
            grads[f"{prefix}.b{i}"] += d
        else:
            grads[f"{prefix}.W{i}"] += d.reshape(-1, d.shape[-1]).T @ a.reshape(-1, a.shape[-1])
            grads[f"{prefix}.b{i}"] += d.reshape(-1, d.shape[-1]).sum(axis=0)
        d = d @ W
    return d


# ---------------------------------------------------------------- attention

def add_mha(store: ParamStore, prefix: str, d: int, layers: int = ATTN_LAYERS,
            heads: int = HEADS) -> None:
    if d % heads:
        raise ConfigError(f"feature width {d} is not divisible by {heads} heads")
    for l in range(layers):
        p = f"{prefix}.l{l}"
        store.add(f"{p}.Wo", (d, d), "residual")
        store.add(f"{p}.bo", (d,), "zeros")
        store.add(f"{p}.ffn.W0", (2 * d, d), "he")
        store.add(f"{p}.ffn.b0", (2 * d,), "zeros")
        store.add(f"{p}.ffn.W1", (d, 2 * d), "residual")
        store.add(f"{p}.ffn.b1", (d,), "zeros")


def _softmax_rows(S):
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    return E / E.sum(axis=-1, keepdims=True)


def mha_forward(store: ParamStore, prefix: str, X, heads: int = HEADS):
    """Stacked self-attention + FFN layers with identity Q/K/V projections.

    Per layer: ``Y = X + Wo·concat_h(softmax(X_h X_h^T / sqrt(d_h)) X_h) + bo``
    then ``Z = Y + FFN(Y)``.
    """
    X = np.asarray(X, dtype=np.float64)
    N, d = X.shape
    if N < 1:
        raise ValueError("attention needs at least one token")
    if d % heads:
        raise ConfigError(f"feature width {d} is not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    caches = []
    l = 0
    while f"{prefix}.l{l}.Wo" in store:
        p = f"{prefix}.l{l}"
        Xh = X.reshape(N, heads, dh).transpose(1, 0, 2)          # H,N,dh
        A = _softmax_rows(Xh @ Xh.transpose(0, 2, 1) * scale)    # H,N,N
        O = (A @ Xh).transpose(1, 0, 2).reshape(N, d)
        Y = X + O @ store[f"{p}.Wo"].T + store[f"{p}.bo"]
        F, fcache = mlp_forward(store, f"{p}.ffn", Y)
        Z = Y + F
        caches.append((p, Xh, A, O, fcache))
        X = Z
        l += 1
    return X, (heads, dh, scale, caches)


def mha_block(store: ParamStore, prefix: str, X):
    return mha_forward(store, prefix, X)[0]


def mha_backward(store: ParamStore, cache, dZ, grads):
    heads, dh, scale, caches = cache
    dZ = np.asarray(dZ, dtype=np.float64)
    N, d = dZ.shape
    for p, Xh, A, O, fcache in reversed(caches):
        dY = dZ + mlp_backward(store, fcache, dZ, grads)
        grads[f"{p}.Wo"] += dY.T @ O
        grads[f"{p}.bo"] += dY.sum(axis=0)
        dO = (dY @ store[f"{p}.Wo"]).reshape(N, heads, dh).transpose(1, 0, 2)
        dA = dO @ Xh.transpose(0, 2, 1)
        dXh = A.transpose(0, 2, 1) @ dO
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
        dXh += (dS + dS.transpose(0, 2, 1)) @ Xh * scale
        dZ = dY + dXh.transpose(1, 0, 2).reshape(N, d)
    return dZ


# ---------------------------------------------------------------- pooling

def softmax_pool_forward(store: ParamStore, prefix: str, X):
    """Score each row with an MLP, softmax over rows, weighted sum, L2-normalize."""
    X = np.asarray(X, dtype=np.float64)
    s, scache = mlp_forward(store, prefix, X)
    w = _softmax_rows(s[:, 0])
    v = w @ X
    n = np.linalg.norm(v)
    desc = v / n if n > 1e-12 else v.copy()
    return desc, w, (X, scache, w, v, n)


def softmax_pool(store: ParamStore, prefix: str, X):
    desc, w, _ = softmax_pool_forward(store, prefix, X)
    return desc, w


def softmax_pool_backward(store: ParamStore, cache, ddesc, grads):
    X, scache, w, v, n = cache
    if n > 1e-12:
        u = v / n
        dv = (ddesc - u * (u @ ddesc)) / n
    else:
        dv = ddesc
    dX = np.outer(w, dv)
    dw = X @ dv
    ds = w * (dw - dw @ w)
    dX += mlp_backward(store, scache, ds[:, None], grads)
    return dX


# ---------------------------------------------------------------- losses

def _log_softmax(S, axis):
    m = S.max(axis=axis, keepdims=True)
    return S - m - np.log(np.exp(S - m).sum(axis=axis, keepdims=True))


def contrastive_loss(F_img, F_map, tau: float, with_grad: bool = False):
    """Symmetric temperature-scaled cross-entropy over in-batch pairs.

    Row ``i`` of ``F_img`` is the positive for row ``i`` of ``F_map``; every
    other row in the batch acts as a negative. Returns the mean over the batch
    of the image->map plus map->image terms.
    """
    F_img = np.asarray(F_img, dtype=np.float64)
    F_map = np.asarray(F_map, dtype=np.float64)
    B = F_img.shape[0]
    if B < 2 or F_map.shape != F_img.shape:
        raise ValueError(f"need two matching batches with B >= 2, got {F_img.shape}, {F_map.shape}")
    for name, F in (("F_img", F_img), ("F_map", F_map)):
        norms = np.linalg.norm(F, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-3)
        if bad.size:
            raise ValueError(f"{name} row {int(bad[0])} is not unit length (norm {norms[bad[0]]:.6f})")
    S = F_img @ F_map.T / tau
    P_row = _log_softmax(S, axis=1)
    P_col = _log_softmax(S, axis=0)
    idx = np.arange(B)
    loss = float(-(P_row[idx, idx].sum() + P_col[idx, idx].sum()) / B)
    if not with_grad:
        return loss
    eye = np.eye(B)
    dS = (np.exp(P_row) - eye + np.exp(P_col) - eye) / B / tau
    return loss, dS @ F_map, dS.T @ F_img


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, store: ParamStore, lr: float = 1e-3) -> "AdamState":
        return cls(lr=lr, m=store.zeros_like(), v=store.zeros_like())


def adam_step(state: AdamState, store: ParamStore, grads) -> ParamStore:
    """Bias-corrected Adam update applied in place to ``store``."""
    for name, g in grads.items():
        if g.shape != store[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {store[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        store.params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return store


# ---------------------------------------------------------------- verification

def grad_check(closure, store: ParamStore, h: float = 1e-5, n_coords: int = 256,
               seed: int = 0, kink_tol: float = 1e-3) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``closure(store)`` must return ``(loss, grads)``. Coordinates are sampled
    uniformly over all parameters; a coordinate whose one-sided slopes
    disagree (a relu kink inside ``[x-h, x+h]``) is skipped and resampled.
    The error per coordinate is ``|analytic - fd| / max(1, |fd|)``.
    """
    _, grads = closure(store)
    names = list(store.params)
    sizes = np.array([store[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    attempts = 0
    while checked < min(n_coords, total) and attempts < 20 * n_coords:
        attempts += 1
        flat = int(rng.integers(total))
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[k]
        idx = np.unravel_index(flat - offsets[k], store[name].shape)
        arr = store.params[name]
        x0 = arr[idx]
        arr[idx] = x0 + h
        lp = closure(store)[0]
        arr[idx] = x0 - h
        lm = closure(store)[0]
        arr[idx] = x0
        l0 = closure(store)[0]
        fd = (lp - lm) / (2 * h)
        if abs((lp - l0) / h - (l0 - lm) / h) > kink_tol * max(1.0, abs(fd)):
            continue
        worst = max(worst, abs(grads[name][idx] - fd) / max(1.0, abs(fd)))
        checked += 1
    return worst
