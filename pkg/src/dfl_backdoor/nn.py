"""Small neural networks with hand-written gradients.

Two fixed architectures share one parameter container:

* ``mlp_classifier``: input -> ReLU hidden -> linear -> softmax
* ``lstm_regressor``: single-layer LSTM over a sequence, linear scalar head on
  the final hidden state

Parameters live in one flat float64 vector so that gossip averaging, clipping
and median aggregation can treat every model as a plain vector.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from math import prod

import numpy as np

from .errors import FormatError, InvalidArgument

MLP = "mlp_classifier"
LSTM = "lstm_regressor"
_ARCH_CODES = {MLP: 1, LSTM: 2}
PARAMS_MAGIC = b"DFLPARM1"


@dataclass
class ModelParams:
    arch: str
    shapes: tuple[tuple[int, ...], ...]
    vector: np.ndarray

    def __post_init__(self):
        if self.arch not in _ARCH_CODES:
            raise InvalidArgument(f"unknown architecture {self.arch!r}")
        self.shapes = tuple(tuple(int(d) for d in s) for s in self.shapes)
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1 or self.vector.size != sum(prod(s) for s in self.shapes):
            raise InvalidArgument("flat vector length does not match declared shapes")

    def unpack(self) -> list[np.ndarray]:
        """Views into the flat vector, one per declared shape."""
        out, pos = [], 0
        for s in self.shapes:
            size = prod(s)
            out.append(self.vector[pos:pos + size].reshape(s))
            pos += size
        return out

    def with_vector(self, vector: np.ndarray) -> "ModelParams":
        return ModelParams(self.arch, self.shapes, vector)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.shapes, self.vector.copy())

    @property
    def size(self) -> int:
        return self.vector.size

    def same_layout(self, other) -> bool:
        return self.arch == other.arch and self.shapes == other.shapes


# ---------------------------------------------------------------- MLP

def mlp_shapes(input_dim: int, hidden_dim: int, num_classes: int):
    return ((input_dim, hidden_dim), (hidden_dim,), (hidden_dim, num_classes), (num_classes,))


def init_mlp(input_dim: int, hidden_dim: int, num_classes: int, seed: int) -> ModelParams:
    if min(input_dim, hidden_dim, num_classes) < 1:
        raise InvalidArgument("MLP dimensions must be positive")
    rng = np.random.default_rng(seed)
    w1 = rng.uniform(-1, 1, (input_dim, hidden_dim)) / np.sqrt(input_dim)
    w2 = rng.uniform(-1, 1, (hidden_dim, num_classes)) / np.sqrt(hidden_dim)
    vec = np.concatenate([w1.ravel(), np.zeros(hidden_dim), w2.ravel(), np.zeros(num_classes)])
    return ModelParams(MLP, mlp_shapes(input_dim, hidden_dim, num_classes), vec)


def _require(m: ModelParams, arch: str):
    if m.arch != arch:
        raise InvalidArgument(f"expected a {arch} model, got {m.arch}")


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(m: ModelParams, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != m.shapes[0][0]:
        raise InvalidArgument(f"expected inputs of length {m.shapes[0][0]}, got shape {x.shape}")
    return x


def predict_proba(m: ModelParams, images) -> np.ndarray:
    """Class probabilities for a batch of flattened images, shape (B, classes)."""
    _require(m, MLP)
    x = _as_batch(m, images)
    w1, b1, w2, b2 = m.unpack()
    h = np.maximum(x @ w1 + b1, 0.0)
    return _softmax(h @ w2 + b2)


def predict(m: ModelParams, images) -> np.ndarray:
    _require(m, MLP)
    x = _as_batch(m, images)
    w1, b1, w2, b2 = m.unpack()
    h = np.maximum(x @ w1 + b1, 0.0)
    return np.argmax(h @ w2 + b2, axis=1)


def forward_classify(m: ModelParams, image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 1:
        raise InvalidArgument("forward_classify takes a single flattened image")
    return predict_proba(m, image)[0]


def cross_entropy_grad(m: ModelParams, images, labels, weights=None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient.

    ``weights`` (optional, nonnegative) turns the mean into a weighted mean;
    they are normalized to sum to one.
    """
    _require(m, MLP)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InvalidArgument("empty batch")
    x = _as_batch(m, images)
    if x.shape[0] != labels.size:
        raise InvalidArgument("images and labels differ in length")
    if weights is None:
        wts = np.full(labels.size, 1.0 / labels.size)
    else:
        wts = np.asarray(weights, dtype=np.float64)
        wts = wts / wts.sum()

    w1, b1, w2, b2 = m.unpack()
    pre = x @ w1 + b1
    h = np.maximum(pre, 0.0)
    p = _softmax(h @ w2 + b2)
    rows = np.arange(labels.size)
    loss = float(-(wts * np.log(np.maximum(p[rows, labels], 1e-300))).sum())

    dz = p
    dz[rows, labels] -= 1.0
    dz *= wts[:, None]
    dh = (dz @ w2.T) * (pre > 0)
    grad = np.concatenate([(x.T @ dh).ravel(), dh.sum(0), (h.T @ dz).ravel(), dz.sum(0)])
    return loss, grad


def sgd_step(m: ModelParams, grad: np.ndarray, lr: float) -> ModelParams:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != m.vector.shape:
        raise InvalidArgument(f"gradient length {grad.size} does not match params length {m.size}")
    if lr < 0:
        raise InvalidArgument("learning rate must be nonnegative")
    return m.with_vector(m.vector - lr * grad)


# ---------------------------------------------------------------- LSTM
# gate order inside the stacked weight matrix: input, forget, cell, output

def lstm_shapes(input_dim: int, hidden_dim: int):
    return ((4 * hidden_dim, input_dim + hidden_dim), (4 * hidden_dim,), (hidden_dim,), (1,))


def init_lstm(input_dim: int, hidden_dim: int, seed: int) -> ModelParams:
    if min(input_dim, hidden_dim) < 1:
        raise InvalidArgument("LSTM dimensions must be positive")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(hidden_dim)
    w = rng.uniform(-scale, scale, (4 * hidden_dim, input_dim + hidden_dim))
    b = np.zeros(4 * hidden_dim)
    b[hidden_dim:2 * hidden_dim] = 1.0
    head = rng.uniform(-scale, scale, hidden_dim)
    vec = np.concatenate([w.ravel(), b, head, np.zeros(1)])
    return ModelParams(LSTM, lstm_shapes(input_dim, hidden_dim), vec)


def lstm_dims(m: ModelParams) -> tuple[int, int]:
    four_h, cols = m.shapes[0]
    hidden = four_h // 4
    return cols - hidden, hidden


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _as_sequences(m: ModelParams, seqs) -> np.ndarray:
    input_dim, _ = lstm_dims(m)
    x = np.asarray(seqs, dtype=np.float64)
    if x.ndim == 2 and input_dim == 1:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] != input_dim:
        raise InvalidArgument(f"expected sequences of shape (batch, time, {input_dim}), got {x.shape}")
    if x.shape[1] == 0:
        raise InvalidArgument("empty sequence")
    return x


def _lstm_forward(m: ModelParams, x: np.ndarray):
    w, b, head, head_b = m.unpack()
    batch, steps, _ = x.shape
    _, hid = lstm_dims(m)
    h = np.zeros((batch, hid))
    c = np.zeros((batch, hid))
    cache = []
    for t in range(steps):
        z = np.concatenate([x[:, t], h], axis=1)
        a = z @ w.T + b
        i = _sigmoid(a[:, :hid])
        f = _sigmoid(a[:, hid:2 * hid])
        g = np.tanh(a[:, 2 * hid:3 * hid])
        o = _sigmoid(a[:, 3 * hid:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.append((z, i, f, g, o, c_prev, tc))
    y = h @ head + head_b[0]
    return y, h, cache


def lstm_predict(m: ModelParams, seqs) -> np.ndarray:
    """Scalar outputs for a batch of sequences, shape (B,)."""
    _require(m, LSTM)
    y, _, _ = _lstm_forward(m, _as_sequences(m, seqs))
    return y


def lstm_regress(m: ModelParams, sequence) -> float:
    _require(m, LSTM)
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.size == 0:
        raise InvalidArgument("empty sequence")
    return float(lstm_predict(m, seq[None, ...])[0])


def lstm_mse_grad(m: ModelParams, seqs, targets) -> tuple[float, np.ndarray]:
    """Mean squared error of the scalar head and its gradient (BPTT)."""
    _require(m, LSTM)
    x = _as_sequences(m, seqs)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (x.shape[0],):
        raise InvalidArgument("one target per sequence required")
    w, _, head, _ = m.unpack()
    _, hid = lstm_dims(m)
    y, h_last, cache = _lstm_forward(m, x)
    batch = x.shape[0]
    err = y - targets
    loss = float(np.mean(err ** 2))

    dy = 2.0 * err / batch
    d_head = h_last.T @ dy
    d_head_b = np.array([dy.sum()])
    dw = np.zeros_like(w)
    db = np.zeros(4 * hid)
    dh = np.outer(dy, head)
    dc = np.zeros((batch, hid))
    in_dim = x.shape[2]
    for z, i, f, g, o, c_prev, tc in reversed(cache):
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc ** 2)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        da = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g ** 2),
            do * o * (1.0 - o),
        ], axis=1)
        dw += da.T @ z
        db += da.sum(0)
        dz = da @ w
        dh = dz[:, in_dim:]
        dc = dc * f
    grad = np.concatenate([dw.ravel(), db, d_head, d_head_b])
    return loss, grad


# ---------------------------------------------------------------- serialization

def params_to_bytes(m: ModelParams) -> bytes:
    parts = [PARAMS_MAGIC, struct.pack("<II", _ARCH_CODES[m.arch], len(m.shapes))]
    for s in m.shapes:
        parts.append(struct.pack(f"<I{len(s)}I", len(s), *s))
    parts.append(m.vector.astype("<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(buf: bytes, offset: int = 0) -> tuple[ModelParams, int]:
    """Decode one parameter block; returns the params and the offset just past it."""
    if buf[offset:offset + 8] != PARAMS_MAGIC:
        raise FormatError("bad parameter block magic", offset)
    pos = offset + 8
    try:
        code, n_shapes = struct.unpack_from("<II", buf, pos)
        pos += 8
        shapes = []
        for _ in range(n_shapes):
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shapes.append(struct.unpack_from(f"<{ndim}I", buf, pos))
            pos += 4 * ndim
    except struct.error as exc:
        raise FormatError("truncated parameter header", pos) from exc
    arch = {v: k for k, v in _ARCH_CODES.items()}.get(code)
    if arch is None:
        raise FormatError(f"unknown architecture code {code}", offset + 8)
    count = sum(prod(s) for s in shapes)
    end = pos + 8 * count
    if end > len(buf):
        raise FormatError(f"truncated parameter data: need {8 * count} bytes", pos)
    vec = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return ModelParams(arch, tuple(shapes), vec), end


def save_params(m: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(m))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    m, end = params_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after parameter block", end)
    return m
