"""Model assembly: embedding -> conv/relu/pool blocks -> BiGRU -> dense stack.

The forward path embeds integer-encoded call sequences, runs two valid
(stride-1) convolution + windowed-max-pool blocks, feeds the surviving
sequence through a bidirectional GRU, flattens the full output sequence,
and classifies through ReLU dense layers with inverted dropout and a
sigmoid output unit.

A trained model travels as a :class:`ModelBundle`: config + vocabulary +
named parameter arrays, serialized to a single JSON document with lossless
float round-trips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CorruptBundle, FormatVersionMismatch, ShapeMismatch
from .tensor import Rng, Tensor
from .textprep import Vocabulary

BUNDLE_FORMAT_VERSION = 1

TRAIN = "train"
EVAL = "eval"

# float64 sigmoid rounds to exactly 0 or 1 for |logit| beyond ~37/745; the
# clamp keeps outputs in the open interval the probability contract promises
PROB_EPS = 1e-12

GRU_GATE_NAMES = ("w_zx", "u_zh", "b_z", "w_rx", "u_rh", "b_r", "w_hx", "u_hh", "b_h")


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel: int
    stride: int = 1
    pool_window: int = 2
    pool_stride: int = 2

    def __post_init__(self):
        if self.stride != 1:
            raise ValueError("convolution stride is fixed at 1")
        if min(self.filters, self.kernel, self.pool_window, self.pool_stride) < 1:
            raise ValueError("conv block sizes must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the shape chain is validated eagerly."""

    n: int = 100
    embed_dim: int = 100
    conv_blocks: tuple[ConvBlock, ...] = (ConvBlock(64, 3), ConvBlock(32, 3))
    gru_hidden: int = 64
    dense_layers: tuple[int, ...] = (128, 64)
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(self.conv_blocks))
        object.__setattr__(self, "dense_layers", tuple(self.dense_layers))
        if self.n < 1 or self.embed_dim < 1 or self.gru_hidden < 1:
            raise ValueError("n, embed_dim and gru_hidden must be >= 1")
        if not self.conv_blocks:
            raise ValueError("at least one conv block is required")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if any(d < 1 for d in self.dense_layers):
            raise ValueError("dense layer widths must be >= 1")
        self.sequence_length_after_blocks()  # fails fast on an impossible chain

    def sequence_length_after_blocks(self) -> int:
        """Walk the conv/pool shape chain; raises ValueError if it collapses."""
        length = self.n
        for i, blk in enumerate(self.conv_blocks):
            if length < blk.kernel:
                raise ValueError(
                    f"conv block {i}: kernel {blk.kernel} exceeds remaining length {length}")
            length = length - blk.kernel + 1
            if length < blk.pool_window:
                raise ValueError(
                    f"conv block {i}: pool window {blk.pool_window} exceeds length {length}")
            length = (length - blk.pool_window) // blk.pool_stride + 1
        if length < 1:
            raise ValueError("sequence length collapsed to zero before the BiGRU")
        return length

    def flat_dim(self) -> int:
        return self.sequence_length_after_blocks() * 2 * self.gru_hidden

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "embed_dim": self.embed_dim,
            "conv_blocks": [
                {"filters": b.filters, "kernel": b.kernel, "stride": b.stride,
                 "pool_window": b.pool_window, "pool_stride": b.pool_stride}
                for b in self.conv_blocks
            ],
            "gru_hidden": self.gru_hidden,
            "dense_layers": list(self.dense_layers),
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {"n", "embed_dim", "conv_blocks", "gru_hidden", "dense_layers",
                 "dropout_rate", "seed"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model config key: {sorted(unknown)[0]}")
        kwargs = dict(doc)
        if "conv_blocks" in kwargs:
            blocks = []
            for blk in kwargs["conv_blocks"]:
                extra = set(blk) - {"filters", "kernel", "stride", "pool_window", "pool_stride"}
                if extra:
                    raise ValueError(f"unknown conv block key: {sorted(extra)[0]}")
                blocks.append(ConvBlock(**blk))
            kwargs["conv_blocks"] = tuple(blocks)
        return cls(**kwargs)


@dataclass
class GruParams:
    """Parameter set of one GRU direction (weights w/u per gate, plus biases)."""

    w_zx: Tensor
    u_zh: Tensor
    b_z: Tensor
    w_rx: Tensor
    u_rh: Tensor
    b_r: Tensor
    w_hx: Tensor
    u_hh: Tensor
    b_h: Tensor


def param_shapes(config: ModelConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map for every trainable array."""
    shapes: dict[str, tuple[int, ...]] = {"embed": (vocab_size, config.embed_dim)}
    channels = config.embed_dim
    for i, blk in enumerate(config.conv_blocks):
        shapes[f"conv{i}_w"] = (blk.filters, blk.kernel, channels)
        shapes[f"conv{i}_b"] = (blk.filters,)
        channels = blk.filters
    hidden = config.gru_hidden
    for direction in ("fwd", "bwd"):
        for gate in ("z", "r", "h"):
            shapes[f"gru_{direction}_w_{gate}x"] = (channels, hidden)
            shapes[f"gru_{direction}_u_{gate}h"] = (hidden, hidden)
            shapes[f"gru_{direction}_b_{gate}"] = (hidden,)
    width = config.flat_dim()
    for i, out in enumerate(config.dense_layers):
        shapes[f"dense{i}_w"] = (width, out)
        shapes[f"dense{i}_b"] = (out,)
        width = out
    shapes["out_w"] = (width, 1)
    shapes["out_b"] = (1,)
    return shapes


def init_params(config: ModelConfig, vocab_size: int, rng: Rng) -> dict[str, Tensor]:
    """Fresh parameters: embedding uniform(+-0.05), weight matrices
    scaled-uniform with limit sqrt(6/(fan_in+fan_out)), biases zero."""
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config, vocab_size).items():
        if name == "embed":
            params[name] = T.init_uniform(shape, 0.05, rng, requires_grad=True)
        elif name.endswith(("_b",)) or "_b_" in name:
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            if len(shape) == 3:  # conv kernels act as dense maps on unfolded windows
                fan_in, fan_out = shape[1] * shape[2], shape[0]
            else:
                fan_in, fan_out = shape[0], shape[1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = T.init_uniform(shape, limit, rng, requires_grad=True)
    return params


def gru_direction_params(params: dict[str, Tensor], direction: str) -> GruParams:
    p = {gate: params[f"gru_{direction}_{gate}"] for gate in GRU_GATE_NAMES}
    return GruParams(**p)


@dataclass
class ModelBundle:
    """The serializable trained model: config + vocabulary + parameters."""

    format_version: int
    config: ModelConfig
    vocabulary: Vocabulary
    params: dict[str, Tensor]

    def __post_init__(self):
        rows = self.params["embed"].shape[0]
        if rows != self.vocabulary.size:
            raise ShapeMismatch(
                f"embedding has {rows} rows but vocabulary size is {self.vocabulary.size}")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def embed(ids, e: Tensor) -> Tensor:
    """Stack embedding rows for an id vector or batch; PAD row 0 is trainable
    and looked up like any other row."""
    return T.gather_rows(e, np.asarray(ids))


def conv1d_relu(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid 1-D convolution at stride 1 followed by ReLU.

    ``x`` is (L, D) or (B, L, D); ``w`` is (filters, kernel, D). Output
    length is L - kernel + 1.
    """
    filters, kernel, depth = w.shape
    if x.shape[-1] != depth:
        raise ShapeMismatch(f"conv1d: input depth {x.shape[-1]} != filter depth {depth}")
    windows = T.unfold_windows(x, kernel, 1)
    w2 = T.transpose(T.reshape(w, (filters, kernel * depth)))
    return T.relu(T.add(T.matmul(windows, w2), b))


def max_pool(x: Tensor, window: int, stride: int) -> Tensor:
    return T.max_pool_1d(x, window, stride)


def _promote_rows(*tensors: Tensor) -> tuple[list[Tensor], bool]:
    if tensors[0].ndim == 1:
        return [T.reshape(t, (1,) + t.shape) for t in tensors], True
    return list(tensors), False


def gru_cell(x_t: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One recurrent step.

    z and r are sigmoid gates over the input and previous state; the
    candidate state applies r elementwise to the recurrent term inside the
    tanh; the new state is (1 - z) * candidate + z * previous.
    """
    (x_t, h_prev), squeeze = _promote_rows(x_t, h_prev)
    z = T.sigmoid(T.add(T.add(T.matmul(x_t, p.w_zx), T.matmul(h_prev, p.u_zh)), p.b_z))
    r = T.sigmoid(T.add(T.add(T.matmul(x_t, p.w_rx), T.matmul(h_prev, p.u_rh)), p.b_r))
    cand = T.tanh(T.add(T.add(T.matmul(x_t, p.w_hx),
                              T.mul(r, T.matmul(h_prev, p.u_hh))), p.b_h))
    h_t = T.add(T.mul(1.0 - z, cand), T.mul(z, h_prev))
    return T.reshape(h_t, h_t.shape[1:]) if squeeze else h_t


def _gru_direction(x3: Tensor, p: GruParams, reverse: bool) -> list[Tensor]:
    """All hidden states of one direction over a (B, L, F) input.

    Input projections are precomputed for the whole sequence; per-step math
    matches :func:`gru_cell` exactly up to float addition order.
    """
    batch, length, _ = x3.shape
    hidden = p.u_zh.shape[0]
    xz = T.add(T.matmul(x3, p.w_zx), p.b_z)
    xr = T.add(T.matmul(x3, p.w_rx), p.b_r)
    xh = T.add(T.matmul(x3, p.w_hx), p.b_h)
    h = Tensor(np.zeros((batch, hidden)))
    states: list[Tensor] = []
    steps = range(length - 1, -1, -1) if reverse else range(length)
    for t in steps:
        z = T.sigmoid(T.add(T.take_time(xz, t), T.matmul(h, p.u_zh)))
        r = T.sigmoid(T.add(T.take_time(xr, t), T.matmul(h, p.u_rh)))
        cand = T.tanh(T.add(T.take_time(xh, t), T.mul(r, T.matmul(h, p.u_hh))))
        h = T.add(T.mul(1.0 - z, cand), T.mul(z, h))
        states.append(h)
    if reverse:
        states.reverse()
    return states


def bigru(x: Tensor, p_fwd: GruParams, p_bwd: GruParams) -> Tensor:
    """Both directions over the sequence; row t = concat(h_fwd[t], h_bwd[t]).

    The backward half runs over the reversed sequence and is re-reversed, so
    every time step survives into the output. Initial states are zero.
    """
    squeeze = x.ndim == 2
    x3 = T.reshape(x, (1,) + x.shape) if squeeze else x
    fwd = _gru_direction(x3, p_fwd, reverse=False)
    bwd = _gru_direction(x3, p_bwd, reverse=True)
    rows = [
        T.reshape(T.concat([f, b], axis=-1), (x3.shape[0], 1, -1))
        for f, b in zip(fwd, bwd)
    ]
    out = T.concat(rows, axis=-2)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten; a leading batch axis of a rank-3 input survives."""
    if x.ndim == 3:
        return T.reshape(x, (x.shape[0], -1))
    return T.reshape(x, (-1,))


def dense_relu_dropout(v: Tensor, w: Tensor, b: Tensor, rate: float, mode: str,
                       rng: Rng | None = None) -> Tensor:
    """ReLU(v @ w + b) with inverted dropout in train mode.

    Kept units are scaled by 1/(1-rate) so eval mode is the identity after
    the activation.
    """
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}")
    (v,), squeeze = _promote_rows(v) if v.ndim == 1 else ((v,), False)
    out = T.relu(T.add(T.matmul(v, w), b))
    if mode == TRAIN and rate > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = (rng.random(out.shape) >= rate).astype(np.float64)
        out = T.mul(out, Tensor(keep / (1.0 - rate)))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def forward(bundle: ModelBundle, ids_batch, mode: str = EVAL,
            rng: Rng | None = None) -> Tensor:
    """Full per-sample probability of the malware class, shape (batch,)."""
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}")
    config, params = bundle.config, bundle.params
    ids = np.asarray(ids_batch)
    if ids.ndim != 2 or ids.shape[1] != config.n:
        raise ShapeMismatch(
            f"ids batch must be (batch, {config.n}), got {ids.shape}")
    x = embed(ids, params["embed"])
    for i, blk in enumerate(config.conv_blocks):
        x = conv1d_relu(x, params[f"conv{i}_w"], params[f"conv{i}_b"])
        x = max_pool(x, blk.pool_window, blk.pool_stride)
    x = bigru(x, gru_direction_params(params, "fwd"), gru_direction_params(params, "bwd"))
    v = flatten(x)
    for i in range(len(config.dense_layers)):
        v = dense_relu_dropout(v, params[f"dense{i}_w"], params[f"dense{i}_b"],
                               config.dropout_rate, mode, rng)
    y = T.sigmoid(T.add(T.matmul(v, params["out_w"]), params["out_b"]))
    y = T.clip(y, PROB_EPS, 1.0 - PROB_EPS)
    return T.reshape(y, (ids.shape[0],))


def predict_proba(bundle: ModelBundle, ids_batch, batch_size: int = 256) -> np.ndarray:
    """Untracked eval-mode probabilities, chunked over the batch."""
    ids = np.asarray(ids_batch)
    chunks = []
    with T.no_grad():
        for start in range(0, ids.shape[0], batch_size):
            chunks.append(forward(bundle, ids[start:start + batch_size], EVAL).data)
    return np.concatenate(chunks) if chunks else np.zeros(0)


# ---------------------------------------------------------------------------
# bundle serialization
# ---------------------------------------------------------------------------

def _bundle_doc(bundle: ModelBundle) -> dict:
    return {
        "format_version": bundle.format_version,
        "config": bundle.config.to_dict(),
        "vocabulary": {"token_to_id": bundle.vocabulary.token_to_id},
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in bundle.params.items()
        },
    }


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    """Single JSON document; floats serialize via repr and round-trip exactly."""
    text = json.dumps(_bundle_doc(bundle), sort_keys=True, indent=1)
    Path(path).write_bytes(text.encode("utf-8"))


def load_bundle(path: str | Path) -> ModelBundle:
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptBundle(f"unreadable bundle: {exc}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CorruptBundle("bundle lacks a format_version")
    if doc["format_version"] != BUNDLE_FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"bundle format {doc['format_version']!r}, expected {BUNDLE_FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(doc["config"])
        vocab = Vocabulary({str(k): int(v) for k, v in doc["vocabulary"]["token_to_id"].items()})
        params: dict[str, Tensor] = {}
        for name, entry in doc["params"].items():
            shape = tuple(int(s) for s in entry["shape"])
            arr = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
            params[name] = Tensor(arr, requires_grad=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptBundle(f"invalid bundle structure: {exc}") from None
    expected = set(param_shapes(config, vocab.size))
    if set(params) != expected:
        raise CorruptBundle("bundle parameter names do not match its config")
    for name, shape in param_shapes(config, vocab.size).items():
        if params[name].shape != shape:
            raise CorruptBundle(f"parameter {name} has shape {params[name].shape}, expected {shape}")
    return ModelBundle(doc["format_version"], config, vocab, params)
