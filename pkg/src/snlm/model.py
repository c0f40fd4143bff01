"""The parametric scorer: word score = output_embedding . context + bias.

Contexts come from a 2-layer LSTM over the preceding words. Output biases
start at -log(vocab size) so the model is approximately self-normalized
from the first step. Checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .corpus import Vocabulary
from .numerics import Tape, Tensor, logsumexp, sigmoid

__all__ = [
    "LstmLayer",
    "EncoderState",
    "LanguageModel",
    "encode",
    "score",
    "log_partition",
    "raw_scores",
    "save",
    "load",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
]

MAGIC = b"SNLM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class LstmLayer:
    """One LSTM layer; gates are packed [input, forget, candidate, output]."""

    w: Tensor  # (input_dim + hidden, 4 * hidden)
    b: Tensor  # (4 * hidden,)


@dataclass
class EncoderState:
    """Per-layer hidden and cell arrays, one row per batch lane.

    Carried across unroll windows without reset; plain numpy arrays, so
    gradients never flow across window boundaries (truncated BPTT).
    """

    h: list[np.ndarray]
    c: list[np.ndarray]

    @classmethod
    def zeros(cls, model: "LanguageModel", batch_size: int) -> "EncoderState":
        d = model.dim
        n = len(model.layers)
        return cls(
            h=[np.zeros((batch_size, d)) for _ in range(n)],
            c=[np.zeros((batch_size, d)) for _ in range(n)],
        )


@dataclass
class LanguageModel:
    """Embedding tables, LSTM layers, and the output bias."""

    dim: int
    dropout: float
    embed_in: Tensor  # (V, d)
    layers: list[LstmLayer]
    embed_out: Tensor  # (V, d)
    bias_out: Tensor  # (V,)

    @property
    def vocab_size(self) -> int:
        return self.embed_out.values.shape[0]

    def parameters(self) -> list[Tensor]:
        params = [self.embed_in]
        for layer in self.layers:
            params.extend((layer.w, layer.b))
        params.extend((self.embed_out, self.bias_out))
        return params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [("embed_in", self.embed_in)]
        for i, layer in enumerate(self.layers):
            named.append((f"lstm{i}_w", layer.w))
            named.append((f"lstm{i}_b", layer.b))
        named.append(("embed_out", self.embed_out))
        named.append(("bias_out", self.bias_out))
        return named

    @classmethod
    def create(
        cls,
        vocab_size: int,
        dim: int,
        rng: np.random.Generator,
        dropout: float = 0.5,
        n_layers: int = 2,
        init_scale: float = 0.05,
        zero_output_embeddings: bool = False,
    ) -> "LanguageModel":
        """Fresh model: uniform(-init_scale, init_scale) weights, zero LSTM
        biases, and output bias -log(vocab_size) for every word."""

        def uniform(*shape):
            return Tensor(rng.uniform(-init_scale, init_scale, shape))

        layers = []
        for _ in range(n_layers):
            layers.append(
                LstmLayer(w=uniform(2 * dim, 4 * dim), b=Tensor(np.zeros(4 * dim)))
            )
        embed_out = Tensor(np.zeros((vocab_size, dim))) if zero_output_embeddings else uniform(vocab_size, dim)
        return cls(
            dim=dim,
            dropout=float(dropout),
            embed_in=uniform(vocab_size, dim),
            layers=layers,
            embed_out=embed_out,
            bias_out=Tensor(np.full(vocab_size, -np.log(vocab_size))),
        )


def lstm_cell(
    tape: Tape, x: Tensor, h_prev: Tensor, c_prev: Tensor, layer: LstmLayer
) -> tuple[Tensor, Tensor]:
    """One LSTM step as a single fused tape record.

    The cell's backward is closed-form, so the whole step costs one
    record instead of a dozen; that matters because the training loop is
    dominated by per-record overhead at small widths. Gradients flow into
    x, h_prev, c_prev, and the layer parameters. The new cell tensor is
    a plain input to the following step; its gradient is read back when
    this record replays (the following step replays first).
    """
    xv, hv, cv = x.values, h_prev.values, c_prev.values
    d = hv.shape[1]
    z = np.concatenate((xv, hv), axis=1)
    pre = z @ layer.w.values + layer.b.values
    i_gate = sigmoid(pre[:, :d])
    f_gate = sigmoid(pre[:, d : 2 * d])
    g_cand = np.tanh(pre[:, 2 * d : 3 * d])
    o_gate = sigmoid(pre[:, 3 * d :])
    c_new_v = f_gate * cv + i_gate * g_cand
    tanh_c = np.tanh(c_new_v)
    c_new = Tensor(c_new_v)
    if not tape.grad_enabled:
        return Tensor(o_gate * tanh_c), c_new

    w = layer.w
    b = layer.b
    n_in = xv.shape[1]

    def pull(gh):
        gc_total = gh * (o_gate * (1.0 - tanh_c * tanh_c))
        if c_new.grad is not None:
            gc_total = gc_total + c_new.grad
        go = gh * tanh_c
        gpre = np.concatenate(
            (
                (gc_total * g_cand) * i_gate * (1.0 - i_gate),
                (gc_total * cv) * f_gate * (1.0 - f_gate),
                (gc_total * i_gate) * (1.0 - g_cand * g_cand),
                go * o_gate * (1.0 - o_gate),
            ),
            axis=1,
        )
        w.add_grad(z.T @ gpre)
        b.add_grad(gpre.sum(axis=0))
        gz = gpre @ w.values.T
        x.add_grad(gz[:, :n_in])
        h_prev.add_grad(gz[:, n_in:])
        c_prev.add_grad(gc_total * f_gate)

    h_new = tape.emit(o_gate * tanh_c, pull)
    return h_new, c_new


def encode(
    model: LanguageModel,
    state: EncoderState,
    ids: np.ndarray,
    tape: Tape,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, EncoderState]:
    """Run the LSTM over a (batch, steps) window of input ids.

    Returns the top-layer context vectors stacked as a (steps*batch, d)
    tensor in step-major row order (row t*batch + lane), plus the detached
    state after the final step. Dropout applies to layer inputs and the
    top output only, never to recurrent connections, scaled at train time
    so evaluation needs no rescale.
    """
    batch, steps = ids.shape
    d = model.dim
    if state.h[0].shape != (batch, d):
        raise ValueError(f"state shaped {state.h[0].shape}, expected {(batch, d)}")
    rate = model.dropout if train else 0.0
    if rate > 0.0 and rng is None:
        raise ValueError("training with dropout requires an rng")

    hs = [Tensor(h) for h in state.h]
    cs = [Tensor(c) for c in state.c]
    tops = []
    for t in range(steps):
        x = tape.lookup(model.embed_in, ids[:, t])
        for layer_idx, layer in enumerate(model.layers):
            x = tape.dropout(x, rate, rng)
            h_new, c_new = lstm_cell(tape, x, hs[layer_idx], cs[layer_idx], layer)
            cs[layer_idx], hs[layer_idx] = c_new, h_new
            x = h_new
        tops.append(tape.dropout(x, rate, rng))
    contexts = tape.concat_rows(tops)
    new_state = EncoderState(
        h=[np.array(h.values) for h in hs],
        c=[np.array(c.values) for c in cs],
    )
    return contexts, new_state


def flatten_targets(targets: np.ndarray) -> np.ndarray:
    """Flatten a (batch, steps) target window to match encode's row order."""
    return np.ascontiguousarray(targets.T).reshape(-1)


def score(model: LanguageModel, context: np.ndarray, w: int) -> float:
    """Raw score of word w in a context: embedding dot product plus bias."""
    return float(model.embed_out.values[w] @ np.asarray(context) + model.bias_out.values[w])


def raw_scores(model: LanguageModel, contexts: np.ndarray) -> np.ndarray:
    """Score every vocabulary word for each context row: (N, V)."""
    return np.asarray(contexts) @ model.embed_out.values.T + model.bias_out.values


def log_partition(model: LanguageModel, context: np.ndarray) -> float:
    """log of the partition sum over the whole vocabulary for one context."""
    return logsumexp(model.embed_out.values @ np.asarray(context) + model.bias_out.values)


# ---- checkpoint format ------------------------------------------------
#
# magic 'SNLM' | version u32 | V u32 | d u32 | layers u32 | dropout f64
# V x (len u32, utf-8 word) | unigram V x f64
# sections until EOF: name_len u32 | name | rank u32 | dims u32 x rank | f64 data
# All integers little-endian. A 'shift' section (rank 0) stores a score
# offset measured by the shift diagnostic.


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(f"expected {n} bytes, got {len(data)}")
    return data


def _write_section(f, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def _read_sections(f) -> dict[str, np.ndarray]:
    sections = {}
    while True:
        head = f.read(4)
        if head == b"":
            return sections
        if len(head) != 4:
            raise CheckpointTruncatedError("truncated section header")
        (name_len,) = struct.unpack("<I", head)
        name = _read_exact(f, name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(f, 4))
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(dims)
        sections[name] = np.array(data)  # own, writable copy


def save(model, vocab: Vocabulary, path) -> None:
    """Write a checkpoint; accepts a LanguageModel or a shifted wrapper."""
    shift_value = float(getattr(model, "shift", 0.0))
    base: LanguageModel = getattr(model, "base", model)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(
            struct.pack(
                "<IIIId",
                FORMAT_VERSION,
                base.vocab_size,
                base.dim,
                len(base.layers),
                base.dropout,
            )
        )
        for word in vocab.words:
            encoded = word.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
        f.write(np.ascontiguousarray(vocab.unigram, dtype=np.float64).tobytes())
        for name, tensor in base.named_parameters():
            _write_section(f, name, tensor.values)
        if shift_value != 0.0:
            _write_section(f, "shift", np.array(shift_value))


def load(path):
    """Read a checkpoint back; returns (model, vocab).

    The model is a ShiftedModel wrapper when the file carries a nonzero
    score shift, otherwise a plain LanguageModel. Round trip is bit-exact.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}")
        version, v_size, dim, n_layers, dropout = struct.unpack("<IIIId", _read_exact(f, 24))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"unsupported version {version}")
        words = []
        for _ in range(v_size):
            (n,) = struct.unpack("<I", _read_exact(f, 4))
            words.append(_read_exact(f, n).decode("utf-8"))
        unigram = np.array(
            np.frombuffer(_read_exact(f, 8 * v_size), dtype="<f8")
        )
        sections = _read_sections(f)

    vocab = Vocabulary(words=words, unigram=unigram)
    expected = ["embed_in"]
    for i in range(n_layers):
        expected.extend((f"lstm{i}_w", f"lstm{i}_b"))
    expected.extend(("embed_out", "bias_out"))
    missing = [name for name in expected if name not in sections]
    if missing:
        raise CheckpointError(f"missing parameter sections: {missing}")
    shapes = {
        "embed_in": (v_size, dim),
        "embed_out": (v_size, dim),
        "bias_out": (v_size,),
    }
    for i in range(n_layers):
        shapes[f"lstm{i}_w"] = (2 * dim, 4 * dim)
        shapes[f"lstm{i}_b"] = (4 * dim,)
    for name, shape in shapes.items():
        if sections[name].shape != shape:
            raise CheckpointError(f"section {name} shaped {sections[name].shape}, expected {shape}")
        if not np.all(np.isfinite(sections[name])):
            raise CheckpointError(f"section {name} contains non-finite values")
    model = LanguageModel(
        dim=dim,
        dropout=dropout,
        embed_in=Tensor(sections["embed_in"]),
        layers=[
            LstmLayer(w=Tensor(sections[f"lstm{i}_w"]), b=Tensor(sections[f"lstm{i}_b"]))
            for i in range(n_layers)
        ],
        embed_out=Tensor(sections["embed_out"]),
        bias_out=Tensor(sections["bias_out"]),
    )
    shift_value = float(sections["shift"]) if "shift" in sections else 0.0
    if shift_value != 0.0:
        from .diagnostics import ShiftedModel

        return ShiftedModel(base=model, shift=shift_value), vocab
    return model, vocab
