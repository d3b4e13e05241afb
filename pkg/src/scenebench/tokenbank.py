"""Time-aware token selection.

Per-frame features go through slot attention and a single-block Q-former
into a compact per-frame token matrix; a bank of learnable queries first
attends over the text prompt, then over the video tokens whose keys carry
a per-frame timestamp embedding fused featurewise, yielding either a soft
weighted read over all tokens or a hard/manual pick of whole frames.

Timestamps enter as text ("3.5 seconds ago", "now", "in 2.0 seconds")
through a character-level embedding stand-in for a frozen text encoder;
a sinusoidal encoder is kept for the ablation path.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tc
from .tensor import Matrix, MhcaParams, MhcaResult, mhca, seeded_uniform

__all__ = [
    "TokenStack",
    "ProjectedStack",
    "CharTable",
    "SlotAttentionParams",
    "QFormerParams",
    "BankDims",
    "BankParams",
    "SelectionOutput",
    "render_offset",
    "encode_timestamp_textual",
    "encode_timestamp_sinusoidal",
    "encode_prompt",
    "slot_attention",
    "qformer_lite",
    "encode_stack",
    "soft_select",
    "hard_select",
    "manual_select",
    "frame_scores",
]

DEFAULT_TIME_SEED = 7
_CHARSET = string.ascii_lowercase + string.digits + " .-:?"
_POS_CYCLE = 64


def _stack_array(data, dim_name: str) -> np.ndarray:
    arr = np.array(data, dtype=np.float64, copy=True)
    if arr.ndim != 3:
        raise ValueError(f"{dim_name} data must be T x S x d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{dim_name} features must be finite")
    arr.setflags(write=False)
    return arr


def _check_timestamps(timestamps, frames: int) -> tuple[float, ...]:
    ts = tuple(float(t) for t in timestamps)
    if len(ts) != frames:
        raise ValueError(f"got {len(ts)} timestamps for {frames} frames")
    if any(not math.isfinite(t) for t in ts):
        raise ValueError("timestamps must be finite")
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise ValueError("timestamps must be monotone non-decreasing")
    return ts


@dataclass(frozen=True)
class TokenStack:
    """Per-video stack of per-frame token matrices: (T, S, d) plus frame times."""

    data: np.ndarray
    timestamps: tuple[float, ...]

    def __post_init__(self):
        arr = _stack_array(self.data, "stack")
        object.__setattr__(self, "data", arr)
        object.__setattr__(
            self, "timestamps", _check_timestamps(self.timestamps, arr.shape[0])
        )

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def tokens_per_frame(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ProjectedStack:
    """Mirror of a TokenStack after the Q-former projection: (T, S, d')."""

    data: np.ndarray
    timestamps: tuple[float, ...]

    def __post_init__(self):
        arr = _stack_array(self.data, "projected stack")
        object.__setattr__(self, "data", arr)
        object.__setattr__(
            self, "timestamps", _check_timestamps(self.timestamps, arr.shape[0])
        )

    @property
    def frames(self) -> int:
        return self.data.shape[0]


def render_offset(t: float) -> str:
    """Canonical one-decimal rendering of a signed offset from 'now'."""
    if math.isnan(t):
        raise ValueError("timestamp is NaN")
    rounded = round(float(t), 1)
    if rounded == 0.0:
        return "now"
    if rounded > 0:
        return f"in {rounded:.1f} seconds"
    return f"{-rounded:.1f} seconds ago"


@dataclass(frozen=True)
class CharTable:
    """Character-level embedding table with positional modulation; the
    deterministic stand-in for a frozen text encoder. Mean pooling over
    position-modulated character rows keeps distinct canonical strings
    distinct (verified over the strings the artifact emits)."""

    table: np.ndarray
    pos: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float64, copy=True)
        p = np.array(self.pos, dtype=np.float64, copy=True)
        if t.ndim != 2 or p.ndim != 2 or t.shape[1] != p.shape[1]:
            raise ValueError("table and pos must be 2-D with equal width")
        t.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "table", t)
        object.__setattr__(self, "pos", p)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @classmethod
    def create(cls, dim: int, seed: int = DEFAULT_TIME_SEED) -> "CharTable":
        rng = np.random.default_rng(seed)
        table = rng.normal(0.0, 1.0, size=(len(_CHARSET), dim))
        pos = rng.normal(1.0, 0.35, size=(_POS_CYCLE, dim))
        return cls(table=table, pos=pos)

    def embed(self, text: str) -> np.ndarray:
        """Mean of position-modulated character embeddings, shape (1, dim)."""
        if not text:
            raise ValueError("cannot embed an empty string")
        fallback = _CHARSET.index("?")
        rows = []
        for i, ch in enumerate(text.lower()):
            idx = _CHARSET.find(ch)
            if idx < 0:
                idx = fallback
            rows.append(self.table[idx] * self.pos[i % _POS_CYCLE])
        return np.mean(rows, axis=0, keepdims=True)


def encode_timestamp_textual(t: float, table: CharTable) -> np.ndarray:
    """Embed the canonical text rendering of a signed time offset, (1, dim)."""
    return table.embed(render_offset(t))


def encode_timestamp_sinusoidal(t: float, dim: int) -> np.ndarray:
    """Alternating sin/cos over a geometric frequency ladder, (1, dim)."""
    if not math.isfinite(t):
        raise ValueError("timestamp must be finite")
    if dim <= 0:
        raise ValueError("dim must be positive")
    out = np.empty(dim)
    n_pairs = (dim + 1) // 2
    for i in range(n_pairs):
        freq = 1.0 / (10000.0 ** (2.0 * i / dim))
        out[2 * i] = math.sin(t * freq)
        if 2 * i + 1 < dim:
            out[2 * i + 1] = math.cos(t * freq)
    return out.reshape(1, dim)


def encode_prompt(text: str, table: CharTable) -> np.ndarray:
    """Embed each whitespace token of a prompt, shape (L, dim)."""
    tokens = text.split()
    if not tokens:
        raise ValueError("prompt is empty")
    return np.vstack([table.embed(tok) for tok in tokens])


@dataclass(frozen=True)
class SlotAttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    seed: int = 0
    use_layernorm: bool = True

    @classmethod
    def create(cls, dim: int, hidden: int | None = None, seed: int = 0):
        hidden = hidden or 2 * dim
        rng = np.random.default_rng(seed)

        def u(rows, cols, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=(rows, cols))

        return cls(
            wq=u(dim, dim, dim),
            wk=u(dim, dim, dim),
            wv=u(dim, dim, dim),
            w1=u(dim, hidden, dim),
            w2=u(hidden, dim, hidden),
            seed=seed,
        )

    @classmethod
    def identity(cls, dim: int, seed: int = 0):
        """Pass-through configuration: identity projections, zero MLP, no norms."""
        eye = np.eye(dim)
        return cls(
            wq=eye,
            wk=eye,
            wv=eye,
            w1=np.zeros((dim, dim)),
            w2=np.zeros((dim, dim)),
            seed=seed,
            use_layernorm=False,
        )

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.wq": self.wq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.w1": self.w1,
            f"{prefix}.w2": self.w2,
        }


def _ln_rows(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def slot_attention(
    frame_features,
    params: SlotAttentionParams,
    n_slots: int = 32,
    iters: int = 3,
) -> np.ndarray:
    """Iterative slot update: softmax over slots (competition), weighted-mean
    read over inputs, residual MLP on the read. Deterministic for a given
    parameter seed."""
    x = np.asarray(frame_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("frame features must be a non-empty HW x d matrix")
    if n_slots < 1 or iters < 1:
        raise ValueError("n_slots and iters must be >= 1")
    if params.use_layernorm:
        x = _ln_rows(x)
    k = x @ params.wk
    v = x @ params.wv
    d = x.shape[1]
    slots = np.random.default_rng(params.seed).normal(size=(n_slots, d))
    for _ in range(iters):
        s = _ln_rows(slots) if params.use_layernorm else slots
        q = s @ params.wq
        dots = (q @ k.T) / math.sqrt(d)
        # softmax over the slot axis: slots compete for each input token
        z = dots - dots.max(axis=0, keepdims=True)
        attn = np.exp(z)
        attn /= attn.sum(axis=0, keepdims=True)
        # weighted mean over inputs per slot
        attn_n = attn / (attn.sum(axis=1, keepdims=True) + 1e-12)
        reads = attn_n @ v
        slots = reads + np.maximum(reads @ params.w1, 0.0) @ params.w2
    return slots


@dataclass(frozen=True)
class QFormerParams:
    """One cross-attention block plus a feed-forward projection to d'."""

    q_l: Matrix
    attn: MhcaParams
    w1: Matrix
    w2: Matrix

    @classmethod
    def create(cls, d: int, d_prime: int, heads: int, seed: int, n_tokens: int = 32):
        rng = np.random.default_rng(seed)
        q_l = seeded_uniform(rng, n_tokens, d, d)
        attn = MhcaParams.create(
            dq=d, dk=d, dv=d, width=d, d_out=d, heads=heads, seed=seed + 1
        )
        hidden = 2 * d
        w1 = seeded_uniform(rng, d, hidden, d)
        w2 = seeded_uniform(rng, hidden, d_prime, hidden)
        return cls(q_l=q_l, attn=attn, w1=w1, w2=w2)

    def named(self, prefix: str) -> dict[str, Matrix]:
        out = {f"{prefix}.q_l": self.q_l}
        out.update(self.attn.named(f"{prefix}.attn"))
        out[f"{prefix}.w1"] = self.w1
        out[f"{prefix}.w2"] = self.w2
        return out


def qformer_lite(frame_tokens, q_l: Matrix, params: QFormerParams) -> Matrix:
    """Learned queries attend over one frame's tokens, then feed-forward to d'."""
    tokens = frame_tokens if isinstance(frame_tokens, Matrix) else Matrix(frame_tokens)
    h = mhca(q_l, tokens, tokens, params.attn).output
    return tc.matmul(tc.relu(tc.matmul(h, params.w1)), params.w2)


def encode_stack(stack: TokenStack, params: QFormerParams) -> ProjectedStack:
    """Run the Q-former over every frame of a stack."""
    frames = [
        qformer_lite(stack.data[t], params.q_l, params).data
        for t in range(stack.frames)
    ]
    return ProjectedStack(data=np.stack(frames), timestamps=stack.timestamps)


@dataclass(frozen=True)
class BankDims:
    d: int = 64
    d_prime: int = 32
    n_queries: int = 128
    heads: int = 4
    qformer_tokens: int = 32
    n_slots: int = 32

    @property
    def d_time(self) -> int:
        return self.d_prime


@dataclass(frozen=True)
class BankParams:
    """All token-bank parameters; matrices on the gradient tape, the slot
    module and timestamp table as frozen arrays."""

    dims: BankDims
    queries: Matrix
    prompt_attn: MhcaParams
    select_attn: MhcaParams
    qformer: QFormerParams
    slots: SlotAttentionParams
    time_table: CharTable
    seed: int = 0

    @classmethod
    def create(cls, dims: BankDims = BankDims(), seed: int = 0) -> "BankParams":
        rng = np.random.default_rng(seed)
        queries = seeded_uniform(rng, dims.n_queries, dims.d_prime, dims.d_prime)
        prompt_attn = MhcaParams.create(
            dq=dims.d_prime,
            dk=dims.d_prime,
            dv=dims.d_prime,
            width=dims.d_prime,
            d_out=dims.d_prime,
            heads=dims.heads,
            seed=seed + 1,
        )
        select_attn = MhcaParams.create(
            dq=dims.d_prime,
            dk=dims.d_prime + dims.d_time,
            dv=dims.d,
            width=dims.d_prime,
            d_out=dims.d,
            heads=dims.heads,
            seed=seed + 2,
        )
        qformer = QFormerParams.create(
            d=dims.d,
            d_prime=dims.d_prime,
            heads=dims.heads,
            seed=seed + 3,
            n_tokens=dims.qformer_tokens,
        )
        slots = SlotAttentionParams.create(dim=dims.d, seed=seed + 4)
        time_table = CharTable.create(dims.d_time, seed=DEFAULT_TIME_SEED)
        return cls(
            dims=dims,
            queries=queries,
            prompt_attn=prompt_attn,
            select_attn=select_attn,
            qformer=qformer,
            slots=slots,
            time_table=time_table,
            seed=seed,
        )

    def named(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"queries": self.queries.data}
        for name, m in self.prompt_attn.named("prompt_attn").items():
            out[name] = m.data
        for name, m in self.select_attn.named("select_attn").items():
            out[name] = m.data
        for name, m in self.qformer.named("qformer").items():
            out[name] = m.data
        out.update(self.slots.named("slots"))
        out["time_table.table"] = self.time_table.table
        out["time_table.pos"] = self.time_table.pos
        return out

    def tape_parameters(self) -> dict[str, Matrix]:
        """The matrices soft selection differentiates through."""
        out: dict[str, Matrix] = {"queries": self.queries}
        out.update(self.prompt_attn.named("prompt_attn"))
        out.update(self.select_attn.named("select_attn"))
        return out

    def replace_tape_arrays(self, arrays: dict[str, np.ndarray]) -> "BankParams":
        """Rebuild the bank with some tape parameters replaced (used by
        finite-difference checks); untouched tensors are shared."""

        def pick(name: str, current: Matrix) -> Matrix:
            return Matrix(arrays[name]) if name in arrays else current

        def rebuild_attn(prefix: str, attn: MhcaParams) -> MhcaParams:
            return MhcaParams(
                wq=tuple(
                    pick(f"{prefix}.wq{h}", attn.wq[h]) for h in range(attn.heads)
                ),
                wk=tuple(
                    pick(f"{prefix}.wk{h}", attn.wk[h]) for h in range(attn.heads)
                ),
                wv=tuple(
                    pick(f"{prefix}.wv{h}", attn.wv[h]) for h in range(attn.heads)
                ),
                wo=pick(f"{prefix}.wo", attn.wo),
            )

        return BankParams(
            dims=self.dims,
            queries=pick("queries", self.queries),
            prompt_attn=rebuild_attn("prompt_attn", self.prompt_attn),
            select_attn=rebuild_attn("select_attn", self.select_attn),
            qformer=self.qformer,
            slots=self.slots,
            time_table=self.time_table,
            seed=self.seed,
        )

    def save(self, path) -> None:
        """Checkpoint: JSON manifest of named tensors with shapes, plus the seed."""
        tensors = {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in self.named().items()
        }
        doc = {
            "seed": self.seed,
            "dims": {
                "d": self.dims.d,
                "d_prime": self.dims.d_prime,
                "n_queries": self.dims.n_queries,
                "heads": self.dims.heads,
                "qformer_tokens": self.dims.qformer_tokens,
                "n_slots": self.dims.n_slots,
            },
            "slot_seed": self.slots.seed,
            "slot_layernorm": self.slots.use_layernorm,
            "tensors": tensors,
        }
        Path(path).write_text(json.dumps(doc), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BankParams":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        dims = BankDims(**doc["dims"])
        raw = {
            name: np.array(t["data"], dtype=np.float64).reshape(t["shape"])
            for name, t in doc["tensors"].items()
        }

        def attn(prefix: str) -> MhcaParams:
            heads = dims.heads
            return MhcaParams(
                wq=tuple(Matrix(raw[f"{prefix}.wq{h}"]) for h in range(heads)),
                wk=tuple(Matrix(raw[f"{prefix}.wk{h}"]) for h in range(heads)),
                wv=tuple(Matrix(raw[f"{prefix}.wv{h}"]) for h in range(heads)),
                wo=Matrix(raw[f"{prefix}.wo"]),
            )

        qf = QFormerParams(
            q_l=Matrix(raw["qformer.q_l"]),
            attn=attn("qformer.attn"),
            w1=Matrix(raw["qformer.w1"]),
            w2=Matrix(raw["qformer.w2"]),
        )
        slots = SlotAttentionParams(
            wq=raw["slots.wq"],
            wk=raw["slots.wk"],
            wv=raw["slots.wv"],
            w1=raw["slots.w1"],
            w2=raw["slots.w2"],
            seed=doc["slot_seed"],
            use_layernorm=doc["slot_layernorm"],
        )
        return cls(
            dims=dims,
            queries=Matrix(raw["queries"]),
            prompt_attn=attn("prompt_attn"),
            select_attn=attn("select_attn"),
            qformer=qf,
            slots=slots,
            time_table=CharTable(
                table=raw["time_table.table"], pos=raw["time_table.pos"]
            ),
            seed=doc["seed"],
        )


@dataclass(frozen=True)
class SelectionOutput:
    """Result of one selection pass.

    ``selected`` is the n x d soft read or the N x S x d raw token block;
    ``relevance`` is a probability vector over frames in every mode. Soft
    mode also carries the tape node of the read and the attention result
    for gradient work and convexity checks."""

    mode: str
    selected: np.ndarray
    relevance: np.ndarray
    frame_indices: tuple[int, ...] | None = None
    evis: Matrix | None = None
    attention: MhcaResult | None = None


def _as_prompt_matrix(prompt, d_prime: int) -> Matrix:
    m = prompt if isinstance(prompt, Matrix) else Matrix(prompt)
    if m.rows < 1:
        raise ValueError("prompt must have at least one token")
    if m.cols != d_prime:
        raise ValueError(f"prompt width {m.cols} != d' {d_prime}")
    return m


def _check_stacks(stack: TokenStack, projected: ProjectedStack, dims: BankDims):
    if stack.frames == 0:
        raise ValueError("empty stack")
    if projected.frames != stack.frames:
        raise ValueError("projected stack frame count differs from token stack")
    if projected.timestamps != stack.timestamps:
        raise ValueError("projected stack timestamps differ from token stack")
    if stack.dim != dims.d:
        raise ValueError(f"stack dim {stack.dim} != d {dims.d}")
    if projected.data.shape[2] != dims.d_prime:
        raise ValueError(
            f"projected dim {projected.data.shape[2]} != d' {dims.d_prime}"
        )
    if projected.data.shape[1] != stack.tokens_per_frame:
        raise ValueError("projected tokens-per-frame differs from token stack")


def _timestamp_rows(
    bank: BankParams, timestamps, tokens_per_frame: int, encoding: str
) -> np.ndarray:
    now = timestamps[-1]
    rows = []
    for t in timestamps:
        if encoding == "textual":
            emb = encode_timestamp_textual(t - now, bank.time_table)
        elif encoding == "sinusoidal":
            emb = encode_timestamp_sinusoidal(t - now, bank.dims.d_time)
        else:
            raise ValueError(f"unknown timestamp encoding: {encoding!r}")
        rows.append(np.repeat(emb, tokens_per_frame, axis=0))
    return np.vstack(rows)


def soft_select(
    bank: BankParams,
    prompt,
    stack: TokenStack,
    projected: ProjectedStack,
    timestamp_encoding: str = "textual",
) -> SelectionOutput:
    """Differentiable weighted read over all frame tokens.

    The learnable queries attend over the prompt to give q_mid; q_mid then
    attends over keys built by concatenating each projected token with its
    frame's timestamp embedding featurewise (key count stays T*S and so
    matches the raw-token values). Per-frame relevance is the mean
    attention mass each frame's tokens receive, a distribution over frames.
    """
    _check_stacks(stack, projected, bank.dims)
    prompt_m = _as_prompt_matrix(prompt, bank.dims.d_prime)
    t_frames, s_tokens, _ = stack.data.shape

    q_mid = mhca(bank.queries, prompt_m, prompt_m, bank.prompt_attn).output
    flat_proj = projected.data.reshape(t_frames * s_tokens, bank.dims.d_prime)
    ts_rows = _timestamp_rows(bank, stack.timestamps, s_tokens, timestamp_encoding)
    keys = Matrix(np.concatenate([flat_proj, ts_rows], axis=1))
    values = Matrix(stack.data.reshape(t_frames * s_tokens, bank.dims.d))

    res = mhca(q_mid, keys, values, bank.select_attn)
    weight_mean = np.mean([w.data for w in res.weights], axis=0)
    key_mass = weight_mean.mean(axis=0)
    relevance = key_mass.reshape(t_frames, s_tokens).sum(axis=1)
    return SelectionOutput(
        mode="soft",
        selected=res.output.data,
        relevance=relevance,
        evis=res.output,
        attention=res,
    )


def frame_scores(query: np.ndarray, projected: ProjectedStack) -> np.ndarray:
    """Scaled query/token similarity average-pooled over queries and each
    frame's tokens; prompt-independent queries make this a function of the
    stack alone."""
    q = np.asarray(query, dtype=np.float64)
    t_frames, s_tokens, d_prime = projected.data.shape
    flat = projected.data.reshape(t_frames * s_tokens, d_prime)
    sims = (q @ flat.T) / math.sqrt(d_prime)
    return sims.mean(axis=0).reshape(t_frames, s_tokens).mean(axis=1)


def _softmax_1d(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def hard_select(
    bank: BankParams,
    prompt,
    stack: TokenStack,
    projected: ProjectedStack,
    n_frames: int,
) -> SelectionOutput:
    """Pick the raw tokens of the top-N frames by pooled prompt similarity,
    descending score, earlier frame first on ties."""
    _check_stacks(stack, projected, bank.dims)
    if n_frames <= 0:
        raise ValueError("n_frames must be >= 1")
    if n_frames > stack.frames:
        raise ValueError(f"n_frames {n_frames} exceeds stack frames {stack.frames}")
    prompt_m = _as_prompt_matrix(prompt, bank.dims.d_prime)
    q = mhca(bank.queries, prompt_m, prompt_m, bank.prompt_attn).output.data
    scores = frame_scores(q, projected)
    order = np.argsort(-scores, kind="stable")
    chosen = tuple(int(i) for i in order[:n_frames])
    return SelectionOutput(
        mode="hard",
        selected=stack.data[list(chosen)],
        relevance=_softmax_1d(scores),
        frame_indices=chosen,
    )


def manual_select(
    stack: TokenStack, gt_timestamps, n_frames: int | None = None
) -> SelectionOutput:
    """Pick, per ground-truth timestamp, the frame closest in time (earlier
    frame on ties)."""
    if stack.frames == 0:
        raise ValueError("empty stack")
    ts = list(gt_timestamps)
    if not ts:
        raise ValueError("gt_timestamps must be non-empty")
    if n_frames is not None and n_frames != len(ts):
        raise ValueError("n_frames must equal the number of ground-truth timestamps")
    chosen = []
    for t in ts:
        idx = min(range(stack.frames), key=lambda i: (abs(stack.timestamps[i] - t), i))
        chosen.append(idx)
    counts = np.bincount(chosen, minlength=stack.frames).astype(np.float64)
    return SelectionOutput(
        mode="manual",
        selected=stack.data[chosen],
        relevance=counts / counts.sum(),
        frame_indices=tuple(chosen),
    )
