"""Constructors emitting exact transformer weights for structured tokens.

Structured tokens fix ``d_embd = 5``: rows 1-2 carry mutable data, rows
3-4 carry the unit interaction term ``I_t = (cos(t pi/2l), sin(t pi/2l))``
identifying the token position, and row 5 is the constant 1.

The central primitive is the interaction head: an attention head whose
interaction kernels add a large constant ``C`` at exactly one (query, key)
token pair and at least ``C (1 - cos(pi/2l))`` less everywhere else, so
after subtracting ``C`` the ReLU passes only the designated pair's data
payload and hard-zeroes every other score. All higher constructions
(gating nets, constant addition, trapezoid bumps, parallelization) reduce
to interaction heads plus tokenwise feed-forward updates compiled from a
small band-op language.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoundViolationError,
    DimensionError,
    ParameterError,
    UnsupportedBlockError,
)
from .runtime import (
    AttentionHead,
    FeedForward,
    FfnTag,
    InteractionTag,
    TransformerBlock,
)

__all__ = [
    "D_EMBD",
    "StructuredLayout",
    "DataKernelPair",
    "make_interaction_head",
    "make_gating_ffn",
    "make_psi_ffn",
    "make_replace_ffn",
    "make_addition_block",
    "parallelize_blocks",
    "psi",
    "compile_ffn_program",
    "op_trapezoid",
    "op_affine",
    "op_swap",
    "op_ramp",
]

D_EMBD = 5
DATA_ROWS = (0, 1)
INTER_ROWS = (2, 3)
CONST_ROW = 4


def one_minus_cos_step(l: int) -> float:
    """1 - cos(pi/(2l)) computed without cancellation."""
    return 2.0 * math.sin(math.pi / (4.0 * l)) ** 2


@dataclass(frozen=True)
class StructuredLayout:
    """Token bookkeeping for structured embedding matrices.

    ``magnitude_bound`` is the current analytic bound on the absolute
    value of data-row entries; constructors propagate it so gating
    constants stay as small as correctness allows.
    """

    l: int
    magnitude_bound: float = 1.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.l < 1:
            raise ParameterError("token count must be positive")
        if self.magnitude_bound <= 0:
            raise ParameterError("magnitude bound must be positive")

    @property
    def m_eff(self) -> float:
        # The constant row is 1, so payload bounds never drop below 1.
        return max(self.magnitude_bound, 1.0)

    def angles(self) -> np.ndarray:
        out = self._cache.get("angles")
        if out is None:
            t = np.arange(1, self.l + 1, dtype=float)
            out = t * (math.pi / 2.0) / self.l
            out.setflags(write=False)
            self._cache["angles"] = out
        return out

    def interaction_terms(self) -> np.ndarray:
        """(2, l) matrix of unit interaction vectors."""
        out = self._cache.get("terms")
        if out is None:
            a = self.angles()
            out = np.vstack([np.cos(a), np.sin(a)])
            out.setflags(write=False)
            self._cache["terms"] = out
        return out

    def positional(self) -> np.ndarray:
        """(5, l) positional matrix: zero data, interaction rows, ones."""
        P = np.zeros((D_EMBD, self.l))
        P[2:4, :] = self.interaction_terms()
        P[4, :] = 1.0
        return P

    def with_bound(self, m: float) -> "StructuredLayout":
        return StructuredLayout(self.l, m)

    def with_tokens(self, l: int) -> "StructuredLayout":
        return StructuredLayout(l, self.magnitude_bound)


@dataclass(frozen=True)
class DataKernelPair:
    """The 2 x 5 query/key data kernels of an interaction head."""

    QB: np.ndarray
    KB: np.ndarray

    def __post_init__(self):
        QB = np.ascontiguousarray(np.asarray(self.QB, dtype=float))
        KB = np.ascontiguousarray(np.asarray(self.KB, dtype=float))
        for name, m in (("QB", QB), ("KB", KB)):
            if m.shape != (2, D_EMBD):
                raise DimensionError(f"{name} must be 2x{D_EMBD}, got {m.shape}")
        QB.setflags(write=False)
        KB.setflags(write=False)
        object.__setattr__(self, "QB", QB)
        object.__setattr__(self, "KB", KB)

    @property
    def kappa(self) -> float:
        return float(max(np.max(np.abs(self.QB)), np.max(np.abs(self.KB))))


def _payload_bound(kernels: DataKernelPair, m_eff: float) -> float:
    """Tight bound on |<QB h, KB h'>| over structured tokens."""
    caps = np.array([m_eff, m_eff, 1.0, 1.0, 1.0])
    qrow = np.abs(kernels.QB) @ caps
    krow = np.abs(kernels.KB) @ caps
    return float(qrow @ krow)


def make_interaction_head(
    t1: int,
    t2: int,
    out_row: int,
    kernels: DataKernelPair,
    layout: StructuredLayout,
    scale: float = 1.0,
) -> tuple[AttentionHead, float]:
    """Build a head writing ``scale * relu(<QB h_t1, KB h_t2>) e_out_row``.

    Tokens and rows are 1-based. On any structured embedding matrix whose
    data rows stay within the layout bound, every column other than ``t1``
    receives exactly zero. Returns the head and its cancellation constant.
    """
    l = layout.l
    if l < 1:
        raise ParameterError("layout has no tokens")
    if not (1 <= t1 <= l and 1 <= t2 <= l):
        raise ParameterError(f"token indices must lie in 1..{l}")
    if not (1 <= out_row <= D_EMBD):
        raise ParameterError(f"output row must lie in 1..{D_EMBD}")
    kappa = kernels.kappa
    m = layout.m_eff
    if kappa < 0 or m <= 0:
        raise ParameterError("kernel bound and magnitude bound must be positive")

    gap = one_minus_cos_step(l) if l > 1 else 1.0
    C = 2.0 * D_EMBD**4 * max(kappa, 1.0) ** 2 * m**2 / gap + 1.0
    payload = _payload_bound(kernels, m)
    # The formula above leaves well over a 20x margin; keep a hard check.
    if C * gap <= 1.05 * payload:
        raise ParameterError("cancellation constant does not dominate the payload")

    terms = layout.interaction_terms()
    i1 = terms[:, t1 - 1]
    i2 = terms[:, t2 - 1]

    Q = np.zeros((D_EMBD, D_EMBD))
    K = np.zeros((D_EMBD, D_EMBD))
    Q[0:2, :] = kernels.QB
    K[0:2, :] = kernels.KB
    # Rank-one interaction kernels: the gate term is C <I_t1, I_t> <I_t2, I_k>,
    # equal to C exactly at the target pair and at most C cos(pi/2l) elsewhere.
    Q[2, 2:4] = C * i1
    K[2, 2:4] = i2
    Q[4, 4] = 1.0
    K[4, 4] = -C
    V = np.zeros((D_EMBD, D_EMBD))
    V[out_row - 1, CONST_ROW] = scale

    tag = InteractionTag(
        t1=t1,
        t2=t2,
        out_row=out_row,
        scale=float(scale),
        qb=kernels.QB,
        kb=kernels.KB,
        cancellation=C,
        payload_bound=payload,
        data_bound=layout.magnitude_bound,
    )
    return AttentionHead(Q=Q, K=K, V=V, tag=tag), C


def interaction_heads(
    specs: list[tuple[int, int, int, DataKernelPair, float]],
    layout: StructuredLayout,
) -> tuple[list[AttentionHead], float]:
    """Vectorized batch form of make_interaction_head (identical weights).

    Returns the heads plus the largest cancellation constant used.
    """
    if not specs:
        return [], 0.0
    m = len(specs)
    l = layout.l
    t1 = np.array([s[0] for s in specs], dtype=np.intp)
    t2 = np.array([s[1] for s in specs], dtype=np.intp)
    rows = np.array([s[2] for s in specs], dtype=np.intp)
    scales = np.array([s[4] for s in specs], dtype=float)
    if np.any(t1 < 1) or np.any(t1 > l) or np.any(t2 < 1) or np.any(t2 > l):
        raise ParameterError(f"token indices must lie in 1..{l}")
    if np.any(rows < 1) or np.any(rows > D_EMBD):
        raise ParameterError(f"output rows must lie in 1..{D_EMBD}")
    qb = np.stack([s[3].QB for s in specs])
    kb = np.stack([s[3].KB for s in specs])
    kappa = np.maximum(np.abs(qb).max(axis=(1, 2)), np.abs(kb).max(axis=(1, 2)))
    m_eff = layout.m_eff
    gap = one_minus_cos_step(l) if l > 1 else 1.0
    C = 2.0 * D_EMBD**4 * np.maximum(kappa, 1.0) ** 2 * m_eff**2 / gap + 1.0
    caps = np.array([m_eff, m_eff, 1.0, 1.0, 1.0])
    payload = np.sum((np.abs(qb) @ caps) * (np.abs(kb) @ caps), axis=1)
    if np.any(C * gap <= 1.05 * payload):
        raise ParameterError("cancellation constant does not dominate the payload")

    terms = layout.interaction_terms()
    i1 = terms[:, t1 - 1]
    i2 = terms[:, t2 - 1]
    Q = np.zeros((m, D_EMBD, D_EMBD))
    K = np.zeros((m, D_EMBD, D_EMBD))
    V = np.zeros((m, D_EMBD, D_EMBD))
    Q[:, 0:2, :] = qb
    K[:, 0:2, :] = kb
    Q[:, 2, 2] = C * i1[0]
    Q[:, 2, 3] = C * i1[1]
    K[:, 2, 2] = i2[0]
    K[:, 2, 3] = i2[1]
    Q[:, 4, 4] = 1.0
    K[:, 4, 4] = -C
    V[np.arange(m), rows - 1, CONST_ROW] = scales
    for arr in (Q, K, V, qb, kb):
        arr.setflags(write=False)
    heads = []
    for idx in range(m):
        tag = InteractionTag(
            t1=int(t1[idx]),
            t2=int(t2[idx]),
            out_row=int(rows[idx]),
            scale=float(scales[idx]),
            qb=qb[idx],
            kb=kb[idx],
            cancellation=float(C[idx]),
            payload_bound=float(payload[idx]),
            data_bound=layout.magnitude_bound,
        )
        heads.append(AttentionHead(Q=Q[idx], K=K[idx], V=V[idx], tag=tag))
    return heads, float(np.max(C))


def read_value_kernels(row: int, bias: float = 0.0) -> DataKernelPair:
    """Kernels whose payload is (key token's data row ``row``) + bias."""
    qb = np.zeros((2, D_EMBD))
    qb[0, 4] = 1.0
    kb = np.zeros((2, D_EMBD))
    kb[0, row - 1] = 1.0
    if bias:
        qb[1, 4] = 1.0
        kb[1, 4] = bias
    return DataKernelPair(qb, kb)


def const_kernels(value: float) -> DataKernelPair:
    """Kernels whose payload is the constant ``value`` (must be >= 0)."""
    qb = np.zeros((2, D_EMBD))
    qb[0, 4] = 1.0
    kb = np.zeros((2, D_EMBD))
    kb[0, 4] = value
    return DataKernelPair(qb, kb)


def subtract_value_specs(
    t1: int, t2: int, src_row: int, out_row: int, bound: float
) -> list[tuple[int, int, int, DataKernelPair, float]]:
    """Head-pair specs adding ``-(h_t2^src_row)`` to ``out_row`` of token t1.

    Works for values of either sign with |value| <= bound:
    -relu(v + bound) + relu(bound) = -v.
    """
    return [
        (t1, t2, out_row, read_value_kernels(src_row, bound), -1.0),
        (t1, t1, out_row, const_kernels(bound), 1.0),
    ]


# ---------------------------------------------------------------------------
# trapezoid bump
# ---------------------------------------------------------------------------


def psi(u):
    """Trapezoid bump: 1 on |u|<=1, 2-|u| on 1<=|u|<=2, 0 beyond."""
    u = np.abs(np.asarray(u, dtype=float))
    return np.clip(2.0 - u, 0.0, 1.0)


def make_psi_ffn() -> FeedForward:
    """Two-layer net applying the trapezoid bump to row 1 of each token.

    Output row 1 holds psi(u) where u is the input's row 1; all other
    output rows are zero. Realized as
    relu(u+2) - relu(u+1) - relu(u-1) + relu(u-2).
    """
    W1 = np.zeros((4, D_EMBD))
    W1[:, 0] = 1.0
    b1 = np.array([2.0, 1.0, -1.0, -2.0])
    W2 = np.zeros((D_EMBD, 4))
    W2[0, :] = [1.0, -1.0, -1.0, 1.0]
    b2 = np.zeros(D_EMBD)
    return FeedForward(layers=((W1, b1), (W2, b2)))


def make_replace_ffn() -> FeedForward:
    """One linear layer emitting (-h1+h2, -h2, 0, 0, 0) per token.

    Added residually this swaps the first data row for the second and
    zeroes the second.
    """
    W = np.zeros((D_EMBD, D_EMBD))
    W[0, 0] = -1.0
    W[0, 1] = 1.0
    W[1, 1] = -1.0
    return FeedForward(layers=((W, np.zeros(D_EMBD)),))


# ---------------------------------------------------------------------------
# halfspace pivots and the gating net
# ---------------------------------------------------------------------------


def _pivot_vector(layout: StructuredLayout, k: int, keep: str) -> tuple[np.ndarray, float]:
    """Unit vector with I_t . v > 0 exactly on the kept side of pivot k.

    ``keep='prefix'`` keeps tokens 1..k, ``'suffix'`` keeps k+1..l. Returns
    the vector and the minimum |I_t . v| over all tokens.
    """
    l = layout.l
    if not (1 <= k < l):
        raise ParameterError(f"pivot must satisfy 1 <= k < l, got k={k}, l={l}")
    terms = layout.interaction_terms()
    mid = terms[:, k - 1] + terms[:, k]
    mid /= np.linalg.norm(mid)
    v = np.array([mid[1], -mid[0]])  # quarter-turn of the bisector
    dots = v @ terms
    if dots[k - 1] < 0:
        v = -v
        dots = -dots
    if keep == "suffix":
        v = -v
        dots = -dots
    elif keep != "prefix":
        raise ParameterError("keep side must be 'prefix' or 'suffix'")
    min_abs = float(np.min(np.abs(dots)))
    if min_abs <= 0.0:
        raise ParameterError("degenerate pivot: a token sits on the separating line")
    return v, min_abs


def make_gating_ffn(pivot: int, keep_side: str, layout: StructuredLayout) -> FeedForward:
    """Two-layer gating net: kept tokens pass through, others lose their data.

    Kept tokens map to themselves; dropped tokens map to (0, 0, I_t, 1).
    The gate constant is 16 l M / pi, twice the tightness the pivot
    geometry requires.
    """
    if layout.l < 2:
        raise ParameterError("gating needs at least two tokens")
    v, min_abs = _pivot_vector(layout, pivot, keep_side)
    M = layout.m_eff
    C = 16.0 * layout.l * M / math.pi
    if C * min_abs < M:
        # Cannot happen for the sinusoidal terms, but guard the invariant.
        raise ParameterError("gate constant fails to dominate the data bound")
    shift = C * v
    W1 = np.zeros((6, D_EMBD))
    b1 = np.zeros(6)
    # z1 = relu(h1 + C I.v), z2 = relu(h2 + C I.v), z3 = relu(C I.v)
    W1[0, 0] = 1.0
    W1[0, 2:4] = shift
    W1[1, 1] = 1.0
    W1[1, 2:4] = shift
    W1[2, 2:4] = shift
    W1[3, 2] = 1.0
    W1[4, 3] = 1.0
    W1[5, 4] = 1.0
    W2 = np.zeros((D_EMBD, 6))
    b2 = np.zeros(D_EMBD)
    W2[0, 0] = 1.0
    W2[0, 2] = -1.0
    W2[1, 1] = 1.0
    W2[1, 2] = -1.0
    W2[2, 3] = 1.0
    W2[3, 4] = 1.0
    W2[4, 5] = 1.0
    return FeedForward(layers=((W1, b1), (W2, b2)))


# ---------------------------------------------------------------------------
# band-op programs -> compiled tokenwise nets
#
# Each op updates the data rows of a contiguous 1-based token band and is
# exactly zero outside it (residual semantics: block adds the output).
# Ops are plain dicts so programs serialize and re-target under new
# layouts (parallelization re-compiles them with shifted bands).
# ---------------------------------------------------------------------------


def op_trapezoid(lo: int, hi: int, gain: float) -> dict:
    """row1 += psi(gain*(row2-1)); row2 -= row2.  Self-neutral off band:
    valid only when off-band tokens have row2 == 0 and gain >= 3."""
    return {"op": "trapezoid", "lo": lo, "hi": hi, "gain": gain}


def op_affine(lo: int, hi: int, a: float, b: float) -> dict:
    """row1 <- a*row1 + b on the band (gated, zero elsewhere)."""
    return {"op": "affine", "lo": lo, "hi": hi, "a": a, "b": b}


def op_swap(lo: int, hi: int) -> dict:
    """row1 <- row2, row2 <- 0 on the band (gated)."""
    return {"op": "swap", "lo": lo, "hi": hi}


def op_ramp(lo: int, hi: int, r2: float, delta: float, depth: int | None = None) -> dict:
    """row1 <- ramp(row1) on the band: 1 below r2-delta, 0 above r2,
    linear in between; realized with per-layer factors (1/delta)^(1/L)."""
    d = {"op": "ramp", "lo": lo, "hi": hi, "r2": r2, "delta": delta}
    if depth is not None:
        d["depth"] = depth
    return d


class _Builder:
    """Schedules hidden units into ReLU layers and materializes matrices."""

    def __init__(self):
        self.layers: list[list[tuple[dict, float]]] = []
        self.pass_cache: dict = {}
        self.final: list[dict] = [dict() for _ in range(D_EMBD)]

    def unit(self, layer: int, terms: dict, bias: float):
        while len(self.layers) <= layer:
            self.layers.append([])
        self.layers[layer].append((dict(terms), float(bias)))
        return (layer, len(self.layers[layer]) - 1)

    def carry(self, handle, layer: int):
        h = handle
        while h[0] < layer:
            nxt = self.pass_cache.get((h, h[0] + 1))
            if nxt is None:
                nxt = self.unit(h[0] + 1, {h: 1.0}, 0.0)
                self.pass_cache[(h, h[0] + 1)] = nxt
            h = nxt
        return h

    def add_final(self, row: int, handle, coeff: float):
        self.final[row][handle] = self.final[row].get(handle, 0.0) + coeff

    def materialize(self, min_layers: int | None = None) -> tuple:
        n_hidden = len(self.layers)
        if min_layers is not None:
            while n_hidden + 1 < min_layers:
                for idx in range(len(self.layers[n_hidden - 1])):
                    self.carry((n_hidden - 1, idx), n_hidden)
                n_hidden = len(self.layers)
        last = n_hidden - 1
        final = [
            {self.carry(h, last): c for h, c in row.items()} for row in self.final
        ]
        mats = []
        for li, rows in enumerate(self.layers):
            if not rows:
                raise ParameterError("internal: empty hidden layer in ffn program")
            in_dim = D_EMBD if li == 0 else len(self.layers[li - 1])
            W = np.zeros((len(rows), in_dim))
            b = np.zeros(len(rows))
            for ri, (terms, bias) in enumerate(rows):
                b[ri] = bias
                for key, coeff in terms.items():
                    if key[0] == "in":
                        if li != 0:
                            raise ParameterError("internal: raw input read above layer 0")
                        W[ri, key[1]] = coeff
                    else:
                        if key[0] != li - 1:
                            raise ParameterError("internal: unit reads a non-adjacent layer")
                        W[ri, key[1]] = coeff
            mats.append((W, b))
        Wf = np.zeros((D_EMBD, len(self.layers[last])))
        for row, terms in enumerate(final):
            for h, c in terms.items():
                Wf[row, h[1]] = c
        mats.append((Wf, np.zeros(D_EMBD)))
        return tuple(mats)


def _in(col: int):
    return ("in", col)


class _GateContext:
    """Shared interaction-row passes plus gate bookkeeping for a program."""

    def __init__(self, builder: _Builder, layout: StructuredLayout):
        self.b = builder
        self.layout = layout
        self.p_handles = None
        self.gate_scale = 1.0

    def interaction_passes(self):
        if self.p_handles is None:
            p1 = self.b.unit(0, {_in(2): 1.0}, 0.0)
            p2 = self.b.unit(0, {_in(3): 1.0}, 0.0)
            self.p_handles = (p1, p2)
        return self.p_handles

    def gate_pair(self, terms: dict, bias: float, bound: float, layer: int,
                  pivot: int, keep: str):
        """Run a +/- pair through one halfspace gate at the given layer.

        ``terms``/``bias`` describe the signed value at ``layer - 1`` (or
        the input when layer == 0). Returns (terms', bias'=0) at ``layer``.
        """
        v, min_abs = _pivot_vector(self.layout, pivot, keep)
        C = 1.5 * max(bound, 1e-30) / min_abs
        self.gate_scale = max(self.gate_scale, C)
        p1, p2 = self.interaction_passes()
        if layer == 0:
            gate_terms = {_in(2): C * v[0], _in(3): C * v[1]}
        else:
            p1c = self.b.carry(p1, layer - 1)
            p2c = self.b.carry(p2, layer - 1)
            gate_terms = {p1c: C * v[0], p2c: C * v[1]}
        pos_terms = dict(gate_terms)
        neg_terms = dict(gate_terms)
        for k, c in terms.items():
            if k[0] == "in":
                if layer != 0:
                    raise ParameterError("internal: raw input read above layer 0")
                kk = k
            else:
                kk = self.b.carry(k, layer - 1)
            pos_terms[kk] = pos_terms.get(kk, 0.0) + c
            neg_terms[kk] = neg_terms.get(kk, 0.0) - c
        up = self.b.unit(layer, pos_terms, bias)
        un = self.b.unit(layer, neg_terms, -bias)
        return {up: 0.5, un: -0.5}, 0.0

    def gate_band(self, terms: dict, bias: float, bound: float, start_layer: int,
                  lo: int, hi: int):
        """Apply the halfspace gates a band needs; returns (terms, layer)."""
        layer = start_layer
        if lo > 1:
            terms, bias = self.gate_pair(terms, bias, bound, layer, lo - 1, "suffix")
            layer += 1
        if hi < self.layout.l:
            terms, bias = self.gate_pair(terms, bias, bound, layer, hi, "prefix")
            layer += 1
        if layer == start_layer:
            # Band covers all tokens: lift the value through one plain pair.
            B = bound + 1.0
            pos = dict(terms)
            neg = {k: -c for k, c in terms.items()}
            up = self.b.unit(layer, pos, bias + B)
            un = self.b.unit(layer, neg, -bias + B)
            terms, bias = {up: 0.5, un: -0.5}, 0.0
            layer += 1
        return terms, layer


def compile_ffn_program(
    ops: list[dict],
    layout: StructuredLayout,
    data_bound: float | None = None,
    min_depth: int | None = None,
) -> FeedForward:
    """Compile band ops into one tokenwise ReLU net with residual semantics.

    The result's output is exactly zero on structured tokens outside the
    union of the op bands, which is what licenses band-sparse evaluation.
    """
    if not ops:
        raise ParameterError("empty op list")
    M = data_bound if data_bound is not None else layout.m_eff
    M = max(M, 1.0)
    builder = _Builder()
    ctx = _GateContext(builder, layout)
    bands = []

    # The trapezoid update is ungated (self-neutral at row2 == 0), so its
    # units act on every token: ops sharing a gain must be emitted once.
    seen_trapezoid_gains: set[float] = set()

    for op in ops:
        kind = op["op"]
        lo, hi = int(op["lo"]), int(op["hi"])
        if not (1 <= lo <= hi <= layout.l):
            raise ParameterError(f"band ({lo},{hi}) outside 1..{layout.l}")
        bands.append((lo, hi))
        if kind == "trapezoid":
            gain = float(op["gain"])
            if gain < 3.0:
                raise ParameterError("trapezoid gain below 3 is not self-neutral")
            if gain in seen_trapezoid_gains:
                continue
            if seen_trapezoid_gains:
                raise ParameterError(
                    "trapezoid ops with different gains cannot share one net"
                )
            seen_trapezoid_gains.add(gain)
            legs = []
            for off in (2.0, 1.0, -1.0, -2.0):
                legs.append(builder.unit(0, {_in(1): gain}, -gain + off))
            for h, c in zip(legs, (1.0, -1.0, -1.0, 1.0)):
                builder.add_final(0, h, c)
            B = M + 1.0
            upos = builder.unit(0, {_in(1): 1.0}, B)
            ucst = builder.unit(0, {}, B)
            builder.add_final(1, upos, -1.0)
            builder.add_final(1, ucst, 1.0)
        elif kind == "affine":
            a, bb = float(op["a"]), float(op["b"])
            terms = {_in(0): a - 1.0}
            bound = abs(a - 1.0) * M + abs(bb)
            terms, layer = ctx.gate_band(terms, bb, bound, 0, lo, hi)
            for h, c in terms.items():
                builder.add_final(0, h, c)
        elif kind == "swap":
            t1 = {_in(1): 1.0, _in(0): -1.0}
            t2 = {_in(1): 1.0}
            g1, _ = ctx.gate_band(t1, 0.0, 2.0 * M, 0, lo, hi)
            g2, _ = ctx.gate_band(t2, 0.0, M, 0, lo, hi)
            for h, c in g1.items():
                builder.add_final(0, h, c)
            for h, c in g2.items():
                builder.add_final(1, h, -c)
        elif kind == "ramp":
            r2, delta = float(op["r2"]), float(op["delta"])
            if not (0.0 < delta < r2):
                raise ParameterError("ramp needs 0 < delta < r^2")
            depth = int(op.get("depth") or max(1, math.ceil(math.log(1.0 / delta))))
            a = (1.0 / delta) ** (1.0 / depth)
            t0 = r2 - delta
            y = builder.unit(0, {_in(0): a}, -a * t0)
            B = M + 1.0
            rpos = builder.unit(0, {_in(0): 1.0}, B)
            rneg = builder.unit(0, {_in(0): -1.0}, B)
            for k in range(1, depth):
                y = builder.unit(k, {builder.carry(y, k - 1): a}, 0.0)
            z = builder.unit(depth, {builder.carry(y, depth - 1): -1.0}, 1.0)
            rp = builder.carry(rpos, depth - 1)
            rn = builder.carry(rneg, depth - 1)
            val = {z: 1.0, builder.carry(rp, depth): -0.5, builder.carry(rn, depth): 0.5}
            bound = 1.0 + M
            terms, _ = ctx.gate_band(val, 0.0, bound, depth + 1, lo, hi)
            for h, c in terms.items():
                builder.add_final(0, h, c)
        else:
            raise ParameterError(f"unknown band op {kind!r}")

    layers = builder.materialize(min_layers=min_depth)
    tag = FfnTag(
        bands=_merge_bands(bands),
        program=tuple(dict(o) for o in ops),
        gate_scale=ctx.gate_scale,
    )
    return FeedForward(layers=layers, tag=tag)


def _merge_bands(bands: list[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    """Merge 1-based inclusive intervals so the sparse path visits each
    column exactly once."""
    merged: list[list[int]] = []
    for lo, hi in sorted(bands):
        if merged and lo <= merged[-1][1] + 1:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return tuple((a, b) for a, b in merged)


# ---------------------------------------------------------------------------
# constant addition block
# ---------------------------------------------------------------------------


def make_addition_block(
    c: np.ndarray,
    layout: StructuredLayout,
    src: tuple[int, int] | None = None,
    dst: tuple[int, int] | None = None,
) -> tuple[TransformerBlock, float]:
    """Block writing ``x - c`` into destination tokens, sources untouched.

    Default roles on an ``l = 2D`` layout: tokens 1..D hold x, tokens
    D+1..2D receive ``x^i - c^i`` in data row 1 (their prior data is
    cleared, so composing a second block with ``-c`` on swapped roles
    restores copies of x). Requires ``||c||_inf <= M/2`` and data bounded
    by M/2. Returns the block and its largest cancellation constant.
    """
    c = np.asarray(c, dtype=float).ravel()
    D = c.shape[0]
    M = layout.m_eff
    if float(np.max(np.abs(c), initial=0.0)) > M / 2.0 + 1e-12:
        raise BoundViolationError("||c||_inf exceeds M/2 for this layout")
    if src is None:
        src = (1, D)
    if dst is None:
        dst = (D + 1, 2 * D)
    if dst[1] - dst[0] != D - 1 or src[1] - src[0] != D - 1:
        raise DimensionError("source and destination ranges must have length D")
    if dst[1] > layout.l or src[1] > layout.l:
        raise ParameterError("ranges exceed the layout")

    specs = []
    for i in range(D):
        t_dst = dst[0] + i
        t_src = src[0] + i
        qb = np.zeros((2, D_EMBD))
        qb[0, 4] = 1.0
        kb = np.zeros((2, D_EMBD))
        kb[0, 0] = 1.0
        kb[0, 4] = -c[i] + M
        specs.append((t_dst, t_src, 1, DataKernelPair(qb, kb), 1.0))
        # clear whatever the destination held: -relu(prev + M) + relu(M) = -prev
        specs.extend(subtract_value_specs(t_dst, t_dst, 1, 1, M))
    heads, cmax = interaction_heads(specs, layout)
    ffn = compile_ffn_program(
        [op_affine(dst[0], dst[1], 1.0, -M)], layout, data_bound=2.0 * M, min_depth=3
    )
    block = TransformerBlock(heads=tuple(heads), ffn=ffn, data_bound=layout.magnitude_bound)
    return block, max(cmax, ffn.tag.gate_scale)


# ---------------------------------------------------------------------------
# parallelization
# ---------------------------------------------------------------------------


def parallelize_blocks(
    b1: TransformerBlock,
    layout1: StructuredLayout,
    b2: TransformerBlock,
    layout2: StructuredLayout,
) -> tuple[TransformerBlock, StructuredLayout]:
    """Merge two structured blocks into one acting on concatenated tokens.

    Requires every head to carry interaction provenance and every
    feed-forward net to be a compiled band program (re-targetable), since
    interaction kernels and gates must be rebuilt against the merged
    positions. The merged block reproduces each input block's action on
    its own token range, up to the re-indexed interaction rows.
    """
    merged = StructuredLayout(
        layout1.l + layout2.l, max(layout1.magnitude_bound, layout2.magnitude_bound)
    )
    specs = []
    for block, off in ((b1, 0), (b2, layout1.l)):
        for h in block.heads:
            if h.tag is None:
                raise UnsupportedBlockError("head without interaction provenance")
            t = h.tag
            specs.append(
                (t.t1 + off, t.t2 + off, t.out_row, DataKernelPair(t.qb, t.kb), t.scale)
            )
    heads, cmax = interaction_heads(specs, merged)

    ops = []
    for block, off in ((b1, 0), (b2, layout1.l)):
        if block.ffn is None:
            continue
        if block.ffn.tag is None:
            raise UnsupportedBlockError("feed-forward net without band provenance")
        for op in block.ffn.tag.program:
            shifted = dict(op)
            shifted["lo"] = int(op["lo"]) + off
            shifted["hi"] = int(op["hi"]) + off
            ops.append(shifted)
    ffn = compile_ffn_program(ops, merged, data_bound=merged.m_eff) if ops else None

    block = TransformerBlock(
        heads=tuple(heads),
        ffn=ffn,
        data_bound=merged.magnitude_bound,
    )
    return block, merged
