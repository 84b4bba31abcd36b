"""Dense forward-pass engine for ReLU-attention transformer networks.

The architecture is deliberately minimal: residual blocks combining
multi-headed ReLU attention (scores are rectified, never softmaxed) with
tokenwise ReLU feed-forward maps, a fixed column-lift embedding, a fixed
positional matrix, and a decoder that reads the first component of the
last token and clips to [-R, R].

Two evaluation paths exist and agree within the cancellation tolerance:

* dense     -- the literal matrix formulas, used for generic weights;
* sparse    -- an interaction-aware path used for synthesized nets whose
               heads carry provenance tags. Each tagged head provably
               writes a single column (its gating constant hard-zeroes
               every other score under ReLU), so the quadratic score
               matrix is never materialized. Tagged feed-forward nets
               update only their registered token bands and are exactly
               zero elsewhere.

Everything here is pure: inputs are never modified, and all arrays are
frozen at construction.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    EvaluationOverflowError,
    InputError,
)

__all__ = [
    "AttentionHead",
    "FeedForward",
    "TransformerBlock",
    "TransformerNet",
    "InteractionTag",
    "FfnTag",
    "ModelSize",
    "attention_forward",
    "mha_forward",
    "ffn_forward",
    "block_forward",
    "net_forward",
    "net_forward_batch",
    "model_size",
    "weight_sup_norm",
    "net_to_json",
    "net_from_json",
    "save_net",
    "load_net",
]

# Dense attention materializes an l x l score matrix; refuse past this.
DENSE_TOKEN_CAP = 8192


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# provenance tags (enable the sparse path and serialization round-trips)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InteractionTag:
    """Provenance for a head built by the interaction constructor.

    Token indices are 1-based.  The head writes
    ``scale * relu(<QB h_t1, KB h_t2>)`` into ``out_row`` of column ``t1``
    and exactly zero elsewhere, provided data rows stay within
    ``data_bound`` in magnitude.
    """

    t1: int
    t2: int
    out_row: int
    scale: float
    qb: np.ndarray
    kb: np.ndarray
    cancellation: float
    payload_bound: float
    data_bound: float

    def to_json(self) -> dict:
        return {
            "kind": "interaction",
            "t1": self.t1,
            "t2": self.t2,
            "out_row": self.out_row,
            "scale": self.scale,
            "qb": self.qb.tolist(),
            "kb": self.kb.tolist(),
            "cancellation": self.cancellation,
            "payload_bound": self.payload_bound,
            "data_bound": self.data_bound,
        }

    @staticmethod
    def from_json(d: dict) -> "InteractionTag":
        return InteractionTag(
            t1=int(d["t1"]),
            t2=int(d["t2"]),
            out_row=int(d["out_row"]),
            scale=float(d["scale"]),
            qb=_freeze(d["qb"]),
            kb=_freeze(d["kb"]),
            cancellation=float(d["cancellation"]),
            payload_bound=float(d["payload_bound"]),
            data_bound=float(d["data_bound"]),
        )


@dataclass(frozen=True)
class FfnTag:
    """Provenance for a compiled band-update feed-forward net.

    ``bands`` lists 1-based inclusive (lo, hi) column ranges. Outside the
    union of bands the net's output is exactly zero on structured tokens,
    so a sparse evaluation may skip those columns.  ``program`` holds the
    serialized band-op list used to rebuild the net under a new layout.
    """

    bands: tuple[tuple[int, int], ...]
    program: tuple[dict, ...]
    gate_scale: float

    def to_json(self) -> dict:
        return {
            "kind": "band_program",
            "bands": [list(b) for b in self.bands],
            "program": [dict(p) for p in self.program],
            "gate_scale": self.gate_scale,
        }

    @staticmethod
    def from_json(d: dict) -> "FfnTag":
        return FfnTag(
            bands=tuple((int(a), int(b)) for a, b in d["bands"]),
            program=tuple(dict(p) for p in d["program"]),
            gate_scale=float(d["gate_scale"]),
        )


# ---------------------------------------------------------------------------
# model containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionHead:
    """One ReLU attention head: H -> V H relu((K H)^T Q H)."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    tag: InteractionTag | None = None

    def __post_init__(self):
        Q, K, V = (_freeze(m) for m in (self.Q, self.K, self.V))
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "V", V)
        d = Q.shape[0]
        for name, m in (("Q", Q), ("K", K), ("V", V)):
            if m.shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise InputError(f"{name} contains non-finite entries")

    @property
    def d_embd(self) -> int:
        return self.Q.shape[0]


@dataclass(frozen=True)
class FeedForward:
    """Tokenwise ReLU chain: h -> W_L relu(... relu(W_1 h + b_1) ...) + b_L."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    tag: FfnTag | None = None

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a feed-forward net needs at least one layer")
        frozen = []
        prev = None
        for W, b in self.layers:
            W = _freeze(W)
            b = _freeze(b)
            if W.ndim != 2 or b.ndim != 1 or b.shape[0] != W.shape[0]:
                raise DimensionError("layer shapes must be (out,in) with matching bias")
            if prev is not None and W.shape[1] != prev:
                raise DimensionError("consecutive layer shapes do not compose")
            prev = W.shape[0]
            frozen.append((W, b))
        object.__setattr__(self, "layers", tuple(frozen))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def hidden_width(self) -> int:
        if len(self.layers) == 1:
            return 0
        return max(W.shape[0] for W, _ in self.layers[:-1])


@dataclass(frozen=True)
class TransformerBlock:
    """Residual block: B(H) = FFN(MHA(H) + H) + MHA(H) + H.

    ``ffn=None`` means the feed-forward half contributes nothing (a pure
    attention block); ``heads=()`` likewise gives a pure feed-forward
    block. ``data_bound`` records the analytic bound on |data rows| of
    valid inputs; the sparse path checks it before trusting head tags.
    """

    heads: tuple[AttentionHead, ...] = ()
    ffn: FeedForward | None = None
    data_bound: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        dims = {h.d_embd for h in self.heads}
        if len(dims) > 1:
            raise DimensionError("heads disagree on embedding dimension")
        if self.ffn is not None and dims and self.ffn.in_dim not in dims:
            raise DimensionError("ffn input dimension differs from heads")

    @property
    def sparse_ready(self) -> bool:
        # The factored plan also assumes heads write data rows only, so the
        # interaction/constant rows stay equal to the positional matrix.
        cached = self.__dict__.get("_sparse_ready")
        if cached is None:
            heads_ok = all(h.tag is not None and h.tag.out_row <= 2 for h in self.heads)
            ffn_ok = self.ffn is None or self.ffn.tag is not None
            cached = heads_ok and ffn_ok and self.data_bound is not None
            self.__dict__["_sparse_ready"] = cached
        return cached

    def _sparse_plan(self, positional: np.ndarray):
        """Precompute the factored head evaluation for this block.

        For a tagged head the score at its (t1, t2) target is bilinear in
        the four mutable data entries (x1, y1) = data rows of h_t1 and
        (x2, y2) of h_t2; the interaction/constant rows contribute fixed
        per-head constants. The plan stores the nine resulting coefficient
        arrays plus a CSR scatter onto (out_row, t1) targets.
        """
        cached = self.__dict__.get("_plan_cache")
        if cached is not None:
            return cached
        tags = [h.tag for h in self.heads]
        l = positional.shape[1]
        m = len(tags)
        t1 = np.array([t.t1 - 1 for t in tags], dtype=np.intp)
        t2 = np.array([t.t2 - 1 for t in tags], dtype=np.intp)
        rows = np.array([t.out_row - 1 for t in tags], dtype=np.intp)
        scale = np.array([t.scale for t in tags], dtype=float)
        qb = np.stack([t.qb for t in tags])          # (m, 2, d)
        kb = np.stack([t.kb for t in tags])
        # Heads sharing a target cell become one contiguous segment.
        targets = rows * l + t1
        order = np.argsort(targets, kind="stable")
        t1, t2, scale, targets = t1[order], t2[order], scale[order], targets[order]
        qb, kb = qb[order], kb[order]
        uniq, starts = np.unique(targets, return_index=True)
        fixed = positional.copy()                    # data rows of PE are zero
        fixed[0:2, :] = 0.0
        cq = np.einsum("mrc,cm->mr", qb[:, :, 2:], fixed[2:, t1])
        ck = np.einsum("mrc,cm->mr", kb[:, :, 2:], fixed[2:, t2])
        a, b = qb[:, :, 0], qb[:, :, 1]
        dd, e = kb[:, :, 0], kb[:, :, 1]
        coeffs = {
            "xx": np.sum(a * dd, axis=1),
            "xy": np.sum(a * e, axis=1),
            "yx": np.sum(b * dd, axis=1),
            "yy": np.sum(b * e, axis=1),
            "x1": np.sum(a * ck, axis=1),
            "y1": np.sum(b * ck, axis=1),
            "x2": np.sum(cq * dd, axis=1),
            "y2": np.sum(cq * e, axis=1),
            "c0": np.sum(cq * ck, axis=1),
        }
        terms = [(k, v) for k, v in coeffs.items() if np.any(v != 0.0)]
        cached = (t1, t2, scale, terms, uniq, starts)
        self.__dict__["_plan_cache"] = cached
        return cached


@dataclass(frozen=True)
class TransformerNet:
    """A complete net: decode(B_L(...B_1(PE + e_1 (U x)^T)...)).

    The embedding lifts U x into the first row (the column lift is fixed
    to the first standard basis vector), adds the positional matrix, runs
    the blocks in order, then returns the first component of the last
    token clipped to [-R, R].
    """

    input_dim: int
    d_embd: int
    token_count: int
    input_map: np.ndarray          # (l, D)
    positional: np.ndarray         # (d_embd, l)
    blocks: tuple[TransformerBlock, ...]
    output_clip: float
    cancellation_scale: float = 1.0
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        U = _freeze(self.input_map)
        P = _freeze(self.positional)
        object.__setattr__(self, "input_map", U)
        object.__setattr__(self, "positional", P)
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if U.shape != (self.token_count, self.input_dim):
            raise DimensionError(
                f"input map must be {(self.token_count, self.input_dim)}, got {U.shape}"
            )
        if P.shape != (self.d_embd, self.token_count):
            raise DimensionError(
                f"positional matrix must be {(self.d_embd, self.token_count)}, got {P.shape}"
            )
        if self.output_clip < 0:
            raise InputError("output clip radius must be nonnegative")
        for b in self.blocks:
            for h in b.heads:
                if h.d_embd != self.d_embd:
                    raise DimensionError("head dimension differs from net d_embd")

    @property
    def depth(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True)
class ModelSize:
    """Size per the block-count formula plus the exact stored-entry count."""

    formula: int
    learnable_entries: int


# ---------------------------------------------------------------------------
# forward operations (dense path)
# ---------------------------------------------------------------------------


def _check_embedding(H: np.ndarray, d_embd: int | None = None) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise DimensionError(f"embedding matrix must be 2-d, got shape {H.shape}")
    if d_embd is not None and H.shape[0] != d_embd:
        raise DimensionError(f"embedding rows {H.shape[0]} != d_embd {d_embd}")
    return H


def attention_forward(head: AttentionHead, H: np.ndarray) -> np.ndarray:
    """Apply one head densely: column t gets sum_k relu(<Q h_t, K h_k>) V h_k."""
    H = _check_embedding(H, head.d_embd)
    scores = np.maximum((head.K @ H).T @ (head.Q @ H), 0.0)  # (l, l): [k, t]
    return (head.V @ H) @ scores


def mha_forward(heads: Sequence[AttentionHead], H: np.ndarray) -> np.ndarray:
    """Sum of the individual head outputs; an empty head list gives zeros."""
    H = _check_embedding(H)
    out = np.zeros_like(H)
    for h in heads:
        out += attention_forward(h, H)
    return out


def ffn_forward(ffn: FeedForward, H: np.ndarray) -> np.ndarray:
    """Apply the ReLU chain independently to every column.

    Overflow is not trapped here; net_forward checks finiteness after
    every block and reports the offending block index.
    """
    H = _check_embedding(H, ffn.in_dim)
    Z = H
    last = len(ffn.layers) - 1
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (W, b) in enumerate(ffn.layers):
            Z = W @ Z + b[:, None]
            if i != last:
                Z = np.maximum(Z, 0.0)
    return Z


def block_forward(block: TransformerBlock, H: np.ndarray) -> np.ndarray:
    """Residual composition FFN(MHA(H) + H) + MHA(H) + H."""
    H = _check_embedding(H)
    G = mha_forward(block.heads, H) + H
    if block.ffn is None:
        return G
    return ffn_forward(block.ffn, G) + G


# ---------------------------------------------------------------------------
# sparse path
# ---------------------------------------------------------------------------


def _sparse_block_apply(block: TransformerBlock, Hb: np.ndarray, positional: np.ndarray) -> None:
    """Apply a provenance-tagged block to a batch (P, d_embd, l), in place.

    Head scores are computed directly from the data kernels: the gating
    term of a tagged head cancels identically at its target pair and is
    strictly negative everywhere else, so only the payload survives. The
    tagged feed-forward net updates its registered (disjoint) bands only.
    """
    P, d, l = Hb.shape
    if block.heads:
        t1, t2, scale, terms, uniq, starts = block._sparse_plan(positional)
        gathered: dict[str, np.ndarray] = {}

        def _data(name: str) -> np.ndarray:
            arr = gathered.get(name)
            if arr is None:
                row = 0 if name in ("x1", "x2") else 1
                idx = t1 if name.endswith("1") else t2
                arr = Hb[:, row, :][:, idx]
                gathered[name] = arr
            return arr

        needs = {"xx": ("x1", "x2"), "xy": ("x1", "y2"), "yx": ("y1", "x2"),
                 "yy": ("y1", "y2"), "x1": ("x1", None), "y1": ("y1", None),
                 "x2": ("x2", None), "y2": ("y2", None), "c0": (None, None)}
        pay = None
        for kind, coeff in terms:
            na, nb = needs[kind]
            if na is None:
                term = np.broadcast_to(coeff, (P, coeff.shape[0]))
                pay = np.array(term) if pay is None else pay.__iadd__(term)
                continue
            if nb is None:
                term = _data(na) * coeff
            else:
                term = _data(na) * _data(nb)
                term *= coeff
            pay = term if pay is None else pay.__iadd__(term)
        if pay is None:
            pay = np.zeros((P, len(t1)))
        np.maximum(pay, 0.0, out=pay)
        pay *= scale
        seg = np.add.reduceat(pay, starts, axis=1)   # (P, n_unique_targets)
        flat = Hb.reshape(P, d * l)
        flat[:, uniq] += seg
    if block.ffn is not None:
        # Disjoint bands: each band's update reads only its own columns.
        for lo, hi in block.ffn.tag.bands:
            cols = Hb[:, :, lo - 1 : hi]
            nb = cols.shape[2]
            Z = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(d, P * nb)
            last = len(block.ffn.layers) - 1
            for i, (W, b) in enumerate(block.ffn.layers):
                Z = W @ Z + b[:, None]
                if i != last:
                    np.maximum(Z, 0.0, out=Z)
            cols += Z.reshape(d, P, nb).transpose(1, 0, 2)


def _net_sparse_ready(net: TransformerNet) -> bool:
    return all(b.sparse_ready for b in net.blocks)


def _block_data_ok(block: TransformerBlock, Hb: np.ndarray) -> bool:
    if block.data_bound is None:
        return False
    if not Hb.size:
        return True
    data = Hb[:, :2, :]
    m = max(float(data.max()), -float(data.min()))
    return m <= block.data_bound * (1.0 + 1e-9) + 1e-12


# ---------------------------------------------------------------------------
# net evaluation
# ---------------------------------------------------------------------------


def _embed_batch(net: TransformerNet, X: np.ndarray) -> np.ndarray:
    lifted = X @ net.input_map.T                       # (P, l)
    Hb = np.broadcast_to(
        net.positional, (X.shape[0],) + net.positional.shape
    ).copy()
    Hb[:, 0, :] += lifted
    return Hb


def net_forward_batch(
    net: TransformerNet,
    X: np.ndarray,
    mode: str = "auto",
    chunk: int | None = None,
) -> np.ndarray:
    """Evaluate the net on a batch of inputs, one scalar per row of X."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != net.input_dim:
        raise InputError(f"inputs must have {net.input_dim} components")
    if not np.all(np.isfinite(X)):
        raise InputError("non-finite input")
    if mode not in ("auto", "dense", "sparse"):
        raise InputError(f"unknown evaluation mode {mode!r}")
    use_sparse = mode == "sparse" or (mode == "auto" and _net_sparse_ready(net))
    if mode == "sparse" and not _net_sparse_ready(net):
        raise InputError("net lacks the provenance tags required for sparse evaluation")

    P = X.shape[0]
    if chunk is None:
        chunk = max(1, int(1.0e7 / max(1, net.d_embd * net.token_count)))
    out = np.empty(P)
    for s in range(0, P, chunk):
        Xc = X[s : s + chunk]
        Hb = _embed_batch(net, Xc)
        for bi, block in enumerate(net.blocks):
            if use_sparse and block.sparse_ready and _block_data_ok(block, Hb):
                _sparse_block_apply(block, Hb, net.positional)
            else:
                if net.token_count > DENSE_TOKEN_CAP:
                    raise InputError(
                        f"dense evaluation refused at {net.token_count} tokens "
                        f"(cap {DENSE_TOKEN_CAP}); block {bi + 1} lacks usable provenance"
                    )
                if use_sparse and block.sparse_ready:
                    warnings.warn(
                        f"block {bi + 1}: data bound exceeded, falling back to "
                        f"dense evaluation"
                    )
                Hb = np.stack([block_forward(block, Hb[p]) for p in range(Hb.shape[0])])
            # A single reduction: any NaN/Inf makes the total non-finite.
            if not np.isfinite(Hb.sum()):
                raise EvaluationOverflowError(bi + 1)
        out[s : s + chunk] = np.clip(Hb[:, 0, -1], -net.output_clip, net.output_clip)
    return out


def net_forward(net: TransformerNet, x: np.ndarray, mode: str = "auto") -> float:
    """Evaluate the net on a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != net.input_dim:
        raise InputError(f"input must be a vector of length {net.input_dim}")
    return float(net_forward_batch(net, x[None, :], mode=mode)[0])


def net_evaluator(net: TransformerNet, mode: str = "auto") -> Callable[[np.ndarray], np.ndarray]:
    """Batch-callable adapter used by the error-scan utilities."""

    def evaluate(X: np.ndarray) -> np.ndarray:
        return net_forward_batch(net, X, mode=mode)

    return evaluate


# ---------------------------------------------------------------------------
# size and norms
# ---------------------------------------------------------------------------


def model_size(net: TransformerNet) -> ModelSize:
    """Size formula L_T * d_embd^2 * (3 m_max + L_ff_max) plus exact entry count."""
    L = len(net.blocks)
    m_max = max((len(b.heads) for b in net.blocks), default=0)
    lff_max = max((b.ffn.depth if b.ffn is not None else 0 for b in net.blocks), default=0)
    formula = L * net.d_embd**2 * (3 * m_max + lff_max)
    entries = net.input_map.size
    for b in net.blocks:
        entries += sum(h.Q.size + h.K.size + h.V.size for h in b.heads)
        if b.ffn is not None:
            entries += sum(W.size + bb.size for W, bb in b.ffn.layers)
    return ModelSize(formula=int(formula), learnable_entries=int(entries))


def weight_sup_norm(net: TransformerNet) -> float:
    """Largest absolute stored weight across the embedding, heads and ffns."""
    worst = float(np.max(np.abs(net.input_map))) if net.input_map.size else 0.0
    worst = max(worst, float(np.max(np.abs(net.positional))))
    for b in net.blocks:
        for h in b.heads:
            worst = max(worst, float(max(np.max(np.abs(h.Q)), np.max(np.abs(h.K)), np.max(np.abs(h.V)))))
        if b.ffn is not None:
            for W, bb in b.ffn.layers:
                worst = max(worst, float(np.max(np.abs(W))))
                if bb.size:
                    worst = max(worst, float(np.max(np.abs(bb))))
    return worst


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def net_to_json(net: TransformerNet) -> dict:
    """Serialize to a single JSON document with row-major number arrays."""
    doc = {
        "d_embd": net.d_embd,
        "l": net.token_count,
        "D": net.input_dim,
        "R": net.output_clip,
        "U": net.input_map.tolist(),
        "positional": net.positional.tolist(),
        "cancellation_scale": net.cancellation_scale,
        "blocks": [],
    }
    for b in net.blocks:
        blk = {
            "heads": [
                {
                    "Q": h.Q.tolist(),
                    "K": h.K.tolist(),
                    "V": h.V.tolist(),
                    **({"provenance": h.tag.to_json()} if h.tag else {}),
                }
                for h in b.heads
            ],
            "ffn": (
                {
                    "layers": [{"W": W.tolist(), "b": bb.tolist()} for W, bb in b.ffn.layers],
                    **({"provenance": b.ffn.tag.to_json()} if b.ffn.tag else {}),
                }
                if b.ffn is not None
                else None
            ),
        }
        if b.data_bound is not None:
            blk["data_bound"] = b.data_bound
        doc["blocks"].append(blk)
    return doc


def net_from_json(doc: dict) -> TransformerNet:
    """Rebuild a net from its JSON document, validating all shape invariants."""
    blocks = []
    for blk in doc["blocks"]:
        heads = tuple(
            AttentionHead(
                Q=np.array(h["Q"], dtype=float),
                K=np.array(h["K"], dtype=float),
                V=np.array(h["V"], dtype=float),
                tag=InteractionTag.from_json(h["provenance"]) if "provenance" in h else None,
            )
            for h in blk["heads"]
        )
        ffn = None
        if blk.get("ffn") is not None:
            layers = tuple(
                (np.array(layer["W"], dtype=float), np.array(layer["b"], dtype=float))
                for layer in blk["ffn"]["layers"]
            )
            tag = FfnTag.from_json(blk["ffn"]["provenance"]) if "provenance" in blk["ffn"] else None
            ffn = FeedForward(layers=layers, tag=tag)
        blocks.append(TransformerBlock(heads=heads, ffn=ffn, data_bound=blk.get("data_bound")))
    return TransformerNet(
        input_dim=int(doc["D"]),
        d_embd=int(doc["d_embd"]),
        token_count=int(doc["l"]),
        input_map=np.array(doc["U"], dtype=float),
        positional=np.array(doc["positional"], dtype=float),
        blocks=tuple(blocks),
        output_clip=float(doc["R"]),
        cancellation_scale=float(doc.get("cancellation_scale", 1.0)),
    )


def save_net(net: TransformerNet, path) -> None:
    with open(path, "w") as fh:
        json.dump(net_to_json(net), fh)


def load_net(path) -> TransformerNet:
    with open(path) as fh:
        return net_from_json(json.load(fh))
