"""Compile targets on the unit cube into exact transformer weights.

The pipeline mirrors the grid interpolant it represents: values f_n on an
N-per-axis grid are blended by a partition of unity built from axiswise
trapezoid bumps psi(3(N-1)(x^i - g^i)). The synthesized net reproduces
that interpolant pointwise:

  block 1             precompute s_ij = psi(3(N-1)(x^i - g_j)) per axis
  block 2             fan the factors out into per-patch product slots
  log2(d_pad) blocks  recursive pairwise products (padding with ones)
  one block           multiply each patch product by f_n
  one block           accumulate the sum into the decoder token

so the depth is log2(d_pad) + 4 regardless of the accuracy target. All
heads are interaction heads; signed constants are handled by paired
heads (+relu(v + B), -relu(B)) so the data path never rides on a large
cancellation constant.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .blocks import (
    StructuredLayout,
    const_kernels,
    interaction_heads,
    compile_ffn_program,
    op_trapezoid,
    psi,
    read_value_kernels,
    subtract_value_specs,
    DataKernelPair,
    D_EMBD,
)
from .errors import ParameterError, ResourceBudgetError
from .runtime import TransformerBlock, TransformerNet
from .targets import HolderTarget

__all__ = [
    "GridApprox",
    "choose_N",
    "build_grid",
    "pou_oracle",
    "pou_oracle_batch",
    "pou_partition_sum",
    "synthesize_cube_approximator",
    "cube_token_count",
    "sup_error_scan",
    "ScanResult",
    "interpolant_error_bound",
    "EVAL_BUDGET",
    "TOKEN_BUDGET",
]

EVAL_BUDGET = 10_000_000
TOKEN_BUDGET = 1_000_000


def choose_N(epsilon: float, d: int, holder_const: float, beta: float) -> int:
    """Grid resolution sufficient for accuracy epsilon: ceil(d (2^d H/eps)^(1/beta) + 1)."""
    if not (0.0 < epsilon < 1.0):
        raise ParameterError("accuracy must lie in (0, 1)")
    if d < 1 or holder_const <= 0 or not (0.0 < beta <= 1.0):
        raise ParameterError("need d >= 1, H_f > 0, beta in (0, 1]")
    raw = d * (2.0**d * holder_const / epsilon) ** (1.0 / beta) + 1.0
    return max(2, int(math.ceil(raw)))


@dataclass(frozen=True)
class GridApprox:
    """Target values at the centers of an N-per-axis grid on [0,1]^d.

    ``values`` is flat in row-major order over indices n in {1..N}^d with
    the first axis slowest.
    """

    d: int
    N: int
    values: np.ndarray
    sup_bound: float

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if self.N < 2:
            raise ParameterError("grid resolution must be at least 2")
        if v.shape != (self.N**self.d,):
            raise ParameterError(f"values must be flat of length {self.N ** self.d}")
        if not np.all(np.isfinite(v)):
            raise ParameterError("grid values must be finite")
        if np.max(np.abs(v), initial=0.0) > self.sup_bound * (1 + 1e-9):
            raise ParameterError("grid values exceed the declared sup bound")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def centers(self) -> np.ndarray:
        """(N^d, d) array of grid centers in the same flat order as values."""
        axes = [np.linspace(0.0, 1.0, self.N)] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def build_grid(
    target: HolderTarget, d: int, N: int, budget: int = EVAL_BUDGET
) -> GridApprox:
    """Evaluate the target at all grid centers."""
    if N < 2:
        raise ParameterError("grid resolution must be at least 2")
    needed = N**d
    if needed > budget:
        raise ResourceBudgetError(
            f"grid needs {needed} evaluations, budget is {budget}", required=needed
        )
    axes = [np.linspace(0.0, 1.0, N)] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = target.evaluate(pts)
    return GridApprox(d=d, N=N, values=np.asarray(vals, dtype=float), sup_bound=target.sup_bound)


# ---------------------------------------------------------------------------
# partition-of-unity oracle
# ---------------------------------------------------------------------------


def _axis_weights(X: np.ndarray, N: int):
    """Per-axis bump weights at the two candidate grid centers around x.

    Returns (k_lo, w_lo, k_hi, w_hi) arrays of shape (P, d); w_hi is zeroed
    where the second candidate duplicates the first.
    """
    scale = 3.0 * (N - 1)
    pos = X * (N - 1)
    k_lo = np.clip(np.floor(pos).astype(int), 0, N - 1)
    k_hi = np.clip(k_lo + 1, 0, N - 1)
    g_lo = k_lo / (N - 1)
    g_hi = k_hi / (N - 1)
    w_lo = psi(scale * (X - g_lo))
    w_hi = psi(scale * (X - g_hi))
    w_hi = np.where(k_hi > k_lo, w_hi, 0.0)
    return k_lo, w_lo, k_hi, w_hi


def pou_oracle_batch(grid: GridApprox, X: np.ndarray) -> np.ndarray:
    """Direct summation of f_n * prod_i psi(3(N-1)(x^i - g_n^i)).

    Only the at most 2^d patches whose supports contain x contribute.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != grid.d:
        raise ParameterError(f"points must have dimension {grid.d}")
    N, d = grid.N, grid.d
    k_lo, w_lo, k_hi, w_hi = _axis_weights(X, N)
    out = np.zeros(X.shape[0])
    for choice in itertools.product((0, 1), repeat=d):
        idx = np.where(np.array(choice)[None, :] == 0, k_lo, k_hi)
        w = np.where(np.array(choice)[None, :] == 0, w_lo, w_hi)
        weight = np.prod(w, axis=1)
        flat = np.ravel_multi_index(idx.T, (N,) * d)
        out += grid.values[flat] * weight
    return out


def pou_oracle(grid: GridApprox, x: np.ndarray) -> float:
    return float(pou_oracle_batch(grid, np.asarray(x, dtype=float)[None, :])[0])


def pou_partition_sum(d: int, N: int, X: np.ndarray) -> np.ndarray:
    """Sum over all patches of the bump products (should be identically 1)."""
    ones = GridApprox(d=d, N=N, values=np.ones(N**d), sup_bound=1.0)
    return pou_oracle_batch(ones, X)


def interpolant_error_bound(d: int, N: int, holder_const: float, beta: float) -> float:
    """Sup-error bound of the grid interpolant: 2^d d^beta H_f / (N-1)^beta."""
    return 2.0**d * d**beta * holder_const / (N - 1) ** beta


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def _next_pow2(d: int) -> int:
    p = 1
    while p < d:
        p *= 2
    return p


def cube_token_count(d: int, N: int) -> int:
    return d + N * d + N**d * _next_pow2(d)


def synthesize_cube_approximator(
    grid: GridApprox,
    holder_const: float,
    beta: float,
    sup_bound: float | None = None,
    token_budget: int = TOKEN_BUDGET,
) -> TransformerNet:
    """Emit a net computing the grid interpolant exactly (up to roundoff).

    The decoder token is the last patch slot; depth is log2(d_pad) + 4.
    """
    d, N = grid.d, grid.N
    R = float(sup_bound if sup_bound is not None else grid.sup_bound)
    d_pad = _next_pow2(d)
    K = int(math.log2(d_pad))
    n_patches = N**d
    l = d + N * d + n_patches * d_pad
    if l > token_budget:
        raise ResourceBudgetError(
            f"layout needs {l} tokens, budget is {token_budget}", required=l
        )

    layout = StructuredLayout(l, 1.0)

    def s_slot(i: int, j: int) -> int:  # i in 1..d, j in 1..N
        return d + (i - 1) * N + j

    patch_base = d + N * d

    def patch_slot(rank: int, i: int) -> int:  # rank in 1..N^d, i in 1..d_pad
        return patch_base + (rank - 1) * d_pad + i

    cancel = 0.0
    blocks = []

    # block 1: s_ij = psi(3(N-1)(x^i - g_j)), computed from x^i - g_j + 1
    specs = []
    for i in range(1, d + 1):
        for j in range(1, N + 1):
            g_j = (j - 1) / (N - 1)
            qb = np.zeros((2, D_EMBD))
            qb[0, 4] = 1.0
            qb[1, 4] = 1.0
            kb = np.zeros((2, D_EMBD))
            kb[0, 0] = 1.0
            kb[1, 4] = 1.0 - g_j
            specs.append((s_slot(i, j), i, 2, DataKernelPair(qb, kb), 1.0))
    heads, c = interaction_heads(specs, layout)
    cancel = max(cancel, c)
    ffn = compile_ffn_program(
        [op_trapezoid(d + 1, d + N * d, 3.0 * (N - 1))], layout, data_bound=2.0
    )
    blocks.append(TransformerBlock(heads=tuple(heads), ffn=ffn, data_bound=1.0))

    # block 2: copy s_{i, n^i} (and padding ones) into the patch slots
    specs = []
    for rank, n in enumerate(itertools.product(range(1, N + 1), repeat=d), start=1):
        for i in range(1, d_pad + 1):
            t1 = patch_slot(rank, i)
            if i <= d:
                specs.append((t1, s_slot(i, n[i - 1]), 1, read_value_kernels(1), 1.0))
            else:
                specs.append((t1, t1, 1, const_kernels(1.0), 1.0))
    heads, c = interaction_heads(specs, layout)
    cancel = max(cancel, c)
    blocks.append(TransformerBlock(heads=tuple(heads), ffn=None, data_bound=1.0))

    # product levels: read row r, write row 3 - r, ping-ponging rows
    read_row = 1
    for level in range(1, K + 1):
        write_row = 3 - read_row
        specs = []
        stride = 2**level
        for rank in range(1, n_patches + 1):
            for i in range(1, d_pad // stride + 1):
                tok_a = patch_slot(rank, (i - 1) * stride + 1)
                tok_b = patch_slot(rank, (i - 1) * stride + stride // 2 + 1)
                qb = np.zeros((2, D_EMBD))
                qb[0, read_row - 1] = 1.0
                kb = np.zeros((2, D_EMBD))
                kb[0, read_row - 1] = 1.0
                specs.append((tok_a, tok_b, write_row, DataKernelPair(qb, kb), 1.0))
                if level >= 2:
                    specs.extend(
                        subtract_value_specs(tok_a, tok_a, write_row, write_row, 1.0)
                    )
        heads, c = interaction_heads(specs, layout)
        cancel = max(cancel, c)
        blocks.append(TransformerBlock(heads=tuple(heads), ffn=None, data_bound=1.0))
        read_row = write_row

    # multiply-by-f_n block: leaders get f_n * phi_n (+R then -R pairing)
    phi_row = read_row
    out_row = 3 - phi_row
    specs = []
    for rank in range(1, n_patches + 1):
        leader = patch_slot(rank, 1)
        f_n = float(grid.values[rank - 1])
        qb = np.zeros((2, D_EMBD))
        qb[0, phi_row - 1] = 1.0
        qb[1, 4] = 1.0
        kb = np.zeros((2, D_EMBD))
        kb[0, 4] = f_n
        kb[1, 4] = R
        specs.append((leader, leader, out_row, DataKernelPair(qb, kb), 1.0))
        specs.append((leader, leader, out_row, const_kernels(R), -1.0))
        specs.extend(subtract_value_specs(leader, leader, out_row, out_row, 1.0))
    heads, c = interaction_heads(specs, layout)
    cancel = max(cancel, c)
    blocks.append(TransformerBlock(heads=tuple(heads), ffn=None, data_bound=1.0))

    # final sum into the decoder token (the last patch slot)
    dec = l
    specs = []
    for rank in range(1, n_patches + 1):
        leader = patch_slot(rank, 1)
        specs.append((dec, leader, 1, read_value_kernels(out_row, bias=R), 1.0))
        specs.append((dec, dec, 1, const_kernels(R), -1.0))
    specs.extend(subtract_value_specs(dec, dec, 1, 1, 1.0))
    sum_layout = layout.with_bound(max(1.0, R))
    heads, c = interaction_heads(specs, sum_layout)
    cancel = max(cancel, c)
    blocks.append(TransformerBlock(heads=tuple(heads), ffn=None, data_bound=max(1.0, R)))

    U = np.zeros((l, d))
    U[:d, :] = np.eye(d)
    net = TransformerNet(
        input_dim=d,
        d_embd=D_EMBD,
        token_count=l,
        input_map=U,
        positional=layout.positional(),
        blocks=tuple(blocks),
        output_clip=R,
        cancellation_scale=max(cancel, ffn.tag.gate_scale),
        meta={
            "kind": "cube_interpolant",
            "d": d,
            "N": N,
            "d_pad": d_pad,
            "holder_const": holder_const,
            "beta": beta,
        },
    )
    return net


# ---------------------------------------------------------------------------
# sup-error scanning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanResult:
    sup_error: float
    argmax: np.ndarray
    n_points: int


def sup_error_scan(
    evaluate,
    target: HolderTarget,
    d: int,
    resolution: int,
    seed: int = 0,
    budget: int = EVAL_BUDGET,
    extra_random: int = 1000,
    threads: int = 1,
) -> ScanResult:
    """Max |evaluate(x) - f(x)| over a uniform grid plus random interior points.

    ``evaluate`` maps a (P, d) batch to (P,) values.
    """
    total = resolution**d
    if total > budget:
        raise ResourceBudgetError(
            f"scan needs {total} evaluations, budget is {budget}", required=total
        )
    axes = [np.linspace(0.0, 1.0, resolution)] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    rng = np.random.default_rng(seed)
    extra = rng.uniform(0.0, 1.0, size=(extra_random, d))
    all_pts = np.vstack([pts, extra])

    chunk = 200_000
    chunks = [all_pts[s : s + chunk] for s in range(0, len(all_pts), chunk)]

    def _one(block: np.ndarray):
        err = np.abs(np.asarray(evaluate(block)) - target.evaluate(block))
        i = int(np.argmax(err))
        return float(err[i]), block[i]

    if threads > 1 and len(chunks) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one, chunks))
    else:
        results = [_one(b) for b in chunks]
    best = max(results, key=lambda r: r[0])
    return ScanResult(sup_error=best[0], argmax=best[1], n_points=len(all_pts))
