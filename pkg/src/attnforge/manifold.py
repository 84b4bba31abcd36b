"""Compile targets on low-dimensional manifolds into transformer weights.

A manifold region is described by an atlas of charts (center, radius,
orthonormal tangent basis, scale/offset mapping the chart into the unit
cube) plus a partition of unity of normalized quadratic bumps. The
synthesized net realizes

    sum_n  f_hat_n(phi_n(x)) * ramp_n(||x - c_n||^2)

where f_hat_n is the cube grid interpolant of the localized target
f * rho_n pulled back through chart n, phi_n is computed exactly by
interaction heads, and ramp_n is the width-Delta approximate indicator of
the chart ball realized by a logarithmic-depth ReLU chain. All charts run
in parallel through a shared block schedule; a mathematical oracle with
identical content (but no transformer machinery) is built alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    D_EMBD,
    DataKernelPair,
    StructuredLayout,
    compile_ffn_program,
    const_kernels,
    interaction_heads,
    op_affine,
    op_ramp,
    op_swap,
    op_trapezoid,
    read_value_kernels,
    subtract_value_specs,
    make_addition_block,
)
from .cube import GridApprox, pou_oracle_batch, TOKEN_BUDGET, _next_pow2
from .errors import CoverageError, ParameterError, ResourceBudgetError
from .runtime import TransformerBlock, TransformerNet
from .targets import HolderTarget

__all__ = [
    "Chart",
    "Atlas",
    "make_atlas",
    "chart_projection",
    "invert_chart",
    "synthesize_chart_projection",
    "synthesize_indicator_net",
    "ManifoldPlan",
    "prepare_manifold_plan",
    "manifold_oracle",
    "synthesize_manifold_approximator",
]


# ---------------------------------------------------------------------------
# charts and atlases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Chart:
    """One chart: ball B(center, radius) with tangent coordinates
    phi(x) = scale * (V^T (x - center) + offset) mapped into [0,1]^d."""

    center: np.ndarray
    radius: float
    tangent_basis: np.ndarray      # (D, d), orthonormal columns
    scale: float
    offset: np.ndarray             # (d,)

    def __post_init__(self):
        c = np.ascontiguousarray(np.asarray(self.center, dtype=float))
        V = np.ascontiguousarray(np.asarray(self.tangent_basis, dtype=float))
        u = np.ascontiguousarray(np.asarray(self.offset, dtype=float))
        if V.ndim != 2 or V.shape[0] != c.shape[0] or u.shape != (V.shape[1],):
            raise ParameterError("chart shapes do not compose")
        if self.radius <= 0:
            raise ParameterError("chart radius must be positive")
        if not (0.0 < self.scale <= 1.0):
            raise ParameterError("chart scale must lie in (0, 1]")
        gram = V.T @ V
        if np.max(np.abs(gram - np.eye(V.shape[1]))) > 1e-10:
            raise ParameterError("tangent basis columns are not orthonormal")
        for a in (c, V, u):
            a.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "tangent_basis", V)
        object.__setattr__(self, "offset", u)

    @property
    def ambient_dim(self) -> int:
        return self.center.shape[0]

    @property
    def dim(self) -> int:
        return self.tangent_basis.shape[1]


def chart_projection(chart: Chart, X: np.ndarray) -> np.ndarray:
    """phi(x) = s (V^T (x - c) + u) for a batch of ambient points."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return chart.scale * ((X - chart.center) @ chart.tangent_basis + chart.offset)


class _Geometry:
    """Closest-point projection + sampling for the built-in shapes."""

    def __init__(self, kind: str, params: dict):
        self.kind = kind
        self.params = params

    def project(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.kind == "circle":
            norms = np.linalg.norm(X, axis=1, keepdims=True)
            return X / np.maximum(norms, 1e-300)
        if self.kind == "sphere":
            norms = np.linalg.norm(X, axis=1, keepdims=True)
            return X / np.maximum(norms, 1e-300)
        if self.kind == "flat_patch":
            A = self.params["basis"]
            b = self.params["origin"]
            Z = np.clip((X - b) @ A, 0.0, 1.0)
            return b + Z @ A.T
        raise ParameterError(f"unknown shape {self.kind!r}")

    def sample(self, n: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        if self.kind == "circle":
            theta = rng.uniform(0.0, 2.0 * np.pi, n)
            return np.stack([np.cos(theta), np.sin(theta)], axis=1)
        if self.kind == "sphere":
            g = rng.standard_normal((n, 3))
            return g / np.linalg.norm(g, axis=1, keepdims=True)
        if self.kind == "flat_patch":
            A = self.params["basis"]
            b = self.params["origin"]
            Z = rng.uniform(0.0, 1.0, size=(n, 2))
            return b + Z @ A.T
        raise ParameterError(f"unknown shape {self.kind!r}")


@dataclass(frozen=True)
class Atlas:
    """Chart list plus the bump spec of the subordinate partition of unity."""

    charts: tuple[Chart, ...]
    reach_hint: float
    ambient_bound: float
    bump_exponent: int = 2
    shape: str = ""
    shape_params: dict = field(default_factory=dict, compare=False)
    geometry: _Geometry | None = field(default=None, compare=False, repr=False)

    @property
    def n_charts(self) -> int:
        return len(self.charts)

    @property
    def ambient_dim(self) -> int:
        return self.charts[0].ambient_dim

    @property
    def dim(self) -> int:
        return self.charts[0].dim

    def bump_weights(self, X: np.ndarray) -> np.ndarray:
        """(P, n_charts) matrix of unnormalized bumps (1 - ||x-c||^2/r^2)_+^2."""
        X = np.atleast_2d(X)
        out = np.empty((X.shape[0], self.n_charts))
        for j, ch in enumerate(self.charts):
            sq = np.sum((X - ch.center) ** 2, axis=1)
            out[:, j] = np.clip(1.0 - sq / ch.radius**2, 0.0, None) ** self.bump_exponent
        return out

    def partition(self, X: np.ndarray) -> np.ndarray:
        w = self.bump_weights(X)
        total = np.sum(w, axis=1, keepdims=True)
        if np.any(total <= 0):
            bad = int(np.argmax(total[:, 0] <= 0))
            raise CoverageError(
                f"sample {np.atleast_2d(X)[bad]} is covered by no chart", sample=np.atleast_2d(X)[bad]
            )
        return w / total


def _tangent_mapping(r_tan: float) -> tuple[float, float]:
    """Scale/offset sending tangent coordinates in [-r_tan, r_tan] into [0,1]."""
    s = min(1.0, 1.0 / (2.0 * r_tan))
    return s, r_tan


def make_atlas(shape: str, chart_count: int, params: dict | None = None) -> Atlas:
    """Build an atlas for a built-in shape with evenly spread chart centers.

    Shapes: ``circle`` (unit circle in R^2, reach 1), ``sphere`` (unit
    sphere in R^3, reach 1), ``flat_patch`` (a planar patch in R^3, one
    chart suffices). Coverage of the bump partition is validated on a
    dense seeded sample; failure names an uncovered sample.
    """
    params = dict(params or {})
    if chart_count < 1:
        raise ParameterError("need at least one chart")
    if shape == "circle":
        tau = 1.0
        r = float(params.get("r", tau / 4.0))
        if r > tau / 4.0 + 1e-12:
            raise ParameterError("chart radius must satisfy r <= reach/4")
        angles = 2.0 * np.pi * np.arange(chart_count) / chart_count
        charts = []
        r_tan = r
        s, u0 = _tangent_mapping(r_tan)
        for a in angles:
            c = np.array([np.cos(a), np.sin(a)])
            v = np.array([[-np.sin(a)], [np.cos(a)]])
            charts.append(Chart(c, r, v, s, np.array([u0])))
        geo = _Geometry("circle", {})
        atlas = Atlas(tuple(charts), tau, 1.0, 2, "circle", {"r": r}, geo)
    elif shape == "sphere":
        tau = 1.0
        r = float(params.get("r", tau / 4.0))
        if r > tau / 4.0 + 1e-12:
            raise ParameterError("chart radius must satisfy r <= reach/4")
        idx = np.arange(chart_count, dtype=float) + 0.5
        phi_angle = np.arccos(1.0 - 2.0 * idx / chart_count)
        golden = np.pi * (1.0 + 5.0**0.5)
        theta = golden * idx
        centers = np.stack(
            [
                np.sin(phi_angle) * np.cos(theta),
                np.sin(phi_angle) * np.sin(theta),
                np.cos(phi_angle),
            ],
            axis=1,
        )
        charts = []
        r_tan = r
        s, u0 = _tangent_mapping(r_tan)
        for c in centers:
            ref = np.array([0.0, 0.0, 1.0]) if abs(c[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
            v1 = np.cross(c, ref)
            v1 /= np.linalg.norm(v1)
            v2 = np.cross(c, v1)
            v2 /= np.linalg.norm(v2)
            charts.append(Chart(c, r, np.stack([v1, v2], axis=1), s, np.array([u0, u0])))
        geo = _Geometry("sphere", {})
        atlas = Atlas(tuple(charts), tau, 1.0, 2, "sphere", {"r": r}, geo)
    elif shape == "flat_patch":
        basis = np.asarray(
            params.get("basis", np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])), dtype=float
        )
        q, _ = np.linalg.qr(basis)
        basis = q[:, :2]
        origin = np.asarray(params.get("origin", np.zeros(3)), dtype=float)
        center = origin + basis @ np.array([0.5, 0.5])
        r = float(params.get("r", 0.75))
        r_tan = r
        s, u0 = _tangent_mapping(r_tan)
        charts = [Chart(center, r, basis, s, np.array([u0, u0]))]
        geo = _Geometry("flat_patch", {"basis": basis, "origin": origin})
        bound = float(np.max(np.abs(geo.sample(512, 0))) + 1.0)
        atlas = Atlas(
            tuple(charts), 1e9, bound, 2, "flat_patch",
            {"basis": basis.tolist(), "origin": origin.tolist(), "r": r}, geo,
        )
    else:
        raise ParameterError(f"unknown shape {shape!r}")

    samples = atlas.geometry.sample(2048, seed=0)
    weights = atlas.bump_weights(samples)
    total = weights.sum(axis=1)
    if np.min(total) <= 1e-9:
        bad = samples[int(np.argmin(total))]
        raise CoverageError(f"atlas does not cover sample {bad.tolist()}", sample=bad)
    # chart maps must land inside the unit cube on their own patch
    for j, ch in enumerate(atlas.charts):
        inside = samples[np.sum((samples - ch.center) ** 2, axis=1) < ch.radius**2]
        if inside.size:
            z = chart_projection(ch, inside)
            if z.min() < -1e-9 or z.max() > 1.0 + 1e-9:
                raise ParameterError(f"chart {j} maps its patch outside the unit cube")
    return atlas


def invert_chart_batch(
    atlas: Atlas, chart: Chart, Z: np.ndarray, tol: float = 1e-10, max_iter: int = 200
) -> tuple[np.ndarray, np.ndarray]:
    """Preimages of many tangent coordinates under phi.

    Returns (points, valid): projected fixed-point iteration from the
    chart center; entries whose iteration does not converge, or whose
    preimage leaves the chart ball, are flagged invalid.
    """
    if atlas.geometry is None:
        raise ParameterError("atlas carries no geometry; cannot invert charts")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    W = Z / chart.scale - chart.offset          # (P, d)
    V = chart.tangent_basis
    c = chart.center
    X = atlas.geometry.project(c + W @ V.T)
    converged = np.zeros(len(X), dtype=bool)
    for _ in range(max_iter):
        resid = W - (X - c) @ V                  # (P, d)
        converged = np.max(np.abs(resid), axis=1) < tol
        if np.all(converged):
            break
        X = atlas.geometry.project(X + resid @ V.T)
    inside = np.sum((X - c) ** 2, axis=1) <= chart.radius**2 * (1.0 + 1e-9)
    return X, converged & inside


def invert_chart(
    atlas: Atlas, chart: Chart, z: np.ndarray, tol: float = 1e-10, max_iter: int = 200
) -> np.ndarray | None:
    """Preimage of one tangent coordinate vector, or None outside the chart."""
    X, ok = invert_chart_batch(atlas, chart, np.asarray(z, dtype=float)[None, :], tol, max_iter)
    return X[0] if ok[0] else None


# ---------------------------------------------------------------------------
# shared head constructions
# ---------------------------------------------------------------------------


def _projection_specs(chart: Chart, input_base: int, proj_base: int, m_gate: float):
    """Head specs writing <v_i, x-c> + u_i + 2 D m_gate into proj slots.

    Returns (specs, affine) where the affine band op finishes the job:
    row1 <- s * (row1 - 2 D m_gate).
    """
    D, d = chart.ambient_dim, chart.dim
    specs = []
    for i in range(1, d + 1):
        t_out = proj_base + i
        for j in range(1, D + 1):
            v = float(chart.tangent_basis[j - 1, i - 1])
            qb = np.zeros((2, D_EMBD))
            qb[0, 4] = 1.0
            qb[1, 4] = 1.0
            kb = np.zeros((2, D_EMBD))
            kb[0, 0] = v
            kb[1, 4] = -v * float(chart.center[j - 1]) + 2.0 * m_gate
            specs.append((t_out, input_base + j, 1, DataKernelPair(qb, kb), 1.0))
        specs.append((t_out, t_out, 1, const_kernels(float(chart.offset[i - 1])), 1.0))
    shift = -2.0 * D * m_gate * chart.scale
    affine = op_affine(proj_base + 1, proj_base + d, chart.scale, shift)
    return specs, affine


def synthesize_chart_projection(chart: Chart, layout: StructuredLayout) -> TransformerBlock:
    """Block computing phi(x) exactly in tokens D+1..D+d.

    Expects the layout's first D tokens to hold x; uses d*(D+1)
    interaction heads (per-head margin 2M keeps every score nonnegative)
    and a five-layer feed-forward net (scale/shift plus two gating
    passes) confined to the projection band.
    """
    D, d = chart.ambient_dim, chart.dim
    if layout.l < D + d:
        raise ParameterError("layout too small for the projection block")
    m_gate = max(layout.m_eff, float(np.max(np.abs(chart.center))) + layout.m_eff)
    specs, affine = _projection_specs(chart, 0, D, m_gate)
    heads, cmax = interaction_heads(specs, layout)
    bound = 2.0 * D * m_gate + abs(affine["b"]) + layout.m_eff
    ffn = compile_ffn_program([affine], layout, data_bound=bound, min_depth=5)
    return TransformerBlock(heads=tuple(heads), ffn=ffn, data_bound=layout.magnitude_bound)


def synthesize_indicator_net(
    chart: Chart, delta: float, layout: StructuredLayout
) -> list[TransformerBlock]:
    """Three blocks mapping x to the approximate chart indicator.

    Block 1 writes x - c into tokens D+1..2D, block 2 squares them in
    place (self-interaction heads plus a gated replace), block 3 sums the
    squares into token D+1 and applies the depth-log(1/Delta) ramp that is
    1 below r^2 - Delta and exactly 0 above r^2.
    """
    D = chart.ambient_dim
    r2 = chart.radius**2
    if not (0.0 < delta < r2):
        raise ParameterError("need 0 < delta < r^2")
    if layout.l < 2 * D:
        raise ParameterError("layout too small for the indicator pipeline")
    blocks = []
    add_block, _ = make_addition_block(chart.center, layout)
    blocks.append(add_block)

    diff = lambda j: D + j
    specs = []
    for j in range(1, D + 1):
        qb = np.zeros((2, D_EMBD))
        qb[0, 0] = 1.0
        kb = np.zeros((2, D_EMBD))
        kb[0, 0] = 1.0
        specs.append((diff(j), diff(j), 2, DataKernelPair(qb, kb), 1.0))
    heads, _ = interaction_heads(specs, layout)
    swap = compile_ffn_program(
        [op_swap(D + 1, 2 * D)], layout, data_bound=max(layout.m_eff**2, layout.m_eff)
    )
    blocks.append(TransformerBlock(heads=tuple(heads), ffn=swap, data_bound=layout.magnitude_bound))

    sq_bound = max(1.0, layout.m_eff**2)
    specs = []
    for j in range(2, D + 1):
        specs.append((diff(1), diff(j), 1, read_value_kernels(1), 1.0))
    sum_layout = layout.with_bound(sq_bound)
    heads, _ = interaction_heads(specs, sum_layout)
    ramp = compile_ffn_program(
        [op_ramp(D + 1, D + 1, r2, delta)], layout, data_bound=D * sq_bound + 1.0
    )
    blocks.append(TransformerBlock(heads=tuple(heads), ffn=ramp, data_bound=sq_bound))
    return blocks


def indicator_value(chart: Chart, delta: float, X: np.ndarray) -> np.ndarray:
    """Closed form of the ramped indicator at ||x - c||^2."""
    sq = np.sum((np.atleast_2d(X) - chart.center) ** 2, axis=1)
    r2 = chart.radius**2
    return np.clip((r2 - sq) / delta, 0.0, 1.0)


# ---------------------------------------------------------------------------
# the full pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifoldPlan:
    """Everything shared between the oracle and the synthesized net."""

    atlas: Atlas
    epsilon: float
    N: int
    delta: float
    grids: tuple[GridApprox, ...]
    local_sup: float        # bound on |f * rho_n| grid values
    phi_bound: float        # bound on |phi_n(x)| over the manifold, all charts
    delta_budget: float     # per-term budget eps / (2 C_M)


def _estimate_local_lipschitz(values: np.ndarray, d: int, N: int) -> float:
    """Max axiswise difference quotient over the local grid."""
    grid = values.reshape((N,) * d)
    h = 1.0 / (N - 1)
    worst = 0.0
    for axis in range(d):
        diffs = np.abs(np.diff(grid, axis=axis))
        if diffs.size:
            worst = max(worst, float(diffs.max()) / h)
    return worst


def _local_grid(atlas: Atlas, target: HolderTarget, chart_index: int, N: int) -> GridApprox:
    chart = atlas.charts[chart_index]
    d = chart.dim
    axes = [np.linspace(0.0, 1.0, N)] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    zs = np.stack([m.ravel() for m in mesh], axis=1)
    X, ok = invert_chart_batch(atlas, chart, zs)
    vals = np.zeros(zs.shape[0])
    if np.any(ok):
        pts = X[ok]
        rho = atlas.partition(pts)[:, chart_index]
        vals[ok] = target.evaluate(pts) * rho
    return GridApprox(d=d, N=N, values=vals, sup_bound=target.sup_bound)


def prepare_manifold_plan(
    atlas: Atlas,
    target: HolderTarget,
    epsilon: float,
    N_override: int | None = None,
    delta_override: float | None = None,
    validation_seed: int = 17,
    token_budget: int = TOKEN_BUDGET,
) -> ManifoldPlan:
    """Pick the per-chart grid resolution and ramp width for accuracy eps.

    The per-term budget is eps / (2 C_M). The resolution starts from the
    cube formula driven by a numerically estimated local Lipschitz
    constant and is then validated (and if needed increased) against the
    oracle's measured sup error on a seeded manifold sample.
    """
    if not (0.0 < epsilon < 1.0):
        raise ParameterError("epsilon must lie in (0, 1)")
    C_M = atlas.n_charts
    d = atlas.dim
    budget = epsilon / (2.0 * C_M)
    r_min = min(ch.radius for ch in atlas.charts)
    delta = (
        float(delta_override)
        if delta_override is not None
        else epsilon * r_min / (2.0 * max(1.0, target.holder_const))
    )
    # the ramp zone must stay a thin shell of the chart ball, or points
    # covered only near a boundary lose their one good contribution
    delta = min(delta, 0.25 * r_min**2)

    if N_override is not None:
        candidates = [int(N_override)]
    else:
        # The cube formula is far too pessimistic as an equality; seed the
        # ladder from a scaled-down version and let the measured oracle
        # error pick the first sufficient rung.
        probe = _local_grid(atlas, target, 0, 9 if d == 1 else 5)
        h_local = max(_estimate_local_lipschitz(probe.values, d, probe.N), 1e-6)
        seed_n = 0.05 * d * (2.0**d * h_local / budget) ** (1.0 / target.holder_exponent)
        n0 = int(np.clip(math.ceil(seed_n), 5, 64))
        candidates = [n0]
        while candidates[-1] < 4096:
            candidates.append(int(math.ceil(candidates[-1] * 1.5)))

    samples = atlas.geometry.sample(2000, seed=validation_seed)
    f_true = target.evaluate(samples)
    phi_bound = 0.0
    for ch in atlas.charts:
        z = chart_projection(ch, samples)
        phi_bound = max(phi_bound, float(np.max(np.abs(z))))
    d_pad = _next_pow2(d)
    best = None
    best_err = math.inf
    for N in candidates:
        l = atlas.ambient_dim + C_M * (atlas.ambient_dim + d + N * d + N**d * d_pad) + 1
        if l > token_budget:
            if best is None:
                raise ResourceBudgetError(
                    f"manifold layout needs {l} tokens, budget {token_budget}", required=l
                )
            break  # keep the best resolution the budget admits
        grids = tuple(_local_grid(atlas, target, j, N) for j in range(C_M))
        local_sup = max(float(np.max(np.abs(g.values), initial=0.0)) for g in grids)
        plan = ManifoldPlan(
            atlas=atlas,
            epsilon=epsilon,
            N=N,
            delta=delta,
            grids=grids,
            local_sup=max(local_sup, 1e-9),
            phi_bound=phi_bound + 0.1,
            delta_budget=budget,
        )
        err = float(np.max(np.abs(_oracle_batch(plan, samples) - f_true)))
        if err < best_err:
            best, best_err = plan, err
        if err <= 0.8 * epsilon:
            break
    return best


def _oracle_batch(plan: ManifoldPlan, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    out = np.zeros(X.shape[0])
    for ch, grid in zip(plan.atlas.charts, plan.grids):
        z = chart_projection(ch, X)
        out += pou_oracle_batch(grid, z) * indicator_value(ch, plan.delta, X)
    return out


def manifold_oracle(
    atlas: Atlas,
    target: HolderTarget,
    X: np.ndarray,
    epsilon: float | None = None,
    plan: ManifoldPlan | None = None,
) -> np.ndarray:
    """Mathematical content of the synthesized net, without transformers.

    Either pass the plan shared with a synthesized net, or an epsilon from
    which an identical plan is prepared.
    """
    if plan is None:
        if epsilon is None:
            raise ParameterError("need a plan or an epsilon")
        plan = prepare_manifold_plan(atlas, target, epsilon)
    return _oracle_batch(plan, np.atleast_2d(np.asarray(X, dtype=float)))


def synthesize_manifold_approximator(
    atlas: Atlas,
    target: HolderTarget,
    epsilon: float,
    plan: ManifoldPlan | None = None,
    token_budget: int = TOKEN_BUDGET,
) -> TransformerNet:
    """Emit one net evaluating every chart's local pipeline in parallel.

    Per chart the token section holds [D diff slots | d projection slots |
    N d bump slots | N^d d_pad patch slots]; a dedicated readout token at
    the end accumulates sum_n c_f(n) c_U(n) for the fixed decoder.
    """
    if plan is None:
        plan = prepare_manifold_plan(atlas, target, epsilon, token_budget=token_budget)
    D = atlas.ambient_dim
    d = atlas.dim
    N = plan.N
    C_M = atlas.n_charts
    d_pad = _next_pow2(d)
    K = int(math.log2(d_pad))
    n_patches = N**d
    section = D + d + N * d + n_patches * d_pad
    l = D + C_M * section + 1
    if l > token_budget:
        raise ResourceBudgetError(f"needs {l} tokens, budget {token_budget}", required=l)

    M_amb = max(atlas.ambient_bound, 1.0)
    sq_bound = 4.0 * D * M_amb**2
    R_local = max(plan.local_sup, 1e-9)
    M_big = max(M_amb, plan.phi_bound, sq_bound, R_local, 2.0) + 1.0

    def sec(n: int) -> int:
        return D + n * section

    def diff_tok(n: int, j: int) -> int:
        return sec(n) + j

    def proj_tok(n: int, i: int) -> int:
        return sec(n) + D + i

    def s_tok(n: int, i: int, j: int) -> int:
        return sec(n) + D + d + (i - 1) * N + j

    def patch_tok(n: int, rank: int, i: int) -> int:
        return sec(n) + D + d + N * d + (rank - 1) * d_pad + i

    readout = l
    gate_layout = StructuredLayout(l, M_big)
    cancel = 0.0
    blocks = []

    def add_block(specs, ops, data_bound, ffn_bound=None, min_depth=None):
        nonlocal cancel
        heads, c = interaction_heads(specs, gate_layout)
        cancel = max(cancel, c)
        ffn = None
        if ops:
            ffn = compile_ffn_program(
                ops, gate_layout, data_bound=ffn_bound or M_big, min_depth=min_depth
            )
            cancel = max(cancel, ffn.tag.gate_scale)
        blocks.append(
            TransformerBlock(heads=tuple(heads), ffn=ffn, data_bound=data_bound)
        )

    # block 1: chart projections (exact) + centered differences
    specs, ops = [], []
    m_gate = M_amb + 1.0
    m_diff = 2.0 * M_amb + 1.0
    for n, ch in enumerate(atlas.charts):
        p_specs, affine = _projection_specs(ch, 0, sec(n) + D, m_gate)
        specs.extend(p_specs)
        ops.append(affine)
        for j in range(1, D + 1):
            qb = np.zeros((2, D_EMBD))
            qb[0, 4] = 1.0
            qb[1, 4] = 1.0
            kb = np.zeros((2, D_EMBD))
            kb[0, 0] = 1.0
            kb[1, 4] = -float(ch.center[j - 1]) + m_diff
            specs.append((diff_tok(n, j), j, 1, DataKernelPair(qb, kb), 1.0))
            specs.append((diff_tok(n, j), diff_tok(n, j), 1, const_kernels(m_diff), -1.0))
    add_block(specs, ops, data_bound=M_amb, ffn_bound=2.0 * D * m_gate + M_big, min_depth=5)

    # block 2: bump factors s_ij = psi(3(N-1)(phi^i - g_j)) per chart
    specs, ops = [], []
    for n in range(C_M):
        for i in range(1, d + 1):
            for j in range(1, N + 1):
                g_j = (j - 1) / (N - 1)
                qb = np.zeros((2, D_EMBD))
                qb[0, 4] = 1.0
                qb[1, 4] = 1.0
                kb = np.zeros((2, D_EMBD))
                kb[0, 0] = 1.0
                kb[1, 4] = 1.0 - g_j
                specs.append((s_tok(n, i, j), proj_tok(n, i), 2, DataKernelPair(qb, kb), 1.0))
        ops.append(op_trapezoid(s_tok(n, 1, 1), s_tok(n, d, N), 3.0 * (N - 1)))
    add_block(specs, ops, data_bound=M_big, ffn_bound=plan.phi_bound + 2.0)

    # block 3: fan factors into patch slots; square the differences
    specs = []
    import itertools as _it

    for n in range(C_M):
        for rank, nn in enumerate(_it.product(range(1, N + 1), repeat=d), start=1):
            for i in range(1, d_pad + 1):
                t1 = patch_tok(n, rank, i)
                if i <= d:
                    specs.append((t1, s_tok(n, i, nn[i - 1]), 1, read_value_kernels(1), 1.0))
                else:
                    specs.append((t1, t1, 1, const_kernels(1.0), 1.0))
        for j in range(1, D + 1):
            qb = np.zeros((2, D_EMBD))
            qb[0, 0] = 1.0
            kb = np.zeros((2, D_EMBD))
            kb[0, 0] = 1.0
            specs.append((diff_tok(n, j), diff_tok(n, j), 2, DataKernelPair(qb, kb), 1.0))
    add_block(specs, [], data_bound=M_big)

    # block 4: sum squared differences into diff slot 1 + ramp; product level 1
    specs, ops = [], []
    for n, ch in enumerate(atlas.charts):
        t_ind = diff_tok(n, 1)
        for j in range(1, D + 1):
            specs.append((t_ind, diff_tok(n, j), 1, read_value_kernels(2), 1.0))
        specs.extend(subtract_value_specs(t_ind, t_ind, 1, 1, 2.0 * M_amb + 1.0))
        ops.append(op_ramp(t_ind, t_ind, ch.radius**2, plan.delta))
    read_row = 1
    if K >= 1:
        specs.extend(_product_level_specs(1, C_M, n_patches, d_pad, patch_tok, read_row))
        read_row = 2
    add_block(specs, ops, data_bound=M_big, ffn_bound=sq_bound + 2.0)

    # remaining product levels
    for level in range(2, K + 1):
        specs = _product_level_specs(level, C_M, n_patches, d_pad, patch_tok, read_row)
        read_row = 3 - read_row
        add_block(specs, [], data_bound=M_big)

    # multiply each patch product by the local grid value
    phi_row = read_row
    out_row = 3 - phi_row
    specs = []
    for n in range(C_M):
        vals = plan.grids[n].values
        for rank in range(1, n_patches + 1):
            leader = patch_tok(n, rank, 1)
            f_val = float(vals[rank - 1])
            qb = np.zeros((2, D_EMBD))
            qb[0, phi_row - 1] = 1.0
            qb[1, 4] = 1.0
            kb = np.zeros((2, D_EMBD))
            kb[0, 4] = f_val
            kb[1, 4] = R_local
            specs.append((leader, leader, out_row, DataKernelPair(qb, kb), 1.0))
            specs.append((leader, leader, out_row, const_kernels(R_local), -1.0))
            specs.extend(subtract_value_specs(leader, leader, out_row, out_row, 1.0))
    add_block(specs, [], data_bound=M_big)

    # per-chart sums: local interpolant value c_f lands in the result token
    specs = []
    for n in range(C_M):
        result = patch_tok(n, n_patches, d_pad)
        for rank in range(1, n_patches + 1):
            leader = patch_tok(n, rank, 1)
            specs.append((result, leader, 1, read_value_kernels(out_row, bias=R_local), 1.0))
        specs.append((result, result, 1, const_kernels(R_local), -float(n_patches)))
        specs.extend(subtract_value_specs(result, result, 1, 1, max(1.0, R_local)))
    add_block(specs, [], data_bound=M_big)

    # combine: result row 2 <- c_f * c_U  (exactly zero outside the chart)
    m_comb = R_local + 1.0
    specs = []
    for n in range(C_M):
        result = patch_tok(n, n_patches, d_pad)
        t_ind = diff_tok(n, 1)
        qb = np.zeros((2, D_EMBD))
        qb[0, 0] = 1.0
        qb[0, 4] = m_comb
        kb = np.zeros((2, D_EMBD))
        kb[0, 0] = 1.0
        specs.append((result, t_ind, 2, DataKernelPair(qb, kb), 1.0))
        qb2 = np.zeros((2, D_EMBD))
        qb2[0, 4] = m_comb
        specs.append((result, t_ind, 2, DataKernelPair(qb2, kb), -1.0))
        specs.extend(subtract_value_specs(result, result, 2, 2, R_local + 1.0))
    add_block(specs, [], data_bound=M_big)

    # readout: accumulate the chart contributions for the fixed decoder
    m_read = R_local + 1.0
    specs = []
    for n in range(C_M):
        result = patch_tok(n, n_patches, d_pad)
        specs.append((readout, result, 1, read_value_kernels(2, bias=m_read), 1.0))
    specs.append((readout, readout, 1, const_kernels(m_read), -float(C_M)))
    add_block(specs, [], data_bound=M_big)

    U = np.zeros((l, D))
    U[:D, :] = np.eye(D)
    layout = StructuredLayout(l, M_big)
    net = TransformerNet(
        input_dim=D,
        d_embd=D_EMBD,
        token_count=l,
        input_map=U,
        positional=layout.positional(),
        blocks=tuple(blocks),
        output_clip=target.sup_bound + 2.0 * epsilon,
        cancellation_scale=cancel,
        meta={
            "kind": "manifold",
            "shape": atlas.shape,
            "charts": C_M,
            "N": N,
            "delta": plan.delta,
            "epsilon": epsilon,
        },
    )
    return net


def _product_level_specs(level, C_M, n_patches, d_pad, patch_tok, read_row):
    write_row = 3 - read_row
    stride = 2**level
    specs = []
    for n in range(C_M):
        for rank in range(1, n_patches + 1):
            for i in range(1, d_pad // stride + 1):
                tok_a = patch_tok(n, rank, (i - 1) * stride + 1)
                tok_b = patch_tok(n, rank, (i - 1) * stride + stride // 2 + 1)
                qb = np.zeros((2, D_EMBD))
                qb[0, read_row - 1] = 1.0
                kb = np.zeros((2, D_EMBD))
                kb[0, read_row - 1] = 1.0
                specs.append((tok_a, tok_b, write_row, DataKernelPair(qb, kb), 1.0))
                if level >= 2:
                    specs.extend(subtract_value_specs(tok_a, tok_a, write_row, write_row, 1.0))
    return specs
