"""Command-line harness: reproducible experiments from JSON configs.

Every command reads a single JSON config, writes a canonical report
(inputs echoed, metrics with the tolerances they were judged against,
pass/fail per check), delimited data tables, a deterministic SVG where a
log-log figure is meaningful, and matplotlib PNG companions. Outputs are
byte-for-byte reproducible for a fixed config.

Exit codes: 1 config error, 2 budget/resource error, 3 a report check
failed.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import reports
from .errors import (
    AttnforgeError,
    CheckFailureError,
    ConfigError,
    ResourceBudgetError,
)
from .plots import emit_plot, render_figure

_EXIT_CODES = ((ConfigError, 1), (ResourceBudgetError, 2), (CheckFailureError, 3))


def _run(command, config_path, out, seed, threads, fn):
    cfg = {}
    if config_path is not None:
        try:
            cfg = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(1)
        if not isinstance(cfg, dict):
            click.echo("config error: top level must be a JSON object", err=True)
            sys.exit(1)
    if seed is not None:
        cfg["seed"] = int(seed)
    out_dir = Path(out) if out else Path("attnforge_out") / command
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        fn(cfg, out_dir, int(threads))
    except AttnforgeError as exc:
        for klass, code in _EXIT_CODES:
            if isinstance(exc, klass):
                click.echo(f"{command}: {exc}", err=True)
                sys.exit(code)
        click.echo(f"{command}: {exc}", err=True)
        sys.exit(1)
    click.echo(f"{command}: wrote {out_dir}")


def _need(cfg, key, kind, where="config"):
    if key not in cfg:
        raise ConfigError(f"{where} is missing required field '{key}'")
    value = cfg[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{where}.{key} must be of type {kind.__name__}")
    return value


def _target_from(cfg) -> "HolderTarget":
    from .targets import make_target

    spec = _need(cfg, "target", dict)
    name = _need(spec, "name", str, "target")
    d = _need(spec, "d", int, "target")
    params = {k: v for k, v in spec.items() if k not in ("name", "d")}
    return make_target(name, d, **params)


def _finish(report, out_dir, failed_checks):
    reports.write_json(out_dir / "report.json", report)
    if failed_checks:
        raise CheckFailureError("failed checks: " + ", ".join(failed_checks))


def common_options(fn):
    fn = click.option("--threads", default=1, show_default=True, help="evaluation threads")(fn)
    fn = click.option("--seed", default=None, type=int, help="override the config seed")(fn)
    fn = click.option("--out", default=None, type=click.Path(), help="output directory")(fn)
    fn = click.option("--config", default=None, type=click.Path(exists=True), help="JSON config")(fn)
    return fn


@click.group()
def main():
    """Compile targets to transformer weights, estimate intrinsic
    dimension, and predict scaling exponents."""


# ---------------------------------------------------------------------------
# predict / covering-bound / fit-scaling
# ---------------------------------------------------------------------------


@main.command()
@common_options
@click.option("--d", "dim", default=None, type=float, help="intrinsic dimension")
@click.option("--beta", default=None, type=float, help="Hölder exponent")
def predict(config, out, seed, threads, dim, beta):
    """Exponent prediction plus the generalization-rate curve."""

    def body(cfg, out_dir, _threads):
        from .scaling import generalization_rate_curve, predict_exponents

        d = float(dim if dim is not None else _need(cfg, "d", (int, float)))
        b = float(beta if beta is not None else cfg.get("beta", 1.0))
        big_d = float(cfg.get("ambient_dim", 1.0))
        n_values = cfg.get("n_values", list(np.logspace(2, 8, 13)))
        pred = predict_exponents(d, b)
        curve = generalization_rate_curve(d, b, big_d, n_values)
        reports.write_csv(out_dir / "rate_curve.csv", ["n", "rate"], curve)
        xs = [c[0] for c in curve]
        ys = [c[1] for c in curve]
        emit_plot([(xs, ys, "rate")], "loglog", out_dir / "rate_curve.svg", "n", "rate")
        render_figure(
            [(xs, ys, "rate (bound shape, not calibrated loss)")],
            out_dir / "rate_curve.png",
            title=f"d={d:g}, beta={b:g}",
            xlabel="n",
            ylabel="rate",
            loglog=True,
        )
        report = {
            "command": "predict",
            "inputs": {"d": d, "beta": b, "ambient_dim": big_d},
            "alpha_D": pred.alpha_D,
            "alpha_N": pred.alpha_N,
            "note": "rate curve is the bound shape, not a calibrated loss",
        }
        _finish(report, out_dir, [])

    _run("predict", config, out, seed, threads, body)


@main.command("covering-bound")
@common_options
def covering_bound(config, out, seed, threads):
    """Log covering number of a transformer class from its parameters."""

    def body(cfg, out_dir, _threads):
        from .scaling import ArchParams, covering_slope_in_log_delta, log_covering_number

        arch_cfg = _need(cfg, "arch", dict)
        try:
            arch = ArchParams(
                L_T=_need(arch_cfg, "L_T", int, "arch"),
                L_ff=_need(arch_cfg, "L_ff", int, "arch"),
                w_ff=_need(arch_cfg, "w_ff", int, "arch"),
                l=_need(arch_cfg, "l", int, "arch"),
                d_embd=_need(arch_cfg, "d_embd", int, "arch"),
                m=_need(arch_cfg, "m", int, "arch"),
                kappa=float(_need(arch_cfg, "kappa", (int, float), "arch")),
                M=float(_need(arch_cfg, "M", (int, float), "arch")),
                R=float(_need(arch_cfg, "R", (int, float), "arch")),
                D=_need(arch_cfg, "D", int, "arch"),
                delta=float(cfg.get("delta", 1.0)),
            )
        except AttnforgeError:
            raise
        except Exception as exc:  # bad numeric values
            raise ConfigError(f"invalid architecture parameters: {exc}")
        report = {
            "command": "covering-bound",
            "inputs": {**arch_cfg, "delta": arch.delta},
            "log_covering_number": log_covering_number(arch),
            "slope_in_minus_log_delta": covering_slope_in_log_delta(arch),
        }
        _finish(report, out_dir, [])

    _run("covering-bound", config, out, seed, threads, body)


def _load_loss_csv(path) -> list[tuple[float, float]]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or any(c.isalpha() for c in line.split(",")[0]):
                continue
            n_str, loss_str = line.split(",")[:2]
            rows.append((float(n_str), float(loss_str)))
    if not rows:
        raise ConfigError(f"no data rows in {path}")
    return rows


@main.command("fit-scaling")
@common_options
def fit_scaling(config, out, seed, threads):
    """Fit a power law to an (n, loss) curve; optionally overlay the
    exponent predicted from a given intrinsic dimension."""

    def body(cfg, out_dir, _threads):
        from .scaling import fit_power_law, predict_exponents

        path = _need(cfg, "loss_csv", str)
        mode = cfg.get("mode", "plain")
        pts = _load_loss_csv(path)
        fit = fit_power_law(pts, mode=mode)
        ns = np.array([p[0] for p in pts])
        losses = np.array([p[1] for p in pts])
        fitted = fit.coefficient * ns ** (-fit.exponent) + fit.offset
        reports.write_csv(
            out_dir / "fitted_curve.csv",
            ["n", "loss", "fitted"],
            zip(ns, losses, fitted),
        )
        series = [(ns, losses, "data"), (ns, fitted, f"fit: exponent={fit.exponent:.4g}")]
        report = {
            "command": "fit-scaling",
            "inputs": {"loss_csv": str(path), "mode": mode, "n_points": fit.n_points},
            "fit": {
                "exponent": fit.exponent,
                "coefficient": fit.coefficient,
                "offset": fit.offset,
                "residual_rms": fit.residual_rms,
            },
        }
        if "predicted_d" in cfg:
            pred = predict_exponents(float(cfg["predicted_d"]), float(cfg.get("beta", 1.0)))
            overlay = losses[0] * (ns / ns[0]) ** (-pred.alpha_D)
            series.append((ns, overlay, f"predicted alpha_D={pred.alpha_D:.4g}"))
            report["predicted_alpha_D"] = pred.alpha_D
        emit_plot(series, "loglog", out_dir / "fit.svg", "n", "loss")
        render_figure(series, out_dir / "fit.png", title="power-law fit",
                      xlabel="n", ylabel="loss", loglog=True)
        _finish(report, out_dir, [])

    _run("fit-scaling", config, out, seed, threads, body)


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------


@main.command("synth-cloud")
@common_options
def synth_cloud(config, out, seed, threads):
    """Sample a synthetic manifold into a headerless CSV point cloud."""

    def body(cfg, out_dir, _threads):
        from .intrinsic_dim import sample_synthetic_manifold, save_cloud_csv

        kind = _need(cfg, "kind", str)
        n = _need(cfg, "n", int)
        ambient = _need(cfg, "ambient_dim", int)
        the_seed = int(cfg.get("seed", 0))
        cloud = sample_synthetic_manifold(kind, n, ambient, the_seed, d=cfg.get("d"))
        name = cfg.get("out_csv", "cloud.csv")
        save_cloud_csv(cloud, out_dir / name)
        report = {
            "command": "synth-cloud",
            "inputs": {"kind": kind, "d": cfg.get("d"), "n": n,
                       "ambient_dim": ambient, "seed": the_seed},
            "rows": cloud.n,
            "out_csv": name,
        }
        _finish(report, out_dir, [])

    _run("synth-cloud", config, out, seed, threads, body)


@main.command("estimate-id")
@common_options
def estimate_id_cmd(config, out, seed, threads):
    """Batched maximum-likelihood intrinsic dimension of a point cloud."""

    def body(cfg, out_dir, _threads):
        from .intrinsic_dim import estimate_id, load_cloud_csv, sample_synthetic_manifold

        if "cloud_csv" in cfg:
            cloud = load_cloud_csv(cfg["cloud_csv"])
            source = {"cloud_csv": str(cfg["cloud_csv"])}
        elif "synth" in cfg:
            s = cfg["synth"]
            cloud = sample_synthetic_manifold(
                _need(s, "kind", str, "synth"),
                _need(s, "n", int, "synth"),
                _need(s, "ambient_dim", int, "synth"),
                int(s.get("seed", 0)),
                d=s.get("d"),
            )
            source = {"synth": s}
        else:
            raise ConfigError("config needs either 'cloud_csv' or 'synth'")
        est = estimate_id(
            cloud,
            K=int(cfg.get("K", 20)),
            batch_size=int(cfg.get("batch_size", 4096)),
            seed=int(cfg.get("seed", 0)),
            aggregate=cfg.get("aggregate", "mean"),
        )
        reports.write_json(out_dir / "id_estimate.json", est.to_json())
        report = {"command": "estimate-id", "inputs": source, "estimate": est.to_json()}
        _finish(report, out_dir, [])

    _run("estimate-id", config, out, seed, threads, body)


# ---------------------------------------------------------------------------
# approximator synthesis
# ---------------------------------------------------------------------------


def _scan_csv_rows(X, f_vals, approx_vals, limit=2000):
    err = np.abs(approx_vals - f_vals)
    order = np.argsort(err)[::-1][:limit]
    order = np.sort(order)
    for i in order:
        yield (*X[i], f_vals[i], approx_vals[i], err[i])


@main.command("approx-build")
@common_options
def approx_build(config, out, seed, threads):
    """Compile a cube target into a net; scan its error against the
    target and the grid-interpolant oracle."""

    def body(cfg, out_dir, n_threads):
        from .cube import (
            build_grid,
            choose_N,
            interpolant_error_bound,
            pou_oracle_batch,
            sup_error_scan,
            synthesize_cube_approximator,
        )
        from .runtime import model_size, net_evaluator, net_forward_batch, save_net

        target = _target_from(cfg)
        d = target.d
        beta = target.holder_exponent
        if "N" in cfg:
            N = int(cfg["N"])
        elif "epsilon" in cfg:
            N = choose_N(float(cfg["epsilon"]), d, target.holder_const, beta)
        else:
            raise ConfigError("config needs 'N' or 'epsilon'")
        scan_cfg = cfg.get("scan", {})
        resolution = int(scan_cfg.get("resolution", {1: 10_000, 2: 101, 3: 33, 4: 11}.get(d, 7)))
        scan_seed = int(scan_cfg.get("seed", cfg.get("seed", 0)))

        grid = build_grid(target, d, N)
        net = synthesize_cube_approximator(grid, target.holder_const, beta, target.sup_bound)
        scan = sup_error_scan(
            net_evaluator(net), target, d, resolution, seed=scan_seed, threads=n_threads
        )
        bound = interpolant_error_bound(d, N, target.holder_const, beta)
        rng = np.random.default_rng(scan_seed)
        pts = rng.uniform(0, 1, (2000, d))
        net_vals = net_forward_batch(net, pts)
        oracle_vals = pou_oracle_batch(grid, pts)
        agree = float(np.max(np.abs(net_vals - oracle_vals)))
        tol = max(1e-9, 10 * net.cancellation_scale * np.finfo(float).eps)

        if cfg.get("emit_net", True):
            save_net(net, out_dir / "net.json")
        f_vals = target.evaluate(pts)
        reports.write_csv(
            out_dir / "scan.csv",
            [f"x{i + 1}" for i in range(d)] + ["f", "approx", "error"],
            _scan_csv_rows(pts, f_vals, net_vals),
        )
        if d == 1:
            xs = np.linspace(0, 1, 512)[:, None]
            series = [
                (xs[:, 0], target.evaluate(xs), "target"),
                (xs[:, 0], net_forward_batch(net, xs), "net"),
            ]
            render_figure(series, out_dir / "approximation.png",
                          title=f"{target.name}, N={N}", xlabel="x", ylabel="value")
        else:
            err_sorted = np.sort(np.abs(net_vals - f_vals))
            series = [(np.arange(1, err_sorted.size + 1), np.maximum(err_sorted, 1e-18), "|error| (sorted)")]
            render_figure(series, out_dir / "approximation.png",
                          title=f"{target.name}, N={N}", xlabel="sample rank",
                          ylabel="|error|", loglog=False)

        checks = [
            reports.check_entry("sup_error_within_interpolant_bound", scan.sup_error, bound,
                                scan.sup_error <= bound),
            reports.check_entry("net_matches_oracle", agree, tol, agree <= tol),
        ]
        size = model_size(net)
        report = {
            "command": "approx-build",
            "inputs": {"target": cfg["target"], "N": N, "resolution": resolution,
                       "scan_seed": scan_seed},
            "metrics": {
                "sup_error": scan.sup_error,
                "error_bound": bound,
                "net_oracle_gap": agree,
                "cancellation_scale": net.cancellation_scale,
                "tokens": net.token_count,
                "blocks": len(net.blocks),
                "model_size_formula": size.formula,
                "learnable_entries": size.learnable_entries,
            },
            "checks": checks,
        }
        _finish(report, out_dir, [c["check"] for c in checks if not c["passed"]])

    _run("approx-build", config, out, seed, threads, body)


@main.command("approx-sweep")
@common_options
def approx_sweep(config, out, seed, threads):
    """Sweep the grid resolution and fit the error-versus-width slope."""

    def body(cfg, out_dir, n_threads):
        from .cube import build_grid, interpolant_error_bound, sup_error_scan, synthesize_cube_approximator
        from .runtime import net_evaluator
        from .scaling import fit_power_law

        target = _target_from(cfg)
        d = target.d
        beta = target.holder_exponent
        n_list = cfg.get("N_list")
        if not n_list:
            raise ConfigError("config needs a nonempty 'N_list'")
        scan_cfg = cfg.get("scan", {})
        resolution = int(scan_cfg.get("resolution", {1: 4000, 2: 61}.get(d, 17)))
        scan_seed = int(scan_cfg.get("seed", cfg.get("seed", 0)))

        rows = []
        for N in n_list:
            grid = build_grid(target, d, int(N))
            net = synthesize_cube_approximator(grid, target.holder_const, beta, target.sup_bound)
            scan = sup_error_scan(
                net_evaluator(net), target, d, resolution, seed=scan_seed, threads=n_threads
            )
            rows.append((int(N), net.token_count, scan.sup_error,
                         interpolant_error_bound(d, int(N), target.holder_const, beta)))
        fit = fit_power_law([(r[1], r[2]) for r in rows])
        slope = -fit.exponent
        expected = -beta / d
        within = abs(slope - expected) <= float(cfg.get("slope_tolerance", 0.15))

        reports.write_csv(out_dir / "sweep.csv", ["N", "tokens", "sup_error", "error_bound"], rows)
        ls = [r[1] for r in rows]
        errs = [r[2] for r in rows]
        fit_line = [fit.coefficient * l ** (-fit.exponent) for l in ls]
        emit_plot(
            [(ls, errs, "measured"), (ls, fit_line, f"fit slope {slope:.3f}")],
            "loglog", out_dir / "sweep.svg", "tokens", "sup error",
        )
        render_figure(
            [(ls, errs, "measured"), (ls, fit_line, f"fit slope {slope:.3f}")],
            out_dir / "sweep.png", title=f"width scaling, d={d}",
            xlabel="tokens", ylabel="sup error", loglog=True,
        )
        checks = [
            reports.check_entry("slope_matches_minus_beta_over_d", slope,
                                float(cfg.get("slope_tolerance", 0.15)), within)
        ]
        report = {
            "command": "approx-sweep",
            "inputs": {"target": cfg["target"], "N_list": [int(n) for n in n_list],
                       "resolution": resolution, "scan_seed": scan_seed},
            "metrics": {"fitted_slope": slope, "expected_slope": expected,
                        "residual_rms": fit.residual_rms},
            "checks": checks,
        }
        _finish(report, out_dir, [c["check"] for c in checks if not c["passed"]])

    _run("approx-sweep", config, out, seed, threads, body)


@main.command("manifold-demo")
@common_options
def manifold_demo(config, out, seed, threads):
    """Synthesize a manifold approximator and measure its sup error."""

    def body(cfg, out_dir, _threads):
        from .manifold import make_atlas, manifold_oracle, prepare_manifold_plan, synthesize_manifold_approximator
        from .runtime import net_forward_batch

        target = _target_from(cfg)
        shape = _need(cfg, "shape", str)
        charts = _need(cfg, "chart_count", int)
        epsilon = float(_need(cfg, "epsilon", (int, float)))
        atlas = make_atlas(shape, charts, cfg.get("atlas_params", {}))
        plan = prepare_manifold_plan(
            atlas, target, epsilon, N_override=cfg.get("N_override"),
            delta_override=cfg.get("delta_override"),
        )
        net = synthesize_manifold_approximator(atlas, target, epsilon, plan=plan)
        n_samples = int(cfg.get("samples", 10_000))
        sample_seed = int(cfg.get("seed", 3))
        X = atlas.geometry.sample(n_samples, seed=sample_seed)
        got = net_forward_batch(net, X)
        f_true = target.evaluate(X)
        sup_err = float(np.max(np.abs(got - f_true)))
        oracle_vals = manifold_oracle(atlas, target, X[:1000], plan=plan)
        agree = float(np.max(np.abs(net_forward_batch(net, X[:1000]) - oracle_vals)))
        tol = max(1e-9, 10 * net.cancellation_scale * np.finfo(float).eps)

        reports.write_csv(
            out_dir / "errors.csv",
            [f"x{i + 1}" for i in range(atlas.ambient_dim)] + ["f", "approx", "error"],
            _scan_csv_rows(X, f_true, got),
        )
        err_sorted = np.sort(np.abs(got - f_true))
        render_figure(
            [(np.arange(1, err_sorted.size + 1), np.maximum(err_sorted, 1e-18), "|error| (sorted)")],
            out_dir / "errors.png", title=f"{shape}, {charts} charts, eps={epsilon:g}",
            xlabel="sample rank", ylabel="|error|",
        )
        checks = [
            reports.check_entry("sup_error_within_epsilon", sup_err, epsilon, sup_err <= epsilon),
            reports.check_entry("net_matches_oracle", agree, tol, agree <= tol),
        ]
        report = {
            "command": "manifold-demo",
            "inputs": {"target": cfg["target"], "shape": shape, "chart_count": charts,
                       "epsilon": epsilon, "samples": n_samples, "seed": sample_seed},
            "metrics": {
                "sup_error": sup_err,
                "net_oracle_gap": agree,
                "grid_resolution": plan.N,
                "ramp_width": plan.delta,
                "tokens": net.token_count,
                "blocks": len(net.blocks),
            },
            "checks": checks,
        }
        _finish(report, out_dir, [c["check"] for c in checks if not c["passed"]])

    _run("manifold-demo", config, out, seed, threads, body)


if __name__ == "__main__":
    main()
