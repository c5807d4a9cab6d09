"""Command-line surface binding every module.

Subcommands cover matching, estimation, testing, design efficiency,
bias diagnostics, sensitivity analysis, the exclusion audit, two-step
debiased matching, and frozen simulation presets.  Conventions:

- CSV for tables, JSON for reports; stdout carries one-line summaries.
- Every artifact is accompanied by (or embeds) a run record with the
  full resolved configuration and seed, so single-worker reruns are
  byte-identical.  Artifacts never contain timestamps.
- Exit codes: 0 success, 2 validation error, 3 infeasibility,
  4 numerical failure.
- ``DOSEMATCH_SEED`` supplies the default seed when no ``--seed`` flag
  is given.
"""

from __future__ import annotations

import functools
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import presets
from .bias import (
    leave_one_out_diagnostic,
    linear_imbalance_bias,
    save_leave_one_out_csv,
)
from .blossom import MatchingInfeasibleError
from .cohort import (
    Cohort,
    CohortValidationError,
    ComplianceMix,
    PartiallyLinearDgp,
    SemiparametricDoseDgp,
    generate_partially_linear_cohort,
    load_cohort,
)
from .debias import (
    DebiasConfig,
    MipInfeasibleError,
    TimeBudgetError,
    save_comparison_csv,
    two_step_debias,
)
from .efficiency import are as _are_value
from .efficiency import required_sample_size
from .inference import (
    WeakInstrumentError,
    invert_ci,
    pair_stats,
    sign_test,
    wald_estimate,
    wilcoxon_signed_rank,
)
from .matching import (
    DistanceSpec,
    DoseTieError,
    balance_report,
    design_from_pairs,
    load_design_csv,
    save_balance_csv,
    save_design_csv,
    strengthen,
)
from .sensitivity import (
    AuditStratum,
    InfeasibleZoneError,
    PowerSetting,
    SensitivityZone,
    gamma_model_audit,
    heatmap_grid,
    power_study,
    save_interval_csv,
    sensitivity_interval,
)

ENV_SEED = "DOSEMATCH_SEED"

EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4

_NUMERICAL_ERRORS = (WeakInstrumentError, np.linalg.LinAlgError, FloatingPointError)
_INFEASIBLE_ERRORS = (
    MatchingInfeasibleError,
    DoseTieError,
    InfeasibleZoneError,
    MipInfeasibleError,
    TimeBudgetError,
)
_VALIDATION_ERRORS = (CohortValidationError, ValueError, KeyError, OSError)


def _die(exc: BaseException, code: int) -> None:
    kind = type(exc)
    click.echo(f"error [{kind.__module__}.{kind.__name__}]: {exc}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map module exceptions onto the documented exit codes.

    Order matters: the numerical and infeasibility families subclass
    ValueError, so they are tried before the generic validation net.
    """

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.Abort):
            raise
        except _NUMERICAL_ERRORS as exc:
            _die(exc, EXIT_NUMERICAL)
        except _INFEASIBLE_ERRORS as exc:
            _die(exc, EXIT_INFEASIBLE)
        except _VALIDATION_ERRORS as exc:
            _die(exc, EXIT_VALIDATION)

    return wrapper


def _resolve_seed(flag: Optional[int], default: int = 0) -> int:
    if flag is not None:
        return int(flag)
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise click.UsageError(
                f"{ENV_SEED} must be an integer, got {env!r}"
            ) from None
    return default


def _dump_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n"


def _write_record(artifact_path, subcommand: str, config: dict) -> None:
    """Sidecar run record for CSV artifacts (JSON reports embed theirs)."""
    record = {"subcommand": subcommand, "config": config}
    Path(str(artifact_path) + ".run.json").write_text(_dump_json(record))


def _floats(text: str, name: str) -> tuple:
    try:
        return tuple(float(tok) for tok in str(text).split(",") if tok.strip())
    except ValueError:
        raise click.UsageError(f"{name} must be a comma-separated float list") from None


_METRIC = click.Choice(["rank_mahalanobis", "mahalanobis", "euclidean"])


def _spec_options(fn):
    fn = click.option(
        "--metric", type=_METRIC, default="rank_mahalanobis", show_default=True,
        help="Covariate distance metric.",
    )(fn)
    fn = click.option(
        "--caliper", type=float, default=0.0, show_default=True,
        help="Dose-separation caliper (0 disables the penalty).",
    )(fn)
    fn = click.option(
        "--sinks", type=int, default=0, show_default=True,
        help="Number of sink pseudo-subjects to absorb hard-to-pair members.",
    )(fn)
    fn = click.option(
        "--penalty", type=float, default=None,
        help="Caliper penalty (default: above every covariate distance).",
    )(fn)
    fn = click.option(
        "--penalty-mode", type=click.Choice(["threshold", "shortfall"]),
        default="threshold", show_default=True,
        help="Flat penalty inside the caliper, or proportional to shortfall.",
    )(fn)
    fn = click.option(
        "--block-size", type=int, default=None,
        help="Match within blocks of roughly this many subjects (speed knob).",
    )(fn)
    fn = click.option(
        "--forbid-dose-ties", is_flag=True, default=False,
        help="Error out on dose-tied pairs instead of dropping them.",
    )(fn)
    return fn


def _spec_from_opts(
    metric, caliper, sinks, penalty, penalty_mode, block_size, forbid_dose_ties
) -> DistanceSpec:
    return DistanceSpec(
        covariate_metric=metric,
        caliper_lambda=float(caliper),
        penalty=penalty,
        sinks=int(sinks),
        forbid_dose_ties=bool(forbid_dose_ties),
        penalty_mode=penalty_mode,
        block_size=block_size,
    )


def _spec_config(spec: DistanceSpec) -> dict:
    return {
        "covariate_metric": spec.covariate_metric,
        "caliper_lambda": spec.caliper_lambda,
        "penalty": spec.penalty,
        "sinks": spec.sinks,
        "forbid_dose_ties": spec.forbid_dose_ties,
        "penalty_mode": spec.penalty_mode,
        "block_size": spec.block_size,
    }


def _spec_from_dict(doc: dict) -> DistanceSpec:
    allowed = {
        "covariate_metric", "caliper_lambda", "penalty", "sinks",
        "forbid_dose_ties", "penalty_mode", "block_size",
    }
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown design spec keys: {sorted(unknown)}")
    return DistanceSpec(**doc)


@click.group()
@click.version_option(package_name="dosematch", prog_name="dosematch")
def main() -> None:
    """Matched encouragement designs for continuous instruments:
    near/far matching, design strengthening, randomization inference,
    sensitivity analysis, and debiased two-step matching."""


# ---------------------------------------------------------------------------
# match / strengthen


def _run_match(subcommand, cohort_path, output, balance, spec, extra_config):
    cohort = load_cohort(cohort_path)
    design = strengthen(cohort, spec)
    save_design_csv(design, cohort, output)
    if balance is not None:
        save_balance_csv(balance_report(design, cohort), balance)
    config = {
        "cohort": str(cohort_path),
        "output": str(output),
        "balance": None if balance is None else str(balance),
        "spec": _spec_config(spec),
    }
    config.update(extra_config)
    _write_record(output, subcommand, config)
    dropped = len(design.dropped)
    click.echo(
        f"{subcommand}: {design.n_pairs} pairs, compliance "
        f"{design.compliance_hat:.4f}, {dropped} dropped -> {output}"
    )


@main.command()
@click.argument("cohort_path", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True,
              help="Matched design CSV.")
@click.option("--balance", type=click.Path(dir_okay=False), default=None,
              help="Also write a covariate balance CSV here.")
@click.option("--metric", type=_METRIC, default="rank_mahalanobis", show_default=True)
@click.option("--block-size", type=int, default=None,
              help="Match within blocks of roughly this many subjects.")
@click.option("--forbid-dose-ties", is_flag=True, default=False)
@_guarded
def match(cohort_path, output, balance, metric, block_size, forbid_dose_ties):
    """Pair all subjects by covariate closeness (no strengthening)."""
    spec = DistanceSpec(
        covariate_metric=metric,
        block_size=block_size,
        forbid_dose_ties=forbid_dose_ties,
    )
    _run_match("match", cohort_path, output, balance, spec, {})


@main.command(name="strengthen")
@click.argument("cohort_path", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True,
              help="Matched design CSV.")
@click.option("--balance", type=click.Path(dir_okay=False), default=None,
              help="Also write a covariate balance CSV here.")
@_spec_options
@_guarded
def strengthen_cmd(cohort_path, output, balance, **spec_opts):
    """Pair subjects while pushing dose gaps past a caliper, absorbing
    the hardest-to-separate subjects into sinks."""
    spec = _spec_from_opts(**spec_opts)
    _run_match("strengthen", cohort_path, output, balance, spec, {})


# ---------------------------------------------------------------------------
# estimate / test


def _load_pair(cohort_path, design_path):
    cohort = load_cohort(cohort_path)
    cols = load_design_csv(design_path)
    design = design_from_pairs(
        cohort, list(zip(cols["encouraged_id"], cols["control_id"]))
    )
    return cohort, design


@main.command()
@click.argument("cohort_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("design_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--sigma", type=float, default=None,
              help="Known noise scale (default: estimated from pair spread).")
@click.option("--ci/--no-ci", default=False, show_default=True,
              help="Add a test-inversion confidence interval.")
@click.option("--test", "test_name", type=click.Choice(["wilcoxon", "sign"]),
              default="wilcoxon", show_default=True)
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="Write the report as JSON.")
@_guarded
def estimate(cohort_path, design_path, sigma, ci, test_name, alpha, output):
    """Effect-ratio (Wald) estimate on a matched design."""
    cohort, design = _load_pair(cohort_path, design_path)
    report = wald_estimate(design, cohort, sigma_hat=sigma)
    payload = json.loads(report.to_json())
    line = (
        f"estimate: beta_hat={report.beta_hat:.6g} sd={report.sd:.6g} "
        f"compliance={report.compliance_hat:.4f} pairs={report.n_pairs}"
    )
    if ci:
        lo, hi = invert_ci(design, cohort, test=test_name, alpha=alpha)
        payload["ci"] = {"lower": lo, "upper": hi, "alpha": alpha, "test": test_name}
        line += f" ci=[{lo:.6g}, {hi:.6g}]"
    if output is not None:
        payload["config"] = {
            "cohort": str(cohort_path), "design": str(design_path),
            "sigma": sigma, "ci": ci, "test": test_name, "alpha": alpha,
        }
        Path(output).write_text(_dump_json(payload))
        line += f" -> {output}"
    click.echo(line)


@main.command()
@click.argument("cohort_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("design_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--method", type=click.Choice(["wilcoxon", "sign"]),
              default="wilcoxon", show_default=True)
@click.option("--side", type=click.Choice(["two_sided", "greater", "less"]),
              default="two_sided", show_default=True)
@click.option("--beta0", type=float, default=0.0, show_default=True,
              help="Null effect ratio being tested.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="Write the report as JSON.")
@_guarded
def test(cohort_path, design_path, method, side, beta0, output):
    """Randomization test of a sharp null on a matched design."""
    cohort, design = _load_pair(cohort_path, design_path)
    stats = pair_stats(design, cohort, beta0)
    runner = wilcoxon_signed_rank if method == "wilcoxon" else sign_test
    report = runner(stats, side)
    if output is not None:
        payload = json.loads(report.to_json())
        payload["config"] = {
            "cohort": str(cohort_path), "design": str(design_path),
            "method": method, "side": side, "beta0": beta0,
        }
        Path(output).write_text(_dump_json(payload))
    click.echo(
        f"test: {report.method} ({side}) beta0={beta0:.6g} "
        f"statistic={report.statistic:.6g} p={report.p_value:.6g}"
    )


# ---------------------------------------------------------------------------
# are / samplesize


def _mix(iota_c: float, iota_a: float) -> ComplianceMix:
    return ComplianceMix(
        iota_c=iota_c, iota_a=iota_a, iota_n=1.0 - iota_c - iota_a
    )


@main.command()
@click.option("--iota1", type=float, required=True,
              help="Complier share of the first design.")
@click.option("--iota2", type=float, required=True,
              help="Complier share of the second design.")
@click.option("--iota-a", type=float, default=0.0, show_default=True,
              help="Always-taker share (shared by both designs).")
@click.option("--test", "test_name", type=click.Choice(["wilcoxon", "sign"]),
              default="wilcoxon", show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None)
@_guarded
def are(iota1, iota2, iota_a, test_name, output):
    """Asymptotic relative efficiency of design 2 over design 1
    (the factor by which design 1 needs more pairs)."""
    value = _are_value(_mix(iota1, iota_a), _mix(iota2, iota_a), test_name)
    if output is not None:
        payload = {
            "are": value,
            "config": {"iota1": iota1, "iota2": iota2, "iota_a": iota_a,
                       "test": test_name},
        }
        Path(output).write_text(_dump_json(payload))
    click.echo(f"{value:.6g}")


@main.command()
@click.option("--iota-c", type=float, required=True, help="Complier share.")
@click.option("--iota-a", type=float, default=0.0, show_default=True)
@click.option("--effect", type=float, required=True,
              help="Additive treatment effect to detect.")
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--power", "target_power", type=float, default=0.8, show_default=True)
@click.option("--test", "test_name", type=click.Choice(["wilcoxon", "sign"]),
              default="wilcoxon", show_default=True)
@click.option("--reps", type=int, default=20000, show_default=True)
@click.option("--seed", type=int, default=None, help=f"Default: ${ENV_SEED} or 0.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None)
@_guarded
def samplesize(iota_c, iota_a, effect, alpha, target_power, test_name, reps, seed,
               output):
    """Matched pairs required to reach a target power, by simulation."""
    seed = _resolve_seed(seed)
    report = required_sample_size(
        _mix(iota_c, iota_a), effect, alpha, target_power, test_name,
        reps=reps, seed=seed,
    )
    if output is not None:
        payload = {
            "theo": report.theoretical,
            "sim": report.n_pairs,
            "se": report.se,
            "reps": report.reps,
            "seed": report.seed,
            "power": report.power,
            "config": {
                "iota_c": iota_c, "iota_a": iota_a, "effect": effect,
                "alpha": alpha, "target_power": target_power,
                "test": test_name, "reps": reps, "seed": seed,
            },
        }
        Path(output).write_text(_dump_json(payload))
    click.echo(
        f"samplesize: n_pairs={report.n_pairs} (theoretical "
        f"{report.theoretical}) power={report.power:.3f} se={report.se:.3f}"
    )


# ---------------------------------------------------------------------------
# bias / leaveoneout


@main.command()
@click.argument("cohort_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("design_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--gamma", required=True,
              help="Comma-separated linear coefficients, one per covariate.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None)
@_guarded
def bias(cohort_path, design_path, gamma, output):
    """Attribute covariate-imbalance bias under a declared linear
    outcome signal."""
    cohort, design = _load_pair(cohort_path, design_path)
    coefs = _floats(gamma, "--gamma")
    report = linear_imbalance_bias(design, cohort, coefs)
    if output is not None:
        payload = {
            "contributions": dict(report.contributions),
            "signed_total": report.signed_total,
            "config": {
                "cohort": str(cohort_path), "design": str(design_path),
                "gamma": list(coefs),
            },
        }
        Path(output).write_text(_dump_json(payload))
    worst = max(report.contributions.items(), key=lambda kv: kv[1], default=("-", 0.0))
    click.echo(
        f"bias: signed_total={report.signed_total:.6g} "
        f"worst={worst[0]} ({worst[1]:.6g})"
    )


@main.command()
@click.argument("cohort_path", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True,
              help="Diagnostic CSV (one row per held-out covariate).")
@_spec_options
@_guarded
def leaveoneout(cohort_path, output, **spec_opts):
    """Hide each covariate in turn and compare a plain design against a
    strengthened one on the hidden column (lurking-variable rehearsal)."""
    cohort = load_cohort(cohort_path)
    spec1 = _spec_from_opts(**spec_opts)
    spec0 = DistanceSpec(
        covariate_metric=spec1.covariate_metric,
        block_size=spec1.block_size,
        forbid_dose_ties=spec1.forbid_dose_ties,
    )
    rows = leave_one_out_diagnostic(cohort, spec0, spec1)
    save_leave_one_out_csv(rows, output)
    _write_record(output, "leaveoneout", {
        "cohort": str(cohort_path), "output": str(output),
        "spec0": _spec_config(spec0), "spec1": _spec_config(spec1),
    })
    ratios = [r.delta_ratio for r in rows if not r.degenerate]
    top = max(ratios) if ratios else math.nan
    click.echo(
        f"leaveoneout: {len(rows)} covariates, max delta_ratio={top:.4g} -> {output}"
    )


# ---------------------------------------------------------------------------
# sensitivity / heatmap / power / audit


@main.command()
@click.argument("cohort_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("design_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--zone", "zone_path", type=click.Path(exists=True, dir_okay=False),
              required=True,
              help='JSON: {"delta_set": [...], "tau_set": [...], "lambda1_set": [...]}.')
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--k", type=int, default=50, show_default=True,
              help="Imputations per confounder model.")
@click.option("--seed", type=int, default=None, help=f"Default: ${ENV_SEED} or 0.")
@click.option("--sigma", type=float, default=None,
              help="Known noise scale (default: estimated per imputation).")
@click.option("--sigma-method", type=click.Choice(["linear_f", "matched_moments"]),
              default="linear_f", show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True,
              help="Sensitivity interval JSON.")
@click.option("--points", type=click.Path(dir_okay=False), default=None,
              help="Also write the per-point CI grid as CSV.")
@_guarded
def sensitivity(cohort_path, design_path, zone_path, alpha, k, seed, sigma,
                sigma_method, output, points):
    """Sensitivity interval over a (delta, tau, lambda1) assumption zone."""
    seed = _resolve_seed(seed)
    cohort, design = _load_pair(cohort_path, design_path)
    doc = json.loads(Path(zone_path).read_text())
    zone = SensitivityZone(
        delta_set=tuple(doc["delta_set"]),
        tau_set=tuple(doc["tau_set"]),
        lambda1_set=tuple(doc["lambda1_set"]),
    )
    si = sensitivity_interval(
        design, cohort, zone, alpha=alpha, k=k, seed=seed,
        sigma=sigma, sigma_method=sigma_method,
    )
    payload = json.loads(si.to_json())
    payload["config"] = {
        "cohort": str(cohort_path), "design": str(design_path),
        "zone": doc, "alpha": alpha, "k": k, "seed": seed,
        "sigma": sigma, "sigma_method": sigma_method,
    }
    Path(output).write_text(_dump_json(payload))
    if points is not None:
        save_interval_csv(si, points)
        _write_record(points, "sensitivity", payload["config"])
    click.echo(
        f"sensitivity: SI=[{si.lower:.6g}, {si.upper:.6g}] alpha={alpha} "
        f"infeasible_models={len(si.infeasible)} -> {output}"
    )


@main.command()
@click.argument("cohort_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("design_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--taus", required=True, help="Comma-separated tau grid.")
@click.option("--lambda1s", required=True, help="Comma-separated lambda1 grid.")
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--k", type=int, default=50, show_default=True)
@click.option("--n-deltas", type=int, default=21, show_default=True)
@click.option("--seed", type=int, default=None, help=f"Default: ${ENV_SEED} or 0.")
@click.option("--sigma", type=float, default=None)
@click.option("--sigma-method", type=click.Choice(["linear_f", "matched_moments"]),
              default="linear_f", show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True,
              help="Cell CSV (delta_sup per tau x lambda1).")
@_guarded
def heatmap(cohort_path, design_path, taus, lambda1s, alpha, k, n_deltas, seed,
            sigma, sigma_method, output):
    """Largest standardized confounding shift each (tau, lambda1) cell
    tolerates before the finding is overturned."""
    seed = _resolve_seed(seed)
    cohort, design = _load_pair(cohort_path, design_path)
    grid = heatmap_grid(
        design, cohort, _floats(taus, "--taus"), _floats(lambda1s, "--lambda1s"),
        alpha=alpha, k=k, seed=seed, n_deltas=n_deltas,
        sigma=sigma, sigma_method=sigma_method,
    )
    grid.to_csv(output)
    _write_record(output, "heatmap", {
        "cohort": str(cohort_path), "design": str(design_path),
        "taus": list(grid.taus), "lambda1s": list(grid.lambda1s),
        "alpha": alpha, "k": k, "n_deltas": n_deltas, "seed": seed,
        "sigma": sigma, "sigma_method": sigma_method,
    })
    finite = grid.delta_sup_std[np.isfinite(grid.delta_sup_std)]
    top = float(finite.max()) if finite.size else math.nan
    click.echo(
        f"heatmap: {len(grid.taus)}x{len(grid.lambda1s)} cells, "
        f"max delta_sup_std={top:.4g} -> {output}"
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              required=True,
              help="JSON study config: designs, settings, optional dgp/reps/k.")
@click.option("--reps", type=int, default=None, help="Override config reps.")
@click.option("--seed", type=int, default=None, help=f"Default: ${ENV_SEED} or 0.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True,
              help="Power table CSV (xi, lambda1, design, power, bias, sd, ...).")
@_guarded
def power(config_path, reps, seed, output):
    """Rejection rate of the full sensitivity pipeline across designs
    and scenario settings, on favorable synthetic cohorts."""
    doc = json.loads(Path(config_path).read_text())
    known = {"dgp", "designs", "settings", "reps", "k", "alpha", "sigma",
             "sigma_method", "seed"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown power config keys: {sorted(unknown)}")
    if "settings" not in doc or not doc["settings"]:
        raise ValueError("power config needs a nonempty 'settings' list")
    dgp = (
        PartiallyLinearDgp(**doc["dgp"]) if "dgp" in doc else presets.TABLE3.dgp()
    )
    designs = (
        {name: _spec_from_dict(sd) for name, sd in doc["designs"].items()}
        if "designs" in doc
        else presets.TABLE3.designs()
    )
    settings = [PowerSetting.table_row(**s) for s in doc["settings"]]
    reps = reps if reps is not None else int(doc.get("reps", 2000))
    seed = _resolve_seed(seed if seed is not None else doc.get("seed"))
    table = power_study(
        dgp, designs, settings,
        reps=reps,
        alpha=float(doc.get("alpha", 0.05)),
        k=int(doc.get("k", 50)),
        seed=seed,
        sigma=doc.get("sigma"),
        sigma_method=doc.get("sigma_method", "matched_moments"),
    )
    table.to_csv(output)
    resolved = dict(doc)
    resolved["reps"] = reps
    resolved["seed"] = seed
    _write_record(output, "power", {"config": resolved, "output": str(output)})
    click.echo(f"power: {len(table.rows)} rows ({reps} reps) -> {output}")


@main.command()
@click.option("--gamma", type=float, required=True,
              help="Exclusion-violation strength in the dose model.")
@click.option("--n", type=int, default=2400, show_default=True)
@click.option("--block-size", type=int, default=300, show_default=True)
@click.option("--dose-low", type=float, default=-50.0, show_default=True)
@click.option("--dose-high", type=float, default=50.0, show_default=True)
@click.option("--u-value", type=int, default=1, show_default=True)
@click.option("--reps", type=int, default=200, show_default=True)
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--seed", type=int, default=None, help=f"Default: ${ENV_SEED} or 0.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="Audit report JSON.")
@_guarded
def audit(gamma, n, block_size, dose_low, dose_high, u_value, reps, alpha, seed,
          output):
    """Operating characteristics of the exclusion audit on the
    semiparametric dose model."""
    seed = _resolve_seed(seed)
    report = gamma_model_audit(
        SemiparametricDoseDgp(n=n, gamma=gamma),
        DistanceSpec(block_size=block_size),
        AuditStratum(dose_low=dose_low, dose_high=dose_high, u_value=u_value),
        reps=reps, seed=seed, alpha=alpha,
    )
    if output is not None:
        payload = json.loads(report.to_json())
        payload["config"] = {
            "gamma": gamma, "n": n, "block_size": block_size,
            "dose_low": dose_low, "dose_high": dose_high, "u_value": u_value,
            "reps": reps, "alpha": alpha, "seed": seed,
        }
        Path(output).write_text(_dump_json(payload))
    click.echo(
        f"audit: gamma={gamma:g} strict_rate={report.strict_rejection_rate:.3f} "
        f"rejection_rate={report.rejection_rate:.3f} "
        f"min_qualifying={int(report.n_qualifying.min())}"
    )


# ---------------------------------------------------------------------------
# debias


@main.command()
@click.argument("cohort_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--phi", type=float, default=None,
              help="Minimum average dose gap (absolute).")
@click.option("--k", type=float, default=None,
              help="phi as a multiple of the stage-one mean dose gap.")
@click.option("--solver", type=click.Choice(["exact", "local"]), default="exact",
              show_default=True)
@click.option("--budget", type=float, default=60.0, show_default=True,
              help="Solver time budget in seconds.")
@click.option("--restarts", type=int, default=8, show_default=True,
              help="Local-search restarts.")
@click.option("--min-pairs", type=int, default=0, show_default=True,
              help="Fail (infeasible) below this many pairs.")
@click.option("--workers", type=int, default=1, show_default=True,
              help="Parallel solver workers (>1 forfeits determinism).")
@click.option("--seed", type=int, default=None, help=f"Default: ${ENV_SEED} or 0.")
@click.option("--sink-caliper", type=float, default=None,
              help="Also report a sink-strengthened middle column (caliper).")
@click.option("--sink-sinks", type=int, default=0,
              help="Sinks for the middle column design.")
@click.option("--metric", type=_METRIC, default="rank_mahalanobis", show_default=True)
@click.option("--block-size", type=int, default=None,
              help="Stage-one matching block size.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True,
              help="Stage comparison CSV.")
@click.option("--design", "design_out", type=click.Path(dir_okay=False), default=None,
              help="Also write the stage-two design CSV.")
@_guarded
def debias(cohort_path, phi, k, solver, budget, restarts, min_pairs, workers, seed,
           sink_caliper, sink_sinks, metric, block_size, output, design_out):
    """Two-step debiased matching: rematch for dose separation subject
    to never worsening stage-one covariate balance."""
    seed = _resolve_seed(seed)
    cohort = load_cohort(cohort_path)
    spec = DistanceSpec(covariate_metric=metric, block_size=block_size)
    sink_spec = None
    if sink_caliper is not None:
        sink_spec = DistanceSpec(
            covariate_metric=metric, caliper_lambda=sink_caliper,
            sinks=sink_sinks, block_size=block_size,
        )
    config = DebiasConfig(
        phi=phi,
        k=k,
        solver="exact_bnb" if solver == "exact" else "local_search",
        time_budget=budget,
        min_pairs=min_pairs,
        restarts=restarts,
        seed=seed,
        workers=workers,
    )
    result = two_step_debias(cohort, spec, config, sink_spec=sink_spec)
    save_comparison_csv(result.comparison, output)
    run_config = {
        "cohort": str(cohort_path), "phi": phi, "k": k, "solver": solver,
        "budget": budget, "restarts": restarts, "min_pairs": min_pairs,
        "workers": workers, "seed": seed, "sink_caliper": sink_caliper,
        "sink_sinks": sink_sinks, "metric": metric, "block_size": block_size,
        "resolved_phi": result.phi, "output": str(output),
        "design": None if design_out is None else str(design_out),
    }
    _write_record(output, "debias", run_config)
    if design_out is not None:
        save_design_csv(result.stage2, cohort, design_out)
        _write_record(design_out, "debias", run_config)
    sol = result.solution
    click.echo(
        f"debias: {result.stage2.n_pairs} pairs (stage one "
        f"{result.stage1.n_pairs}), compliance "
        f"{result.stage2.compliance_hat:.4f} vs {result.stage1.compliance_hat:.4f}, "
        f"phi={result.phi:.6g}, solver={sol.solver} "
        f"{'exact' if sol.exact else f'gap={sol.optimality_gap}'} -> {output}"
    )


# ---------------------------------------------------------------------------
# simulate (frozen presets)


@main.command()
@click.argument("preset", type=click.Choice(list(presets.PRESET_NAMES)))
@click.option("--reps", type=int, default=None, help="Override preset replications.")
@click.option("--seed", type=int, default=None, help=f"Default: ${ENV_SEED} or 0.")
@click.option("--workers", type=int, default=1, show_default=True,
              help="Solver workers (table6 only; >1 forfeits determinism).")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True,
              help="Output CSV (tables) or JSON (audit).")
@_guarded
def simulate(preset, reps, seed, workers, output):
    """Run a frozen benchmark preset by name (table2, table3, table5,
    table6, audit)."""
    seed = _resolve_seed(seed)
    config = {"preset": preset, "reps": reps, "seed": seed, "workers": workers,
              "output": str(output)}
    if preset == "table2":
        res = presets.run_table2(reps=reps, seed=seed)
        lines = ["label,iota_c,n_theoretical,n_simulated,power,se,reps,seed"]
        for label, iota_c in (("weak", presets.TABLE2.iota_weak),
                              ("strong", presets.TABLE2.iota_strong)):
            r = res[label]
            lines.append(
                f"{label},{iota_c!r},{r.theoretical},{r.n_pairs},"
                f"{r.power!r},{r.se!r},{r.reps},{r.seed}"
            )
        Path(output).write_text("\n".join(lines) + "\n")
        config["ratio_sim"] = res["ratio_sim"]
        config["ratio_theory"] = res["ratio_theory"]
        _write_record(output, "simulate", config)
        click.echo(
            f"simulate table2: n={res['weak'].n_pairs}/{res['strong'].n_pairs} "
            f"ratio={res['ratio_sim']:.3f} (theory {res['ratio_theory']:.3f}) "
            f"-> {output}"
        )
    elif preset == "table3":
        table = presets.run_table3(reps=reps, seed=seed)
        table.to_csv(output)
        _write_record(output, "simulate", config)
        by = {(r.label, r.design): r for r in table.rows}
        click.echo(
            "simulate table3: size "
            f"{by[('size', 'plain')].power:.3f}/{by[('size', 'strong')].power:.3f}, "
            "case1 "
            f"{by[('case1', 'plain')].power:.3f}/{by[('case1', 'strong')].power:.3f}, "
            "case2 "
            f"{by[('case2', 'plain')].power:.3f}/{by[('case2', 'strong')].power:.3f} "
            f"-> {output}"
        )
    elif preset == "table5":
        res = presets.run_table5(reps=reps, seed=seed)
        lines = ["model,design,compliance,u_gap,bias,delta_ratio"]
        for model in sorted(res):
            ratio = res[model]["delta_ratio"]
            for design in ("plain", "strong"):
                row = res[model][design]
                lines.append(
                    f"{model},{design},{row['compliance']!r},{row['u_gap']!r},"
                    f"{row['bias']!r},{ratio!r}"
                )
        Path(output).write_text("\n".join(lines) + "\n")
        _write_record(output, "simulate", config)
        ratios = "  ".join(
            f"model{m}: {res[m]['delta_ratio']:.3f}" for m in sorted(res)
        )
        click.echo(f"simulate table5: bias ratios {ratios} -> {output}")
    elif preset == "table6":
        res = presets.run_table6(seed=seed if seed else 20250812, workers=workers)
        save_comparison_csv(res.comparison, output)
        _write_record(output, "simulate", config)
        click.echo(
            f"simulate table6: pairs "
            + "/".join(str(n) for n in res.comparison.n_pairs)
            + ", compliance "
            + "/".join(f"{c:.3f}" for c in res.comparison.compliance)
            + f" -> {output}"
        )
    else:  # audit
        rep1 = presets.run_audit(1.0, reps=reps, seed=seed)
        rep0 = presets.run_audit(0.0, reps=reps, seed=seed + 1)
        payload = {
            "gamma_1": json.loads(rep1.to_json()),
            "gamma_0": json.loads(rep0.to_json()),
            "config": config,
        }
        Path(output).write_text(_dump_json(payload))
        click.echo(
            f"simulate audit: strict_rate(gamma=1)={rep1.strict_rejection_rate:.3f} "
            f"rejection_rate(gamma=0)={rep0.rejection_rate:.3f} -> {output}"
        )


if __name__ == "__main__":
    main()
