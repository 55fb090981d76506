"""Batch front door: fit, synth, eval, and budget subcommands.

One YAML run configuration drives the whole pipeline; command-line flags
override individual fields.  All randomness flows from the configured seed
through named substreams, so a fixed (config, seed) reproduces every output
byte — timestamps never enter data files (provenance sidecars carry none
either; the artifacts are content-addressed by hash instead).

Exit codes: 0 success, 2 configuration/usage, 3 schema/data mismatch,
4 privacy budget refusal, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np
import yaml

from . import baselines, dpvi, evaluate, privbayes, synthesize
from .accountant import (
    Accountant,
    BudgetExceededError,
    CalibrationError,
    MechanismRecord,
    PrivacyBudget,
    noise_multiplier_for,
)
from .dpvi import DpviConfig
from .evaluate import RegressionSpec
from .mixture import build_stratified
from .privbayes import PrivBayesConfig
from .schema import (
    Dataset,
    RowError,
    SchemaError,
    load_csv,
    load_schema,
    schema_from_dict,
    schema_to_dict,
)
from .synthesize import SynthesisPlan
from .util import substream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SCHEMA = 3
EXIT_BUDGET = 4
EXIT_NUMERIC = 5


class ConfigError(ValueError):
    """Run configuration is missing or malformed."""


def _load_yaml(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _require(cfg: dict, key: str, path: str):
    if key not in cfg:
        raise ConfigError(f"{path}: missing required key {key!r}")
    return cfg[key]


def _parse_epsilon(value) -> float:
    if value in ("inf", "infinity", None):
        return math.inf
    eps = float(value)
    if eps <= 0:
        raise ConfigError("privacy.epsilon must be positive (or 'inf')")
    return eps


def _privacy(cfg: dict, path: str) -> tuple[float, float, float]:
    block = _require(cfg, "privacy", path)
    epsilon = _parse_epsilon(block.get("epsilon"))
    delta = float(block.get("delta", 1e-5))
    if not 0 < delta < 1:
        raise ConfigError("privacy.delta must lie in (0, 1)")
    stratum_eps = float(block.get("stratum_prior_epsilon", dpvi.STRATUM_PRIOR_EPSILON))
    return epsilon, delta, stratum_eps


def _dpvi_config(cfg: dict, epsilon: float, delta: float, stratum_eps: float,
                 multi_strata: bool, seed: int) -> DpviConfig:
    block = dict(cfg.get("dpvi", {}))
    block.pop("components", None)
    iterations = int(block.get("iterations", 10000))
    sampling_ratio = float(block.get("sampling_ratio", 0.01))
    if math.isinf(epsilon):
        noise = float(block.get("noise_multiplier", 0.0))
        clip = float(block.get("clip_norm", math.inf))
    else:
        target = epsilon - (stratum_eps if multi_strata else 0.0)
        if target <= 0:
            raise ConfigError(
                "privacy.epsilon must exceed stratum_prior_epsilon for stratified models"
            )
        noise = float(
            block.get("noise_multiplier")
            or noise_multiplier_for(target, delta, sampling_ratio, iterations)
        )
        clip = float(block.get("clip_norm", 1.0))
    return DpviConfig(
        clip_norm=clip,
        noise_multiplier=noise,
        sampling_ratio=sampling_ratio,
        iterations=iterations,
        learning_rate=float(block.get("learning_rate", 1e-3)),
        mc_samples=int(block.get("mc_samples", 1)),
        seed=seed,
        optimizer=str(block.get("optimizer", "adam")),
    )


def _privbayes_config(cfg: dict, epsilon: float, seed: int) -> PrivBayesConfig:
    block = dict(cfg.get("privbayes", {}))
    share = float(block.get("structure_share", 0.5))
    if not 0 < share < 1:
        raise ConfigError("privbayes.structure_share must lie in (0, 1)")
    return PrivBayesConfig(
        epsilon_structure=share * epsilon,
        epsilon_cpt=(1.0 - share) * epsilon,
        max_parents=int(block.get("max_parents", 2)),
        bins=int(block.get("bins", 16)),
        seed=seed,
    )


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = _load_yaml(args.config)
    path = args.config
    schema = load_schema(_require(cfg, "schema", path))
    family = str(cfg.get("family", "mixture"))
    if family not in ("mixture", "privbayes"):
        raise ConfigError(f"{path}: unknown family {family!r}")
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    epsilon, delta, stratum_eps = _privacy(cfg, path)
    out = args.out or cfg.get("out", "model.json")

    limit = None if math.isinf(epsilon) else epsilon
    accountant = Accountant(target_delta=delta, epsilon_limit=limit)

    ds = load_csv(_require(cfg, "data", path), schema)

    if family == "mixture":
        components = cfg.get("dpvi", {}).get("components")
        skeleton = build_stratified(schema, components)
        multi = len(skeleton.keys) > 1
        dcfg = _dpvi_config(cfg, epsilon, delta, stratum_eps, multi, seed)
        model = dpvi.fit_stratified(
            ds, skeleton, dcfg, accountant, stratum_prior_epsilon=stratum_eps
        )
        dpvi.save_model(model, out)
    else:
        pcfg = _privbayes_config(cfg, epsilon, seed)
        net = privbayes.fit_network(ds, pcfg, accountant)
        net.privacy_report = accountant.report()
        privbayes.save_network(net, out)
        _amend_network_artifact(out, ds.n, schema)

    report = accountant.report()
    report_path = out + ".privacy.json"
    with open(report_path, "w", encoding="utf-8") as handle:
        json.dump(report, handle, indent=2, sort_keys=True)
    print(f"model written to {out}")
    print(f"privacy report written to {report_path}")
    print(f"epsilon spent: {report['epsilon_spent']:.6g} at delta {report['target_delta']:g}")
    return EXIT_OK


def _amend_network_artifact(path: str, n_total: int, original_schema) -> None:
    """Attach the record count and pre-binning schema to a network artifact."""
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    payload["n_total"] = n_total
    payload["original_schema"] = schema_to_dict(original_schema)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle)


def cmd_synth(args: argparse.Namespace) -> int:
    with open(args.model, encoding="utf-8") as handle:
        peek = json.load(handle)
    fmt = peek.get("format")
    plan = SynthesisPlan(
        m=args.m,
        per_record_theta=not args.shared_theta,
        seed=args.seed if args.seed is not None else 0,
    )
    if fmt == dpvi.MODEL_FORMAT:
        model = dpvi.load_model(args.model)
        synthetic = synthesize.sample_ppd(model, plan)
        privacy = model.privacy_report
    elif fmt == privbayes.NETWORK_FORMAT:
        net = privbayes.load_network(args.model)
        m = plan.m if plan.m is not None else int(peek.get("n_total", 0))
        if m < 1:
            raise ConfigError("--m required: artifact carries no record count")
        binned = privbayes.sample_network(net, m, plan.seed)
        original = schema_from_dict(peek["original_schema"]) if "original_schema" in peek else net.schema
        synthetic = privbayes.to_original_schema(
            binned, original, substream(plan.seed, "bin-decode")
        )
        rows = synthesize.apply_structural_rules(np.array(synthetic.rows), original)
        synthetic = Dataset(schema=original, rows=rows)
        privacy = net.privacy_report
    else:
        raise dpvi.ArtifactFormatError(f"{args.model}: unrecognized artifact format {fmt!r}")

    sidecar = synthesize.write_synthetic(
        args.out, synthetic, plan, model_path=args.model, privacy_report=privacy
    )
    print(f"synthetic data written to {args.out} ({synthetic.n} records)")
    print(f"provenance written to {sidecar}")
    return EXIT_OK


VALID_METRICS = ("frobenius", "poisson", "logistic", "bootstrap", "rarity", "budget-split")


def _regression_spec(block: dict) -> RegressionSpec:
    return RegressionSpec(
        response=str(block["response"]),
        regressors=tuple(block.get("regressors", [])),
        designated=tuple(block.get("designated", [])),
        family=str(block.get("family", "poisson")),
        offset_feature=block.get("offset_feature"),
        add_intercept=bool(block.get("add_intercept", True)),
    )


def cmd_eval(args: argparse.Namespace) -> int:
    spec_cfg = _load_yaml(args.spec)
    schema = load_schema(_require(spec_cfg, "schema", args.spec))
    original = load_csv(args.original, schema)
    synthetic_sets = [load_csv(p, schema) for p in args.synthetic]

    metrics = spec_cfg.get("metrics", ["frobenius"])
    unknown = [m for m in metrics if m not in VALID_METRICS]
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}; valid: {list(VALID_METRICS)}")

    os.makedirs(args.out, exist_ok=True)
    results: dict = {"original": args.original, "synthetic": list(args.synthetic)}

    if "frobenius" in metrics:
        truth = evaluate.second_moment_matrix(original)
        errors = [
            evaluate.frobenius_error(truth, evaluate.second_moment_matrix(s))
            for s in synthetic_sets
        ]
        results["frobenius"] = {
            "per_synthetic": errors,
            "mean": float(np.mean(errors)),
        }

    reg_block = spec_cfg.get("regression")
    if any(m in metrics for m in ("poisson", "bootstrap", "rarity")) and not reg_block:
        raise ConfigError("regression block required for poisson/bootstrap/rarity metrics")

    if "poisson" in metrics or "rarity" in metrics:
        rspec = _regression_spec(reg_block)
        orig_report = evaluate.fit_spec(original, rspec)
        designated = evaluate.resolve_designated(rspec, orig_report.names)
        synth_reports = [evaluate.fit_spec(s, rspec) for s in synthetic_sets]
        results["poisson"] = {
            "names": list(orig_report.names),
            "original": {
                "coefficients": orig_report.coefficients.tolist(),
                "std_errors": orig_report.std_errors.tolist(),
                "p_values": orig_report.p_values.tolist(),
            },
            "synthetic": [
                {
                    "coefficients": r.coefficients.tolist(),
                    "p_values": r.p_values.tolist(),
                    "discovery": evaluate.discovery_verdict(r, designated).combined,
                }
                for r in synth_reports
            ],
            "original_discovery": evaluate.discovery_verdict(orig_report, designated).combined,
        }
        if "rarity" in metrics:
            counts_block = spec_cfg.get("case_counts")
            if counts_block:
                case_counts = {str(k): float(v) for k, v in counts_block.items()}
            else:
                # cases = records where the dummy/binary regressor fires
                x, _, names, _ = evaluate.build_design(original, rspec)
                case_counts = {
                    name: float(x[:, j].sum())
                    for j, name in enumerate(names)
                    if name != "intercept" and set(np.unique(x[:, j])) <= {0.0, 1.0}
                }
            curve = evaluate.rarity_binned_error(orig_report, synth_reports, case_counts)
            results["rarity"] = {
                "single_bin_fallback": curve.single_bin_fallback,
                "bins": [
                    {
                        "case_range": list(b.case_range),
                        "mean_abs_error": b.mean_abs_error,
                        "reference_inverse_count": b.reference,
                        "coefficients": list(b.coefficient_names),
                    }
                    for b in curve.bins
                ],
            }

    if "logistic" in metrics:
        block = spec_cfg.get("classification")
        if not block:
            raise ConfigError("classification block required for the logistic metric")
        cspec = _regression_spec({**block, "family": "logistic"})
        x_test, y_test, names, _ = evaluate.build_design(original, cspec)
        majority = max(float(np.mean(y_test)), 1.0 - float(np.mean(y_test)))
        per_synth = []
        for s in synthetic_sets:
            x_train, y_train, _, _ = evaluate.build_design(s, cspec)
            model = evaluate.logistic_regression(x_train, y_train, names=names)
            per_synth.append(model.accuracy(x_test, y_test))
        results["logistic"] = {
            "majority_baseline": majority,
            "synthetic_accuracy": per_synth,
            "mean_accuracy": float(np.mean(per_synth)),
        }

    if "bootstrap" in metrics:
        rspec = _regression_spec(reg_block)
        iters = int(spec_cfg.get("bootstrap", {}).get("iterations", 100))
        seed = int(spec_cfg.get("seed", 0))
        rate, degenerate = evaluate.bootstrap_discovery_rate(original, rspec, iters, seed)
        results["bootstrap"] = {
            "original_rate": rate,
            "iterations": iters,
            "degenerate_resamples": degenerate,
        }

    if "budget-split" in metrics:
        block = spec_cfg.get("budget_split")
        if not block:
            raise ConfigError("budget_split block required for the budget-split metric")
        fit_cfg = _load_yaml(block["fit_config"])
        total = PrivacyBudget(
            _parse_epsilon(fit_cfg["privacy"]["epsilon"]),
            float(fit_cfg["privacy"].get("delta", 1e-5)),
        )
        sampler = make_twin_sampler(fit_cfg)
        table = baselines.budget_split_experiment(
            original,
            [int(t) for t in block.get("T", [1, 10, 20, 50])],
            total,
            sampler,
            tailored_repeats=int(block.get("tailored_repeats", 20)),
            twin_repeats=int(block.get("twin_repeats", 1)),
            seed=int(spec_cfg.get("seed", 0)),
        )
        results["budget_split"] = table

    out_path = os.path.join(args.out, "report.json")
    with open(out_path, "w", encoding="utf-8") as handle:
        json.dump(results, handle, indent=2, sort_keys=True)
    print(f"evaluation report written to {out_path}")
    return EXIT_OK


def make_twin_sampler(fit_cfg: dict):
    """Twin factory for the budget-split experiment, from a fit config dict."""
    family = str(fit_cfg.get("family", "mixture"))

    def sampler(ds: Dataset, budget: PrivacyBudget, seed: int) -> Dataset:
        accountant = Accountant(target_delta=budget.delta, epsilon_limit=budget.epsilon)
        if family == "mixture":
            skeleton = build_stratified(ds.schema, fit_cfg.get("dpvi", {}).get("components"))
            multi = len(skeleton.keys) > 1
            stratum_eps = float(
                fit_cfg.get("privacy", {}).get(
                    "stratum_prior_epsilon", dpvi.STRATUM_PRIOR_EPSILON
                )
            )
            dcfg = _dpvi_config(
                fit_cfg, budget.epsilon, budget.delta, stratum_eps, multi, seed
            )
            model = dpvi.fit_stratified(
                ds, skeleton, dcfg, accountant, stratum_prior_epsilon=stratum_eps
            )
            return synthesize.sample_ppd(model, SynthesisPlan(seed=seed))
        pcfg = _privbayes_config(fit_cfg, budget.epsilon, seed)
        net = privbayes.fit_network(ds, pcfg, accountant)
        binned = privbayes.sample_network(net, ds.n, seed)
        return privbayes.to_original_schema(binned, ds.schema, substream(seed, "bin-decode"))

    return sampler


def cmd_budget(args: argparse.Namespace) -> int:
    """Project the epsilon a configured plan will spend, without touching data."""
    cfg = _load_yaml(args.config)
    path = args.config
    epsilon, delta, stratum_eps = _privacy(cfg, path)
    family = str(cfg.get("family", "mixture"))
    schema = load_schema(_require(cfg, "schema", path))
    accountant = Accountant(target_delta=delta)

    if math.isinf(epsilon):
        print("non-private plan (epsilon = inf)")
        return EXIT_OK

    if family == "mixture":
        multi = len(schema.stratify_by) > 0
        dcfg = _dpvi_config(cfg, epsilon, delta, stratum_eps, multi, int(cfg.get("seed", 0)))
        if multi:
            accountant.append(
                MechanismRecord(
                    kind="laplace",
                    params={"scale": 2.0 / stratum_eps, "sensitivity": 2.0},
                    label="stratum proportions",
                )
            )
        accountant.append(
            MechanismRecord(
                kind="subsampled_gaussian",
                params={
                    "sigma": dcfg.noise_multiplier,
                    "q": dcfg.sampling_ratio,
                    "steps": dcfg.iterations,
                },
                label="dpvi plan",
            )
        )
        print(f"noise multiplier: {dcfg.noise_multiplier:.4f}")
    else:
        pcfg = _privbayes_config(cfg, epsilon, int(cfg.get("seed", 0)))
        accountant.append(
            MechanismRecord(
                kind="exponential",
                params={"epsilon": pcfg.epsilon_structure, "sensitivity": 1.0},
                label="structure plan",
            )
        )
        accountant.append(
            MechanismRecord(
                kind="laplace",
                params={"scale": 2.0 / pcfg.epsilon_cpt, "sensitivity": 2.0},
                label="conditionals plan",
            )
        )
    budget = accountant.epsilon()
    print(f"projected epsilon: {budget.epsilon:.6g} at delta {budget.delta:g}")
    print(f"target epsilon: {epsilon:g} -> {'OK' if budget.epsilon <= epsilon + 1e-9 else 'OVERRUN'}")
    print(accountant.report_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dptwin",
        description="Train DP generative models, release synthetic twins, evaluate them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="train a model from a run config")
    p_fit.add_argument("--config", required=True, help="YAML run configuration")
    p_fit.add_argument("--out", help="model artifact path (default from config)")
    p_fit.add_argument("--seed", type=int, help="override the configured seed")
    p_fit.set_defaults(func=cmd_fit)

    p_synth = sub.add_parser("synth", help="sample a synthetic twin from a model artifact")
    p_synth.add_argument("--model", required=True, help="model artifact path")
    p_synth.add_argument("--out", required=True, help="synthetic CSV output path")
    p_synth.add_argument("--m", type=int, help="records to draw (default: training count)")
    p_synth.add_argument("--seed", type=int, help="sampling seed (default 0)")
    p_synth.add_argument(
        "--shared-theta",
        action="store_true",
        help="draw one parameter vector for the whole dataset (ablation)",
    )
    p_synth.set_defaults(func=cmd_synth)

    p_eval = sub.add_parser("eval", help="compare original and synthetic data")
    p_eval.add_argument("--original", required=True)
    p_eval.add_argument("--synthetic", required=True, nargs="+")
    p_eval.add_argument("--spec", required=True, help="YAML evaluation spec")
    p_eval.add_argument("--out", required=True, help="report output directory")
    p_eval.set_defaults(func=cmd_eval)

    p_budget = sub.add_parser("budget", help="project the epsilon of a plan")
    p_budget.add_argument("--config", required=True)
    p_budget.set_defaults(func=cmd_budget)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, RowError, dpvi.ArtifactFormatError) as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except BudgetExceededError as exc:
        print(f"budget refusal: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (
        CalibrationError,
        evaluate.RankDeficientError,
        dpvi.TrainingDivergedError,
        FloatingPointError,
    ) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KeyError as exc:
        print(f"config error: missing key {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
