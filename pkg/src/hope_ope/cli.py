"""Command line entry point for the benchmark harness.

Subcommands cover the pipeline stages: ``simulate`` writes a dataset,
``reconstruct`` fits the reward pipeline artifacts, ``evaluate`` runs
the estimators against the oracle values, ``benchmark`` chains all
three with provenance, and ``report`` renders figures from a finished
run.  Exit codes: 0 success, 1 usage or configuration error, 2 a
``--check`` assertion failed.

All artifacts are written with sorted JSON keys and fixed float
formatting, so a rerun with the same config and seed is byte-identical.
The ``HOPE_THREADS`` environment variable caps worker parallelism;
every stage is computed with deterministic sequential kernels, so any
cap >= 1 is honored without changing the output.
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from pathlib import Path

import click
import numpy as np

from . import env_sepsis
from .config import ConfigError, ExperimentConfig
from .critical_obs import (CriticalSet, all_critical_set, all_gaps,
                           critical_set, fit_q, select_threshold_elbow)
from .estimators import (prepare_estimator, rand_hope_rewards, reward_channel,
                         soft_hope_rewards, sparse_hope_rewards)
from .metrics import (EstimateResult, PolicyEvaluation, bootstrap, regret_at_1,
                      spearman_rank, welch_t_test)
from .neighbors import NeighborIndex, build_neighbor_index, reconstruct
from .reward_reconstruction import RewardModel, fit_preliminary
from .trajectory import (Dataset, estimate_behavior_policy, load_jsonl,
                         load_sidecar, save_jsonl, save_sidecar, strip_rewards)

DATASET_FILE = "dataset.jsonl"
SIDECAR_FILE = "ground_truth.jsonl"
REWARD_MODEL_FILE = "reward_model.json"
QTABLE_FILE = "qtable.json"
CRITICAL_FILE = "critical.json"
NEIGHBORS_FILE = "neighbors.json"
RHAT_FILE = "rhat.json"
GAPS_FILE = "gaps.csv"
ESTIMATES_FILE = "estimates.json"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
SIGNIFICANCE_FILE = "significance.csv"
PROVENANCE_FILE = "provenance.json"


class CheckFailure(click.ClickException):
    exit_code = 2


def thread_cap() -> int:
    """Parallelism cap from HOPE_THREADS (default 1)."""
    raw = os.environ.get("HOPE_THREADS")
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise click.UsageError(f"HOPE_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise click.UsageError("HOPE_THREADS must be >= 1")
    return cap


def _load_config(path, seed) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            cfg = ExperimentConfig.load(path)
        except FileNotFoundError:
            raise click.UsageError(f"config file not found: {path}")
        except ConfigError as exc:
            raise click.UsageError(f"invalid config: {exc}")
    if seed is not None:
        data = cfg.to_dict()
        data["seed"] = seed
        data["sim"]["seed"] = seed
        cfg = ExperimentConfig.from_dict(data)
    return cfg


def _parse_estimators(cfg: ExperimentConfig, text) -> ExperimentConfig:
    if text is None:
        return cfg
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    if not names:
        raise click.UsageError("--estimators must name at least one estimator")
    data = cfg.to_dict()
    data["estimators"] = list(names)
    try:
        return ExperimentConfig.from_dict(data)
    except ConfigError as exc:
        raise click.UsageError(str(exc))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":"))
                    + "\n")


def _write_text(path: Path, text: str) -> None:
    path.write_text(text if text.endswith("\n") else text + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise click.UsageError(
            f"missing artifact {path.name} in {path.parent} (run '{hint}' first)")
    return path


def _feature_fn(dataset: Dataset):
    """Decoded ordinal features for sepsis-shaped data, raw ids otherwise."""
    if dataset.n_obs == env_sepsis.N_STATES:
        return env_sepsis.observation_features
    return None


# -- pipeline stages ------------------------------------------------------------


def run_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    model = env_sepsis.SepsisModel(cfg.sim)
    behavior = model.behavior_policy()
    dataset = model.simulate_dataset(behavior, cfg.n_trajectories)
    stripped, sidecar = strip_rewards(dataset)
    save_jsonl(stripped, out / DATASET_FILE)
    save_sidecar(sidecar, out / SIDECAR_FILE)
    final = np.array([gt[-1] for gt in sidecar])
    summary = {
        "n_trajectories": len(dataset),
        "mean_aggregated_reward": float(np.mean(
            [t.aggregated_reward for t in dataset.trajectories])),
        "discharged": int((final > 0).sum()),
        "died": int((final < 0).sum()),
        "censored": int((final == 0).sum()),
    }
    return summary


def run_reconstruct(cfg: ExperimentConfig, out: Path) -> dict:
    dataset = load_jsonl(_require(out / DATASET_FILE, "simulate"))
    model = fit_preliminary(dataset, solver=cfg.solver, ridge=cfg.ridge)
    _write_text(out / REWARD_MODEL_FILE, model.to_json())

    preliminary = model.predict_trajectories(dataset)
    qtable = fit_q(dataset, preliminary, smoothing=cfg.smoothing)
    _write_text(out / QTABLE_FILE, qtable.to_json())

    gaps = all_gaps(qtable)
    if cfg.h_mode == "all_critical":
        crit = all_critical_set(dataset)
    elif cfg.h_mode == "elbow":
        crit = critical_set(qtable, select_threshold_elbow(gaps))
    else:
        crit = critical_set(qtable, cfg.h)
    _write_text(out / CRITICAL_FILE, crit.to_json())
    order = np.argsort(-gaps, kind="stable")
    lines = ["observation,q_gap"]
    lines += [f"{int(o)},{float(gaps[o])!r}" for o in order if gaps[o] > 0]
    _write_text(out / GAPS_FILE, "\n".join(lines))

    index = build_neighbor_index(dataset, cfg.k_neighbors,
                                 feature_fn=_feature_fn(dataset))
    _write_text(out / NEIGHBORS_FILE, index.to_json())

    rhat = reconstruct(dataset, model, crit, index)
    _write_json(out / RHAT_FILE, {"rhat": [[float(v) for v in r]
                                           for r in rhat]})
    return {
        "seen_pairs": len(model.table),
        "fit_loss": model.fit_meta["final_loss"],
        "critical_observations": len(crit.observations),
        "threshold": crit.threshold,
        "indexed_events": len(index.entries),
    }


def _reward_channels(cfg: ExperimentConfig, dataset: Dataset, out: Path,
                     needed: set[str]) -> dict[str, list[np.ndarray]]:
    """Materialize every reward channel the estimator list asks for."""
    channels: dict[str, list[np.ndarray]] = {}
    if "sparse" in needed:
        channels["sparse"] = reward_channel(dataset, "sparse")
    if "ground_truth" in needed:
        sidecar = load_sidecar(_require(out / SIDECAR_FILE, "simulate"))
        channels["ground_truth"] = [np.asarray(r, dtype=np.float64)
                                    for r in sidecar]
    if needed & {"reconstructed", "sparse_hope", "soft_hope", "rand_hope"}:
        model = RewardModel.from_json(
            _require(out / REWARD_MODEL_FILE, "reconstruct").read_text())
        crit = CriticalSet.from_json(
            _require(out / CRITICAL_FILE, "reconstruct").read_text())
        index = NeighborIndex.from_json(
            _require(out / NEIGHBORS_FILE, "reconstruct").read_text())
        if "reconstructed" in needed:
            rhat = json.loads(
                _require(out / RHAT_FILE, "reconstruct").read_text())["rhat"]
            channels["reconstructed"] = [np.asarray(r, dtype=np.float64)
                                         for r in rhat]
        if "sparse_hope" in needed:
            channels["sparse_hope"] = sparse_hope_rewards(dataset, crit, index)
        if "soft_hope" in needed:
            channels["soft_hope"] = soft_hope_rewards(dataset, model, index)
        if "rand_hope" in needed:
            channels["rand_hope"] = rand_hope_rewards(
                dataset, model, crit, cfg.k_neighbors,
                repeats=cfg.rand_hope_repeats,
                seed=cfg.seed ^ zlib.crc32(b"rand_hope"),
                feature_fn=_feature_fn(dataset))
    return channels


def _channel_key(cfg: ExperimentConfig, estimator: str) -> str:
    if estimator in cfg.reward_channels:
        return cfg.reward_channels[estimator]
    if estimator in ("sparse_hope", "soft_hope", "rand_hope"):
        return estimator
    return cfg.channel_for(estimator)


def run_evaluate(cfg: ExperimentConfig, out: Path) -> dict:
    dataset = load_jsonl(_require(out / DATASET_FILE, "simulate"))
    model = env_sepsis.SepsisModel(cfg.sim)
    targets = model.evaluation_policies()
    behavior = (None if cfg.behavior_mode == "stored"
                else estimate_behavior_policy(dataset, cfg.smoothing))
    needed = {_channel_key(cfg, est) for est in cfg.estimators}
    channels = _reward_channels(cfg, dataset, out, needed)

    evaluations: list[PolicyEvaluation] = []
    for pname in cfg.policies:
        policy = targets[pname]
        ev = PolicyEvaluation(pname, model.true_policy_value(policy))
        for est in cfg.estimators:
            key = _channel_key(cfg, est)
            fn = prepare_estimator(est, dataset, policy, behavior=behavior,
                                   rewards=channels[key],
                                   gamma=cfg.sim.gamma)
            boot_seed = cfg.seed ^ zlib.crc32(f"{pname}:{est}".encode())
            try:
                point = fn()
            except ValueError as exc:
                # the estimator is undefined on this data (e.g. a zero-weight
                # length partition); record the failure instead of aborting
                ev.estimates[est] = EstimateResult(
                    est, float("nan"), bootstrap_samples=[],
                    reward_channel=key, failed_replicas=cfg.bootstrap_b,
                    note=str(exc))
                continue
            samples, failures = bootstrap(fn, len(dataset), cfg.bootstrap_b,
                                          seed=boot_seed)
            ev.estimates[est] = EstimateResult(
                est, point, bootstrap_samples=samples, reward_channel=key,
                failed_replicas=failures)
        evaluations.append(ev)

    _write_estimates(out, evaluations)
    _write_metrics(out, evaluations)
    summary = _write_summary(cfg, out, evaluations)
    _write_significance(out, evaluations)
    return summary


def _write_estimates(out: Path, evaluations) -> None:
    payload = {}
    for ev in evaluations:
        payload[ev.policy] = {
            "true_value": ev.true_value,
            "estimators": {
                est: {
                    "estimate": res.point_estimate,
                    "channel": res.reward_channel,
                    "failed_replicas": res.failed_replicas,
                    "note": res.note,
                    "bootstrap": res.bootstrap_samples,
                }
                for est, res in ev.estimates.items()
            },
        }
    _write_json(out / ESTIMATES_FILE, payload)


def _write_metrics(out: Path, evaluations) -> None:
    lines = ["policy,estimator,channel,estimate,true_value,abs_error,"
             "bootstrap_mean,bootstrap_se,failed_replicas"]
    for ev in evaluations:
        for est, res in ev.estimates.items():
            boot = np.asarray(res.bootstrap_samples)
            mean = float(boot.mean()) if boot.size else float("nan")
            se = (float(boot.std(ddof=1)) if boot.size > 1 else float("nan"))
            have_truth = ev.true_value is not None
            err = (abs(ev.true_value - res.point_estimate) if have_truth
                   else float("nan"))
            lines.append(",".join([
                ev.policy, est, res.reward_channel,
                repr(res.point_estimate),
                repr(ev.true_value) if have_truth else "",
                repr(err), repr(mean), repr(se), str(res.failed_replicas),
            ]))
    _write_text(out / METRICS_FILE, "\n".join(lines))


def _write_summary(cfg: ExperimentConfig, out: Path, evaluations) -> dict:
    true_values = [ev.true_value for ev in evaluations]
    have_truth = all(t is not None for t in true_values)
    per_estimator = {}
    for est in cfg.estimators:
        points = [ev.estimates[est].point_estimate for ev in evaluations]
        entry = {
            "best_policy": evaluations[int(np.argmax(points))].policy,
        }
        if have_truth:
            entry["mean_abs_error"] = float(np.mean(
                [abs(t - p) for t, p in zip(true_values, points)]))
        if have_truth and len(evaluations) >= 2:
            try:
                entry["spearman"] = spearman_rank(true_values, points)
            except ValueError as exc:
                entry["spearman"] = None
                entry["spearman_note"] = str(exc)
            regret, normalized = regret_at_1(evaluations, est)
            entry["regret_at_1"] = regret
            entry["regret_normalized"] = normalized
        per_estimator[est] = entry
    summary = {
        "policies": {ev.policy: ev.true_value for ev in evaluations},
        "estimators": per_estimator,
        # commonly reported elsewhere but not part of this benchmark
        "not_implemented": ["magic", "dualdice"],
    }
    _write_json(out / SUMMARY_FILE, summary)
    return summary


def _write_significance(out: Path, evaluations) -> None:
    lines = ["estimator,policy_a,policy_b,t_statistic,p_value,"
             "significant,degenerate"]
    for est in (evaluations[0].estimates if evaluations else {}):
        for i, ea in enumerate(evaluations):
            for eb in evaluations[i + 1:]:
                a = ea.estimates[est].bootstrap_samples
                b = eb.estimates[est].bootstrap_samples
                if len(a) < 2 or len(b) < 2:
                    continue
                rep = welch_t_test(a, b)
                lines.append(",".join([
                    est, ea.policy, eb.policy,
                    repr(rep.t_statistic), repr(rep.p_value),
                    str(rep.significant).lower(),
                    str(rep.degenerate).lower(),
                ]))
    _write_text(out / SIGNIFICANCE_FILE, "\n".join(lines))


def _stage(label: str, fn, *args):
    """Run a pipeline stage, labeling propagated module errors."""
    try:
        return fn(*args)
    except click.ClickException:
        raise
    except (ValueError, KeyError) as exc:
        raise click.ClickException(f"[{label}] {exc}")


def run_benchmark(cfg: ExperimentConfig, out: Path) -> dict:
    sim_summary = _stage("simulate", run_simulate, cfg, out)
    rec_summary = _stage("reconstruct", run_reconstruct, cfg, out)
    eval_summary = _stage("evaluate", run_evaluate, cfg, out)
    artifacts = [name for name in (
        DATASET_FILE, SIDECAR_FILE, REWARD_MODEL_FILE, QTABLE_FILE,
        CRITICAL_FILE, GAPS_FILE, NEIGHBORS_FILE, RHAT_FILE,
        ESTIMATES_FILE, METRICS_FILE, SUMMARY_FILE, SIGNIFICANCE_FILE,
    ) if (out / name).exists()]
    provenance = {
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "artifacts": {name: _sha256(out / name) for name in artifacts},
    }
    _write_json(out / PROVENANCE_FILE, provenance)
    return {"simulate": sim_summary, "reconstruct": rec_summary,
            "evaluate": eval_summary}


def run_check(summary: dict) -> list[tuple[str, bool, str]]:
    """Sanity assertions on a finished benchmark's evaluate summary."""
    ests = summary["estimators"]
    results = []
    if "hope" not in ests or "wis" not in ests:
        raise click.UsageError(
            "--check needs both 'hope' and 'wis' in the estimator list")
    spearman = ests["hope"].get("spearman")
    results.append((
        "hope ranks policies like the oracle (spearman == 1.0)",
        spearman == 1.0,
        f"spearman={spearman}",
    ))
    mae_hope = ests["hope"]["mean_abs_error"]
    mae_wis = ests["wis"]["mean_abs_error"]
    results.append((
        "hope beats sparse-channel wis on mean absolute error",
        mae_hope < mae_wis,
        f"hope={mae_hope:.6f} wis={mae_wis:.6f}",
    ))
    return results


# -- click wiring ----------------------------------------------------------------


config_option = click.option(
    "--config", "config_path", type=click.Path(), default=None,
    help="Experiment config JSON (defaults used when omitted).")
seed_option = click.option(
    "--seed", type=int, default=None,
    help="Override the config seed (also reseeds the simulator).")
out_option = click.option(
    "--out", "out_dir", type=click.Path(), default="run",
    show_default=True, help="Run directory for artifacts.")


@click.group()
def cli():
    """Off-policy evaluation benchmark for aggregated-reward data."""
    thread_cap()


@cli.command()
@config_option
@seed_option
@out_option
def simulate(config_path, seed, out_dir):
    """Simulate a behavior-policy dataset and its ground-truth sidecar."""
    cfg = _load_config(config_path, seed)
    summary = run_simulate(cfg, Path(out_dir))
    click.echo(json.dumps(summary, sort_keys=True))


@cli.command("reconstruct")
@config_option
@seed_option
@out_option
def reconstruct_cmd(config_path, seed, out_dir):
    """Fit the reward reconstruction pipeline on a simulated dataset."""
    cfg = _load_config(config_path, seed)
    summary = _stage("reconstruct", run_reconstruct, cfg, Path(out_dir))
    click.echo(json.dumps(summary, sort_keys=True))


@cli.command()
@config_option
@seed_option
@out_option
@click.option("--estimators", "estimator_list", default=None,
              help="Comma-separated estimator subset.")
def evaluate(config_path, seed, out_dir, estimator_list):
    """Run the estimators and write metrics against oracle values."""
    cfg = _parse_estimators(_load_config(config_path, seed), estimator_list)
    summary = _stage("evaluate", run_evaluate, cfg, Path(out_dir))
    click.echo(json.dumps(summary, sort_keys=True))


@cli.command()
@config_option
@seed_option
@out_option
@click.option("--estimators", "estimator_list", default=None,
              help="Comma-separated estimator subset.")
@click.option("--check", is_flag=True,
              help="Assert benchmark sanity criteria (exit 2 on failure).")
def benchmark(config_path, seed, out_dir, estimator_list, check):
    """Simulate, reconstruct and evaluate in one run with provenance."""
    cfg = _parse_estimators(_load_config(config_path, seed), estimator_list)
    summary = run_benchmark(cfg, Path(out_dir))
    click.echo(json.dumps(summary["evaluate"], sort_keys=True))
    if check:
        failed = False
        for label, ok, detail in run_check(summary["evaluate"]):
            click.echo(f"[{'PASS' if ok else 'FAIL'}] {label} ({detail})")
            failed = failed or not ok
        if failed:
            raise CheckFailure("benchmark check failed")


@cli.command()
@out_option
@click.option("--figures", "fig_dir", type=click.Path(), default=None,
              help="Figure output directory (defaults to the run directory).")
def report(out_dir, fig_dir):
    """Render summary figures and a delimited report from a finished run."""
    from . import report as report_mod
    run_dir = Path(out_dir)
    _require(run_dir / METRICS_FILE, "evaluate")
    written = report_mod.render_report(
        run_dir, Path(fig_dir) if fig_dir else run_dir)
    for path in written:
        click.echo(str(path))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return exc.exit_code
    except click.Abort:
        return 1
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
