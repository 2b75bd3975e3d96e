"""Command line entry point: one subcommand per pipeline stage.

Every command writes its artifacts plus a manifest.json into --out. The
manifest echoes the effective config, so feeding it back through --config
reruns the stage exactly. Precedence for every setting: an explicit flag
wins over the config file, which wins over built-in defaults.

Exit codes: 0 on success, 1 for runtime or numeric failures (diverged
training, non-finite values), 2 for usage and file errors.
"""

from __future__ import annotations

import functools
import json
import os
import sys

import click
import numpy as np
from click.core import ParameterSource

from . import __version__
from .artifacts import read_json, read_table, write_csv, write_json, write_manifest
from .dataset import (
    DatasetConfig,
    Run,
    align,
    dataset_manifest,
    make_pairs,
    pairs_from_manifest,
    split_and_order,
)
from .environment import EnvParams, default_initial_pose
from .errors import NonFiniteError, TrainingDiverged
from .exploration import ExplorationConfig, PressureSequence, generate_sequence
from .forward_model import ForwardModel, TrainConfig, evaluate_run, train_forward
from .ppo import (
    PolicyParams,
    PpoConfig,
    aggregate_curves,
    evaluate_policy,
    run_seeds,
    train_policy,
)
from .surrogate import SurrogateConfig, collect_run


def _stage(fn):
    """Map exceptions to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except (FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)

    return wrapper


def _common_options(fn):
    fn = click.option("--jobs", type=int, default=1, help="Workers for the parallel contracts.")(fn)
    fn = click.option(
        "--config", "config_path", type=click.Path(), default=None,
        help="JSON config file (or a manifest.json from an earlier run).",
    )(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=".", help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Seed for this stage.")(fn)
    return fn


def _load_config_file(config_path: str | None) -> dict:
    if config_path is None:
        return {}
    doc = read_json(config_path)
    if not isinstance(doc, dict):
        raise ValueError(f"{config_path}: config must be a JSON object")
    # a manifest from an earlier run works directly as a config file
    if "command" in doc and "config" in doc:
        doc = doc["config"]
    return doc


class _Resolver:
    """Field-by-field precedence: explicit flag > config section > default."""

    def __init__(self, ctx: click.Context, section: dict):
        self.ctx = ctx
        self.section = section

    def __call__(self, flag: str, key: str | None = None, default=None):
        key = key or flag
        if self.ctx.get_parameter_source(flag) == ParameterSource.COMMANDLINE:
            return self.ctx.params[flag]
        if key in self.section:
            return self.section[key]
        flag_value = self.ctx.params.get(flag)
        if flag_value is not None:
            return flag_value
        return default


def _out_dir(out: str) -> str:
    os.makedirs(out, exist_ok=True)
    return out


@click.group()
@click.version_option(__version__, prog_name="softreach")
def main():
    """Exploration, surrogate logging, dataset building, model and policy
    training, and evaluation for the soft-arm reaching pipeline."""


# ---------------------------------------------------------------------------
# explore


@main.command()
@click.option("--alpha", type=float, default=None, help="Walk smoothness in [0, 1).")
@click.option("--beta", type=float, default=None, help="Budget sensitivity (> 0).")
@click.option("--pmax", type=float, default=None, help="Safety budget for the pressure sum, kPa.")
@click.option("--pb", type=float, default=None, help="Baseline pressure the walk reverts to, kPa.")
@click.option("--valves", type=int, default=None, help="Number of valves.")
@click.option("--steps", type=int, default=None, help="Rows to generate.")
@click.option("--noise-std", type=float, default=None, help="Std of the exploration noise, kPa.")
@_common_options
@click.pass_context
@_stage
def explore(ctx, alpha, beta, pmax, pb, valves, steps, noise_std, seed, out, config_path, jobs):
    """Generate a safe exploration pressure sequence CSV."""
    file_cfg = _load_config_file(config_path)
    pick = _Resolver(ctx, file_cfg.get("exploration", {}))
    defaults = ExplorationConfig()
    cfg = ExplorationConfig(
        alpha=float(pick("alpha", default=defaults.alpha)),
        beta=float(pick("beta", default=defaults.beta)),
        p_max=float(pick("pmax", "p_max", defaults.p_max)),
        p_b=float(pick("pb", "p_b", defaults.p_b)),
        n_valves=int(pick("valves", "n_valves", defaults.n_valves)),
        n_steps=int(pick("steps", "n_steps", defaults.n_steps)),
        noise_std=float(pick("noise_std", default=defaults.noise_std)),
        seed=int(pick("seed", default=defaults.seed)),
    )
    sequence = generate_sequence(cfg)
    out = _out_dir(out)
    sequence.to_csv(os.path.join(out, "pressures.csv"))
    write_manifest(
        out,
        command="explore",
        config={"exploration": cfg.to_dict()},
        seed=cfg.seed,
        outputs=["pressures.csv"],
    )
    click.echo(f"wrote {cfg.n_steps} steps to {os.path.join(out, 'pressures.csv')}")


# ---------------------------------------------------------------------------
# collect


def _read_pressure_log(path: str) -> tuple[np.ndarray, np.ndarray]:
    header, table = read_table(path)
    if len(header) < 2 or header[0] != "t_s" or any(not h.endswith("_kpa") for h in header[1:]):
        raise ValueError(f"{path}: expected header t_s,p1_kpa,... got {header}")
    return table[:, 0], table[:, 1:]


def _read_mocap_log(path: str) -> tuple[np.ndarray, np.ndarray]:
    _, table = read_table(path, expected_header=["t_s", "x_mm", "y_mm", "z_mm"])
    return table[:, 0], table[:, 1:]


@main.command()
@click.option("--pressures", "pressures_path", type=click.Path(), default=None,
              help="Pressure sequence CSV to roll through the surrogate plant.")
@click.option("--pressure-log", type=click.Path(), default=None,
              help="Timestamped pressure log (t_s,p1_kpa,...) to align.")
@click.option("--mocap-log", type=click.Path(), default=None,
              help="Timestamped position log (t_s,x_mm,y_mm,z_mm) to align.")
@click.option("--run-id", type=str, default=None, help="Identifier stored in the run.")
@click.option("--tau", type=float, default=None, help="Surrogate pressure time constant, s.")
@click.option("--dt", type=float, default=None, help="Surrogate control period, s.")
@click.option("--gain", type=float, default=None, help="Surrogate lateral gain, mm/kPa.")
@click.option("--z0", type=float, default=None, help="Surrogate rest height, mm.")
@click.option("--compression-gain", type=float, default=None, help="Surrogate axial gain, mm/kPa.")
@click.option("--noise-std", type=float, default=None, help="Surrogate sensor noise std, mm.")
@_common_options
@click.pass_context
@_stage
def collect(ctx, pressures_path, pressure_log, mocap_log, run_id, tau, dt, gain, z0,
            compression_gain, noise_std, seed, out, config_path, jobs):
    """Produce a run CSV: surrogate rollout of a pressure sequence, or
    nearest-timestamp alignment of two real logs."""
    surrogate_mode = pressures_path is not None
    align_mode = pressure_log is not None or mocap_log is not None
    if surrogate_mode == align_mode:
        raise click.UsageError("pass either --pressures or both --pressure-log and --mocap-log")
    out = _out_dir(out)
    file_cfg = _load_config_file(config_path)

    if surrogate_mode:
        pick = _Resolver(ctx, file_cfg.get("surrogate", {}))
        defaults = SurrogateConfig()
        cfg = SurrogateConfig(
            tau=float(pick("tau", default=defaults.tau)),
            dt=float(pick("dt", default=defaults.dt)),
            gain=float(pick("gain", default=defaults.gain)),
            z0=float(pick("z0", default=defaults.z0)),
            compression_gain=float(pick("compression_gain", default=defaults.compression_gain)),
            sensor_noise_std=float(pick("noise_std", "sensor_noise_std", defaults.sensor_noise_std)),
            seed=int(pick("seed", default=defaults.seed)),
        )
        sequence = PressureSequence.from_csv(pressures_path)
        run = collect_run(sequence.steps, cfg, run_id=run_id or _stem(pressures_path))
        run.to_csv(os.path.join(out, "run.csv"))
        write_manifest(
            out,
            command="collect",
            config={"surrogate": cfg.to_dict(), "run_id": run.run_id},
            seed=cfg.seed,
            inputs=[pressures_path],
            outputs=["run.csv"],
        )
    else:
        if pressure_log is None or mocap_log is None:
            raise click.UsageError("alignment needs both --pressure-log and --mocap-log")
        p_t, p = _read_pressure_log(pressure_log)
        m_t, pos = _read_mocap_log(mocap_log)
        run = align(p_t, p, m_t, pos, run_id=run_id or _stem(pressure_log))
        run.to_csv(os.path.join(out, "run.csv"))
        write_manifest(
            out,
            command="collect",
            config={"align": {"run_id": run.run_id}},
            seed=None,
            inputs=[pressure_log, mocap_log],
            outputs=["run.csv"],
        )
    click.echo(f"wrote {len(run)} samples to {os.path.join(out, 'run.csv')}")


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


# ---------------------------------------------------------------------------
# build-dataset


@main.command(name="build-dataset")
@click.argument("runs", nargs=-1, required=True, type=click.Path())
@click.option("--window", type=int, default=None, help="Window length in samples.")
@click.option("--step", type=int, default=None, help="Stride between window starts.")
@click.option("--split-fraction", type=float, default=None, help="Training fraction.")
@click.option("--ordering", type=click.Choice(["permuted", "sequential"]), default=None)
@click.option("--split-level", type=click.Choice(["pair", "run"]), default=None)
@_common_options
@click.pass_context
@_stage
def build_dataset(ctx, runs, window, step, split_fraction, ordering, split_level,
                  seed, out, config_path, jobs):
    """Slice run CSVs into windows and record a train/test split manifest."""
    file_cfg = _load_config_file(config_path)
    pick = _Resolver(ctx, file_cfg.get("dataset", {}))
    defaults = DatasetConfig()
    cfg = DatasetConfig(
        window_length=int(pick("window", "window_length", defaults.window_length)),
        step=int(pick("step", default=defaults.step)),
        split_fraction=float(pick("split_fraction", default=defaults.split_fraction)),
        ordering=str(pick("ordering", default=defaults.ordering)),
        split_seed=int(pick("seed", "split_seed", defaults.split_seed)),
        split_level=str(pick("split_level", default=defaults.split_level)),
    )
    loaded = [Run.from_csv(path) for path in runs]
    ids = [r.run_id for r in loaded]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate run ids across inputs: {sorted(ids)}")
    pairs = [p for run in loaded for p in make_pairs(run, cfg.window_length, cfg.step)]
    train, test = split_and_order(pairs, cfg)
    doc = dataset_manifest([str(p) for p in runs], cfg, train, test)
    out = _out_dir(out)
    write_json(os.path.join(out, "dataset.json"), doc)
    write_manifest(
        out,
        command="build-dataset",
        config={"dataset": doc["config"]},
        seed=cfg.split_seed,
        inputs=list(runs),
        outputs=["dataset.json"],
    )
    click.echo(f"{len(train)} train / {len(test)} test windows -> {os.path.join(out, 'dataset.json')}")


# ---------------------------------------------------------------------------
# train-model


def _load_dataset_runs(dataset_path: str, doc: dict) -> dict[str, Run]:
    """Load the run files a dataset manifest references.

    Relative paths are resolved against the manifest's directory first, then
    against the working directory, so dataset folders stay relocatable.
    """
    base = os.path.dirname(os.path.abspath(dataset_path))
    runs: dict[str, Run] = {}
    for entry in doc["runs"]:
        candidates = [entry] if os.path.isabs(entry) else [os.path.join(base, entry), entry]
        path = next((c for c in candidates if os.path.exists(c)), None)
        if path is None:
            raise FileNotFoundError(f"dataset references missing run file {entry!r}")
        run = Run.from_csv(path)
        if run.run_id in runs:
            raise ValueError(f"duplicate run id {run.run_id!r} in dataset runs")
        runs[run.run_id] = run
    return runs


@main.command(name="train-model")
@click.option("--dataset", "dataset_path", type=click.Path(), required=True,
              help="dataset.json from build-dataset.")
@click.option("--hidden-size", type=int, default=None)
@click.option("--steps", type=int, default=None, help="Gradient steps.")
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--ordering", type=click.Choice(["permuted", "sequential"]), default=None,
              help="Window presentation order during training.")
@click.option("--val-every", type=int, default=None, help="Steps between validation passes.")
@_common_options
@click.pass_context
@_stage
def train_model(ctx, dataset_path, hidden_size, steps, batch_size, learning_rate,
                ordering, val_every, seed, out, config_path, jobs):
    """Train the forward dynamics model on a built dataset."""
    file_cfg = _load_config_file(config_path)
    pick = _Resolver(ctx, file_cfg.get("forward_model", {}))
    defaults = TrainConfig()
    cfg = TrainConfig(
        hidden_size=int(pick("hidden_size", default=defaults.hidden_size)),
        steps=int(pick("steps", default=defaults.steps)),
        batch_size=int(pick("batch_size", default=defaults.batch_size)),
        learning_rate=float(pick("learning_rate", default=defaults.learning_rate)),
        ordering=str(pick("ordering", default=defaults.ordering)),
        order_seed=int(pick("seed", "order_seed", defaults.order_seed)),
        val_every=int(pick("val_every", default=defaults.val_every)),
        seed=int(pick("seed", default=defaults.seed)),
    )
    doc = read_json(dataset_path)
    runs = _load_dataset_runs(dataset_path, doc)
    train_pairs, test_pairs = pairs_from_manifest(doc, runs)
    out = _out_dir(out)
    try:
        model, report = train_forward(train_pairs, test_pairs, cfg)
    except TrainingDiverged as exc:
        if exc.report is not None:
            exc.report.to_csv(os.path.join(out, "train_report.csv"))
        raise
    model.save(os.path.join(out, "model.json"))
    report.to_csv(os.path.join(out, "train_report.csv"))
    write_manifest(
        out,
        command="train-model",
        config={"forward_model": cfg.to_dict()},
        seed=cfg.seed,
        inputs=[dataset_path],
        outputs=["model.json", "train_report.csv"],
    )
    click.echo(
        f"final validation loss (EMA): {report.final_val_ema():.6f}; "
        f"model -> {os.path.join(out, 'model.json')}"
    )


# ---------------------------------------------------------------------------
# train-policy


def _parse_vector3(text: str, name: str) -> np.ndarray:
    parts = [float(v) for v in text.split(",")]
    if len(parts) == 1:
        return np.full(3, parts[0])
    if len(parts) != 3:
        raise ValueError(f"{name} must be one value or three comma-separated values")
    return np.array(parts)


def _env_from_options(pick: _Resolver, model: ForwardModel, env_section: dict) -> EnvParams:
    perturbation = pick("perturbation", default=10.0)
    if isinstance(perturbation, str):
        perturbation = _parse_vector3(perturbation, "--perturbation")
    else:
        perturbation = np.asarray(perturbation, dtype=np.float64)
        if perturbation.ndim == 0:
            perturbation = np.full(3, float(perturbation))
    return EnvParams(
        model=model,
        initial_pose=np.asarray(
            env_section.get("initial_pose", default_initial_pose(model)), dtype=np.float64
        ),
        perturbation=perturbation,
        max_steps=int(pick("max_steps", default=64)),
        success_radius=float(pick("success_radius", default=1.0)),
        seed=int(env_section.get("seed", 900)),
    )


@main.command(name="train-policy")
@click.option("--model", "model_path", type=click.Path(), required=True,
              help="model.json from train-model.")
@click.option("--policy-kind", type=click.Choice(["feedforward", "recurrent"]), default=None)
@click.option("--updates", type=int, default=None, help="PPO updates to run.")
@click.option("--n-envs", type=int, default=None)
@click.option("--rollout-length", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--entropy-coef", type=float, default=None)
@click.option("--reward-scale", type=float, default=None)
@click.option("--perturbation", type=str, default=None,
              help="Goal perturbation std in mm: one value or x,y,z.")
@click.option("--max-steps", type=int, default=None, help="Episode horizon.")
@click.option("--success-radius", type=float, default=None, help="Goal tolerance, mm.")
@click.option("--stop-on-convergence", is_flag=True, default=False,
              help="Stop once smoothed terminal distance stays below the tolerance.")
@click.option("--seeds", type=str, default=None,
              help="Comma-separated seeds for a multi-seed run (writes per-seed artifacts).")
@_common_options
@click.pass_context
@_stage
def train_policy_cmd(ctx, model_path, policy_kind, updates, n_envs, rollout_length, lr,
                     entropy_coef, reward_scale, perturbation, max_steps, success_radius,
                     stop_on_convergence, seeds, seed, out, config_path, jobs):
    """Train reaching policies with PPO inside a trained model."""
    file_cfg = _load_config_file(config_path)
    ppo_section = file_cfg.get("ppo", {})
    env_section = file_cfg.get("environment", {})
    pick = _Resolver(ctx, ppo_section)
    env_pick = _Resolver(ctx, env_section)
    defaults = PpoConfig()
    cfg = PpoConfig(
        total_updates=int(pick("updates", "total_updates", defaults.total_updates)),
        n_envs=int(pick("n_envs", default=defaults.n_envs)),
        rollout_length=int(pick("rollout_length", default=defaults.rollout_length)),
        gamma=float(ppo_section.get("gamma", defaults.gamma)),
        gae_lambda=float(ppo_section.get("gae_lambda", defaults.gae_lambda)),
        clip_eps=float(ppo_section.get("clip_eps", defaults.clip_eps)),
        epochs_per_update=int(ppo_section.get("epochs_per_update", defaults.epochs_per_update)),
        minibatches=int(ppo_section.get("minibatches", defaults.minibatches)),
        lr=float(pick("lr", default=defaults.lr)),
        entropy_coef=float(pick("entropy_coef", default=defaults.entropy_coef)),
        value_coef=float(ppo_section.get("value_coef", defaults.value_coef)),
        max_grad_norm=float(ppo_section.get("max_grad_norm", defaults.max_grad_norm)),
        seed=int(pick("seed", default=defaults.seed)),
        policy_kind=str(pick("policy_kind", default=defaults.policy_kind)),
        reward_scale=float(pick("reward_scale", default=defaults.reward_scale)),
        stop_on_convergence=bool(pick("stop_on_convergence", default=defaults.stop_on_convergence)),
        convergence_patience=int(ppo_section.get("convergence_patience", defaults.convergence_patience)),
    )
    model = ForwardModel.load(model_path)
    env = _env_from_options(env_pick, model, env_section)
    out = _out_dir(out)
    manifest_config = {
        "environment": env.to_dict(model_path=str(model_path)),
        "ppo": cfg.to_dict(),
    }
    if seeds is None:
        params, curve = train_policy(env, cfg)
        params.save(os.path.join(out, "policy.json"))
        curve.to_csv(os.path.join(out, "curve.csv"))
        outputs = ["policy.json", "curve.csv"]
        smoothed = curve.smoothed_terminal_dist()
        if smoothed.size and np.isfinite(smoothed[-1]):
            summary = f"final smoothed terminal distance: {smoothed[-1]:.2f} mm"
        else:
            summary = "training finished (no completed episodes to report)"
    else:
        seed_list = [int(s) for s in seeds.split(",") if s.strip() != ""]
        results = run_seeds(env, cfg, seed_list, jobs=jobs)
        outputs = []
        for s, (params, curve) in zip(seed_list, results):
            params.save(os.path.join(out, f"policy_seed{s}.json"))
            curve.to_csv(os.path.join(out, f"curve_seed{s}.csv"))
            outputs += [f"policy_seed{s}.json", f"curve_seed{s}.csv"]
        band = aggregate_curves([c for _, c in results])
        rows = [
            [int(u), band["mean_return"][u], band["std_return"][u],
             band["band_low"][u], band["band_high"][u], band["mean_terminal_dist_mm"][u]]
            for u in range(len(band["update"]))
        ]
        write_csv(
            os.path.join(out, "curve_aggregate.csv"),
            ["update", "mean_return", "std_return", "band_low", "band_high", "mean_terminal_dist_mm"],
            rows,
        )
        outputs.append("curve_aggregate.csv")
        manifest_config["seeds"] = seed_list
        summary = f"{len(seed_list)} seeds aggregated -> curve_aggregate.csv"
    write_manifest(
        out,
        command="train-policy",
        config=manifest_config,
        seed=cfg.seed,
        inputs=[model_path],
        outputs=outputs,
    )
    click.echo(summary)


# ---------------------------------------------------------------------------
# evaluate


@main.command()
@click.option("--model", "model_path", type=click.Path(), required=True,
              help="model.json to evaluate or to run a policy inside.")
@click.option("--run", "run_path", type=click.Path(), default=None,
              help="Run CSV for open-loop model evaluation.")
@click.option("--policy", "policy_path", type=click.Path(), default=None,
              help="policy.json for closed-loop reaching evaluation.")
@click.option("--episodes", type=int, default=50, help="Episodes for policy evaluation.")
@click.option("--perturbation", type=str, default=None,
              help="Goal perturbation std in mm for policy evaluation.")
@click.option("--max-steps", type=int, default=None, help="Episode horizon.")
@click.option("--success-radius", type=float, default=None, help="Goal tolerance, mm.")
@_common_options
@click.pass_context
@_stage
def evaluate(ctx, model_path, run_path, policy_path, episodes, perturbation, max_steps,
             success_radius, seed, out, config_path, jobs):
    """Evaluate a model against a logged run, or a policy inside a model."""
    if (run_path is None) == (policy_path is None):
        raise click.UsageError("pass exactly one of --run or --policy")
    model = ForwardModel.load(model_path)
    out = _out_dir(out)
    file_cfg = _load_config_file(config_path)
    if run_path is not None:
        run = Run.from_csv(run_path)
        report = evaluate_run(model, run)
        doc = {"mode": "open_loop", "run_id": run.run_id, **report.to_dict()}
        inputs = [model_path, run_path]
        headline = f"open-loop RMSE: {report.rmse_mm:.3f} mm"
    else:
        env_section = file_cfg.get("environment", {})
        env_pick = _Resolver(ctx, env_section)
        env = _env_from_options(env_pick, model, env_section)
        policy = PolicyParams.load(policy_path)
        eval_seed = seed if seed is not None else 10_000
        report = evaluate_policy(env, policy, n_episodes=episodes, eval_seed=eval_seed)
        doc = {"mode": "reaching", "eval_seed": eval_seed, **report}
        inputs = [model_path, policy_path]
        headline = (
            f"mean terminal distance: {report['mean_terminal_dist_mm']:.2f} mm "
            f"(success rate {report['success_rate']:.2f})"
        )
    write_json(os.path.join(out, "evaluation.json"), doc)
    write_manifest(
        out,
        command="evaluate",
        config={"evaluation": doc},
        seed=seed,
        inputs=inputs,
        outputs=["evaluation.json"],
    )
    click.echo(headline)


if __name__ == "__main__":
    main()
