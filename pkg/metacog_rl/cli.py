"""Command-line interface.

    metacog simulate|end2end|learn-fitness <config> [--out DIR] [--seed N] [--plot]
    metacog oracle riccati|robustness|gp [<config>] [--seed N]

Exit codes: 0 on success, 1 when an oracle exceeds its tolerance, 2 on configuration errors and 3 on numerical
failures. ``METACOG_LOG`` (error, warn, info, debug) sets the log level.
"""
import logging
import os
import sys
from typing import List, Optional, Sequence

import fire
from fire.core import FireExit

from metacog_rl.common.config import RunConfig, load_config
from metacog_rl.common.errors import ConfigError, MetacogError, NumericalError, SafeSetError, StageError
from metacog_rl.common.gaussian_process import gp_predict_batch
from metacog_rl.common.oracles import (
    SUBJECTS,
    OracleCase,
    format_cases,
    run_gp_oracle,
    run_riccati_oracle,
    run_robustness_oracle,
)
from metacog_rl.common.utils import configure_logging, write_csv
from metacog_rl.envs.lane_change import simulate
from metacog_rl.metacognitive.fitness import fitness_direct, interval_rewards, joint_inputs
from metacog_rl.metacognitive.metacognitive_control import (
    EpisodeConfig,
    MetacognitiveControl,
    manifest,
    weights_controller,
    write_bundle,
    write_json,
    write_trajectory,
)
from metacog_rl.plotting import plot_results


logger = logging.getLogger(__name__)


class MetacogCommands:
    """Metacognitive hyperparameter adaptation of an off-policy RL lane-keeping controller."""

    def __init__(self):
        self.exit_code = 0

    @staticmethod
    def _load(config: str, out: Optional[str], seed: Optional[int]) -> RunConfig:
        cfg = load_config(str(config))
        if seed is not None:
            if isinstance(seed, bool) or not isinstance(seed, int):
                raise ConfigError("--seed", f"expected an integer, got {seed!r}")
            cfg = cfg.with_seed(seed)
        if out is not None:
            cfg = cfg.with_out_dir(str(out))
        os.makedirs(cfg.output.out_dir, exist_ok=True)
        return cfg

    @staticmethod
    def _agent(cfg: RunConfig) -> MetacognitiveControl:
        out = cfg.output
        try:
            episode = EpisodeConfig.from_run_config(cfg)
        except ValueError as e:
            raise ConfigError("config", str(e)) from e
        return MetacognitiveControl(episode, log=out.wandb, project_name=out.project_name, experiment_name=out.experiment_name)

    def simulate(self, config: str, out: Optional[str] = None, seed: Optional[int] = None, plot: bool = False):
        """Learns the policy of the initial hyperparameters and runs the scenario with it, without monitoring.

        Args:
            config: TOML run configuration
            out: output directory (overrides ``[output] out_dir``)
            seed: overrides ``[scenario] seed``
            plot: also draw the CSV files into results.pdf
        """
        cfg = self._load(config, out, seed)
        agent = self._agent(cfg)
        weights = agent.initial_policy()
        episode = agent.cfg
        traj = simulate(episode.plant, weights_controller(weights), episode.schedule)
        out_dir = cfg.output.out_dir
        write_trajectory(out_dir, traj, episode.formula)
        write_json(os.path.join(out_dir, "config.json"), cfg.to_dict())
        write_json(os.path.join(out_dir, "manifest.json"), manifest(cfg.seed, agent.logs, "simulate"))
        if plot:
            plot_results(out_dir)
        logger.info("wrote %d samples to %s", len(traj), out_dir)

    def end2end(self, config: str, out: Optional[str] = None, seed: Optional[int] = None, plot: bool = False):
        """Runs a full episode: low-level learning, fitness monitoring and safe hyperparameter adaptation.

        Args:
            config: TOML run configuration
            out: output directory (overrides ``[output] out_dir``)
            seed: overrides ``[scenario] seed``
            plot: also draw the CSV files into results.pdf
        """
        cfg = self._load(config, out, seed)
        agent = self._agent(cfg)
        report = agent.run()
        write_bundle(report, cfg.output.out_dir, agent.cfg, cfg.to_dict(), "end2end")
        if plot:
            plot_results(cfg.output.out_dir)
        logger.info("%d adaptations, bundle in %s", len(report.adaptations), cfg.output.out_dir)

    def learn_fitness(self, config: str, out: Optional[str] = None, seed: Optional[int] = None, plot: bool = False):
        """Learns the fitness GP of the initial hyperparameters offline, on the scenario without plant changes.

        Writes ``fitness_gp.json`` and ``fitness.csv`` (t, direct fitness, predicted mean and variance).

        Args:
            config: TOML run configuration
            out: output directory (overrides ``[output] out_dir``)
            seed: overrides ``[scenario] seed``
            plot: also draw the CSV files into results.pdf
        """
        cfg = self._load(config, out, seed)
        agent = self._agent(cfg)
        agent.initial_policy()
        gp, replay = agent.learn_nominal_fitness()
        episode = agent.cfg
        bounds, _ = interval_rewards(replay, episode.stack, episode.fitness)
        mean, var = gp_predict_batch(gp, joint_inputs(replay.states[bounds], replay.references[bounds], episode.theta0))
        times = replay.times[bounds]
        rows = [[t, fitness_direct(replay, episode.stack, episode.fitness, t), mu, v] for t, mu, v in zip(times, mean, var)]
        out_dir = cfg.output.out_dir
        with open(os.path.join(out_dir, "fitness_gp.json"), "w", encoding="utf-8", newline="\n") as f:
            f.write(gp.to_json())
            f.write("\n")
        write_csv(os.path.join(out_dir, "fitness.csv"), ["t", "fitness_direct", "fitness_pred_mean", "fitness_pred_var"], rows)
        write_trajectory(out_dir, replay, episode.formula)
        write_json(os.path.join(out_dir, "config.json"), cfg.to_dict())
        write_json(os.path.join(out_dir, "manifest.json"), manifest(cfg.seed, agent.logs, "learn-fitness"))
        if plot:
            plot_results(out_dir)

    def oracle(self, subject: str, config: Optional[str] = None, seed: Optional[int] = None):
        """Compares the implementation with an independent reference computation.

        Args:
            subject: riccati, robustness or gp
            config: optional run configuration (riccati also checks its nominal plant at the initial hyperparameters)
            seed: seed of the random cases
        """
        if subject not in SUBJECTS:
            raise ConfigError("subject", f"expected one of {', '.join(SUBJECTS)}, got {subject!r}")
        cfg = load_config(str(config)) if config is not None else None
        if seed is None:
            seed = cfg.seed if cfg is not None else 0
        cases: List[OracleCase]
        if subject == "riccati":
            if cfg is None:
                cases = run_riccati_oracle()
            else:
                cases = run_riccati_oracle(cfg.plant(), cfg.theta0(), cfg.rl, cfg.scenario.dt, seed)
        elif subject == "robustness":
            cases = run_robustness_oracle(seed)
        else:
            cases = run_gp_oracle(seed)
        print(format_cases(subject, cases))
        failed = [c for c in cases if not c.passed]
        if failed:
            worst = max(failed, key=lambda c: c.error)
            print(
                f"metacog: oracle '{subject}' failed {len(failed)} case(s); worst {worst.name}: "
                f"error {worst.error:.4e} > {worst.tolerance:.1e} {worst.detail}",
                file=sys.stderr,
            )
            self.exit_code = 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the ``metacog`` script; returns the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    configure_logging()
    cli = MetacogCommands()
    try:
        fire.Fire(cli, command=argv, name="metacog")
    except FireExit as e:
        return 0 if not e.code else 2
    except ConfigError as e:
        print(f"metacog: configuration error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, SafeSetError, StageError) as e:
        print(f"metacog: numerical failure: {e}", file=sys.stderr)
        return 3
    except MetacogError as e:
        print(f"metacog: {e}", file=sys.stderr)
        return 3
    return cli.exit_code


if __name__ == "__main__":
    sys.exit(main())
