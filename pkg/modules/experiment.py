"""
Experiment runner
Turns a validated configuration into an artifacts directory: config copy,
per-seed checkpoints, replay, metrics.csv, curves.jsonl, reconstruction
grids and a summary table over seeds.
"""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path
from typing import Iterable

import pandas as pd

from modules.metrics import METRIC_COLUMNS, WorkspaceAreas
from modules.replay_buffer import ReplayBuffer
from modules.reports import render_reconstructions
from modules.sim2d import make_env, save_observation_png
from modules.stages import StageRunner
from modules.trainer import Trainer, seed_everything
from utils.config import Config, get_artifact_root
from utils.errors import ConfigurationError, NotReadyError

# Configure logger
logger = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
SUMMARY_NAME = "summary.csv"
LATEST_CHECKPOINT = "latest.pt"
SUMMARY_COLUMNS = ["contact_frac", "pos_disp", "ang_disp", "up", "far", "close", "left", "right", "episode_reward",
                   "rewards_found"]


class RunRecorder:
    """Appends metric rows and curve records of one seed to disk"""

    def __init__(self, seed_dir: Path):
        self.metrics_path = seed_dir / "metrics.csv"
        self.curves_path = seed_dir / "curves.jsonl"

    def truncate(self, episodes: int):
        """Drop records written after the last checkpoint"""
        if self.metrics_path.exists():
            pd.read_csv(self.metrics_path).head(episodes).to_csv(self.metrics_path, index=False)
        if self.curves_path.exists():
            with open(self.curves_path, "r") as f:
                lines = f.readlines()[:episodes]
            with open(self.curves_path, "w") as f:
                f.writelines(lines)

    def __call__(self, row: dict, record: dict):
        frame = pd.DataFrame([row], columns=METRIC_COLUMNS)
        frame.to_csv(self.metrics_path, mode="a", header=not self.metrics_path.exists(), index=False)
        with open(self.curves_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def new_run_dir(config: Config, root: Path | None = None) -> Path:
    root = Path(root) if root else get_artifact_root()
    experiment = config.section("experiment")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return root / f"{experiment['name']}_{experiment['stage']}_{experiment['method']}_{stamp}"


def source_paths(config: Config, seed: int) -> tuple[Path, Path]:
    """Checkpoint and replay directory of the exploration run an adaptation starts from"""
    source = Path(config.get("experiment.source_run"))
    seed_dir = source / f"seed_{seed}"
    if not seed_dir.exists():
        raise ConfigurationError(f"source run {source} has no seed {seed}")
    return seed_dir / "checkpoints" / LATEST_CHECKPOINT, seed_dir / "replay"


def run_seed(config: Config, seed: int, seed_dir: Path, resume: bool = False) -> Path:
    """One independent sub-run"""
    seed_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(seed)
    stage = config.get("experiment.stage")
    budget = config.get(f"experiment.budgets.{stage}")

    areas = WorkspaceAreas.preset(config.get("metrics.areas_preset"))
    env = make_env(config.section("scene"), config.section("task"), areas)
    scene = env.scene
    trainer = Trainer(config, scene, seed)

    checkpoint_dir = seed_dir / "checkpoints"
    replay_dir = seed_dir / "replay"
    replay_section = config.section("replay")
    source_checkpoint = None

    if resume and (checkpoint_dir / LATEST_CHECKPOINT).exists():
        trainer.load_checkpoint(checkpoint_dir / LATEST_CHECKPOINT)
        replay = ReplayBuffer.load(replay_dir, replay_section["capacity"], seed)
        logger.info(f"Resuming seed {seed} at {trainer.progress}")
    elif stage == "adapt":
        source_checkpoint, source_replay = source_paths(config, seed)
        replay = ReplayBuffer.load(source_replay, replay_section["capacity"], seed)
    else:
        replay = ReplayBuffer(replay_section["capacity"], replay_section["seq_len"], seed)

    recorder = RunRecorder(seed_dir)
    if resume:
        recorder.truncate(trainer.progress["episodes"])

    def checkpoint():
        trainer.save_checkpoint(checkpoint_dir / LATEST_CHECKPOINT)
        replay.save(replay_dir)

    runner = StageRunner(trainer, env, replay, areas, on_episode=recorder, on_checkpoint=checkpoint)
    if stage == "explore":
        runner.run_exploration_stage(budget)
    elif stage == "adapt":
        runner.run_adaptation_stage(source_checkpoint, budget)
    else:
        runner.run_task_stage(budget)
    checkpoint()

    if config.get("output.dump_recon"):
        observation, _ = env.reset(seed=seed)
        save_observation_png(observation, seed_dir / "recon" / "initial", scene)
    if config.get("output.dump_recon") and trainer.method != "random":
        try:
            render_reconstructions(trainer, replay.latest_episode(), seed_dir / "recon", config.get("output.recon_frames"))
        except NotReadyError as e:
            logger.warning(f"No reconstruction dump: {str(e)}")
    return seed_dir


def run(config: Config | None, seed: int | None = None, resume: str | Path | None = None,
        root: str | Path | None = None, run_dir: str | Path | None = None) -> Path:
    """Run every requested seed and write the summary table"""
    if resume:
        run_dir = Path(resume)
        config = Config(run_dir / CONFIG_NAME)
    else:
        run_dir = Path(run_dir) if run_dir else new_run_dir(config, root)
    config.validate()
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / CONFIG_NAME)

    seeds = [seed] if seed is not None else config.get("experiment.seeds")
    logger.info(f"Run directory {run_dir}, seeds {seeds}")
    for s in seeds:
        run_seed(config, s, run_dir / f"seed_{s}", resume=bool(resume))

    summary = summarize_run(run_dir, config.get("metrics.summary_fraction"))
    summary.to_csv(run_dir / SUMMARY_NAME, index=False)
    logger.info(f"Summary written to {run_dir / SUMMARY_NAME}")
    return run_dir


def seed_summary(seed_dir: Path, fraction: float = 0.2) -> dict[str, float]:
    """Means over the final fraction of episodes of one seed

    rewards_found is the total over every episode of the stage.
    """
    metrics = pd.read_csv(seed_dir / "metrics.csv")
    curves = pd.read_json(seed_dir / "curves.jsonl", lines=True)
    count = max(1, math.ceil(fraction * len(metrics)))
    tail = metrics.tail(count)
    summary = {column: float(tail[column].mean()) for column in METRIC_COLUMNS if column != "step"}
    summary["episode_reward"] = float(curves["episode_reward"].tail(max(1, math.ceil(fraction * len(curves)))).mean())
    summary["rewards_found"] = float(metrics["rewards_found"].sum())
    return summary


def summarize_run(run_dir: str | Path, fraction: float = 0.2) -> pd.DataFrame:
    """One row with mean and std over seeds of the final-episode averages"""
    run_dir = Path(run_dir)
    config = Config(run_dir / CONFIG_NAME)
    seed_dirs = sorted(p for p in run_dir.glob("seed_*") if (p / "metrics.csv").exists())
    per_seed = pd.DataFrame([seed_summary(p, fraction) for p in seed_dirs], columns=SUMMARY_COLUMNS)

    row = {
        "run": run_dir.name,
        "method": config.get("experiment.method"),
        "stage": config.get("experiment.stage"),
        "task": config.get("task.task"),
        "seeds": len(per_seed),
    }
    for column in SUMMARY_COLUMNS:
        row[f"{column}_mean"] = float(per_seed[column].mean()) if len(per_seed) else float("nan")
        row[f"{column}_std"] = float(per_seed[column].std(ddof=0)) if len(per_seed) else float("nan")
    return pd.DataFrame([row])


def build_report(run_dirs: Iterable[str | Path], fraction: float | None = None) -> pd.DataFrame:
    """Summary rows of several runs side by side"""
    frames = []
    for run_dir in run_dirs:
        run_fraction = fraction or Config(Path(run_dir) / CONFIG_NAME).get("metrics.summary_fraction")
        frames.append(summarize_run(run_dir, run_fraction))
    if not frames:
        raise ConfigurationError("no runs to report on")
    return pd.concat(frames, ignore_index=True)
