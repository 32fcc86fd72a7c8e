#!/usr/bin/env python3
"""
Configuration module for the FOCUS desk-scale experiments
"""

import os
import copy
import json
import hashlib
import logging
from pathlib import Path

from dotenv import load_dotenv

from utils.errors import ConfigurationError

# Set up logger
logger = logging.getLogger(__name__)

METHODS = ("focus", "dreamer-monolithic", "apt-baseline", "random")
STAGES = ("explore", "adapt", "dense-task")
ARTIFACT_ROOT_ENV = "FOCUS_ARTIFACT_ROOT"


def deep_merge(base, override):
    """Return a copy of base with override merged in, recursing into dicts"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def get_artifact_root():
    """Artifact root directory, taken from the environment (or a .env file)"""
    load_dotenv()
    return Path(os.environ.get(ARTIFACT_ROOT_ENV, "artifacts"))


class Config:
    """Configuration class for experiments"""

    # Default configuration
    DEFAULT_CONFIG = {
        "experiment": {
            "name": "focus",
            "method": "focus",
            "stage": "explore",
            "seeds": [0],
            "source_run": None,
            "budgets": {
                "explore": 100000,
                "adapt": 50000,
                "dense-task": 150000,
            },
        },
        "scene": {
            "preset": "red_block",
            "file": None,
            "image_size": 64,
            "depth": False,
            "episode_length": 200,
            "step_size": 0.05,
            "radius_scale": 1.5,
            "init_jitter": 0.0,
        },
        "task": {
            "task": "push-sparse",
            "object_id": 1,
            "direction": "right",
            "turn_threshold": 0.5,
        },
        "model": {
            "deter": 200,
            "stoch_factors": 32,
            "stoch_classes": 32,
            "hidden": 400,
            "mlp_layers": 4,
            "image_feat": 1024,
            "proprio_feat": 400,
            "cnn_depth": 48,
            "object_latent": 128,
            "extractor_width": 512,
            "extractor_layers": 3,
            "object_depth": 72,
            "monolithic_depth": None,
            "kl_balance": 0.8,
            "free_bits": 1.0,
            "sample_latents": True,
            "dtype": "float32",
        },
        "explore": {
            "k": 12,
            "epsilon": 1e-3,
            "normalize": True,
            "include_background": False,
        },
        "agent": {
            "horizon": 15,
            "gamma": 0.99,
            "lam": 0.95,
            "entropy_coef": 3e-4,
            "actor_lr": 3e-4,
            "critic_lr": 3e-4,
            "hidden": 400,
            "layers": 4,
            "min_std": 0.1,
            "target_update": 100,
            "grad_clip": 100.0,
            "noise_start": 0.3,
            "noise_end": 0.1,
            "train_every": 5,
            "prefill_episodes": 1,
            "imagine_starts": 256,
        },
        "replay": {
            "capacity": 100000,
            "batch_size": 32,
            "seq_len": 32,
        },
        "trainer": {
            "lr": 3e-4,
            "betas": [0.9, 0.999],
            "eps": 1e-8,
            "grad_clip": 100.0,
            "device": "cpu",
            "checkpoint_every": 10,
        },
        "metrics": {
            "areas_preset": "default",
            "summary_fraction": 0.2,
        },
        "output": {
            "recon_frames": 8,
            "dump_recon": True,
        },
    }

    def __init__(self, config_file=None, overrides=None):
        """Initialize the configuration"""
        logger.info("Initializing configuration")

        self.config_file = Path(config_file) if config_file else None

        # Load or create configuration
        self.config = self._load_config()
        if overrides:
            self.config = deep_merge(self.config, overrides)
        logger.info("Configuration loaded")

    @classmethod
    def from_dict(cls, values):
        """Build a configuration from a (possibly partial) dictionary"""
        return cls(overrides=values)

    def _load_config(self):
        """Load configuration from file, filling in any missing defaults"""
        if self.config_file is None:
            logger.info("No configuration file given, using defaults")
            return copy.deepcopy(self.DEFAULT_CONFIG)

        try:
            with open(self.config_file, "r") as f:
                config = json.load(f)
        except FileNotFoundError:
            logger.error(f"Configuration file not found: {self.config_file}")
            raise ConfigurationError(f"configuration file not found: {self.config_file}")
        except json.JSONDecodeError as e:
            logger.error(f"Error parsing configuration {self.config_file}: {str(e)}")
            raise ConfigurationError(f"cannot parse {self.config_file}: {e}")

        logger.info(f"Loaded configuration from {self.config_file}")
        return deep_merge(self.DEFAULT_CONFIG, config)

    def save(self, path=None):
        """Save configuration to file"""
        path = Path(path) if path else self.config_file
        if path is None:
            raise ConfigurationError("no path to save the configuration to")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.config, f, indent=4, sort_keys=True)
        logger.info(f"Configuration saved to {path}")
        return path

    def get(self, key, default=None):
        """Get a configuration value, dotted keys descend into sections"""
        node = self.config
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set(self, key, value):
        """Set a configuration value"""
        parts = key.split(".")
        node = self.config
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    def section(self, name):
        """Return a copy of one configuration section"""
        return copy.deepcopy(self.config.get(name, {}))

    def reset(self):
        """Reset configuration to defaults"""
        self.config = copy.deepcopy(self.DEFAULT_CONFIG)
        logger.info("Configuration reset to defaults")

    def copy(self):
        """Independent copy of this configuration"""
        return Config.from_dict(self.config)

    def model_hash(self):
        """Hash of the settings that determine parameter shapes"""
        scene = self.config["scene"]
        relevant = {
            "scene": {k: scene.get(k) for k in ("preset", "file", "image_size", "depth")},
            "model": self.config["model"],
            "agent": {k: self.config["agent"].get(k) for k in ("hidden", "layers", "min_std")},
            "method": self.config["experiment"]["method"],
        }
        encoded = json.dumps(relevant, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(encoded).hexdigest()

    def validate(self):
        """Check enumerations, ranges and method/stage combinations"""
        experiment = self.config["experiment"]
        method = experiment.get("method")
        stage = experiment.get("stage")
        if method not in METHODS:
            raise ConfigurationError(f"unknown method {method!r}, expected one of {METHODS}")
        if stage not in STAGES:
            raise ConfigurationError(f"unknown stage {stage!r}, expected one of {STAGES}")
        if stage == "adapt" and not experiment.get("source_run"):
            raise ConfigurationError("stage 'adapt' requires experiment.source_run")
        if stage != "explore" and method in ("random", "apt-baseline"):
            raise ConfigurationError(f"method {method!r} only supports the explore stage")
        seeds = experiment.get("seeds")
        if not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigurationError("experiment.seeds must be a non-empty list of integers")
        if experiment["budgets"].get(stage, 0) < 0:
            raise ConfigurationError(f"budget for stage {stage!r} must be non-negative")

        size = self.get("scene.image_size")
        if size < 8 or size & (size - 1):
            raise ConfigurationError(f"scene.image_size must be a power of two >= 8, got {size}")

        agent = self.config["agent"]
        for key in ("gamma", "lam"):
            if not 0.0 <= agent[key] <= 1.0:
                raise ConfigurationError(f"agent.{key} must lie in [0, 1]")
        balance = self.get("model.kl_balance")
        if balance is not None and not 0.0 <= balance <= 1.0:
            raise ConfigurationError("model.kl_balance must lie in [0, 1] or be null for the plain KL")
        if self.get("explore.k") < 1:
            raise ConfigurationError("explore.k must be >= 1")
        if self.get("replay.seq_len") > self.get("scene.episode_length") + 1:
            raise ConfigurationError("replay.seq_len longer than an episode")
        if not 0.0 < self.get("metrics.summary_fraction") <= 1.0:
            raise ConfigurationError("metrics.summary_fraction must lie in (0, 1]")
        return True


# Singleton instance
_config = None


def get_config(config_file=None):
    """Get the singleton configuration instance"""
    global _config
    if _config is None or config_file is not None:
        _config = Config(config_file)
    return _config
