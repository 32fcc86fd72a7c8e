"""
Reconstruction reports: image grids with ground truth, composed
reconstructions and predicted masks, plus per-object pixel errors.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
from PIL import Image

from modules.replay_buffer import load_episode
from modules.sim2d import SceneConfig, mask_palette
from modules.trainer import Trainer, read_checkpoint
from utils.config import Config
from utils.errors import ContractError

# Configure logger
logger = logging.getLogger(__name__)

THUMBNAIL = 64
DECODER_PREFIXES = ("object_decoder.", "image_decoder.")


def object_pixel_error(recon: np.ndarray, target: np.ndarray, segmask: np.ndarray,
                       object_ids) -> dict[int, float]:
    """Mean squared error over the ground-truth pixels of each object (nan when absent)"""
    errors = {}
    squared = ((np.asarray(recon, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2).mean(-1)
    for object_id in object_ids:
        pixels = segmask == object_id
        errors[int(object_id)] = float(squared[pixels].mean()) if pixels.any() else float("nan")
    return errors


def select_frames(length: int, count: int) -> np.ndarray:
    """Evenly spaced frame indices"""
    count = max(1, min(count, length))
    return np.unique(np.round(np.linspace(0, length - 1, count)).astype(int))


@torch.no_grad()
def reconstruct_episode(trainer: Trainer, episode: dict[str, np.ndarray], frames: np.ndarray) -> dict[str, Any]:
    """Filter an episode through the world model and decode the chosen frames"""
    wm = trainer.world_model
    batch = trainer.to_tensors({
        "image": episode["image"][None].astype(np.float32) / 255.0,
        "proprio": episode["proprio"][None],
        "action": episode["action"][None],
    })
    posts, _, _ = wm.observe(wm.encode(batch["image"], batch["proprio"]), batch["action"])
    chosen = posts[0][torch.as_tensor(frames)]
    outputs = wm.decode(chosen)
    return {
        "target": batch["image"][0, frames].cpu().numpy(),
        "recon": outputs.image.clamp(0.0, 1.0).cpu().numpy(),
        "mask": None if outputs.mask is None else outputs.mask.cpu().numpy(),
    }


def _thumbnail(image: np.ndarray) -> Image.Image:
    rgb = np.round(np.clip(image[..., :3], 0.0, 1.0) * 255.0).astype(np.uint8)
    return Image.fromarray(rgb, mode="RGB").resize((THUMBNAIL, THUMBNAIL), Image.Resampling.NEAREST)


def _mask_overlay(target: np.ndarray, mask: np.ndarray, scene: SceneConfig) -> np.ndarray:
    palette = np.array(mask_palette(scene), dtype=np.float64).reshape(-1, 3)[: mask.shape[-1]] / 255.0
    colors = palette[mask.argmax(-1)]
    return 0.5 * target[..., :3] + 0.5 * colors


def render_reconstructions(trainer: Trainer, episode: dict[str, np.ndarray], out_dir: str | Path,
                           frames: int = 8, baseline: Trainer | None = None) -> tuple[Path, Path]:
    """Write recon_grid.png and recon_errors.csv for one episode"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    length = int(episode["reward"].shape[0])
    indices = select_frames(length, frames)
    scene = trainer.scene
    object_ids = range(scene.num_objects + 1)

    result = reconstruct_episode(trainer, episode, indices)
    rows = [("ground_truth", result["target"]), (trainer.world_model.kind, result["recon"])]
    if result["mask"] is not None:
        overlay = np.stack([_mask_overlay(t, m, scene) for t, m in zip(result["target"], result["mask"])])
        rows.append(("mask", overlay))
    if baseline is not None:
        rows.append((f"baseline_{baseline.world_model.kind}", reconstruct_episode(baseline, episode, indices)["recon"]))

    grid = Image.new("RGB", (THUMBNAIL * len(indices), THUMBNAIL * len(rows)), (255, 255, 255))
    for r, (_, images) in enumerate(rows):
        for c, image in enumerate(images):
            grid.paste(_thumbnail(image), (c * THUMBNAIL, r * THUMBNAIL))
    grid_path = out_dir / "recon_grid.png"
    grid.save(grid_path)

    segmask = episode["segmask"][indices]
    records = []
    for name, images in rows:
        if name in ("ground_truth", "mask"):
            continue
        for frame, image, target, labels in zip(indices, images, result["target"], segmask):
            for object_id, error in object_pixel_error(image[..., :3], target[..., :3], labels, object_ids).items():
                records.append({"row": name, "frame": int(frame), "object_id": object_id, "error": error})
    csv_path = out_dir / "recon_errors.csv"
    pd.DataFrame(records, columns=["row", "frame", "object_id", "error"]).to_csv(csv_path, index=False)
    logger.info(f"Reconstruction grid written to {grid_path}")
    return grid_path, csv_path


def trainer_from_checkpoint(path: str | Path) -> Trainer:
    """Rebuild a trainer from the configuration stored in a checkpoint"""
    payload = read_checkpoint(path)
    if not any(key.startswith(DECODER_PREFIXES) for key in payload["world_model"]):
        raise ContractError(f"checkpoint {path} holds no image decoder")
    config = Config.from_dict(payload["config"])
    scene = SceneConfig.from_section(config.section("scene"))
    trainer = Trainer(config, scene)
    trainer.load_checkpoint(path, restore_rng=False)
    return trainer


def dump_reconstructions(checkpoint: str | Path, episode_path: str | Path, out_dir: str | Path,
                         frames: int = 8, baseline_checkpoint: str | Path | None = None) -> tuple[Path, Path]:
    """Reconstruction grid for a recorded episode file"""
    trainer = trainer_from_checkpoint(checkpoint)
    baseline = trainer_from_checkpoint(baseline_checkpoint) if baseline_checkpoint else None
    episode = load_episode(episode_path)
    return render_reconstructions(trainer, episode, out_dir, frames, baseline)
