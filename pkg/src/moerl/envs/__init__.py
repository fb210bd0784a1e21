"""Deterministic pixel environments small enough for desk-scale runs."""

from .base import EpisodeOver, PixelEnv
from .catch import Catch
from .treasure import Treasure
from .offline import OfflineDataset, generate_offline_dataset, load_dataset, save_dataset

ENVS = {"catch": Catch, "treasure": Treasure}


def make_env(env_id: str, seed: int | None = None) -> PixelEnv:
    try:
        cls = ENVS[env_id]
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; known: {sorted(ENVS)}") from None
    return cls(seed=seed)


__all__ = ["Catch", "Treasure", "PixelEnv", "EpisodeOver", "ENVS", "make_env",
           "OfflineDataset", "generate_offline_dataset", "save_dataset", "load_dataset"]
