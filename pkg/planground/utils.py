from __future__ import annotations

from pathlib import Path
from typing import Optional, Union

from appdirs import user_data_dir

APP_NAME = "planground"
APP_AUTHOR = "arched.dev"


def default_data_dir() -> Path:
    """Per-user directory for datasets, checkpoints and traces."""
    return Path(user_data_dir(APP_NAME, APP_AUTHOR))


def resolve_output(path: Optional[Union[str, Path]], default_name: str) -> Path:
    """``path`` if given, otherwise ``default_name`` under the data directory."""
    if path is not None:
        return Path(path)
    return default_data_dir() / default_name


def run_name(ablation: str, seed: int, digest: str) -> str:
    """Checkpoint stem for one training run.

    Args:
        ablation: Model configuration, e.g. ``"full"``.
        seed: Training seed.
        digest: Hex hash of the full training configuration.

    Returns:
        ``"{ablation}_seed{seed}_{digest[:12]}"``; re-running the same
        configuration yields the same name.
    """
    safe = ablation.strip().replace(" ", "_") or "run"
    if not digest:
        raise ValueError("run_name needs a configuration digest")
    return f"{safe}_seed{seed}_{digest[:12]}"


__all__ = [
    "APP_NAME",
    "default_data_dir",
    "resolve_output",
    "run_name",
]
