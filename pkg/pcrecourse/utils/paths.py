"""Path utility functions for pcrecourse run directories."""

from pathlib import Path


def ensure_dir(directory: Path) -> Path:
    """Ensure a directory exists.

    Args:
        directory: The directory path to ensure exists

    Returns:
        The directory path
    """
    directory = Path(directory)
    directory.mkdir(exist_ok=True, parents=True)
    return directory


def fold_dir(output_dir: Path, fold: int) -> Path:
    """Return (and create) the artifact directory of one fold."""
    return ensure_dir(Path(output_dir) / f"fold_{fold}")
