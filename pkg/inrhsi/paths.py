import os
from pathlib import Path

OUTPUT_DIR_ENV = "INRHSI_OUTPUT_DIR"


def get_output_dir() -> Path:
    output_dir = os.getenv(OUTPUT_DIR_ENV, "").strip()
    if output_dir:
        path = Path(output_dir)
    else:
        path = Path(".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def output_path(*parts: str) -> Path:
    return get_output_dir().joinpath(*parts)


def resolve_output_dir(requested=None) -> Path:
    """Explicit --out wins; relative paths land under the output directory."""
    if requested is None:
        return get_output_dir()
    path = Path(requested)
    if not path.is_absolute():
        path = get_output_dir() / path
    path.mkdir(parents=True, exist_ok=True)
    return path
