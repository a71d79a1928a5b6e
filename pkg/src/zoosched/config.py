"""Plain-text key-value configs and run manifests."""

from __future__ import annotations

import hashlib
from pathlib import Path


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def write_config(path, values: dict) -> None:
    lines = [f"{key} = {values[key]}" for key in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(
    path,
    command: str,
    seed: int,
    version: str,
    output_dir: str,
    config_path: str | None = None,
) -> None:
    values = {
        "command": command,
        "seed": seed,
        "tool_version": version,
        "output_dir": output_dir,
        "config_path": config_path or "(none)",
        "config_sha256": sha256_file(config_path) if config_path else "(none)",
    }
    write_config(path, values)
