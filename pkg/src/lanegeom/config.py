"""Flat ``key=value`` configuration files."""

from __future__ import annotations

from pathlib import Path

from .errors import ParseError


def read_kv(path, allowed=None):
    """Parse ``key=value`` lines; '#' starts a comment. Unknown keys raise."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key=value", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if allowed is not None and key not in allowed:
            raise ParseError(f"unknown config key {key!r}", line=lineno)
        out[key] = value
    return out


def write_kv(path, mapping):
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in mapping.items()))
