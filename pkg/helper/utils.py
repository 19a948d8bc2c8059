import logging
import os
import re
import sys
import tempfile
import time
from datetime import datetime, timedelta

import humanize
import numpy as np
import torch
from pytz import timezone
from tqdm import tqdm

from config import Config

from .errors import StorageError

logger = logging.getLogger(__name__)

__version__ = "0.3.0"

key_pattern = re.compile(r"^[A-Za-z0-9_.\-\[\]]+$")


def progress(iterable, desc, total=None):
    """tqdm bar over ``iterable`` when Config.PROGRESS is on and stderr is a terminal."""
    disable = not (Config.PROGRESS and sys.stderr.isatty())
    return tqdm(iterable, desc=desc, total=total, leave=False, disable=disable)


def humanbytes(size):
    if not size:
        return "0 Bytes"
    return humanize.naturalsize(size, binary=True)


def TimeFormatter(seconds: float) -> str:
    return humanize.precisedelta(timedelta(seconds=seconds), minimum_unit="milliseconds")


def now_stamp():
    curr = datetime.now(timezone(Config.TIMEZONE))
    return curr.strftime("%Y-%m-%dT%H:%M:%S%z")


def numbered_name(prefix, index, suffix=".lgr", width=3):
    return f"{prefix}_{index:0{width}d}{suffix}"


def atomic_write(path, data: bytes):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    folder = os.path.dirname(path) or "."
    try:
        os.makedirs(folder, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise StorageError(f"cannot write {path}: {e}") from e


def atomic_write_text(path, text: str):
    atomic_write(path, text.encode("utf-8"))


def flatten(mapping, prefix=""):
    flat = {}
    for key, value in mapping.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    return str(value)


def write_manifest(path, entries: dict):
    """Plain-text ``key=value`` manifest, keys sorted, LF line endings."""
    lines = []
    for key in sorted(entries):
        if not key_pattern.match(key):
            raise StorageError(f"manifest key {key!r} is not plain")
        value = _format_value(entries[key])
        if "\n" in value:
            raise StorageError(f"manifest value for {key!r} spans lines")
        lines.append(f"{key}={value}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            rows = handle.read().splitlines()
    except OSError as e:
        raise StorageError(f"cannot read manifest {path}: {e}") from e
    entries = {}
    for row in rows:
        if not row or row.startswith("#"):
            continue
        key, sep, value = row.partition("=")
        if not sep:
            raise StorageError(f"manifest line without '=': {row!r}")
        entries[key] = value
    return entries


def run_header(command, seed):
    return {
        "command": command,
        "seed": seed,
        "started_at": now_stamp(),
        "versions.surf": __version__,
        "versions.torch": torch.__version__,
        "versions.numpy": np.__version__,
    }


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    @property
    def seconds(self):
        return time.perf_counter() - self.start

    @property
    def ms(self):
        return int(round(self.seconds * 1000))


def send_log(command, seconds, **fields):
    extra = " ".join(f"{k}={v}" for k, v in fields.items())
    logger.info(f"--{command} finished-- in {TimeFormatter(seconds)} {extra}".rstrip())
