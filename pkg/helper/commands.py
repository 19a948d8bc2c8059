"""Command registry and the run lifecycle shared by every verb.

Plugins register handlers with ``@command("name")``; ``surf.py`` imports the
plugins package, builds one sub-parser per registered verb and dispatches.
"""

import csv
import io
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException

from config import SCHEMAS

from .errors import ConfigError, StorageError
from .latent import LatentGrid, read_lgr
from .utils import Stopwatch, atomic_write_text, flatten, read_manifest, run_header, send_log, write_manifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
CONFIG_PREFIX = "config."

Option = Tuple[Tuple[str, ...], dict, Optional[str]]


@dataclass
class Command:
    name: str
    handler: Callable
    help: str = ""
    options: Sequence[Option] = ()
    configured: bool = True


COMMANDS: Dict[str, Command] = {}


def command(name: str, help: str = "", options: Sequence[Option] = (), configured: bool = True):
    def decorator(func):
        COMMANDS[name] = Command(name, func, help, options, configured)
        return func
    return decorator


def option(*flags, config_key: Optional[str] = None, **kwargs) -> Option:
    """An extra CLI flag; with ``config_key`` its value is merged into the run config."""
    return flags, kwargs, config_key


# ---------------- configuration ---------------- #

def manifest_overrides(path, verb: str) -> List[str]:
    entries = read_manifest(path)
    if entries.get("command") != verb:
        raise ConfigError(f"manifest {path} records command {entries.get('command')!r}, not {verb!r}")
    return [f"{k[len(CONFIG_PREFIX):]}={v}" for k, v in entries.items() if k.startswith(CONFIG_PREFIX)]


def load_config(verb: str, path=None, overrides: Sequence[str] = (), manifest=None) -> DictConfig:
    """Schema defaults, then manifest snapshot, then YAML file, then ``--set`` overrides."""
    try:
        layers = [OmegaConf.structured(SCHEMAS[verb])]
        if manifest:
            layers.append(OmegaConf.from_dotlist(manifest_overrides(manifest, verb)))
        if path:
            layers.append(OmegaConf.load(path))
        if overrides:
            layers.append(OmegaConf.from_dotlist(list(overrides)))
        cfg = OmegaConf.merge(*layers)
        OmegaConf.to_container(cfg, resolve=True, throw_on_missing=True)
    except OmegaConfBaseException as e:
        raise ConfigError(f"invalid {verb} config: {e}") from e
    except FileNotFoundError as e:
        raise StorageError(f"config file not found: {e.filename}") from e
    return cfg


def snapshot(cfg: DictConfig) -> dict:
    return flatten(OmegaConf.to_container(cfg, resolve=True), prefix=CONFIG_PREFIX)


# ---------------- run context ---------------- #

@dataclass
class RunContext:
    verb: str
    cfg: Optional[DictConfig]
    force: bool = False
    args: object = None
    timer: Stopwatch = field(default_factory=Stopwatch)

    @property
    def out_dir(self) -> str:
        return self.cfg.out_dir

    def path(self, *parts) -> str:
        return os.path.join(self.out_dir, *parts)

    def claim(self, *names):
        """Refuse to overwrite existing outputs unless --force was given."""
        taken = [n for n in names if os.path.exists(self.path(n))]
        if taken and not self.force:
            raise StorageError(f"{self.out_dir} already holds {', '.join(taken)}; pass --force to overwrite")

    def finish(self, extra: dict):
        entries = run_header(self.verb, self.cfg.seed if "seed" in self.cfg else None)
        entries.update(snapshot(self.cfg))
        entries.update(extra)
        entries["wall_s"] = round(self.timer.seconds, 3)
        write_manifest(self.path(MANIFEST_NAME), entries)
        send_log(self.verb, self.timer.seconds, out=self.out_dir)


# ---------------- shared artifact helpers ---------------- #

INDEX_NAME = "index.csv"
INDEX_FIELDS = ["file", "kind", "frames", "height", "width"]


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> List[dict]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            return list(csv.DictReader(handle))
    except FileNotFoundError as e:
        raise StorageError(f"missing {path}") from e


def load_dataset(folder) -> List[LatentGrid]:
    rows = read_csv(os.path.join(folder, INDEX_NAME))
    clips = [read_lgr(os.path.join(folder, row["file"])) for row in rows]
    logger.info(f"loaded {len(clips)} clips from {folder}")
    return clips
