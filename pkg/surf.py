import argparse
import importlib
import logging
import pkgutil
import sys

from omegaconf.errors import OmegaConfBaseException

import plugins
from config import Config, Txt
from helper.commands import COMMANDS, RunContext, load_config
from helper.errors import ConfigError, StorageError, SurfError
from helper.utils import __version__

logger = logging.getLogger("surf")


def setup_logging(level=None):
    logging.basicConfig(
        level=(level or Config.LOG_LEVEL).upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )


def load_plugins():
    """Import every module of the plugins package so its @command handlers register."""
    for module in pkgutil.iter_modules(plugins.__path__):
        importlib.import_module(f"plugins.{module.name}")


class Surf:

    def __init__(self):
        load_plugins()
        self.parser = argparse.ArgumentParser(prog="surf", description=Txt.DESCRIPTION)
        self.parser.add_argument("--version", action="version", version=f"surf {__version__}")
        verbs = self.parser.add_subparsers(dest="verb", required=True)
        for name in sorted(COMMANDS):
            cmd = COMMANDS[name]
            sub = verbs.add_parser(name, help=cmd.help, description=cmd.help)
            if cmd.configured:
                sub.add_argument("--config", help=Txt.CONFIG_HELP)
                sub.add_argument("--set", dest="overrides", action="append", default=[],
                                 metavar="KEY=VALUE", help=Txt.SET_HELP)
                sub.add_argument("--manifest", help=Txt.MANIFEST_HELP)
                sub.add_argument("--force", action="store_true", help="overwrite existing outputs")
            for flags, kwargs, _ in cmd.options:
                sub.add_argument(*flags, **kwargs)

    def context(self, args) -> RunContext:
        cmd = COMMANDS[args.verb]
        if not cmd.configured:
            return RunContext(args.verb, None, args=args)
        overrides = list(args.overrides)
        # flag shortcuts land in the config so the manifest records them
        for flags, kwargs, config_key in cmd.options:
            if config_key is None:
                continue
            value = getattr(args, kwargs.get("dest") or flags[0].lstrip("-").replace("-", "_"), None)
            if value is not None and value is not False:
                overrides.append(f"{config_key}={value}")
        cfg = load_config(args.verb, args.config, overrides, args.manifest)
        return RunContext(args.verb, cfg, force=args.force, args=args)

    def run(self, argv=None) -> int:
        args = self.parser.parse_args(argv)
        try:
            ctx = self.context(args)
            logger.info(f"surf {__version__} {args.verb} starting")
            COMMANDS[args.verb].handler(ctx)
            return 0
        except SurfError as e:
            logger.error(f"{args.verb} failed ({type(e).__name__}, exit {e.exit_code}): {e}")
            return e.exit_code
        except OmegaConfBaseException as e:
            logger.error(f"{args.verb} failed (config, exit {ConfigError.exit_code}): {e}")
            return ConfigError.exit_code
        except OSError as e:
            logger.error(f"{args.verb} failed (I/O, exit {StorageError.exit_code}): {e}")
            return StorageError.exit_code


def main(argv=None) -> int:
    setup_logging()
    return Surf().run(argv)


if __name__ == "__main__":
    sys.exit(main())
