"""Command-line dispatch.

Config resolution, lowest to highest precedence:

1. model defaults;
2. the ``defaults`` section of the ``--config`` YAML file;
3. the section named after the command (or the whole file when it has no
   command sections);
4. ``--set dotted.key=value`` overrides, values parsed as YAML scalars;
5. ``--workdir``, ``--seed`` and ``--replay``.

Exit codes: 0 success, 2 invalid configuration, 1 runtime failure. Failures
print one ``ErrorRecord`` JSON line on stderr.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import yaml
from pydantic import ValidationError

from ..core.errors import ConfigurationError, VQProfilesError
from ..core.seeding import seed_everything
from ..core.storage import read_yaml
from ..models.schemas import ErrorRecord, RunConfig
from ..services.pipeline_service import error_record, pipeline_service
import logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqprofiles",
        description="Behavioral profiles, change-point detection and emotion forecasting on daily time series",
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, command in pipeline_service.commands.items():
        sub = commands.add_parser(name, help=command.summary, description=command.summary)
        sub.add_argument("--config", type=Path, help="YAML config file")
        sub.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override a config key, e.g. --set model.epochs=5 (repeatable)",
        )
        sub.add_argument("--workdir", help="Artifact directory, relative to VQP_OUTPUT_ROOT unless absolute")
        sub.add_argument("--seed", type=int, help="Global seed for this run")
        if name == "verify":
            sub.add_argument("--replay", metavar="DIR", help="Re-execute the run recorded in DIR and compare metrics")
    return parser


def _assign(data: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[keys[-1]] = value


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigurationError(f"Override {item!r} is not KEY=VALUE", override=item)
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"Override {item!r} has an empty key", override=item)
    try:
        return key, yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Override {item!r} is not a YAML scalar", override=item) from e


def _file_section(name: str, raw: Dict[str, Any]) -> Dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigurationError("Config file must contain a mapping")
    sections = set(pipeline_service.commands) | {"defaults"}
    if not sections & set(raw):
        return dict(raw)
    merged = dict(raw.get("defaults") or {})
    merged.update(raw.get(name) or {})
    return merged


def load_config(
    name: str,
    path: Optional[Path] = None,
    overrides: Sequence[str] = (),
    **flags: Any,
) -> RunConfig:
    """Resolve and validate the run config of one command"""
    command = pipeline_service.command(name)
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = _file_section(name, read_yaml(path))
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Cannot parse {path}", path=str(path)) from e
    for item in overrides:
        key, value = parse_override(item)
        _assign(data, key, value)
    for key, value in flags.items():
        if value is not None:
            data[key] = value
    return command.config_model.model_validate(data)


def _emit(record: ErrorRecord) -> None:
    print(record.model_dump_json(), file=sys.stderr)


def _validation_record(name: str, error: ValidationError) -> ErrorRecord:
    errors = [{"key": ".".join(str(p) for p in e["loc"]), "message": e["msg"]} for e in error.errors()]
    for e in errors:
        print(f"config error: {e['key']}: {e['message']}", file=sys.stderr)
    return ErrorRecord(
        error="ConfigurationError", message="Invalid configuration", command=name, details={"errors": errors}
    )


def run(argv: Optional[List[str]] = None, configure_logging: Optional[Callable[[Path], None]] = None) -> int:
    """Parse arguments, validate the config, execute the command and return the exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    name = args.command
    flags = {"workdir": args.workdir, "seed": args.seed}
    if name == "verify":
        flags["replay"] = args.replay

    try:
        config = load_config(name, args.config, args.overrides, **flags)
    except ValidationError as e:
        _emit(_validation_record(name, e))
        return EXIT_CONFIG
    except VQProfilesError as e:
        _emit(error_record(e, name))
        return EXIT_CONFIG

    if configure_logging is not None:
        configure_logging(pipeline_service.output_dir(name, config))
    seed_everything(pipeline_service.run_seed(config))

    try:
        manifest = pipeline_service.execute(name, config)
    except Exception as e:
        logger.exception(f"{name} failed")
        _emit(error_record(e, name))
        return EXIT_RUNTIME
    print(json.dumps(manifest.metrics, sort_keys=True, default=str))
    return EXIT_OK
