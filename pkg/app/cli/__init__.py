from .commands import build_parser, load_config, run

__all__ = ["build_parser", "load_config", "run"]
