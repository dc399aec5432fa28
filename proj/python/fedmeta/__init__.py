"""Python bindings for the fedmeta simulator."""

import json

from ._core import (
    ConfigError,
    config_hash,
    cross_entropy,
    focal_loss,
    fusion_weights,
    gen_synthetic,
    gradcheck,
    resolve_config,
    select_clients,
)
from ._core import run as _run

__all__ = [
    "ConfigError",
    "config_hash",
    "cross_entropy",
    "focal_loss",
    "fusion_weights",
    "gen_synthetic",
    "gradcheck",
    "resolve_config",
    "run",
    "select_clients",
]


def run(config, out_dir=None):
    """Run a config (dict or JSON text) and return the report as a dict."""
    text = config if isinstance(config, str) else json.dumps(config)
    return json.loads(_run(text, None if out_dir is None else str(out_dir)))
