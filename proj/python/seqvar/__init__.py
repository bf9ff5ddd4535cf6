"""Python front end of the seqvar C++ core."""

import json as _json

from ._seqvar import (  # noqa: F401
    ConfigError,
    IoError,
    LgssmParams,
    NumericError,
    ParameterError,
    closed_form_elbo,
    estimate_elbo,
    exact_parameters,
    kalman_filter,
    log_likelihood,
    random_lgssm,
    rts_smoother,
    simulate_lgssm,
)
from . import _seqvar

__version__ = "0.1.0"


def _text(config):
    if isinstance(config, (str, bytes)):
        return config if isinstance(config, str) else config.decode()
    return _json.dumps(config)


def load_config(path):
    with open(path) as f:
        return _json.load(f)


def validate_config(config):
    """Normalized config dict, or ConfigError."""
    return _json.loads(_seqvar.validate_config(_text(config)))


def run(config, **overrides):
    """Runs an experiment. Returns (summary dict, metric rows, final lambda).

    Keyword overrides are set at the top level of the config, e.g. out_dir="runs/a", seed=3.
    """
    cfg = dict(config) if isinstance(config, dict) else _json.loads(_text(config))
    cfg.update(overrides)
    summary, rows, lam = _seqvar.run_experiment(_json.dumps(cfg))
    return summary, [_json.loads(r) for r in rows], lam


def generate(config, **overrides):
    cfg = dict(config)
    cfg.update(overrides)
    _seqvar.generate(_json.dumps(cfg))
