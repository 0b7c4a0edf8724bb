import copy
import json
import logging
import os
from typing import Any, Dict, Mapping, Optional

import tomlkit

logger = logging.getLogger(__name__)

default_config = """
[experiment]
output = "results"

[detector]
coupling_efficiency = 0.99
splitting_sigma = 0.02
efficiency_min = 0.90
efficiency_max = 0.95

[probe]
rule = "saturation"
threshold = 0.9
truncation_bound = 1e-5
pulses_per_probe = 100000
noise_sigma_rel = 0.0188

[tomography]
gamma = 1e-4
method = "both"

[solver]
tol = 1e-8
max_iter = 20000
threads = 1
relaxation = 1.6
admm_tol = 1e-5
max_active_set_iter = 50
track_memory = true

[reconstruction]
lambda = 0.02
max_iter = 100000
convergence_tol = 1e-9
floor_eps = 1e-12

[bench]
repetitions = 3
weight_scheme = "relative"
""".strip()


def _merge(default: Mapping[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(dict(default))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _plain(value: Any) -> Any:
    # tomlkit items carry formatting; unwrap into builtins
    if hasattr(value, "unwrap"):
        return value.unwrap()
    return value


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Defaults from ``default_config`` overridden by an optional user file.

    Files ending in ``.json`` are read as JSON, anything else as TOML.
    """
    config = _plain(tomlkit.parse(default_config))
    if path is None:
        return config

    with open(path) as f:
        text = f.read()
    if os.path.splitext(path)[1].lower() == ".json":
        user = json.loads(text)
    else:
        user = _plain(tomlkit.parse(text))
    logger.debug(f"Loaded config overrides from {path}: {sorted(user)}")
    return _merge(config, user)
