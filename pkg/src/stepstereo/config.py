"""Typed INI configuration shared by every command.

A run is driven by a flat ``[section] key = value`` file.  Every key has a
declared type and default below; unknown sections or keys are rejected so a
typo cannot silently fall back to a default.  Command-line ``--set
section.key=value`` overrides are applied on top of the file, and the fully
resolved result is archived into the run's output directory, making each
run reconstructible from its directory alone.
"""

import configparser
import io

from .errors import ContractViolation


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ContractViolation(f"expected a boolean, got {text!r}")


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "seed": (int, 0),
    },
    "scenes": {
        "count": (int, 200),
        "height": (int, 64),
        "width": (int, 96),
        "num_layers": (int, 3),
        "d_min": (int, 0),
        "d_max": (int, 24),
        "noise_sigma": (float, 0.02),
    },
    "model": {
        "feat_channels": (int, 16),
        "hidden_channels": (int, 32),
        "d_levels": (int, 7),
        "temperature": (float, 1.0),
        "num_gru": (int, 0),
        "num_sru": (int, 15),
        "m": (float, 2.0),
        "upsample_mode": (str, "convex"),
        "seed": (int, 0),
    },
    "loss": {
        "gamma": (float, 0.9),
        "h": (float, 0.5),
        "supervise_clips": (_bool, True),
    },
    "optim": {
        "peak_lr": (float, 2e-3),
        "edge_peak_lr": (float, 3e-3),
        "weight_decay": (float, 1e-5),
        "clip_norm": (float, 1.0),
    },
    "train": {
        "steps": (int, 2000),
        "batch_size": (int, 4),
        "holdout": (int, 20),
        "eval_every": (int, 250),
        "stop_epe": (float, 0.0),
        "train_edges": (_bool, True),
        "edge_steps": (int, 4000),
    },
    "dape": {
        "t": (float, 0.25),
        "sweep": (str, ""),  # comma-separated extra thresholds, optional
        "drop_prob": (float, 0.5),
        "steps": (int, 400),
        "peak_lr": (float, 2e-4),
        "batch_size": (int, 4),
        "edge_loss_weight": (float, 1.0),
        "holdout": (int, 20),
    },
    "eval": {
        "dump_images": (_bool, True),
    },
}

_FORMATTERS = {True: "true", False: "false"}


def default_config():
    return {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in SCHEMA.items()
    }


def _apply(cfg, section, key, raw_text):
    if section not in SCHEMA:
        raise ContractViolation(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ContractViolation(f"unknown config key {section}.{key}")
    parser = SCHEMA[section][key][0]
    try:
        cfg[section][key] = parser(raw_text)
    except ContractViolation:
        raise
    except ValueError as exc:
        raise ContractViolation(f"bad value for {section}.{key}: {raw_text!r}") from exc


def load_config(path=None, overrides=()):
    """Defaults, optionally updated from an INI file, then from overrides.

    ``overrides`` are ``"section.key=value"`` strings (the CLI's ``--set``).
    """
    cfg = default_config()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ContractViolation(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for item in overrides:
        head, sep, value = item.partition("=")
        if not sep:
            raise ContractViolation(f"override must look like section.key=value: {item!r}")
        section, dot, key = head.strip().partition(".")
        if not dot:
            raise ContractViolation(f"override key must be section.key: {item!r}")
        _apply(cfg, section.strip(), key.strip(), value.strip())
    return cfg


def format_config(cfg):
    """Deterministic INI text for a resolved configuration."""
    out = io.StringIO()
    for section in SCHEMA:
        out.write(f"[{section}]\n")
        for key in SCHEMA[section]:
            value = cfg[section][key]
            if isinstance(value, bool):
                text = _FORMATTERS[value]
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            out.write(f"{key} = {text}\n")
        out.write("\n")
    return out.getvalue()


def write_config(path, cfg):
    with open(path, "w") as f:
        f.write(format_config(cfg))


def sweep_thresholds(cfg):
    """The DAPE threshold list: the primary ``t`` plus any sweep extras."""
    values = [cfg["dape"]["t"]]
    extra = cfg["dape"]["sweep"].strip()
    if extra:
        for token in extra.split(","):
            token = token.strip()
            if token:
                values.append(float(token))
    seen = []
    for v in values:
        if v not in seen:
            seen.append(v)
    return seen
