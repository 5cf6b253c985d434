"""Run configuration: JSON files with dotted ``--set`` overrides."""
import copy
import json
import os

from .data import (DatasetManifest, PreparedData, SynthSpec, ingest_csv, load_manifest, prepare,
                   synth_generate)
from .model import ConfigError, ModelConfig
from .training import TrainConfig

__all__ = ["DEFAULTS", "ALIASES", "load_run_config", "apply_overrides", "resolve_model_config",
           "resolve_train_config", "build_data", "parse_value"]

DEFAULTS = {
    "data": {"synth": {}, "train_frac": 0.8, "horizon": 1},
    "model": {},
    "train": {},
    "ablation": {"seeds": 3, "include_no_freq_baseline": False, "workers": 1},
    "robustness": {"missing_levels": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5], "shifts": [0, 1, 2]},
    "out_dir": None,
    "checkpoint": None,
}

# Short names accepted by --set.
ALIASES = {
    "p": "model.mask_p",
    "lambda": "model.cons_weight",
    "lam": "model.cons_weight",
    "seed": "train.seed",
    "epochs": "train.epochs",
    "lr": "train.lr",
}


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_run_config(path=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
        data = user.get("data", {})
        if "manifest" in data or "csv_path" in data:
            cfg["data"].pop("synth", None)
        cfg = _merge(cfg, user)
        base = os.path.dirname(os.path.abspath(path))
        man = cfg["data"].get("manifest")
        if isinstance(man, str) and not os.path.isabs(man):
            cfg["data"]["manifest"] = os.path.join(base, man)
        csv_path = cfg["data"].get("csv_path")
        if isinstance(csv_path, str) and not os.path.isabs(csv_path):
            cfg["data"]["csv_path"] = os.path.join(base, csv_path)
    return cfg


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _model_fields():
    import dataclasses

    return {f.name for f in dataclasses.fields(ModelConfig)}


def _train_fields():
    import dataclasses

    return {f.name for f in dataclasses.fields(TrainConfig)}


def apply_overrides(cfg: dict, assignments) -> dict:
    """Apply ``key=value`` strings. Keys are dotted paths, aliases or bare field names."""
    cfg = copy.deepcopy(cfg)
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        key = ALIASES.get(key, key)
        if "." not in key:
            homes = [s for s, names in (("model", _model_fields()), ("train", _train_fields())) if key in names]
            if len(homes) != 1:
                raise ConfigError(f"cannot place --set key {key!r}; use a dotted path such as model.{key}")
            key = f"{homes[0]}.{key}"
        parts = key.split(".")
        node = cfg
        for part in parts[:-1]:
            if not isinstance(node.get(part, {}), dict):
                raise ConfigError(f"--set {key}: {part} is not a section")
            node = node.setdefault(part, {})
        node[parts[-1]] = parse_value(raw)
    return cfg


def build_data(cfg: dict, normalizer=None, lookback=None) -> PreparedData:
    data = cfg["data"]
    lookback = int(lookback or cfg["model"].get("lookback", data.get("lookback", 12)))
    horizon = int(data.get("horizon", 1))
    train_frac = float(data.get("train_frac", 0.8))
    if "manifest" in data or "csv_path" in data:
        if "manifest" in data:
            man = load_manifest(data["manifest"])
        else:
            man = DatasetManifest(
                csv_path=data["csv_path"], timestamp_col=data["timestamp_col"],
                endo_cols=tuple(data["endo_cols"]), exo_cols=tuple(data.get("exo_cols", ())),
                lookback=lookback, horizon=horizon, train_frac=train_frac,
            )
        raw = ingest_csv(man.csv_path, man.schema)
        return prepare(raw, man.lookback, man.horizon, man.train_frac, normalizer=normalizer)
    try:
        spec = SynthSpec.from_dict(data.get("synth") or {})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data.synth: {exc}") from exc
    return prepare(synth_generate(spec), lookback, horizon, train_frac, normalizer=normalizer)


def resolve_model_config(cfg: dict, data: PreparedData) -> ModelConfig:
    fields = dict(cfg["model"])
    fields.setdefault("lookback", data.train.lookback)
    fields["n_endo"] = data.n_endo
    fields["n_exo"] = data.n_exo
    try:
        return ModelConfig.from_dict(fields)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from exc


def resolve_train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc
