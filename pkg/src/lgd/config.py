"""Experiment configuration files (JSON, versioned, unknown keys rejected).

Layout::

    {
      "format": 1,
      "seed": 0,
      "precision": "double",
      "output_dir": "runs/toy2d",
      "network": {"preset": "toy2d", ...NetworkSpec overrides},
      "sketch": {"dim": null, "normalize": false},
      "train": {"stage1": {...TrainConfig}, "stage2": {...TrainConfig}},
      "data": {"synthetic": {...SyntheticVideoSpec}, "test_fraction": 0.3333}
              or {"path": "data.bin", "test_path": "test.bin"}
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .backbone import PRESETS, NetworkSpec
from .synthdata import SyntheticVideoSpec
from .training import TrainConfig

FORMAT = 1


class ConfigError(ValueError):
    pass


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _build(cls, d, where, drop=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - _fields(cls) - set(drop)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{k: v for k, v in d.items() if k not in drop})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    network: NetworkSpec
    stage1: TrainConfig
    stage2: TrainConfig
    data: dict
    seed: int = 0
    precision: str = "double"
    output_dir: str = "runs/default"
    sketch_dim: int = None
    normalize_feature: bool = False
    network_preset: str = None
    raw: dict = field(default_factory=dict, repr=False)

    def train_config(self, stage):
        return self.stage1 if stage == 1 else self.stage2

    def to_dict(self):
        net = self.network.to_dict()
        net.pop("sketch_dim")
        net.pop("normalize_feature")
        return {
            "format": FORMAT,
            "seed": self.seed,
            "precision": self.precision,
            "output_dir": self.output_dir,
            "network": net,
            "sketch": {"dim": self.sketch_dim, "normalize": self.normalize_feature},
            "train": {"stage1": dataclasses.asdict(self.stage1), "stage2": dataclasses.asdict(self.stage2)},
            "data": self.data,
        }


def parse(d):
    _check_keys(d, {"format", "seed", "precision", "output_dir", "network", "sketch", "train", "data"}, "config")
    if d.get("format") != FORMAT:
        raise ConfigError(f"config: unsupported or missing format {d.get('format')!r} (expected {FORMAT})")
    precision = d.get("precision", "double")
    if precision not in ("double", "single"):
        raise ConfigError(f"config.precision: expected 'double' or 'single', got {precision!r}")
    sk = d.get("sketch", {})
    _check_keys(sk, {"dim", "normalize"}, "config.sketch")
    net_d = dict(d.get("network", {}))
    preset = net_d.pop("preset", None)
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"config.network.preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    unknown = set(net_d) - _fields(NetworkSpec) | ({"sketch_dim", "normalize_feature"} & set(net_d))
    if unknown:
        raise ConfigError(f"config.network: unknown keys {sorted(unknown)}")
    net_d.update(sketch_dim=sk.get("dim"), normalize_feature=bool(sk.get("normalize", False)))
    try:
        network = PRESETS[preset](**net_d) if preset else NetworkSpec(**net_d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config.network: {e}") from e
    tr = d.get("train", {})
    _check_keys(tr, {"stage1", "stage2"}, "config.train")
    s1 = _build(TrainConfig, {"epochs": 30, **tr.get("stage1", {}), "stage": 1}, "config.train.stage1")
    s2 = _build(TrainConfig, {"epochs": 10, **tr.get("stage2", {}), "stage": 2}, "config.train.stage2")
    data = d.get("data", {"synthetic": {}})
    _check_keys(data, {"synthetic", "test_fraction", "path", "test_path"}, "config.data")
    if ("synthetic" in data) == ("path" in data):
        raise ConfigError("config.data: give exactly one of 'synthetic' or 'path'")
    if "synthetic" in data:
        _build(SyntheticVideoSpec, data["synthetic"], "config.data.synthetic")
    return ExperimentConfig(network, s1, s2, data, int(d.get("seed", 0)), precision,
                            d.get("output_dir", "runs/default"), sk.get("dim"), bool(sk.get("normalize", False)),
                            preset, d)


def load(path):
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return parse(d)


def dump(cfg, path):
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def synthetic_spec(cfg):
    return SyntheticVideoSpec(**cfg.data.get("synthetic", {}))


def toy_config(kind="lgd2d", output_dir="runs/toy", seed=0):
    """Desk-scale preset: LGD-2D (3 snippets) or LGD-3D (8-frame clips) on the composition task."""
    preset = "toy2d" if kind.endswith("2d") else "toy3d"
    return parse({
        "format": FORMAT,
        "seed": seed,
        "output_dir": output_dir,
        "network": {"preset": preset, "kind": kind},
        "train": {"stage1": {"epochs": 30, "decay_every": 10},
                  "stage2": {"epochs": 10, "base_lr": 1e-4, "decay_every": 10}},
        "data": {"synthetic": {"num_videos": 360}, "test_fraction": 1 / 3},
    })
