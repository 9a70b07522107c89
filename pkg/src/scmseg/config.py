"""Experiment configuration: a single JSON document with schema version 1.

Every stochastic component carries its own seed. Seeds left null are
derived from the top-level seed with fixed offsets, so one --seed flag
reproduces an entire run; --print-config shows the fully resolved values.
"""

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .correlation import PipelineSpec
from .episodes import FoldSpec, SyntheticSpec
from .errors import ConfigError
from .segmenter import SegmenterConfig

SCHEMA_VERSION = 1

# offsets applied to the master seed for components whose seed is null
SEED_OFFSETS = {
    "backbone": 101,
    "data": 211,
    "segmenter": 307,
    "train_stream": 503,
    "val_stream": 601,
    "eval_stream": 701,
}

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "workers": 1,
    "out_dir": "runs/experiment",
    "backbone": {
        "name": "toy",
        "stages": 3,
        "channels": [12, 24, 36],
        "strides": [2, 2, 2],
        "seed": None,
    },
    "fold": {"num_classes": None, "num_folds": 4, "fold_index": 3, "permutation": None},
    "k": 1,
    "data": {
        "source": "synthetic",
        "canvas": [32, 32],
        "classes": ["circle", "square", "triangle", "diamond"],
        "distractors": [0, 2],
        "noise": 0.05,
        "seed": None,
        "root": None,
    },
    "segmenter": {
        "hidden": 8,
        "lr": 0.2,
        "steps": 500,
        "threshold": 0.5,
        "seed": None,
        "val_every": 50,
        "val_episodes": 12,
    },
    "pipeline": {"row": ["sif", "stf"], "fusion": "concat", "eps": 1e-8},
    "eval": {"episodes": 50, "oracle": False},
}


@dataclass
class ExperimentConfig:
    seed: int
    workers: int
    out_dir: str
    backbone: dict
    fold: FoldSpec
    k: int
    data_source: str
    synthetic: SyntheticSpec
    data_root: str
    segmenter: SegmenterConfig
    pipeline: PipelineSpec
    eval_episodes: int
    oracle: bool
    raw: dict

    def stream_seed(self, name):
        return self.seed + SEED_OFFSETS[name]

    def to_json(self):
        return json.dumps(self.raw, indent=2, sort_keys=True)


def _merge(defaults, override):
    out = copy.deepcopy(defaults)
    for key, value in (override or {}).items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def normalize_config(raw=None, seed=None, workers=None, out_dir=None):
    """Merge user config over defaults, fill derived seeds, validate."""
    cfg = _merge(DEFAULT_CONFIG, raw)
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {cfg['schema_version']}; expected {SCHEMA_VERSION}"
        )
    if seed is not None:
        cfg["seed"] = int(seed)
    if workers is not None:
        cfg["workers"] = int(workers)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")

    master = int(cfg["seed"])
    for section, offset_key in (("backbone", "backbone"), ("data", "data"),
                                ("segmenter", "segmenter")):
        if cfg[section].get("seed") is None:
            cfg[section]["seed"] = master + SEED_OFFSETS[offset_key]

    try:
        data_source = cfg["data"]["source"]
        if data_source not in ("synthetic", "episodes"):
            raise ConfigError(f"unknown data source {data_source!r}")
        synthetic = SyntheticSpec(
            canvas=tuple(cfg["data"]["canvas"]),
            classes=tuple(cfg["data"]["classes"]),
            distractors=tuple(cfg["data"]["distractors"]),
            noise=float(cfg["data"]["noise"]),
            seed=int(cfg["data"]["seed"]),
        )
        if cfg["fold"]["num_classes"] is None:
            cfg["fold"]["num_classes"] = len(synthetic.classes)
        if data_source == "synthetic" and cfg["fold"]["num_classes"] != len(synthetic.classes):
            raise ConfigError(
                f"fold.num_classes ({cfg['fold']['num_classes']}) must equal the "
                f"synthetic class count ({len(synthetic.classes)})"
            )
        if data_source == "episodes" and not cfg["data"]["root"]:
            raise ConfigError("data.root is required when data.source is 'episodes'")
        fold = FoldSpec(
            num_classes=int(cfg["fold"]["num_classes"]),
            num_folds=int(cfg["fold"]["num_folds"]),
            fold_index=int(cfg["fold"]["fold_index"]),
            permutation=cfg["fold"]["permutation"],
        )
        segmenter = SegmenterConfig(
            hidden=int(cfg["segmenter"]["hidden"]),
            lr=float(cfg["segmenter"]["lr"]),
            steps=int(cfg["segmenter"]["steps"]),
            threshold=float(cfg["segmenter"]["threshold"]),
            seed=int(cfg["segmenter"]["seed"]),
            val_every=int(cfg["segmenter"]["val_every"]),
            val_episodes=int(cfg["segmenter"]["val_episodes"]),
        )
        pipeline = PipelineSpec(
            row=tuple(cfg["pipeline"]["row"]),
            fusion=cfg["pipeline"]["fusion"],
            eps=float(cfg["pipeline"]["eps"]),
        )
        if int(cfg["k"]) < 1:
            raise ConfigError("k must be >= 1")
        if int(cfg["eval"]["episodes"]) < 1:
            raise ConfigError("eval.episodes must be >= 1")
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc

    return ExperimentConfig(
        seed=master,
        workers=int(cfg["workers"]),
        out_dir=cfg["out_dir"],
        backbone=dict(cfg["backbone"]),
        fold=fold,
        k=int(cfg["k"]),
        data_source=data_source,
        synthetic=synthetic,
        data_root=cfg["data"]["root"],
        segmenter=segmenter,
        pipeline=pipeline,
        eval_episodes=int(cfg["eval"]["episodes"]),
        oracle=bool(cfg["eval"]["oracle"]),
        raw=cfg,
    )
