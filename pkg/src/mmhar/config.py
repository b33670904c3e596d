"""Hierarchical run configuration.

One flat registry of dotted keys with defaults, types and help text. Values
come from defaults, then an optional JSON file (nested or flat), then
command-line overrides. Unknown keys are rejected by name, and every command
writes its effective configuration snapshot next to its outputs.
"""

import json
from pathlib import Path

from .core import ConfigError
from .model import DEFAULT_PROMPT_TEMPLATE, ModelConfig
from .train import TrainConfig

# key: (default, type, help)
CONFIG_SPEC = {
    "d2r.enabled": (True, bool, "enable Doppler-guided geometric reparameterization"),
    "d2r.q_init": (0.2, float, "initial value of the learnable quantile"),
    "d2r.sigma": (1.0, float, "Gaussian rank-smoothing width of the soft quantile"),
    "d2r.gamma": (0.1, float, "logistic sharpness of the soft motion scores"),
    "d2r.delta": (0.5, float, "partition threshold on the soft scores"),
    "d2r.q_min": (0.01, float, "quantile clamp bound: q stays in [q_min, 1-q_min]"),
    "d2r.r": (5, int, "duplication factor for motion-salient points"),
    "d2r.p_goal": (1024, int, "target per-frame cardinality after densification"),
    "d2r.seed": (0, int, "raw-branch sampling seed used outside training"),
    "mfr.enabled": (True, bool, "enable motion-aware feature recalibration"),
    "mfr.c_emb": (64, int, "point embedding width"),
    "mfr.hidden": (64, int, "hidden width of the embedding and head MLPs"),
    "mfr.fast_source": ("pre_dup", str, "summary source: pre_dup | post_dup"),
    "model.backbone": ("reference", str, "registered backbone name"),
    "model.d": (128, int, "global feature dimension"),
    "model.feature_norm": ("layer", str, "global feature normalization: layer | l2 | none"),
    "tam.enabled": (True, bool, "enable the text alignment branch"),
    "tam.alpha": (1.0, float, "fusion weight on the similarity scores"),
    "tam.c_text": (64, int, "text embedding dimension"),
    "tam.hidden": (64, int, "hidden width of the projection MLP"),
    "tam.projection": ("per_class", str, "projection mode: per_class | broadcast"),
    "tam.template": (DEFAULT_PROMPT_TEMPLATE, str, "prompt template; [CLS] is the class name"),
    "tam.bank_file": ("", str, "precomputed embedding bank path; empty builds the hash stub"),
    "train.epochs": (150, int, "training epochs"),
    "train.batch_size": (128, int, "batch size"),
    "train.learning_rate": (0.01, float, "SGD learning rate"),
    "train.weight_decay": (1e-4, float, "SGD weight decay"),
    "train.momentum": (0.9, float, "SGD momentum"),
    "train.schedule": ("cosine", str, "learning-rate schedule: cosine | none"),
    "train.seed": (0, int, "training seed (shuffling, init, sampling)"),
    "train.class_weighting": (False, bool, "weight the loss by inverse class frequency"),
    "prep.normalize": ("none", str, "archive normalization: none | clip_level | dataset_level"),
    "synth.n_sources": (3, int, "number of synthetic radar sources"),
    "synth.n_classes": (6, int, "number of synthetic action classes"),
    "synth.clips_per_class": (34, int, "clips per class per source"),
    "synth.seed": (0, int, "benchmark generation seed"),
    "synth.scenario_file": ("", str, "JSON scenario overriding source profiles / motion primitives"),
    "synth.duration_s": (2.0, float, "clip duration in seconds"),
    "synth.normalize": ("dataset_level", str, "normalization applied to generated archives"),
    "eval.batch_size": (64, int, "evaluation batch size"),
    "eval.split_seed": (0, int, "seed for the protocol split"),
}


def _coerce(key: str, value, typ):
    if typ is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}")
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} expects {typ.__name__}, got {value!r}") from None


def _flatten(tree, prefix=""):
    flat = {}
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


class RunConfig:
    """The effective configuration: defaults + file + overrides."""

    def __init__(self):
        self._values = {key: spec[0] for key, spec in CONFIG_SPEC.items()}

    def get(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def set(self, key: str, value):
        if key not in CONFIG_SPEC:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = _coerce(key, value, CONFIG_SPEC[key][1])

    def update_from_file(self, path):
        try:
            tree = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        if not isinstance(tree, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, value in _flatten(tree).items():
            self.set(key, value)

    def update_from_pairs(self, pairs):
        """Apply ``key=value`` strings (or (key, value) tuples)."""
        for pair in pairs:
            if isinstance(pair, str):
                if "=" not in pair:
                    raise ConfigError(f"override {pair!r} must look like key=value")
                key, value = pair.split("=", 1)
            else:
                key, value = pair
            self.set(key.strip(), value)

    def to_nested(self) -> dict:
        tree = {}
        for key in sorted(self._values):
            section, _, leaf = key.partition(".")
            tree.setdefault(section, {})[leaf] = self._values[key]
        return tree

    def write_snapshot(self, out_dir, extra=None):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        snapshot = {"config": self.to_nested()}
        if extra:
            snapshot["command"] = extra
        path = out_dir / "config_snapshot.json"
        path.write_text(json.dumps(snapshot, sort_keys=True, indent=2) + "\n")
        return path

    # ---- typed views -------------------------------------------------

    def model_config(self, k: int) -> ModelConfig:
        return ModelConfig(
            k=k,
            c_emb=self.get("mfr.c_emb"),
            mfr_hidden=self.get("mfr.hidden"),
            d=self.get("model.d"),
            backbone=self.get("model.backbone"),
            feature_norm=self.get("model.feature_norm"),
            d2r_enabled=self.get("d2r.enabled"),
            mfr_enabled=self.get("mfr.enabled"),
            fast_source=self.get("mfr.fast_source"),
            q_init=self.get("d2r.q_init"),
            sigma=self.get("d2r.sigma"),
            gamma=self.get("d2r.gamma"),
            delta=self.get("d2r.delta"),
            q_min=self.get("d2r.q_min"),
            r=self.get("d2r.r"),
            p_goal=self.get("d2r.p_goal"),
            tam_enabled=self.get("tam.enabled"),
            tam_alpha=self.get("tam.alpha"),
            tam_c_text=self.get("tam.c_text"),
            tam_hidden=self.get("tam.hidden"),
            tam_projection=self.get("tam.projection"),
            tam_template=self.get("tam.template"),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.get("train.epochs"),
            batch_size=self.get("train.batch_size"),
            learning_rate=self.get("train.learning_rate"),
            weight_decay=self.get("train.weight_decay"),
            momentum=self.get("train.momentum"),
            schedule=self.get("train.schedule"),
            seed=self.get("train.seed"),
            class_weighting=self.get("train.class_weighting"),
        )


def reference_page() -> str:
    """Markdown table documenting every config key."""
    lines = [
        "# Configuration reference",
        "",
        "| key | default | type | description |",
        "| --- | --- | --- | --- |",
    ]
    for key in sorted(CONFIG_SPEC):
        default, typ, help_text = CONFIG_SPEC[key]
        lines.append(f"| `{key}` | `{default!r}` | {typ.__name__} | {help_text} |")
    return "\n".join(lines) + "\n"
