"""Run configuration: flat key = value files, defaults, and the two presets."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

__all__ = ["RunConfig", "ConfigError", "load_config", "parse_config",
           "desk_benchmark", "reduced_mnist"]

MODES = ("plain", "sifl", "dual")
DATASETS = ("synthetic", "idx")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a training run needs; field names double as config keys."""

    mode: str = "dual"
    layers: tuple[int, ...] = (8, 16, 3)
    clients: int = 4
    lr: float = 0.01
    local_epochs: int = 2
    rounds: int = 30
    batch_size: int = 32
    block_max: int = 256
    expansion: int = 1
    seed: int = 0
    randomness_scale: float = 1.0
    dataset: str = "synthetic"
    classes: int = 3
    per_client: int = 150
    test_count: int = 150
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_limit: int = 0
    test_limit: int = 0
    out: str = ""
    verbosity: int = 0
    net: str = ""
    equivalence_threshold: float = 1e-6

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigError(f"invalid value for {key}: {why}")

        if self.mode not in MODES:
            bad("mode", f"{self.mode!r} not one of {MODES}")
        if self.dataset not in DATASETS:
            bad("dataset", f"{self.dataset!r} not one of {DATASETS}")
        if len(self.layers) < 3 or any(s < 1 for s in self.layers):
            bad("layers", f"{self.layers} (need input, >=1 hidden, output, all >= 1)")
        if self.lr <= 0:
            bad("lr", f"{self.lr} (must be > 0)")
        for key in ("clients", "local_epochs", "rounds", "batch_size", "block_max",
                    "expansion", "classes", "per_client"):
            if getattr(self, key) < 1:
                bad(key, f"{getattr(self, key)} (must be >= 1)")
        for key in ("seed", "test_count", "train_limit", "test_limit"):
            if getattr(self, key) < 0:
                bad(key, f"{getattr(self, key)} (must be >= 0)")
        if self.randomness_scale <= 0:
            bad("randomness_scale", f"{self.randomness_scale} (must be > 0)")
        if not 0 <= self.verbosity <= 2:
            bad("verbosity", f"{self.verbosity} (must be 0..2)")
        if self.dataset == "synthetic" and self.classes != self.layers[-1]:
            bad("classes", f"{self.classes} does not match output layer size {self.layers[-1]}")
        if self.dataset == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, key):
                    bad(key, "required when dataset = idx")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str, lineno: int):
    kind = _FIELDS[key].type
    try:
        if key == "layers":
            return tuple(int(part) for part in raw.replace(" ", "").split(",") if part)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse value {raw!r} for key {key!r}")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat ``key = value`` lines; '#' starts a comment.

    Unknown keys are an error (misspellings must not silently fall back to a
    default); missing keys keep their defaults.  The parsed config is
    validated before being returned.
    """
    cfg = base if base is not None else RunConfig()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _convert(key, raw, lineno)
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def desk_benchmark(**overrides) -> RunConfig:
    """Seconds-scale synthetic benchmark exercising every code path."""
    values = dict(
        mode="dual",
        layers=(8, 16, 3),
        clients=4,
        lr=0.05,
        local_epochs=2,
        rounds=30,
        classes=3,
        per_client=150,
        test_count=150,
    )
    values.update(overrides)
    cfg = replace(RunConfig(), **values)
    cfg.validate()
    return cfg


def reduced_mnist(**overrides) -> RunConfig:
    """Image-scale preset: 10 clients, 784-64-10, blocked keys, 5000/1000 split."""
    values = dict(
        mode="dual",
        layers=(784, 64, 10),
        clients=10,
        lr=0.01,
        local_epochs=2,
        rounds=20,
        batch_size=32,
        block_max=256,
        expansion=1,
        dataset="idx",
        train_limit=5000,
        test_limit=1000,
        equivalence_threshold=1e-5,
    )
    values.update(overrides)
    cfg = replace(RunConfig(), **values)
    if not cfg.train_images:
        # Callers must point the preset at IDX files (real or generated).
        cfg = replace(cfg, train_images="train-images-idx3-ubyte",
                      train_labels="train-labels-idx1-ubyte",
                      test_images="t10k-images-idx3-ubyte",
                      test_labels="t10k-labels-idx1-ubyte")
    cfg.validate()
    return cfg
