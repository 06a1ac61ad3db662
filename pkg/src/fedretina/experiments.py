"""Experiment harness: config files, institution data and the three report-producing runs.

experiment1 trains one local model per institution plus the federated model
and scores all of them on an independent test set. experiment2 scores the
same models on every institution's own test split. crossval_report runs the
k-fold bake-off over trunk presets.
"""
import configparser
import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fedretina import __version__
from fedretina.checkpoint import load_checkpoint, save_checkpoint
from fedretina.config import (
    BATCH_SIZE,
    CROSSVAL_FOLDS,
    CONVERGENCE_DELTA,
    CONVERGENCE_PATIENCE,
    DEFAULT_TRUNK_DEPTH,
    EARLY_STOP_PATIENCE,
    EPOCHS,
    GAUSSIAN_KERNEL,
    GAUSSIAN_SIGMA,
    GRADE_MIX,
    INDEPENDENT_TEST_SIZE,
    INPUT_SHAPE,
    INSTITUTION_SIZES,
    LEARNING_RATE,
    LOCAL_EPOCHS,
    LR_HALVING_PATIENCE,
    LR_HALVING_PATIENCE_FEDERATED,
    MAX_ROUNDS,
    NUM_CLASSES,
    PARTICIPATION,
    TRUNK_WIDTHS,
)
from fedretina.data_utils import (
    Dataset,
    InstitutionData,
    SplitSpec,
    SyntheticStyle,
    concat_datasets,
    counts_for_size,
    degrade_dataset,
    filter_dataset,
    generate_synthetic,
    ingest,
    oversample_balance,
    prepare_institution,
    split,
    write_dataset,
)
from fedretina.errors import ConfigError, EmptyDatasetError, UsageError
from fedretina.federation import FederationConfig, InstitutionProfile, RoundRecord, run_federation
from fedretina.image_utils import AugmentPolicy, DegradeSpec, GaussianFilterSpec
from fedretina.metrics import evaluate
from fedretina.model import LayerSpec, Model, build_model, default_specs
from fedretina.reporting import write_csv, write_json
from fedretina.training import EpochRecord, TrainConfig, crossval, train_local, train_pooled
from fedretina.transport import Transport

logger = logging.getLogger(__name__)

FEDERATED = "federated"
POOLED = "pooled"
SPLITS = ("train", "validation", "test")
SYNTHETIC = "synthetic"
CROSSVAL_DEPTHS = (0, 1, 2, 3)

# Acquisition styles of the three simulated institutions
STANDARD_STYLES = {
    "H1": SyntheticStyle((0.80, 0.40, 0.20), 1.00, 0.00),
    "H2": SyntheticStyle((0.86, 0.46, 0.24), 0.94, 0.15),
    "H3": SyntheticStyle((0.74, 0.36, 0.22), 0.88, 0.30),
}


def derived_seed(seed: int, *purpose: int) -> int:
    return int(np.random.SeedSequence([seed, *purpose]).generate_state(1)[0])


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class InstitutionSpec:
    name: str
    size: int = 1000
    source: str = SYNTHETIC
    degrade: Optional[DegradeSpec] = None
    size_multiplier: float = 1.0
    style: SyntheticStyle = SyntheticStyle()
    local_epochs: int = LOCAL_EPOCHS
    per_class: Optional[int] = None

    @property
    def synthetic(self) -> bool:
        return self.source == SYNTHETIC

    def class_counts(self) -> List[int]:
        if self.per_class is not None:
            return [self.per_class] * NUM_CLASSES
        return counts_for_size(int(np.floor(self.size * self.size_multiplier + 0.5)), GRADE_MIX)

    def validate(self) -> "InstitutionSpec":
        if not self.name or self.name == FEDERATED or "/" in self.name:
            raise ConfigError(f"invalid institution name {self.name!r}")
        if self.size < 0 or self.size_multiplier <= 0:
            raise ConfigError(f"{self.name}: size and size_multiplier must be positive")
        if self.local_epochs < 0:
            raise ConfigError(f"{self.name}: local_epochs must be >= 0")
        if self.per_class == 0:
            raise EmptyDatasetError(f"{self.name}: per_class 0 leaves the institution without images")
        if self.per_class is not None and self.per_class < 0:
            raise ConfigError(f"{self.name}: per_class must be >= 1, got {self.per_class}")
        if self.degrade is not None:
            self.degrade.validate()
        return self


def default_institutions(count: int = 3) -> Tuple[InstitutionSpec, ...]:
    """H1..Hn at desk-scale sizes; the last one is the degraded, under-resourced site."""
    specs = []
    for index in range(count):
        name = f"H{index + 1}"
        specs.append(InstitutionSpec(
            name=name,
            size=INSTITUTION_SIZES.get(name, 1000),
            degrade=DegradeSpec() if index == count - 1 and count > 1 else None,
            style=STANDARD_STYLES.get(name, SyntheticStyle()),
        ))
    return tuple(specs)


@dataclass(frozen=True)
class ExperimentConfig:
    institutions: Tuple[InstitutionSpec, ...] = default_institutions()
    seed: int = 0
    out_dir: str = "results"
    image_size: int = INPUT_SHAPE[0]
    trunk_depth: int = DEFAULT_TRUNK_DEPTH
    dtype: str = "float32"
    train: TrainConfig = TrainConfig()
    federated_lr_halving_patience: int = LR_HALVING_PATIENCE_FEDERATED
    max_rounds: int = MAX_ROUNDS
    convergence_patience: int = CONVERGENCE_PATIENCE
    convergence_delta: float = CONVERGENCE_DELTA
    participation: float = PARTICIPATION
    allow_partial: bool = False
    workers: int = 1
    independent_test_size: int = INDEPENDENT_TEST_SIZE
    independent_test_source: str = SYNTHETIC
    gaussian_filter: GaussianFilterSpec = GaussianFilterSpec(enabled=True)
    pooled_baseline: bool = False
    crossval_folds: int = CROSSVAL_FOLDS
    crossval_depths: Tuple[int, ...] = CROSSVAL_DEPTHS

    def validate(self) -> "ExperimentConfig":
        if not self.institutions:
            raise ConfigError("at least one institution is required")
        names = [inst.validate().name for inst in self.institutions]
        if len(set(names)) != len(names):
            raise ConfigError(f"institution names must be unique, got {names}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        for depth in (self.trunk_depth,) + tuple(self.crossval_depths):
            if not 0 <= depth <= len(TRUNK_WIDTHS):
                raise ConfigError(f"trunk depth must be in 0..{len(TRUNK_WIDTHS)}, got {depth}")
        if self.crossval_folds < 2:
            raise ConfigError(f"crossval_folds must be >= 2, got {self.crossval_folds}")
        if self.independent_test_size < NUM_CLASSES:
            raise ConfigError(f"independent test size must be >= {NUM_CLASSES}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        AugmentPolicy(gaussian_filter=self.gaussian_filter).validate()
        self.train.validate()
        replace(self.train, lr_halving_patience=self.federated_lr_halving_patience).validate()
        self.federation_config({inst.name: 1 for inst in self.institutions}).validate()
        return self

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.image_size, self.image_size, 3)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def specs(self, depth: Optional[int] = None) -> List[LayerSpec]:
        return default_specs(self.trunk_depth if depth is None else depth)

    def institution_seed(self, name: str) -> int:
        return derived_seed(self.seed, zlib.crc32(name.encode("utf-8")))

    def federated_train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed, lr_halving_patience=self.federated_lr_halving_patience)

    def federation_config(self, sizes: Mapping[str, int]) -> FederationConfig:
        profiles = tuple(InstitutionProfile(inst.name, sizes[inst.name], inst.local_epochs)
                         for inst in self.institutions)
        return FederationConfig(profiles, self.max_rounds, self.convergence_patience, self.convergence_delta,
                                self.participation, self.seed, self.allow_partial)

    def with_overrides(self, seed: Optional[int] = None, max_rounds: Optional[int] = None,
                       out_dir: Optional[str] = None, workers: Optional[int] = None) -> "ExperimentConfig":
        changes = {key: value for key, value in (("seed", seed), ("max_rounds", max_rounds),
                                                 ("out_dir", out_dir), ("workers", workers))
                   if value is not None}
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        """Sectioned form, mirroring the INI layout."""
        sections: Dict[str, Dict[str, Any]] = {
            "experiment": {
                "seed": self.seed, "out": self.out_dir, "pooled_baseline": self.pooled_baseline,
                "crossval_folds": self.crossval_folds, "crossval_depths": list(self.crossval_depths),
                "gaussian_filter": self.gaussian_filter.enabled, "filter_sigma": self.gaussian_filter.sigma,
                "filter_kernel": self.gaussian_filter.kernel_size,
            },
            "model": {"depth": self.trunk_depth, "image_size": self.image_size, "dtype": self.dtype},
            "train": {
                "epochs": self.train.epochs, "batch_size": self.train.batch_size, "lr": self.train.lr_initial,
                "lr_halving_patience": self.train.lr_halving_patience,
                "early_stop_patience": self.train.early_stop_patience,
                "federated_lr_halving_patience": self.federated_lr_halving_patience,
            },
            "federation": {
                "max_rounds": self.max_rounds, "convergence_patience": self.convergence_patience,
                "convergence_delta": self.convergence_delta, "participation": self.participation,
                "allow_partial": self.allow_partial, "workers": self.workers,
            },
            "independent_test": {"size": self.independent_test_size, "source": self.independent_test_source},
        }
        for inst in self.institutions:
            sections[f"institution:{inst.name}"] = {
                "size": inst.size, "source": inst.source,
                "degrade": str(inst.degrade) if inst.degrade is not None else "none",
                "size_multiplier": inst.size_multiplier, "disc_tint": list(inst.style.disc_tint),
                "illumination": inst.style.illumination, "vignette": inst.style.vignette,
                "local_epochs": inst.local_epochs,
                "per_class": inst.per_class if inst.per_class is not None else "none",
            }
        return sections

    @classmethod
    def from_dict(cls, sections: Mapping[str, Mapping[str, Any]]) -> "ExperimentConfig":
        """Inverse of to_dict; also accepts the string values an INI file yields."""
        values = {}
        for section, keys in sections.items():
            if section.startswith("institution:"):
                continue
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            values[section] = _read_section(section, keys, _SCHEMA[section])
        for section, schema in _SCHEMA.items():
            values.setdefault(section, _read_section(section, {}, schema))

        institutions = []
        for section, keys in sections.items():
            if not section.startswith("institution:"):
                continue
            name = section.split(":", 1)[1].strip()
            raw = _read_section(section, keys, _INSTITUTION_SCHEMA)
            style = STANDARD_STYLES.get(name, SyntheticStyle())
            tint = raw["disc_tint"] if raw["disc_tint"] is not None else style.disc_tint
            if len(tint) != 3:
                raise ConfigError(f"[{section}] disc_tint needs three values, got {tint}")
            institutions.append(InstitutionSpec(
                name=name,
                size=raw["size"] if raw["size"] is not None else INSTITUTION_SIZES.get(name, 1000),
                source=raw["source"],
                degrade=raw["degrade"],
                size_multiplier=raw["size_multiplier"],
                style=SyntheticStyle(
                    tuple(tint),
                    raw["illumination"] if raw["illumination"] is not None else style.illumination,
                    raw["vignette"] if raw["vignette"] is not None else style.vignette,
                ),
                local_epochs=raw["local_epochs"],
                per_class=raw["per_class"],
            ))

        experiment, model, train, federation, test = (
            values[s] for s in ("experiment", "model", "train", "federation", "independent_test"))
        return cls(
            institutions=tuple(institutions) or default_institutions(),
            seed=experiment["seed"],
            out_dir=experiment["out"],
            image_size=model["image_size"],
            trunk_depth=model["depth"],
            dtype=model["dtype"],
            train=TrainConfig(train["epochs"], train["batch_size"], train["lr"], train["lr_halving_patience"],
                              train["early_stop_patience"], experiment["seed"]),
            federated_lr_halving_patience=train["federated_lr_halving_patience"],
            max_rounds=federation["max_rounds"],
            convergence_patience=federation["convergence_patience"],
            convergence_delta=federation["convergence_delta"],
            participation=federation["participation"],
            allow_partial=federation["allow_partial"],
            workers=federation["workers"],
            independent_test_size=test["size"],
            independent_test_source=test["source"],
            gaussian_filter=GaussianFilterSpec(experiment["gaussian_filter"], experiment["filter_sigma"],
                                               experiment["filter_kernel"]),
            pooled_baseline=experiment["pooled_baseline"],
            crossval_folds=experiment["crossval_folds"],
            crossval_depths=tuple(experiment["crossval_depths"]),
        ).validate()


_SCHEMA: Dict[str, Dict[str, Tuple[str, Any]]] = {
    "experiment": {
        "seed": ("int", 0), "out": ("str", "results"), "pooled_baseline": ("bool", False),
        "crossval_folds": ("int", CROSSVAL_FOLDS), "crossval_depths": ("ints", CROSSVAL_DEPTHS),
        "gaussian_filter": ("bool", True), "filter_sigma": ("float", GAUSSIAN_SIGMA),
        "filter_kernel": ("int", GAUSSIAN_KERNEL),
    },
    "model": {"depth": ("int", DEFAULT_TRUNK_DEPTH), "image_size": ("int", INPUT_SHAPE[0]), "dtype": ("str", "float32")},
    "train": {
        "epochs": ("int", EPOCHS), "batch_size": ("int", BATCH_SIZE), "lr": ("float", LEARNING_RATE),
        "lr_halving_patience": ("int", LR_HALVING_PATIENCE), "early_stop_patience": ("int", EARLY_STOP_PATIENCE),
        "federated_lr_halving_patience": ("int", LR_HALVING_PATIENCE_FEDERATED),
    },
    "federation": {
        "max_rounds": ("int", MAX_ROUNDS), "convergence_patience": ("int", CONVERGENCE_PATIENCE),
        "convergence_delta": ("float", CONVERGENCE_DELTA), "participation": ("float", PARTICIPATION),
        "allow_partial": ("bool", False), "workers": ("int", 1),
    },
    "independent_test": {"size": ("int", INDEPENDENT_TEST_SIZE), "source": ("str", SYNTHETIC)},
}

# None defaults are filled in per institution name
_INSTITUTION_SCHEMA: Dict[str, Tuple[str, Any]] = {
    "size": ("int", None), "source": ("str", SYNTHETIC), "degrade": ("degrade", None),
    "size_multiplier": ("float", 1.0), "disc_tint": ("floats", None), "illumination": ("float", None),
    "vignette": ("float", None), "local_epochs": ("int", LOCAL_EPOCHS), "per_class": ("int", None),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(value: Any, kind: str) -> Any:
    if isinstance(value, str) and value.strip().lower() == "none" and kind not in ("str", "bool"):
        return None
    if kind == "bool":
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text not in _TRUE | _FALSE:
            raise ValueError(f"not a boolean: {value!r}")
        return text in _TRUE
    if kind == "int":
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ValueError(f"not an integer: {value!r}")
        return int(value.strip()) if isinstance(value, str) else int(value)
    if kind == "float":
        return float(value)
    if kind == "str":
        return str(value).strip()
    if kind in ("ints", "floats"):
        cast = int if kind == "ints" else float
        parts = value.split(",") if isinstance(value, str) else value
        return tuple(cast(str(p).strip()) if isinstance(p, str) else cast(p) for p in parts if str(p).strip())
    if kind == "degrade":
        return None if value in (None, "") else DegradeSpec.parse(str(value).strip())
    raise ValueError(f"unknown value kind {kind}")


def _read_section(section: str, keys: Mapping[str, Any], schema: Mapping[str, Tuple[str, Any]]) -> Dict[str, Any]:
    unknown = sorted(set(keys) - set(schema))
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    values = {}
    for key, (kind, default) in schema.items():
        if key not in keys:
            values[key] = default
            continue
        try:
            values[key] = _coerce(keys[key], kind)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key} = {keys[key]!r}: {exc}") from exc
    return values


def load_config(path) -> ExperimentConfig:
    """Read an INI experiment file, or the `config` block of a run's manifest.json."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    if path.suffix.lower() == ".json":
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return ExperimentConfig.from_dict(payload.get("config", payload))
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as handle:
            parser.read_file(handle)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict({section: dict(parser[section]) for section in parser.sections()})


# ---------------------------------------------------------------- data

def _is_presplit(path: Path) -> bool:
    return all((path / part / "labels.csv").exists() for part in SPLITS)


def _source_path(source: str, owner: str) -> Path:
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"{owner}: source {path} does not exist")
    return path


def load_raw(inst: InstitutionSpec, config: ExperimentConfig) -> Dataset:
    """The institution's images before any preprocessing."""
    if inst.synthetic:
        return generate_synthetic(inst.class_counts(), config.image_size, config.institution_seed(inst.name),
                                  inst.style, inst.name)
    path = _source_path(inst.source, inst.name)
    if _is_presplit(path):
        parts = [ingest(path / part, image_size=config.image_size, name=f"{inst.name}/{part}") for part in SPLITS]
        return concat_datasets(parts, inst.name)
    return ingest(path, image_size=config.image_size, name=inst.name)


def build_institution(inst: InstitutionSpec, config: ExperimentConfig) -> InstitutionData:
    seed = config.institution_seed(inst.name)
    source = None if inst.synthetic else _source_path(inst.source, inst.name)
    if source is not None and _is_presplit(source):
        parts = [ingest(source / part, image_size=config.image_size, name=f"{inst.name}/{part}") for part in SPLITS]
        if inst.degrade is not None:
            parts = [degrade_dataset(part, inst.degrade, derived_seed(seed, i)) for i, part in enumerate(parts)]
        train, validation, test = (filter_dataset(part, config.gaussian_filter) for part in parts)
        return InstitutionData(inst.name, oversample_balance(train, AugmentPolicy(), seed), validation, test)
    return prepare_institution(load_raw(inst, config), seed, inst.degrade, SplitSpec(seed=seed),
                               config.gaussian_filter)


def build_institutions(config: ExperimentConfig) -> List[InstitutionData]:
    institutions = [build_institution(inst, config) for inst in config.institutions]
    for data in institutions:
        logger.info("%s: train %s, validation %s, test %s", data.name, data.train.class_counts().tolist(),
                    data.validation.class_counts().tolist(), data.test.class_counts().tolist())
    return institutions


def build_independent_test(config: ExperimentConfig, filtered: bool = True) -> Dataset:
    """Class-balanced held-out set in the style of the non-degraded institutions."""
    if config.independent_test_source != SYNTHETIC:
        path = _source_path(config.independent_test_source, "independent test set")
        dataset = ingest(path, image_size=config.image_size, name="independent_test")
    else:
        styles = [inst.style for inst in config.institutions if inst.degrade is None and inst.synthetic][:2]
        styles = styles or [SyntheticStyle()]
        base, extra = divmod(config.independent_test_size, len(styles))
        parts = []
        for index, style in enumerate(styles):
            size = base + (1 if index < extra else 0)
            counts = counts_for_size(size, [1.0] * NUM_CLASSES)
            parts.append(generate_synthetic(counts, config.image_size, derived_seed(config.seed, 0x7E57, index),
                                            style, f"independent_test/{index}"))
        dataset = concat_datasets(parts, "independent_test")
    return filter_dataset(dataset, config.gaussian_filter) if filtered else dataset


def generate_data(config: ExperimentConfig, out_dir) -> Dict[str, Dict[str, List[int]]]:
    """Write every institution's (degraded) train/validation/test splits and the independent test set."""
    out = Path(out_dir)
    counts: Dict[str, Dict[str, List[int]]] = {}
    for inst in config.institutions:
        seed = config.institution_seed(inst.name)
        raw = load_raw(inst, config)
        data = degrade_dataset(raw, inst.degrade, seed) if inst.degrade is not None else raw
        counts[inst.name] = {}
        for part_name, part in zip(SPLITS, split(data, SplitSpec(seed=seed))):
            write_dataset(part, out / inst.name / part_name)
            counts[inst.name][part_name] = part.class_counts().tolist()
    independent = build_independent_test(config, filtered=False)
    write_dataset(independent, out / "independent_test")
    counts["independent_test"] = {"test": independent.class_counts().tolist()}
    return counts


# ---------------------------------------------------------------- training

def checkpoint_path(config: ExperimentConfig, name: str) -> Path:
    return Path(config.out_dir) / "checkpoints" / f"{name}.fdck"


def _write_history(path: Path, history: Sequence[EpochRecord]) -> None:
    write_csv(path, ["epoch", "train_loss", "val_loss", "val_accuracy", "lr"],
              [[r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.lr] for r in history])


def train_institution_model(config: ExperimentConfig, data: InstitutionData) -> Model:
    """Standalone local model; all local models share the federation's initial weights."""
    model = build_model(config.specs(), config.seed, input_shape=config.input_shape, dtype=config.np_dtype)
    train_config = replace(config.train, seed=config.institution_seed(data.name))
    model, history = train_local(model, data.train, data.validation, train_config)
    save_checkpoint(model, 0, checkpoint_path(config, data.name))
    _write_history(Path(config.out_dir) / f"history_{data.name}.csv", history)
    return model


def federation_inputs(config: ExperimentConfig, institutions: Sequence[InstitutionData]):
    """(FederationConfig, client datasets, global validation set) for a run over `institutions`."""
    federation = config.federation_config({data.name: len(data.train) for data in institutions})
    datasets = {data.name: (data.train, data.validation) for data in institutions}
    global_validation = concat_datasets([data.validation for data in institutions], "global/validation")
    return federation, datasets, global_validation


def train_federated_model(config: ExperimentConfig, institutions: Sequence[InstitutionData],
                          transport: Optional[Transport] = None) -> Tuple[Model, List[RoundRecord]]:
    federation, datasets, global_validation = federation_inputs(config, institutions)
    model, rounds = run_federation(
        federation, datasets, global_validation, config.specs(), config.federated_train_config(),
        transport=transport, checkpoint_dir=Path(config.out_dir) / "checkpoints" / FEDERATED,
        dtype=config.np_dtype, workers=config.workers,
    )
    best = min(rounds, key=lambda record: record.global_val_loss)
    save_checkpoint(model, best.t, checkpoint_path(config, FEDERATED))
    write_csv(Path(config.out_dir) / "rounds.csv",
              ["t", "participants", "global_val_loss", "global_val_accuracy", "aggregate_checksum"],
              [[r.t, " ".join(r.participants), r.global_val_loss, r.global_val_accuracy, r.aggregate_checksum]
               for r in rounds])
    return model, rounds


def load_model(config: ExperimentConfig, name: str) -> Model:
    path = checkpoint_path(config, name)
    if not path.exists():
        raise UsageError(f"no checkpoint for model {name!r} at {path}; run experiment1 first or pass --train")
    model, _ = load_checkpoint(path, config.specs(), config.input_shape)
    return model


# ---------------------------------------------------------------- experiments

def experiment1(config: ExperimentConfig, transport: Optional[Transport] = None) -> dict:
    """Local models vs the federated model on the independent test set."""
    config.validate()
    out = Path(config.out_dir)
    institutions = build_institutions(config)
    test = build_independent_test(config)
    models: Dict[str, Model] = {data.name: train_institution_model(config, data) for data in institutions}
    models[FEDERATED], rounds = train_federated_model(config, institutions, transport)

    reports = {name: evaluate(model, test) for name, model in models.items()}
    payload = {
        "independent_test": {"n_samples": len(test), "class_counts": test.class_counts().tolist()},
        "models": {name: report.to_dict() for name, report in reports.items()},
        "federation": {"rounds": [record.to_dict() for record in rounds],
                       "best_round": min(rounds, key=lambda r: r.global_val_loss).t},
    }
    if config.pooled_baseline:
        pooled, _ = train_pooled(config.specs(), institutions, replace(config.train, seed=config.seed),
                                 dtype=config.np_dtype)
        save_checkpoint(pooled, 0, checkpoint_path(config, POOLED))
        reports[POOLED] = evaluate(pooled, test)
        payload["baselines"] = {POOLED: reports[POOLED].to_dict()}

    write_json(out / "experiment1.json", payload)
    write_csv(out / "experiment1.csv", ["model", "accuracy", "macro_roc_auc", "n_samples", "model_size_bytes"],
              [[name, r.accuracy, r.macro_roc_auc, r.n_samples, r.model_size_bytes] for name, r in reports.items()])
    for name, report in reports.items():
        (out / f"confusion_{name}.csv").write_text(report.confusion_csv())
    return payload


@dataclass
class GeneralizabilityMatrix:
    rows: List[str]
    columns: List[str]
    cells: List[List[float]]

    def __post_init__(self):
        if len(self.cells) != len(self.rows) or any(len(row) != len(self.columns) for row in self.cells):
            raise UsageError("generalizability matrix is incomplete")

    def accuracy(self, model: str, test_set: str) -> float:
        return self.cells[self.rows.index(model)][self.columns.index(test_set)]

    def best_per_column(self) -> Dict[str, str]:
        """Best model per test set; ties go to the earlier row."""
        return {column: self.rows[int(np.argmax([row[j] for row in self.cells]))]
                for j, column in enumerate(self.columns)}

    def to_dict(self) -> dict:
        return {
            "rows": list(self.rows),
            "columns": list(self.columns),
            "accuracy": {model: dict(zip(self.columns, row)) for model, row in zip(self.rows, self.cells)},
            "best": self.best_per_column(),
        }


def experiment2(config: ExperimentConfig, train_inline: bool = False,
                transport: Optional[Transport] = None) -> GeneralizabilityMatrix:
    """Every model on every institution's own test split."""
    config.validate()
    institutions = build_institutions(config)
    names = [data.name for data in institutions] + [FEDERATED]
    if train_inline:
        models = {data.name: train_institution_model(config, data) for data in institutions}
        models[FEDERATED], _ = train_federated_model(config, institutions, transport)
    else:
        models = {name: load_model(config, name) for name in names}

    cells = [[evaluate(models[name], data.test).accuracy for data in institutions] for name in names]
    matrix = GeneralizabilityMatrix(names, [data.name for data in institutions], cells)
    out = Path(config.out_dir)
    write_json(out / "experiment2.json", matrix.to_dict())
    write_csv(out / "experiment2.csv", ["model"] + matrix.columns,
              [[name] + row for name, row in zip(matrix.rows, matrix.cells)])
    return matrix


def crossval_report(config: ExperimentConfig) -> dict:
    """k-fold comparison of the trunk presets on the first institution's data."""
    config.validate()
    inst = config.institutions[0]
    dataset = filter_dataset(load_raw(inst, config), config.gaussian_filter)
    variants = []
    for depth in config.crossval_depths:
        result = crossval(config.specs(depth), dataset, config.crossval_folds,
                          replace(config.train, seed=config.seed), dtype=config.np_dtype)
        variants.append({"name": f"depth{depth}", "depth": depth, **result.summary(),
                         "fold_reports": [report.to_dict() for report in result.reports]})
        logger.info("depth %d: mean accuracy %.4f", depth, result.mean_accuracy)
    payload = {"dataset": inst.name, "n_samples": len(dataset), "folds": config.crossval_folds,
               "variants": variants}
    out = Path(config.out_dir)
    write_json(out / "crossval.json", payload)
    columns = ["mean_accuracy", "std_accuracy", "mean_macro_roc_auc", "std_macro_roc_auc",
               "model_size_bytes", "model_size_mb"]
    write_csv(out / "crossval.csv", ["variant"] + columns, [[v["name"]] + [v[c] for c in columns] for v in variants])
    return payload


# ---------------------------------------------------------------- manifest

def input_hashes(config: ExperimentConfig) -> Dict[str, str]:
    sources = [inst.source for inst in config.institutions if not inst.synthetic]
    if config.independent_test_source != SYNTHETIC:
        sources.append(config.independent_test_source)
    hashes = {}
    for source in sources:
        root = Path(source)
        for path in sorted(p for p in root.rglob("*") if p.is_file()):
            hashes[f"{source}/{path.relative_to(root).as_posix()}"] = git_blob_hash(path.read_bytes())
    return hashes


def write_manifest(config: ExperimentConfig, command: str) -> Path:
    """manifest.json: everything needed to rerun `command` with `--config manifest.json`."""
    payload = {
        "tool": "fedretina",
        "version": __version__,
        "command": command,
        "config": config.to_dict(),
        "seeds": {"experiment": config.seed,
                  "institutions": {inst.name: config.institution_seed(inst.name) for inst in config.institutions}},
        "inputs": input_hashes(config),
    }
    return write_json(Path(config.out_dir) / "manifest.json", payload)
