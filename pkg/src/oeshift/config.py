"""YAML experiment configuration with strict key checking."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "config_from_dict"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LossConfig(_Strict):
    weights: Literal["none", "formula", "rescaled", "manual"] = "none"
    manual_weights: Optional[list[float]] = None
    oe_mode: Literal["none", "uniform", "labeled"] = "none"
    oe_source: Literal["full_dataset", "mined_top_fraction", "external"] = "external"
    weight_oe: bool = False

    @model_validator(mode="after")
    def _manual(self):
        if self.weights == "manual" and not self.manual_weights:
            raise ValueError("weights=manual requires manual_weights")
        return self


class LambdaConfig(_Strict):
    mode: Literal["fixed", "kl_static", "kl_epoch"] = "fixed"
    value: float = Field(0.5, ge=0)
    d_kl: Optional[float] = Field(None, ge=0)
    kl_scope: Literal["full_distribution", "per_batch"] = "full_distribution"


class ToyConfig(_Strict):
    train_count: int = Field(2000, ge=1)
    half_width: float = Field(1.5, gt=0)
    radius_sq: float = Field(4.0, gt=0)
    grid_bounds: tuple[float, float] = (-6.0, 6.0)
    grid_points: int = Field(101, ge=2)
    # outlier-exposure set: coarse mesh points with ||x||_inf > oe_inner
    oe_points_per_axis: int = Field(25, ge=2)
    oe_inner: float = Field(3.0, ge=0)
    # evaluation region for far-OOD confidence: ||x||_inf > far_ood
    far_ood: float = Field(4.0, ge=0)
    # toy_example2
    id_mean: tuple[float, float] = (0.0, 0.0)
    id_cov: float = Field(1.0, ge=0)
    ood_means: list[tuple[float, float]] = [(-3.0, 0.0), (3.0, 0.0)]
    ood_covs: list[float] = [1.0, 1.0]
    ood_weights: list[float] = [0.5, 0.5]
    label_rule: Optional[Literal["disk", "annulus"]] = None
    r_min_sq: float = Field(2.0, ge=0)
    r_max_sq: float = Field(5.0, gt=0)
    test_count: int = Field(2000, ge=1)
    oe_count: int = Field(1000, ge=1)


class SourceConfig(_Strict):
    dir: str
    csv: Optional[str] = None
    schema_attr: Literal["gender", "race", "age"] = Field("gender", alias="schema")
    name: Optional[str] = None
    labeled: bool = True


class DataConfig(_Strict):
    train: Optional[SourceConfig] = None
    test: Optional[SourceConfig] = None
    outliers: list[SourceConfig] = []
    image_size: int = Field(32, ge=1)


class MiningConfig(_Strict):
    fraction: float = Field(0.2, gt=0, le=1)
    reference: Literal["own", "train"] = "own"
    manifest: str = "outliers.tsv"


class ModelConfig(_Strict):
    # mlp
    hidden_layers: int = Field(2, ge=1)
    hidden_width: int = Field(100, ge=1)
    # cnn
    conv1_out: int = Field(32, ge=1)
    conv1_kernel: int = Field(5, ge=1)
    pool_kernel: int = Field(2, ge=1)
    conv2_out: int = Field(64, ge=1)
    conv2_kernel: int = Field(5, ge=1)
    fc_hidden: int = Field(120, ge=1)
    num_classes: int = Field(2, ge=2)


class ExperimentConfig(_Strict):
    kind: Literal["toy_example1", "toy_example2", "image"]
    seed: int = Field(0, ge=0)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(16, ge=1)
    trials: int = Field(1, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    positive_class: int = Field(1, ge=0)
    out: str = "runs/experiment"
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    lambda_: LambdaConfig = Field(LambdaConfig(), alias="lambda")
    toy: ToyConfig = ToyConfig()
    data: DataConfig = DataConfig()
    mining: MiningConfig = MiningConfig()

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.kind == "image":
            if self.data.train is None or self.data.test is None:
                raise ValueError("image experiments need data.train and data.test")
            if self.loss.oe_mode != "none" and not self.data.outliers:
                raise ValueError("OE on images needs at least one data.outliers source")
        else:
            if self.loss.oe_source != "external":
                raise ValueError("toy experiments generate their own outliers; loss.oe_source must be 'external'")
            if self.lambda_.mode != "fixed" and self.lambda_.d_kl is None:
                raise ValueError("toy experiments need an explicit lambda.d_kl for KL-based schedules")
            if self.lambda_.kl_scope == "per_batch":
                raise ValueError("per_batch KL scope needs image data")
        if self.loss.weights == "manual" and len(self.loss.manual_weights) != self.model.num_classes:
            raise ValueError("manual_weights needs one weight per class")
        if self.positive_class >= self.model.num_classes:
            raise ValueError("positive_class outside [0, num_classes)")
        return self

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if not kw:
            return self
        # re-validate so overrides obey the same bounds as file values
        return type(self).model_validate({**self.model_dump(by_alias=True), **kw})


def _error_message(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "extra_forbidden":
            parts.append(f"unknown key {path!r}")
        elif err["type"] == "missing":
            parts.append(f"missing required key {path!r}")
        else:
            parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def config_from_dict(raw: dict, base_dir: str | Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_error_message(exc)) from None
    if base_dir is not None:
        cfg = _resolve_paths(cfg, Path(base_dir))
    return cfg


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    def fix(p):
        return p if p is None or Path(p).is_absolute() else str(base / p)

    def fix_src(s: SourceConfig | None):
        return None if s is None else s.model_copy(update={"dir": fix(s.dir), "csv": fix(s.csv)})

    data = cfg.data.model_copy(
        update={
            "train": fix_src(cfg.data.train),
            "test": fix_src(cfg.data.test),
            "outliers": [fix_src(s) for s in cfg.data.outliers],
        }
    )
    return cfg.model_copy(update={"data": data, "out": fix(cfg.out)})


def parse_config(path: str | Path) -> ExperimentConfig:
    """Load a YAML config; relative paths resolve against the file's directory."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from None
    return config_from_dict(raw or {}, base_dir=path.parent)
