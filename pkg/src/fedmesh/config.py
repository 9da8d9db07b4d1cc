"""YAML configuration for aggregator and party processes."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .data import FeatureSpec, Schema
from .errors import ConfigError, FormatError, IoError
from .localtrain import DpConfig
from .protocol import Hyperparameters, QuorumPolicy

DEFAULT_TIMEOUT_MS = 30_000


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FeatureCfg(_Strict):
    name: str
    kind: Literal["numeric", "categorical"] = "numeric"
    domain: Optional[list[str]] = None


class SchemaCfg(_Strict):
    label: str = "label"
    labels: list[str] = Field(min_length=2)
    features: list[FeatureCfg] = Field(min_length=1)

    def build(self) -> Schema:
        return Schema(
            tuple(FeatureSpec(f.name, f.kind, tuple(f.domain or ())) for f in self.features),
            tuple(self.labels),
            self.label,
        )


class HyperparamsCfg(_Strict):
    max_rounds: int = Field(ge=1)
    epochs: int = Field(default=1, ge=1)
    learning_rate: float = Field(default=0.1, gt=0)
    batch_size: int = Field(default=16, ge=1)


class AggConnectionCfg(_Strict):
    transport: Literal["in_process", "tcp"] = "tcp"
    listen: str


class FusionCfg(_Strict):
    kind: Literal["iter_avg", "fedavg", "coord_median", "id3"]
    hyperparams: HyperparamsCfg
    quorum: Union[str, dict[str, int]] = "all"
    run_eval: bool = False
    dp_budget: Optional[float] = Field(default=None, gt=0)

    @field_validator("quorum")
    @classmethod
    def _quorum(cls, v: Any) -> Any:
        QuorumPolicy.parse(v)
        return v


class AggModelCfg(_Strict):
    kind: Literal["linear", "id3"]
    loss: Literal["logistic", "squared"] = "logistic"
    n_features: Optional[int] = Field(default=None, ge=1)
    n_classes: Optional[int] = Field(default=None, ge=2)
    init: Optional[str] = None
    schema_: Optional[SchemaCfg] = Field(default=None, alias="schema")
    max_depth: Optional[int] = Field(default=None, ge=1)

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class ProtocolCfg(_Strict):
    reply_timeout_ms: int = Field(default=DEFAULT_TIMEOUT_MS, gt=0)
    # scripted runs only: how long TRAIN waits for the quorum to register
    quorum_wait_ms: int = Field(default=DEFAULT_TIMEOUT_MS, gt=0)
    # scripted runs only: registrations to wait for before TRAIN
    expected_parties: Optional[int] = Field(default=None, ge=1)


class AggregatorConfig(_Strict):
    connection: AggConnectionCfg
    fusion: FusionCfg
    model: AggModelCfg
    protocol: ProtocolCfg = ProtocolCfg()

    @property
    def hyperparameters(self) -> Hyperparameters:
        h = self.fusion.hyperparams
        return Hyperparameters(h.max_rounds, h.epochs, h.learning_rate, h.batch_size, self.protocol.reply_timeout_ms)

    @property
    def quorum(self) -> QuorumPolicy:
        return QuorumPolicy.parse(self.fusion.quorum)

    @property
    def schema(self) -> Schema | None:
        return self.model.schema_.build() if self.model.schema_ is not None else None

    def model_dims(self) -> tuple[int, int]:
        m = self.model
        if m.n_features is not None and m.n_classes is not None:
            return m.n_features, m.n_classes
        s = self.schema
        assert s is not None
        return s.n_features, s.n_classes


class PartyConnectionCfg(_Strict):
    transport: Literal["in_process", "tcp"] = "tcp"
    aggregator: str
    party_id: str = Field(min_length=1)


class DataCfg(_Strict):
    path: str
    schema_: SchemaCfg = Field(alias="schema")
    test_fraction: float = Field(default=0.2, ge=0, lt=1)
    seed: int = 0

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class DpCfg(_Strict):
    sigma: float = Field(default=0.0, ge=0)
    epsilon_per_round: float = Field(default=1.0, gt=0)
    clip_norm: float = Field(default=1.0, gt=0)
    seeded: bool = True

    def build(self) -> DpConfig:
        return DpConfig(self.sigma, self.epsilon_per_round, self.clip_norm, self.seeded)


class LocalTrainingCfg(_Strict):
    reply_policy: Literal["weights_only", "weights_and_nsamples", "counts"]
    dp: Optional[DpCfg] = None


class PartyModelCfg(_Strict):
    kind: Literal["linear", "id3"]
    loss: Literal["logistic", "squared"] = "logistic"
    max_depth: int = Field(default=8, ge=1)


class PartyConfig(_Strict):
    connection: PartyConnectionCfg
    data: DataCfg
    local_training: LocalTrainingCfg
    model: PartyModelCfg

    @property
    def schema(self) -> Schema:
        return self.data.schema_.build()


def _dotted(loc: tuple[Any, ...]) -> str:
    parts = []
    for p in loc:
        if p == "schema_":
            p = "schema"
        parts.append(f"[{p}]" if isinstance(p, int) else str(p))
    return ".".join(parts).replace(".[", "[")


def _from_validation(exc: ValidationError) -> ConfigError:
    lines = []
    for err in exc.errors():
        msg = err["msg"]
        if err["type"] == "missing":
            msg = "required key is missing"
        lines.append(f"{_dotted(err['loc']) or '<root>'}: {msg}")
    return ConfigError("; ".join(lines))


def _check_aggregator(cfg: AggregatorConfig) -> None:
    fk, mk = cfg.fusion.kind, cfg.model.kind
    if fk == "id3":
        if mk != "id3":
            raise ConfigError(f"id3 requires model.kind=id3 (fusion.kind={fk}, model.kind={mk})")
        if cfg.model.schema_ is None:
            raise ConfigError("model.schema: required when fusion.kind=id3")
    elif mk != "linear":
        raise ConfigError(f"fusion.kind={fk} requires model.kind=linear (got model.kind={mk})")
    if cfg.model.schema_ is not None:
        try:
            schema = cfg.schema
        except FormatError as exc:
            raise ConfigError(f"model.schema: {exc}") from exc
        if mk == "id3" and not schema.is_categorical:
            raise ConfigError("model.schema.features: id3 needs every feature to be categorical")
        for key, want in (("n_features", schema.n_features), ("n_classes", schema.n_classes)):
            got = getattr(cfg.model, key)
            if got is not None and got != want:
                raise ConfigError(f"model.{key}={got} disagrees with model.schema ({want})")
    elif mk == "linear" and (cfg.model.n_features is None or cfg.model.n_classes is None):
        raise ConfigError("model.n_features / model.n_classes: required for a linear model without model.schema")
    if cfg.model.max_depth is not None and mk != "id3":
        raise ConfigError("model.max_depth: only valid with model.kind=id3")


def _check_party(cfg: PartyConfig) -> None:
    rp, mk = cfg.local_training.reply_policy, cfg.model.kind
    if rp in ("weights_only", "weights_and_nsamples") and mk != "linear":
        raise ConfigError(f"local_training.reply_policy={rp} requires model.kind=linear (got model.kind={mk})")
    if rp == "counts" and mk != "id3":
        raise ConfigError(f"local_training.reply_policy=counts requires model.kind=id3 (got model.kind={mk})")
    try:
        schema = cfg.schema
    except FormatError as exc:
        raise ConfigError(f"data.schema: {exc}") from exc
    if mk == "id3" and not schema.is_categorical:
        raise ConfigError("data.schema.features: id3 needs every feature to be categorical")
    if cfg.local_training.dp is not None and mk != "linear":
        raise ConfigError("local_training.dp: noise applies to weight replies only (model.kind=linear)")


def parse_config(doc: Any, role: str) -> AggregatorConfig | PartyConfig:
    if role not in ("aggregator", "party"):
        raise ValueError(f"unknown role {role!r}")
    if not isinstance(doc, dict):
        raise ConfigError("<root>: configuration must be a YAML mapping")
    try:
        if role == "aggregator":
            cfg: AggregatorConfig | PartyConfig = AggregatorConfig.model_validate(doc)
        else:
            cfg = PartyConfig.model_validate(doc)
    except ValidationError as exc:
        raise _from_validation(exc) from None
    if isinstance(cfg, AggregatorConfig):
        _check_aggregator(cfg)
    else:
        _check_party(cfg)
    return cfg


def load_config(path: str | Path, role: str) -> AggregatorConfig | PartyConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"<file>: cannot read {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<file>: {path} is not valid YAML: {exc}") from exc
    return parse_config(doc, role)


AGGREGATOR_TEMPLATE = """\
# fedmesh aggregator configuration
connection:
  transport: tcp            # tcp | in_process
  listen: 127.0.0.1:5000    # host:port (tcp) or a key (in_process)
fusion:
  kind: fedavg              # iter_avg | fedavg | coord_median | id3
  hyperparams:
    max_rounds: 30          # global training rounds k
    epochs: 1               # local epochs per round
    learning_rate: 0.1
    batch_size: 16
  quorum: all               # all | min_n(2)
  run_eval: false           # ask parties to evaluate after SYNC
  dp_budget: null           # total epsilon; null disables the budget check
model:
  kind: linear              # linear | id3
  loss: logistic            # logistic | squared
  n_features: 2
  n_classes: 2
  init: null                # optional model file with initial weights
protocol:
  reply_timeout_ms: 30000
  quorum_wait_ms: 30000
  expected_parties: null    # scripted TRAIN waits for this many registrations
"""

PARTY_TEMPLATE = """\
# fedmesh party configuration
connection:
  transport: tcp            # tcp | in_process
  aggregator: 127.0.0.1:5000
  party_id: party1
data:
  path: data/party1.csv     # placeholder: point this at the local CSV
  test_fraction: 0.2
  seed: 0
  schema:
    label: label
    labels: ["0", "1"]
    features:
      - {name: x0, kind: numeric}
      - {name: x1, kind: numeric}
local_training:
  reply_policy: weights_and_nsamples   # weights_only | weights_and_nsamples | counts
  dp: null                  # e.g. {sigma: 0.1, epsilon_per_round: 0.5, clip_norm: 5.0}
model:
  kind: linear
  loss: logistic
"""


def generate_default(role: str, out_path: str | Path) -> None:
    text = {"aggregator": AGGREGATOR_TEMPLATE, "party": PARTY_TEMPLATE}.get(role)
    if text is None:
        raise ValueError(f"unknown role {role!r}")
    try:
        Path(out_path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {out_path}: {exc}") from exc
