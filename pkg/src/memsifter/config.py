"""Typed pipeline configuration with layered resolution.

Values resolve as defaults <- config file <- environment, in that order.
The file is TOML: flat keys for pipeline fields plus one ``[backend]``
table for retry/concurrency limits. Environment overrides use
``MEMSIFTER_<FIELD>`` for pipeline fields and ``MEMSIFTER_BACKEND_<FIELD>``
for backend policy fields, e.g. ``MEMSIFTER_TOP_K=5``.

Every resolved configuration has a stable fingerprint (sha256 over the
canonical JSON of all values) that evaluation reports embed, so two
reports are comparable iff their fingerprints match.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from .backends import BackendPolicy
from .errors import ConfigError, InvalidArgument, IoError

ENV_PREFIX = "MEMSIFTER_"
# Connection settings read directly by the HTTP backends, not config fields.
_RESERVED_ENV = {"MEMSIFTER_API_KEY", "MEMSIFTER_API_BASE", "MEMSIFTER_EMBED_BASE"}


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable constant of the pipeline, with documented defaults."""

    top_k: int = 10                                # ranking length requested from the proxy
    proxy_context_budget_tokens: int = 131_072     # prefilter target window
    prefilter_enabled: bool = True
    include_full_cutoff: bool = True               # append full list length to the schedule
    alpha: float = 1.0                             # answer-reward coefficient
    beta0: float = 0.5                             # retrieval-reward coefficient before annealing
    anneal_steps: int = 100                        # steps until beta reaches zero
    tau: float = 0.2                               # curriculum difficulty anchor
    grpo_group_size: int = 6                       # rollouts per task per step
    batch_size: int = 32
    eps_std: float = 1e-8                          # degenerate-variance guard
    proxy_temperature: float = 1.0                 # rollout sampling needs exploration
    working_temperature: float = 0.0               # reward evaluation must be deterministic
    proxy_model: str = "proxy"
    working_model: str = "working"
    embed_model: str = "embed"
    backend: BackendPolicy = field(default_factory=BackendPolicy)

    def __post_init__(self) -> None:
        checks = [
            ("top_k", self.top_k >= 1),
            ("proxy_context_budget_tokens", self.proxy_context_budget_tokens >= 1),
            ("alpha", self.alpha >= 0),
            ("beta0", self.beta0 >= 0),
            ("anneal_steps", self.anneal_steps >= 1),
            ("tau", 0.0 <= self.tau <= 1.0),
            ("grpo_group_size", self.grpo_group_size >= 2),
            ("batch_size", self.batch_size >= 1),
            ("eps_std", self.eps_std >= 0),
            ("proxy_temperature", self.proxy_temperature >= 0),
            ("working_temperature", self.working_temperature >= 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"{name} = {getattr(self, name)!r} out of range", field=name)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        return out

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_FIELDS = {f.name: f.type for f in dataclasses.fields(PipelineConfig) if f.name != "backend"}
_POLICY_FIELDS = {f.name: f.type for f in dataclasses.fields(BackendPolicy)}


def _coerce(name: str, raw: str, type_name: str):
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name == "bool":
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type_name}", field=name) from None


def _check_types(values: dict, schema: dict[str, str], where: str) -> None:
    for name, value in values.items():
        if name not in schema:
            raise ConfigError(f"unknown {where} key {name!r}", field=name)
        expected = schema[name]
        ok = (
            (expected == "int" and isinstance(value, int) and not isinstance(value, bool))
            or (expected == "float" and isinstance(value, (int, float)) and not isinstance(value, bool))
            or (expected == "bool" and isinstance(value, bool))
            or (expected == "str" and isinstance(value, str))
        )
        if not ok:
            raise ConfigError(f"{name} = {value!r} has the wrong type, expected {expected}", field=name)


def load_config(path=None, env: dict[str, str] | None = None) -> PipelineConfig:
    """Resolve a configuration: defaults, then ``path``, then environment.

    Resolution is order-stable and idempotent; out-of-range or unknown
    values raise ConfigError naming the field.
    """
    env = dict(os.environ if env is None else env)
    values: dict = {}
    policy_values: dict = {}

    if path is not None:
        try:
            with open(path, "rb") as fh:
                parsed = tomllib.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read config from {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config file {path}: {exc}") from None
        policy_values.update(parsed.pop("backend", {}))
        values.update(parsed)

    for key, raw in sorted(env.items()):
        if not key.startswith(ENV_PREFIX) or key in _RESERVED_ENV:
            continue
        suffix = key[len(ENV_PREFIX):].lower()
        if suffix.startswith("backend_"):
            name = suffix[len("backend_"):]
            if name not in _POLICY_FIELDS:
                raise ConfigError(f"unknown backend policy field in {key}", field=name)
            policy_values[name] = _coerce(name, raw, _POLICY_FIELDS[name])
        else:
            if suffix not in _FIELDS:
                raise ConfigError(f"unknown config field in {key}", field=suffix)
            values[suffix] = _coerce(suffix, raw, _FIELDS[suffix])

    _check_types(values, _FIELDS, "config")
    _check_types(policy_values, _POLICY_FIELDS, "backend policy")
    # TOML integers are valid values for float-typed fields
    for name, value in list(values.items()):
        if _FIELDS[name] == "float":
            values[name] = float(value)
    try:
        policy = BackendPolicy(**policy_values)
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from None
    return PipelineConfig(backend=policy, **values)
