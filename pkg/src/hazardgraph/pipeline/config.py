"""Run configuration: file loading, flag overrides and backend resolution."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from ..analysis import Binning, DEFAULT_BINS
from ..cluster import HdbscanParams
from ..errors import ConfigError
from ..gateway import BackendConfig
from ..scoring import Weights

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

CAPABILITIES = ("chat", "embed", "image", "vqa")
SHUFFLE_MODES = ("in_domain", "out_of_domain")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run depends on.

    Backend names are ``mock``, ``mock:<tag>`` (offline) or the name of a
    remote backend whose URL and key come from ``HG_<NAME>_URL`` and
    ``HG_<NAME>_KEY``. Keys never live in config files.
    """

    backends: Mapping[str, str] = field(default_factory=lambda: {c: "mock" for c in CAPABILITIES})
    generators: tuple[str, ...] = ()
    mock_profile: str = "grounded"
    seed: int = 0
    cache_dir: str = ".hazardgraph-cache"
    workdir: str = "hg-work"
    min_cluster_size: int = 30
    min_samples: int = 10
    cluster_metric: str = "euclidean"
    allow_single_cluster: bool = False
    cluster_id: Optional[int] = None
    max_scenes: Optional[int] = None
    llm_prompts: bool = True
    lambda_node: float = 2.0
    gamma_edge: float = 1.5
    bins: int = DEFAULT_BINS
    shuffles: tuple[str, ...] = ("in_domain",)
    image_pool: Optional[str] = None
    max_in_flight: int = 4
    max_retries: int = 3
    timeout: float = 30.0
    image_size: tuple[int, int] = (128, 128)

    def __post_init__(self):
        backends = {c: "mock" for c in CAPABILITIES}
        for cap, name in dict(self.backends).items():
            if cap not in CAPABILITIES:
                raise ConfigError(f"unknown capability {cap!r}; expected one of {CAPABILITIES}")
            if not isinstance(name, str) or not name.strip():
                raise ConfigError(f"backend name for {cap!r} must be a non-empty string")
            backends[cap] = name.strip()
        object.__setattr__(self, "backends", backends)
        gens = tuple(self.generators) or (backends["image"],)
        if len(set(gens)) != len(gens):
            raise ConfigError("generator names must be unique")
        object.__setattr__(self, "generators", gens)
        object.__setattr__(self, "shuffles", tuple(self.shuffles))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        for mode in self.shuffles:
            if mode not in SHUFFLE_MODES:
                raise ConfigError(f"unknown shuffle mode {mode!r}")
        if self.mock_profile not in ("hash", "grounded"):
            raise ConfigError(f"unknown mock profile {self.mock_profile!r}")
        if self.bins < 2:
            raise ConfigError("bins must be >= 2")
        if self.max_scenes is not None and self.max_scenes < 1:
            raise ConfigError("max_scenes must be positive")
        try:  # component invariants
            self.hdbscan_params
            self.weights
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def hdbscan_params(self) -> HdbscanParams:
        return HdbscanParams(self.min_cluster_size, self.min_samples, self.cluster_metric)

    @property
    def weights(self) -> Weights:
        return Weights(self.lambda_node, self.gamma_edge)

    @property
    def binning(self) -> Binning:
        return Binning(bins=self.bins)

    def backend(self, name: str, environ: Optional[Mapping[str, str]] = None) -> BackendConfig:
        """Resolve a backend name into a connection config."""
        common = dict(seed=self.seed, max_in_flight=self.max_in_flight, max_retries=self.max_retries,
                      timeout=self.timeout, image_size=self.image_size)
        if name == "mock" or name.startswith("mock:"):
            tag = name.split(":", 1)[1] if ":" in name else "mock"
            return BackendConfig(backend_kind="mock", name=tag or "mock",
                                 mock_profile=self.mock_profile, **common)
        return BackendConfig.from_env(name, environ, **common)

    def capability(self, cap: str, environ=None) -> BackendConfig:
        return self.backend(self.backends[cap], environ)

    def validate_backends(self, environ=None) -> None:
        """Raise AuthFailure/ConfigError for any unusable backend, before work starts."""
        for name in sorted(set(self.backends.values()) | set(self.generators)):
            self.backend(name, environ).validate()

    def snapshot(self) -> dict:
        """Effective settings that determine results (local paths excluded)."""
        d = asdict(self)
        for local in ("cache_dir", "workdir"):
            d.pop(local)
        d["backends"] = dict(sorted(d["backends"].items()))
        d["generators"] = list(d["generators"])
        d["shuffles"] = list(d["shuffles"])
        d["image_size"] = list(d["image_size"])
        if self.image_pool:
            d["image_pool"] = Path(self.image_pool).name
        return d


_FIELDS = {f.name for f in fields(PipelineConfig)}


def _coerce(data: Mapping[str, Any]) -> dict:
    out = {}
    for key, value in data.items():
        key = key.replace("-", "_")
        if key in ("hdbscan", "weights", "analysis", "paths"):  # nested sections are flattened
            out.update(_coerce(value))
            continue
        if key in ("api_key", "key"):
            raise ConfigError("API keys belong in environment variables, not config files")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return _coerce(data)


def parse_backend_flags(flags) -> dict[str, str]:
    out = {}
    for flag in flags or ():
        cap, sep, name = flag.partition("=")
        if not sep or not cap or not name:
            raise ConfigError(f"--backend expects <capability>=<name>, got {flag!r}")
        out[cap.strip()] = name.strip()
    return out


def build_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> PipelineConfig:
    """File values first, then non-None overrides (flags win)."""
    data = load_config_file(path) if path else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    backend_over = overrides.pop("backends", None)
    if backend_over:
        merged = dict(data.get("backends", {}))
        merged.update(backend_over)
        data["backends"] = merged
    data.update(_coerce(overrides))
    for key in ("generators", "shuffles", "image_size"):
        if key in data:
            data[key] = tuple(data[key])
    return PipelineConfig(**data)


def with_updates(cfg: PipelineConfig, **changes) -> PipelineConfig:
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
