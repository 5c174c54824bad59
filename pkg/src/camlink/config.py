from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import ConfigError

SCHEMES = ("scf", "mcf", "uci")
PROTOCOLS = ("offline1", "offline2", "offline3", "online")


def parse_dims(value: Any) -> tuple[int, int]:
    """Accept ``"WxH"``, ``[W, H]`` or ``(W, H)`` and return ``(width, height)``."""
    if isinstance(value, str):
        parts = value.lower().split("x")
        if len(parts) != 2:
            raise ConfigError(f"Expected dimensions as WxH, got '{value}'")
        try:
            width, height = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ConfigError(f"Expected dimensions as WxH, got '{value}'") from exc
    elif isinstance(value, (list, tuple)) and len(value) == 2:
        width, height = int(value[0]), int(value[1])
    else:
        raise ConfigError(f"Cannot read dimensions from {value!r}")
    if width <= 0 or height <= 0:
        raise ConfigError(f"Dimensions must be positive, got {width}x{height}")
    return width, height


def parse_range(value: Any) -> tuple[int, int]:
    if isinstance(value, str):
        parts = value.split(",")
        if len(parts) != 2:
            raise ConfigError(f"Expected a range as MIN,MAX, got '{value}'")
        low, high = int(parts[0]), int(parts[1])
    elif isinstance(value, (list, tuple)) and len(value) == 2:
        low, high = int(value[0]), int(value[1])
    else:
        raise ConfigError(f"Cannot read a range from {value!r}")
    if low > high or low < 2:
        raise ConfigError(f"Invalid range {low},{high}: need 2 <= MIN <= MAX")
    return low, high


@dataclass(frozen=True)
class DenoiserConfig:
    wavelet_levels: int = 4
    noise_variance: float = 81.0
    window_sizes: tuple[int, ...] = (3, 5, 7, 9)
    crop: tuple[int, int] = (256, 256)
    wavelet: str = "db8"

    def __post_init__(self) -> None:
        if self.wavelet_levels < 1:
            raise ConfigError(f"wavelet_levels must be >= 1, got {self.wavelet_levels}")
        if not self.noise_variance > 0:
            raise ConfigError(f"noise_variance must be > 0, got {self.noise_variance}")
        if not self.window_sizes:
            raise ConfigError("window_sizes must not be empty")
        for size in self.window_sizes:
            if size < 3 or size % 2 == 0:
                raise ConfigError(f"window sizes must be odd and >= 3, got {size}")
        if len(self.crop) != 2 or min(self.crop) <= 0:
            raise ConfigError(f"crop must be two positive ints, got {self.crop}")


@dataclass(frozen=True)
class ClusterConfig:
    alpha: float = 0.10
    beta: float = 0.05
    lam: int = 3

    def __post_init__(self) -> None:
        if not (0 < self.beta <= self.alpha < 1):
            raise ConfigError(
                f"thresholds must satisfy 0 < beta <= alpha < 1, got alpha={self.alpha} beta={self.beta}"
            )
        if self.lam < 2:
            raise ConfigError(f"lambda must be >= 2, got {self.lam}")


@dataclass(frozen=True)
class SynthConfig:
    protocol: str = "offline1"
    cameras: int = 11
    images_per_camera: int = 40
    individuals: int = 12
    album: tuple[int, int] = (30, 60)
    reposts: int = 5
    dims: tuple[int, int] = (128, 128)
    sigma_k: float = 0.05
    sigma_eta: float = 2.0

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"Unknown protocol '{self.protocol}'. Use one of: {', '.join(PROTOCOLS)}.")
        if not (0 < self.sigma_k <= 0.2):
            raise ConfigError(f"sigma_k must be in (0, 0.2], got {self.sigma_k}")
        if self.sigma_eta < 0:
            raise ConfigError(f"sigma_eta must be >= 0, got {self.sigma_eta}")
        if self.reposts < 0:
            raise ConfigError(f"reposts must be >= 0, got {self.reposts}")


@dataclass(frozen=True)
class RunConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    gamma: int = 2
    scheme: str = "uci"
    tau: float = 0.05
    workers: int = 4
    seed: int = 42
    out_dir: Path = Path("camlink_outputs")

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"Unknown scheme '{self.scheme}'. Use one of: {', '.join(SCHEMES)}.")
        if self.gamma < 2:
            raise ConfigError(f"gamma must be >= 2, got {self.gamma}")
        if not (-1 <= self.tau <= 1):
            raise ConfigError(f"tau must be within [-1, 1], got {self.tau}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")

    @property
    def filter_size(self) -> int:
        """Minimum kept group size for the active scheme."""
        return self.gamma if self.scheme == "mcf" else self.cluster.lam

    @classmethod
    def from_sources(
        cls,
        config_path: Path | None = None,
        overrides: Mapping[str, Any] | None = None,
    ) -> "RunConfig":
        values: dict[str, Any] = {}
        if config_path is not None:
            values.update(load_config_file(config_path))
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls.from_flat(values)

    @classmethod
    def from_flat(cls, values: Mapping[str, Any]) -> "RunConfig":
        unknown = sorted(set(values) - set(_FLAT_KEYS))
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")
        sections: dict[str, dict[str, Any]] = {"denoiser": {}, "cluster": {}, "synth": {}, "run": {}}
        for key, raw in values.items():
            section, attr, parse = _FLAT_KEYS[key]
            try:
                sections[section][attr] = parse(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"Invalid value for '{key}': {raw!r}") from exc
        return cls(
            denoiser=replace(DenoiserConfig(), **sections["denoiser"]),
            cluster=replace(ClusterConfig(), **sections["cluster"]),
            synth=replace(SynthConfig(), **sections["synth"]),
            **sections["run"],
        )

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["out_dir"] = str(self.out_dir)
        return payload


def load_config_file(path: Path) -> dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        payload = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid TOML: {exc}") from exc
    nested = [key for key, value in payload.items() if isinstance(value, dict)]
    if nested:
        raise ConfigError(f"Config file must be flat key/value pairs; found tables: {', '.join(nested)}")
    return payload


def _window_sizes(value: Any) -> tuple[int, ...]:
    if isinstance(value, str):
        value = [part for part in value.split(",") if part.strip()]
    return tuple(int(size) for size in value)


_FLAT_KEYS: dict[str, tuple[str, str, Callable[[Any], Any]]] = {
    "wavelet_levels": ("denoiser", "wavelet_levels", int),
    "noise_variance": ("denoiser", "noise_variance", float),
    "window_sizes": ("denoiser", "window_sizes", _window_sizes),
    "crop": ("denoiser", "crop", parse_dims),
    "wavelet": ("denoiser", "wavelet", str),
    "alpha": ("cluster", "alpha", float),
    "beta": ("cluster", "beta", float),
    "lambda": ("cluster", "lam", int),
    "protocol": ("synth", "protocol", str),
    "cameras": ("synth", "cameras", int),
    "images_per_camera": ("synth", "images_per_camera", int),
    "individuals": ("synth", "individuals", int),
    "album": ("synth", "album", parse_range),
    "reposts": ("synth", "reposts", int),
    "dims": ("synth", "dims", parse_dims),
    "sigma_k": ("synth", "sigma_k", float),
    "sigma_eta": ("synth", "sigma_eta", float),
    "gamma": ("run", "gamma", int),
    "scheme": ("run", "scheme", lambda value: str(value).lower()),
    "tau": ("run", "tau", float),
    "workers": ("run", "workers", int),
    "seed": ("run", "seed", int),
    "out": ("run", "out_dir", Path),
}
