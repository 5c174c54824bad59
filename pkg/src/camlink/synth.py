"""Deterministic synthetic cameras and benchmark datasets with ground truth.

A synthetic camera is a zero-mean multiplicative noise field ``K``. Capturing a
scene ``I0`` gives ``clip(I0 * (1 + K) + eta, 0, 255)`` with i.i.d. Gaussian
``eta``. Every random stream is derived from the master seed with
:class:`numpy.random.SeedSequence`, so a manifest alone reproduces every pixel,
whatever the worker count.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import zoom

from .artifacts import read_json, write_json_artifact
from .config import SynthConfig
from .errors import GenerationError, ManifestError
from .identity import Account, AccountImage, PairLabel, label_pairs
from .imaging import PixelGrid, save_grid_png
from .schema_validator import validate_artifact

logger = logging.getLogger(__name__)

TRIPLE_SAMPLE_SIZE = 55
REPOSTER_CAMERA_ID = "cam-reposter"
SCENE_CELL = 16

_TAG_CAMERA = 1
_TAG_SCENE = 2
_TAG_SPLIT = 3
_TAG_ALBUM = 4
_TAG_COMBINATIONS = 5
_TAG_ORDER = 6


def derive_seed(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence([master, *keys]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class SyntheticCamera:
    camera_id: str
    prnu_field: NDArray[np.float64]
    sigma_k: float
    rng_seed: int


def make_camera(seed: int, dims: tuple[int, int], sigma_k: float, camera_id: str | None = None) -> SyntheticCamera:
    """Gaussian PRNU field of std ``sigma_k``, shifted to zero mean; ``dims`` is ``(width, height)``."""
    if not (0 < sigma_k <= 0.2):
        raise GenerationError(f"sigma_k must be in (0, 0.2], got {sigma_k}")
    width, height = dims
    rng = np.random.default_rng(seed)
    prnu = rng.normal(0.0, sigma_k, size=(height, width))
    prnu -= prnu.mean()
    return SyntheticCamera(camera_id=camera_id or f"cam-{seed}", prnu_field=prnu, sigma_k=sigma_k, rng_seed=seed)


def render_scene(scene_seed: int, dims: tuple[int, int]) -> PixelGrid:
    """Smooth procedural scene in [32, 224]: bicubic value noise plus a random linear gradient."""
    width, height = dims
    rng = np.random.default_rng(scene_seed)
    lattice = rng.uniform(0.0, 1.0, size=(height // SCENE_CELL + 2, width // SCENE_CELL + 2))
    texture = _fit(zoom(lattice, (height / lattice.shape[0], width / lattice.shape[1]), order=3), height, width)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    rows, cols = np.mgrid[0:height, 0:width]
    gradient = np.cos(angle) * cols / max(width - 1, 1) + np.sin(angle) * rows / max(height - 1, 1)
    scene = 0.6 * _unit_range(texture) + 0.4 * _unit_range(gradient)
    return 32.0 + 192.0 * _unit_range(scene)


def capture(camera: SyntheticCamera, scene_seed: int, sigma_eta: float) -> PixelGrid:
    if sigma_eta < 0:
        raise GenerationError(f"sigma_eta must be >= 0, got {sigma_eta}")
    height, width = camera.prnu_field.shape
    scene = render_scene(scene_seed, (width, height))
    image = scene * (1.0 + camera.prnu_field)
    if sigma_eta > 0:
        noise_rng = np.random.default_rng(np.random.SeedSequence([camera.rng_seed, scene_seed]))
        image = image + noise_rng.normal(0.0, sigma_eta, size=image.shape)
    return np.clip(image, 0.0, 255.0)


def _fit(array: NDArray[np.float64], height: int, width: int) -> NDArray[np.float64]:
    pad_rows = max(0, height - array.shape[0])
    pad_cols = max(0, width - array.shape[1])
    if pad_rows or pad_cols:
        array = np.pad(array, ((0, pad_rows), (0, pad_cols)), mode="edge")
    return array[:height, :width]


def _unit_range(array: NDArray[np.float64]) -> NDArray[np.float64]:
    low, high = float(array.min()), float(array.max())
    if high == low:
        return np.zeros_like(array, dtype=np.float64)
    return (array - low) / (high - low)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    camera_id: str
    scene_seed: int
    is_repost: bool
    file: str

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class AccountRecord:
    account_id: str
    individual_id: str
    images: list[ImageRecord]

    def to_dict(self) -> dict[str, Any]:
        return {
            "account_id": self.account_id,
            "individual_id": self.individual_id,
            "images": [image.to_dict() for image in self.images],
        }


@dataclass
class DatasetManifest:
    protocol: str
    seed: int
    config: dict[str, Any]
    cameras: dict[str, int]
    accounts: list[AccountRecord]
    individuals: dict[str, list[str]] = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int]:
        width, height = self.config["dims"]
        return int(width), int(height)

    @property
    def image_count(self) -> int:
        return sum(len(account.images) for account in self.accounts)

    @property
    def repost_count(self) -> int:
        return sum(image.is_repost for account in self.accounts for image in account.images)

    def to_accounts(
        self,
        base_dir: Path | None = None,
        renderer: Callable[[ImageRecord], PixelGrid] | None = None,
    ) -> list[Account]:
        """Accounts with ground truth; images point at files under ``base_dir`` or at ``renderer``."""
        accounts = []
        for record in self.accounts:
            images = []
            for image in record.images:
                render = None if renderer is None else (lambda image=image: renderer(image))
                images.append(
                    AccountImage(
                        image_id=image.image_id,
                        path=None if base_dir is None else base_dir / image.file,
                        camera_id=image.camera_id,
                        is_repost=image.is_repost,
                        render=render,
                    )
                )
            accounts.append(Account(account_id=record.account_id, images=images, individual_id=record.individual_id))
        return accounts

    def pair_labels(self) -> dict[tuple[str, str], PairLabel]:
        return label_pairs(self.to_accounts())

    def pair_counts(self) -> dict[str, int]:
        counts = {label.value: 0 for label in PairLabel}
        for label in self.pair_labels().values():
            counts[label.value] += 1
        return counts

    def synth_config(self) -> SynthConfig:
        values = {key: tuple(value) if isinstance(value, list) else value for key, value in self.config.items()}
        return SynthConfig(**values)

    def to_dict(self) -> dict[str, Any]:
        counts = self.pair_counts()
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "config": {key: list(value) if isinstance(value, tuple) else value for key, value in self.config.items()},
            "cameras": dict(self.cameras),
            "individuals": {key: list(value) for key, value in self.individuals.items()},
            "summary": {
                "users": len(self.accounts),
                "images": self.image_count,
                "reposts": self.repost_count,
                "positive_pairs": counts["positive"],
                "negative_pairs": counts["negative"],
                "excluded_pairs": counts["excluded"],
            },
            "accounts": [account.to_dict() for account in self.accounts],
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "DatasetManifest":
        return cls(
            protocol=payload["protocol"],
            seed=int(payload["seed"]),
            config=dict(payload["config"]),
            cameras={key: int(value) for key, value in payload["cameras"].items()},
            individuals={key: list(value) for key, value in payload.get("individuals", {}).items()},
            accounts=[
                AccountRecord(
                    account_id=account["account_id"],
                    individual_id=account["individual_id"],
                    images=[ImageRecord(**image) for image in account["images"]],
                )
                for account in payload["accounts"]
            ],
        )


class _DatasetBuilder:
    """Accumulates accounts for one protocol; images get globally unique scene seeds."""

    def __init__(self, seed: int):
        self.seed = seed
        self.cameras: dict[str, int] = {}
        self.accounts: list[AccountRecord] = []
        self.individuals: dict[str, list[str]] = {}
        self._scene_counter = 0

    def camera(self, camera_id: str, index: int) -> str:
        self.cameras.setdefault(camera_id, derive_seed(self.seed, _TAG_CAMERA, index))
        return camera_id

    def _scene(self) -> int:
        self._scene_counter += 1
        return derive_seed(self.seed, _TAG_SCENE, self._scene_counter)

    def add_individual(
        self,
        index: int,
        camera_counts: Sequence[tuple[str, int]],
        reposter: str,
        repost_per_user: int,
    ) -> None:
        """Capture ``count`` fresh images per camera and split the pooled album over two accounts.

        Each account first receives one random capture of every camera, so both
        accounts hold the individual's full camera set; the rest of the pool is
        shuffled as a whole and cut so the first account gets ``ceil(n / 2)``.
        """
        individual_id = f"ind-{index:03d}"
        account_ids = (f"u-{2 * index:03d}", f"u-{2 * index + 1:03d}")
        halves: list[list[tuple[str, int, bool]]] = [[], []]
        remainder: list[tuple[str, int, bool]] = []
        for camera_number, (camera_id, count) in enumerate(camera_counts):
            captures = [(camera_id, self._scene(), False) for _ in range(count)]
            order = np.random.default_rng(derive_seed(self.seed, _TAG_SPLIT, index, camera_number)).permutation(count)
            halves[0].append(captures[order[0]])
            halves[1].append(captures[order[1]])
            remainder.extend(captures[i] for i in order[2:])
        total = sum(count for _, count in camera_counts)
        cut = (total + 1) // 2 - len(halves[0])
        order = np.random.default_rng(derive_seed(self.seed, _TAG_SPLIT, index)).permutation(len(remainder))
        halves[0].extend(remainder[i] for i in order[:cut])
        halves[1].extend(remainder[i] for i in order[cut:])
        for side, account_id in enumerate(account_ids):
            images = halves[side] + [(reposter, self._scene(), True) for _ in range(repost_per_user)]
            order = np.random.default_rng(derive_seed(self.seed, _TAG_ORDER, index, side)).permutation(len(images))
            records = []
            for number, position in enumerate(order):
                camera_id, scene_seed, is_repost = images[position]
                image_id = f"{account_id}-{number:03d}"
                records.append(
                    ImageRecord(
                        image_id=image_id,
                        camera_id=camera_id,
                        scene_seed=scene_seed,
                        is_repost=is_repost,
                        file=f"accounts/{account_id}/{image_id}.png",
                    )
                )
            self.accounts.append(AccountRecord(account_id=account_id, individual_id=individual_id, images=records))
        self.individuals[individual_id] = [camera_id for camera_id, _ in camera_counts]

    def manifest(self, protocol: str, config: SynthConfig) -> DatasetManifest:
        return DatasetManifest(
            protocol=protocol,
            seed=self.seed,
            config=asdict(config),
            cameras=dict(self.cameras),
            accounts=self.accounts,
            individuals=self.individuals,
        )


def build_offline_dataset(
    n_cameras: int,
    cameras_per_individual: int,
    images_per_camera: int,
    repost_per_user: int,
    seed: int,
    *,
    dims: tuple[int, int] = (128, 128),
    sigma_k: float = 0.05,
    sigma_eta: float = 2.0,
) -> DatasetManifest:
    """One individual per ``k``-camera combination, split into two accounts.

    ``k = 3`` draws :data:`TRIPLE_SAMPLE_SIZE` combinations with the master seed
    (all of them when there are fewer).
    """
    k = cameras_per_individual
    if k not in (1, 2, 3):
        raise GenerationError(f"cameras_per_individual must be 1, 2 or 3, got {k}")
    if n_cameras < k:
        raise GenerationError(f"{n_cameras} camera(s) cannot form distinct {k}-camera individuals")
    if images_per_camera < 2:
        raise GenerationError(f"images_per_camera must be >= 2 to fill both accounts, got {images_per_camera}")
    if repost_per_user < 0:
        raise GenerationError(f"repost_per_user must be >= 0, got {repost_per_user}")
    combos = list(combinations(range(n_cameras), k))
    if k == 3 and len(combos) > TRIPLE_SAMPLE_SIZE:
        rng = np.random.default_rng(derive_seed(seed, _TAG_COMBINATIONS))
        picked = sorted(rng.choice(len(combos), size=TRIPLE_SAMPLE_SIZE, replace=False))
        combos = [combos[i] for i in picked]

    builder = _DatasetBuilder(seed)
    camera_ids = [builder.camera(f"cam-{i:02d}", i) for i in range(n_cameras)]
    reposter = builder.camera(REPOSTER_CAMERA_ID, n_cameras)
    for index, combo in enumerate(combos):
        builder.add_individual(index, [(camera_ids[i], images_per_camera) for i in combo], reposter, repost_per_user)
    config = SynthConfig(
        protocol=f"offline{k}",
        cameras=n_cameras,
        images_per_camera=images_per_camera,
        reposts=repost_per_user,
        dims=tuple(dims),
        sigma_k=sigma_k,
        sigma_eta=sigma_eta,
    )
    manifest = builder.manifest(config.protocol, config)
    logger.info("Built %s manifest: %d accounts, %d images", config.protocol, len(manifest.accounts), manifest.image_count)
    return manifest


def build_online_dataset(
    n_individuals: int,
    album: tuple[int, int],
    repost_per_user: int,
    seed: int,
    *,
    dims: tuple[int, int] = (128, 128),
    sigma_k: float = 0.05,
    sigma_eta: float = 2.0,
) -> DatasetManifest:
    """One camera per individual; album sizes are uniform over ``album`` (inclusive)."""
    if n_individuals < 2:
        raise GenerationError(f"n_individuals must be >= 2, got {n_individuals}")
    low, high = album
    if not (2 <= low <= high):
        raise GenerationError(f"album range must satisfy 2 <= MIN <= MAX, got {low},{high}")
    if repost_per_user < 0:
        raise GenerationError(f"repost_per_user must be >= 0, got {repost_per_user}")
    sizes = np.random.default_rng(derive_seed(seed, _TAG_ALBUM)).integers(low, high + 1, size=n_individuals)

    builder = _DatasetBuilder(seed)
    reposter = builder.camera(REPOSTER_CAMERA_ID, n_individuals)
    for index in range(n_individuals):
        camera_id = builder.camera(f"cam-{index:03d}", index)
        builder.add_individual(index, [(camera_id, int(sizes[index]))], reposter, repost_per_user)
    config = SynthConfig(
        protocol="online",
        cameras=n_individuals,
        individuals=n_individuals,
        album=(low, high),
        reposts=repost_per_user,
        dims=tuple(dims),
        sigma_k=sigma_k,
        sigma_eta=sigma_eta,
    )
    manifest = builder.manifest("online", config)
    logger.info("Built online manifest: %d accounts, %d images", len(manifest.accounts), manifest.image_count)
    return manifest


def build_protocol(config: SynthConfig, seed: int) -> DatasetManifest:
    """Manifest for one of the named protocols."""
    common = {"dims": config.dims, "sigma_k": config.sigma_k, "sigma_eta": config.sigma_eta}
    if config.protocol == "online":
        return build_online_dataset(config.individuals, config.album, config.reposts, seed, **common)
    k = int(config.protocol.removeprefix("offline"))
    return build_offline_dataset(config.cameras, k, config.images_per_camera, config.reposts, seed, **common)


class DatasetRenderer:
    """Renders manifest images on demand; cameras are built once up front."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        sigma_k = float(manifest.config["sigma_k"])
        self.sigma_eta = float(manifest.config["sigma_eta"])
        self.cameras = {
            camera_id: make_camera(camera_seed, manifest.dims, sigma_k, camera_id)
            for camera_id, camera_seed in manifest.cameras.items()
        }

    def __call__(self, image: ImageRecord) -> PixelGrid:
        return capture(self.cameras[image.camera_id], image.scene_seed, self.sigma_eta)


def render_accounts(manifest: DatasetManifest) -> list[Account]:
    """In-memory accounts whose images are rendered when loaded."""
    return manifest.to_accounts(renderer=DatasetRenderer(manifest))


def materialize(
    manifest: DatasetManifest,
    out_dir: Path,
    *,
    workers: int = 1,
    on_image_done: Optional[Callable[[str], None]] = None,
) -> Path:
    """Write every image as 8-bit grayscale PNG plus ``manifest.json``; returns the manifest path."""
    renderer = DatasetRenderer(manifest)
    records = [image for account in manifest.accounts for image in account.images]

    def write(image: ImageRecord) -> str:
        save_grid_png(renderer(image), out_dir / image.file)
        return image.image_id

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        for image_id in executor.map(write, records):
            if on_image_done is not None:
                on_image_done(image_id)
    payload = manifest.to_dict()
    validate_artifact(payload, "manifest", "generated manifest")
    return write_json_artifact(out_dir / "manifest.json", payload)


def load_manifest(path: Path) -> DatasetManifest:
    """Read ``manifest.json`` (or a dataset directory holding one) and validate it."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ManifestError(f"Manifest not found: {path}")
    try:
        payload = read_json(path)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"Manifest {path} is not valid JSON: {exc}") from exc
    validate_artifact(payload, "manifest", str(path))
    return DatasetManifest.from_dict(payload)
