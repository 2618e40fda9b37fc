"""Alternating optimization, checkpoints, and trained-model evaluation.

Each iteration freezes the weights to decode and search the optimal
landmarks (step one), then freezes those landmarks and applies one
momentum-SGD update against the probabilistic objective (step two).
Ground-truth heatmaps are encoded once per sample and cached.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .datasets import Sample
from .errors import ConfigurationError, ContractError
from .heatmaps import (
    BoundaryScheme,
    Heatmap,
    LandmarkSet,
    decode_argmax,
    encode_ground_truth,
    fuse_boundary_adaptive,
)
from .losses import (
    SearchConfig,
    normalize_to_distribution,
    search_decode,
    search_optimal,
    soft_argmax,
    total_loss,
)
from .metrics import EvalReport, nme
from .network import (
    BASE_LR,
    SCHEDULE_ITERATIONS,
    NetworkConfig,
    NetworkState,
    build,
    forward,
    staircase_lr,
)
from .synthetic import synthesize_record, synthetic_scheme

CHECKPOINT_MAGIC = b"FLDK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainSettings:
    iterations: int = 500
    batch_size: int = 4
    base_lr: float = BASE_LR
    decay: float = 0.99            # running square-average horizon
    epsilon: float = 1e-8
    schedule_iterations: int = SCHEDULE_ITERATIONS
    sigma1: float = 3.0
    sigma2: float = 3.0
    xi: float = 0.01
    search: SearchConfig = field(default_factory=SearchConfig)


@dataclass
class TrainingSample:
    image: np.ndarray
    landmarks_image: LandmarkSet            # input-image pixels
    landmarks_map: LandmarkSet              # heatmap pixels
    bbox: tuple[float, float, float, float]
    gt_landmark_maps: list[Heatmap]
    gt_boundary_maps: list[Heatmap]


@dataclass
class TrainingSet:
    samples: list[TrainingSample]
    scheme: BoundaryScheme

    def __len__(self) -> int:
        return len(self.samples)


def prepare_sample(sample: Sample, scheme: BoundaryScheme, config: NetworkConfig,
                   settings: TrainSettings) -> TrainingSample:
    scale = config.heatmap_size / config.input_size
    map_landmarks = LandmarkSet(points=sample.landmarks.points * scale,
                                scheme=sample.landmarks.scheme)
    lm, bm = encode_ground_truth(
        map_landmarks, scheme, (config.heatmap_size, config.heatmap_size),
        sigma1=settings.sigma1, sigma2=settings.sigma2, xi=settings.xi)
    return TrainingSample(
        image=np.asarray(sample.image, dtype=np.float64),
        landmarks_image=sample.landmarks,
        landmarks_map=map_landmarks,
        bbox=sample.bbox,
        gt_landmark_maps=lm,
        gt_boundary_maps=bm,
    )


def make_synthetic_dataset(count: int, config: NetworkConfig, settings: TrainSettings,
                           seed: int = 0) -> TrainingSet:
    scheme = synthetic_scheme(config.landmark_count)
    samples = [
        prepare_sample(
            synthesize_record(seed + i, config.landmark_count, config.input_size),
            scheme, config, settings)
        for i in range(count)
    ]
    return TrainingSet(samples=samples, scheme=scheme)


def _as_heatmaps(tensors, kind):
    return [Heatmap(values=t, kind=kind) for t in tensors]


def search_step(state: NetworkState, sample: TrainingSample, scheme: BoundaryScheme,
                config: SearchConfig) -> LandmarkSet:
    """Step one: with weights fixed, decode and search the optimal
    landmark for every landmark channel.

    The window centers on the same decoded landmark the consistency term
    will use in step two (the soft argmax, rounded to its pixel),
    keeping the two steps anchored to one decode.
    """
    with no_grad():
        result = forward(state, sample.image)
    landmark_maps = _as_heatmaps(result.landmarks, "landmark")
    boundary_maps = _as_heatmaps(result.boundaries, "boundary")
    edge = state.config.heatmap_size - 1
    points = []
    for idx, lm in enumerate(landmark_maps):
        t = scheme.landmark_to_boundary[idx]
        with no_grad():
            gx, gy = soft_argmax(lm, window=config.window)
        decoded = (int(np.clip(round(gx.item()), 0, edge)),
                   int(np.clip(round(gy.item()), 0, edge)))
        fused = fuse_boundary_adaptive(lm, boundary_maps[t], scheme, idx, t)
        points.append(search_optimal(
            fused, decoded,
            normalize_to_distribution(lm),
            normalize_to_distribution(boundary_maps[t]),
            config))
    return LandmarkSet(points=np.asarray(points, dtype=np.float64),
                       scheme=sample.landmarks_map.scheme)


def sample_loss(state: NetworkState, sample: TrainingSample, scheme: BoundaryScheme,
                searched: LandmarkSet, config: SearchConfig) -> Tensor:
    """Step-two objective for one sample, summed over stack heads."""
    result = forward(state, sample.image)
    loss = Tensor(0.0)
    for landmarks, boundaries in result.stages:
        pred_lm = _as_heatmaps(landmarks, "landmark")
        pred_bm = _as_heatmaps(boundaries, "boundary")
        decoded = [soft_argmax(hm, window=config.window) for hm in pred_lm]
        loss = loss + total_loss(pred_lm, pred_bm, sample.gt_landmark_maps,
                                 sample.gt_boundary_maps, decoded, searched, config)
    return loss


def train_step(state: NetworkState, batch: list[TrainingSample], searched_sets: list[LandmarkSet],
               scheme: BoundaryScheme, settings: TrainSettings) -> float:
    """One momentum-SGD update against the batch-mean objective; returns
    the pre-update loss.  Aborts with the first non-finite tensor name."""
    if len(batch) != len(searched_sets):
        raise ContractError(f"batch/landmark list mismatch: {len(batch)} vs {len(searched_sets)}")
    loss = Tensor(0.0)
    for sample, searched in zip(batch, searched_sets):
        loss = loss + sample_loss(state, sample, scheme, searched, settings.search)
    loss = loss * (1.0 / len(batch))
    if not np.isfinite(loss.data):
        raise ContractError(f"non-finite loss at iteration {state.iteration}")
    for p in state.params.values():
        p.zero_grad()
    loss.backward()
    lr = staircase_lr(state.iteration, settings.schedule_iterations, settings.base_lr)
    # rmsprop: the head's distribution gradients and the stem's conv
    # gradients differ by orders of magnitude, so one global step size
    # cannot serve both; the hourglass lineage trains exactly this way
    for name, p in state.params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(grad)):
            raise ContractError(f"non-finite gradient in '{name}' at iteration {state.iteration}")
        sq = state.velocity.get(name)
        sq = settings.decay * sq + (1.0 - settings.decay) * grad * grad \
            if sq is not None else (1.0 - settings.decay) * grad * grad
        state.velocity[name] = sq
        p.data = p.data - lr * grad / (np.sqrt(sq) + settings.epsilon)
    state.check_finite()
    state.iteration += 1
    return float(loss.data)


def alternate_optimize(state: NetworkState, dataset: TrainingSet, iterations: int,
                       settings: TrainSettings | None = None,
                       log: list | None = None) -> NetworkState:
    """The two-step loop: search with weights fixed, update with searched
    landmarks fixed, under the staircase learning rate."""
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    settings = settings or TrainSettings()
    for _ in range(iterations):
        indices = state.rng.integers(0, len(dataset), size=settings.batch_size)
        batch = [dataset.samples[int(i)] for i in indices]
        searched_sets = [search_step(state, sample, dataset.scheme, settings.search)
                  for sample in batch]
        loss = train_step(state, batch, searched_sets, dataset.scheme, settings)
        if log is not None:
            log.append((state.iteration - 1, loss,
                        staircase_lr(state.iteration - 1, settings.schedule_iterations,
                                     settings.base_lr)))
    return state


def predict_landmarks(state: NetworkState, image: np.ndarray, scheme: BoundaryScheme,
                      decode: str = "argmax",
                      config: SearchConfig | None = None) -> LandmarkSet:
    """Decode landmark coordinates in input-image pixels.

    ``argmax`` reads the landmark heatmaps directly; ``search`` decodes
    on the fused boundary-adaptive maps refined by the windowed search.
    """
    if decode not in ("argmax", "search"):
        raise ContractError(f"unknown decode mode '{decode}'")
    config = config or SearchConfig()
    with no_grad():
        result = forward(state, image)
    landmark_maps = _as_heatmaps(result.landmarks, "landmark")
    boundary_maps = _as_heatmaps(result.boundaries, "boundary")
    scale = state.config.input_size / state.config.heatmap_size
    points = []
    for idx, lm in enumerate(landmark_maps):
        if decode == "argmax":
            points.append(decode_argmax(lm))
        else:
            t = scheme.landmark_to_boundary[idx]
            points.append(search_decode(lm, boundary_maps[t], scheme, idx, t, config))
    return LandmarkSet(points=np.asarray(points, dtype=np.float64) * scale,
                       scheme=f"syn{state.config.landmark_count}"
                       if scheme.name.startswith("syn") else scheme.name)


def evaluate(state: NetworkState, dataset: TrainingSet, decode: str = "argmax",
             config: SearchConfig | None = None) -> EvalReport:
    """Face-size-normalized NME report over a dataset."""
    per_image = []
    for sample in dataset.samples:
        pred = predict_landmarks(state, sample.image, dataset.scheme, decode, config)
        pred = LandmarkSet(points=pred.points, scheme=sample.landmarks_image.scheme)
        per_image.append(nme(pred, sample.landmarks_image, "face_size", bbox=sample.bbox))
    return EvalReport.build(per_image, normalization="face_size")


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(state: NetworkState, path) -> None:
    """Versioned binary container: magic, version, json header with shape
    and offset tables plus the config fingerprint, then raw float64 data."""
    names = sorted(state.params)
    tensors = []
    offset = 0
    for name in names:
        shape = list(state.params[name].data.shape)
        count = int(np.prod(shape)) if shape else 1
        tensors.append({"name": name, "shape": shape, "offset": offset})
        offset += count
    velocities = []
    for name in sorted(state.velocity):
        shape = list(state.velocity[name].shape)
        count = int(np.prod(shape)) if shape else 1
        velocities.append({"name": name, "shape": shape, "offset": offset})
        offset += count
    header = {
        "fingerprint": state.config.fingerprint(),
        "config": state.config.__dict__,
        "iteration": state.iteration,
        "rng_state": _encode_rng(state.rng),
        "tensors": tensors,
        "velocities": velocities,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(state.params[name].data).tobytes())
        for name in sorted(state.velocity):
            fh.write(np.ascontiguousarray(state.velocity[name]).tobytes())


def load_checkpoint(path, config: NetworkConfig) -> NetworkState:
    """Rebuild a NetworkState; refuses on config fingerprint mismatch."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len))
        if header["fingerprint"] != config.fingerprint():
            raise ConfigurationError(
                "checkpoint fingerprint does not match the requested configuration")
        payload = np.frombuffer(fh.read(), dtype=np.float64)
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = payload[entry["offset"]: entry["offset"] + count].reshape(shape)
        params[entry["name"]] = Tensor(data.copy(), requires_grad=True)
    velocity = {}
    for entry in header["velocities"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        velocity[entry["name"]] = payload[entry["offset"]: entry["offset"] + count].reshape(shape).copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = _decode_rng(header["rng_state"])
    return NetworkState(config=config, params=params, velocity=velocity,
                        iteration=int(header["iteration"]), rng=rng)


def _encode_rng(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {"bit_generator": state["bit_generator"],
            "state": str(state["state"]["state"]), "inc": str(state["state"]["inc"]),
            "has_uint32": state["has_uint32"], "uinteger": state["uinteger"]}


def _decode_rng(encoded: dict) -> dict:
    return {"bit_generator": encoded["bit_generator"],
            "state": {"state": int(encoded["state"]), "inc": int(encoded["inc"])},
            "has_uint32": encoded["has_uint32"], "uinteger": encoded["uinteger"]}
