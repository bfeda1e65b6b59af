"""Synthetic 6-axis wrist IMU gestures across contexts and users.

Each instance is a sum of Gaussian-windowed oscillatory bursts (the gesture),
scaled and rotated by the user, rotated by the context orientation, plus the
context's baseline oscillation and sensor noise.  Rotations act on the
accelerometer triplet and the gyroscope triplet jointly.

On disk a dataset is three files::

    manifest.json   catalogs, counts, seed and the per-record index
    samples.f32     little-endian float32, layout [record, channel, time]
    labels.csv      record_id,gesture_id,context_id,user_id,split
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import CatalogError, DatasetIOError, TooShort

SAMPLE_RATE_HZ = 100
WINDOW = 120
STEP = 60
CHANNELS = 6
NULL = "null"
SCHEMA_VERSION = 1
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
BASE_GESTURES = ("single_pinch", "double_pinch", "middle_pinch", "fist_clench")


@dataclass(frozen=True)
class Burst:
    center: float  # seconds from instance center
    width: float  # Gaussian envelope sigma, seconds
    amplitude: tuple  # 6 per-channel amplitudes
    freq: float  # carrier, Hz


@dataclass(frozen=True)
class GestureSpec:
    gesture_id: str
    bursts: tuple

    def __post_init__(self):
        if not self.bursts:
            raise CatalogError(f"gesture {self.gesture_id} has no bursts")
        for b in self.bursts:
            if b.width <= 0 or len(b.amplitude) != CHANNELS:
                raise CatalogError(f"bad burst in gesture {self.gesture_id}")


@dataclass(frozen=True)
class ContextSpec:
    context_id: str
    baseline_freq: float
    baseline_amp: tuple
    rotation: tuple  # 3x3 row-major
    noise_sigma: float
    coarse_id: str | None = None

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise CatalogError(f"context {self.context_id}: negative noise")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)


@dataclass(frozen=True)
class UserSpec:
    user_id: str
    amplitude_scale: float = 1.0
    tempo_scale: float = 1.0
    rotation: tuple = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if self.amplitude_scale <= 0 or self.jitter_sigma < 0:
            raise CatalogError(f"user {self.user_id}: invalid scales")
        if not 0.7 <= self.tempo_scale <= 1.3:
            raise CatalogError(f"user {self.user_id}: tempo_scale outside [0.7, 1.3]")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)


@dataclass
class Catalog:
    gestures: dict
    contexts: dict
    users: dict
    coarse: dict = field(default_factory=dict)  # coarse id -> fine child ids

    def __post_init__(self):
        for cid, children in self.coarse.items():
            if len(children) < 2:
                raise CatalogError(f"coarse context {cid} needs at least 2 fine children")
            for ch in children:
                if ch not in self.contexts:
                    raise CatalogError(f"coarse context {cid} references unknown {ch}")

    def to_dict(self) -> dict:
        return {
            "gestures": [asdict(g) for g in self.gestures.values()],
            "contexts": [asdict(c) for c in self.contexts.values()],
            "users": [asdict(u) for u in self.users.values()],
            "coarse": {k: list(v) for k, v in self.coarse.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Catalog":
        gestures = {}
        for g in d["gestures"]:
            bursts = tuple(
                Burst(b["center"], b["width"], tuple(b["amplitude"]), b["freq"]) for b in g["bursts"]
            )
            gestures[g["gesture_id"]] = GestureSpec(g["gesture_id"], bursts)
        contexts = {}
        for c in d["contexts"]:
            c = dict(c)
            c["baseline_amp"] = tuple(c["baseline_amp"])
            c["rotation"] = tuple(c["rotation"])
            contexts[c["context_id"]] = ContextSpec(**c)
        users = {}
        for u in d["users"]:
            u = dict(u)
            u["rotation"] = tuple(u["rotation"])
            users[u["user_id"]] = UserSpec(**u)
        coarse = {k: list(v) for k, v in d.get("coarse", {}).items()}
        return cls(gestures, contexts, users, coarse)


def _rot(axis_angle) -> tuple:
    return tuple(Rotation.from_rotvec(axis_angle).as_matrix().ravel())


def _random_axis(rng) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


_GESTURE_TABLE = {
    # id: list of (center s, width s, amplitude, freq Hz)
    "single_pinch": [(0.0, 0.05, (1.0, 0.2, 0.4, 0.8, -0.3, 0.1), 12.0)],
    "double_pinch": [
        (-0.2, 0.05, (0.9, 0.3, 0.4, 0.7, -0.2, 0.3), 12.0),
        (0.2, 0.05, (0.9, 0.3, 0.4, 0.7, -0.2, 0.3), 12.0),
    ],
    "middle_pinch": [(0.0, 0.05, (0.2, 1.0, -0.3, -0.2, 0.9, 0.4), 9.0)],
    "fist_clench": [(0.0, 0.12, (0.5, -0.4, 1.0, 0.3, 0.3, -0.9), 5.0)],
    "index_tap": [(0.05, 0.03, (-0.3, 0.6, 0.9, 0.1, -0.8, 0.5), 16.0)],
    "double_clench": [
        (-0.22, 0.09, (0.4, -0.5, 0.9, 0.4, 0.2, -0.8), 5.0),
        (0.22, 0.09, (0.4, -0.5, 0.9, 0.4, 0.2, -0.8), 5.0),
    ],
    "wrist_flick": [(0.0, 0.08, (0.9, 0.8, 0.1, -0.6, -0.5, 0.9), 3.5)],
    "thumb_swipe": [(-0.1, 0.07, (-0.6, 0.2, 0.3, 1.0, 0.7, 0.2), 7.0)],
}

# coarse context: (baseline Hz, baseline magnitude, noise sigma, fine suffixes)
_CONTEXT_TABLE = {
    "standing": (0.0, 0.0, 0.02, ("hand_up", "hand_hanging")),
    "walking": (1.8, 0.5, 0.08, ("hand_up", "hand_hanging")),
    "sitting_desk": (0.0, 0.05, 0.04, ("elbow_on_desk", "arm_on_desk", "hand_in_air")),
    "sitting_armrest": (0.0, 0.05, 0.04, ("hand_in_air", "arm_on_rest")),
    "laying": (0.2, 0.1, 0.05, ("on_back", "on_side")),
    "lounging": (0.3, 0.1, 0.05, ("horizontal", "slouched", "hand_on_lap")),
    "car_passenger": (0.7, 0.3, 0.15, ("looking", "not_looking")),
    "stroller": (1.6, 0.4, 0.1, ("hand_up", "hand_hanging")),
    "holding_cup": (0.4, 0.15, 0.06, ("looking", "not_looking")),
    "biking": (1.3, 0.6, 0.2, ("looking", "not_looking")),
    "stairs": (1.6, 0.7, 0.12, ("up", "down")),
    "jogging": (2.8, 0.9, 0.25, ("looking", "not_looking")),
}


def default_catalog(n_users: int = 20, seed: int = 2024) -> Catalog:
    """Eight gesture archetypes, 26 fine contexts in 12 coarse groups, ``n_users`` users.

    The first fine context (``standing/hand_up``) has no baseline motion and
    identity orientation; user ``u00`` is the nominal user.
    """
    rng = np.random.default_rng(seed)
    gestures = {
        gid: GestureSpec(gid, tuple(Burst(c, w, tuple(a), f) for c, w, a, f in bursts))
        for gid, bursts in _GESTURE_TABLE.items()
    }
    contexts, coarse = {}, {}
    for i, (name, (bf, bmag, noise, suffixes)) in enumerate(_CONTEXT_TABLE.items()):
        base = np.zeros(3) if i == 0 else _random_axis(rng) * rng.uniform(0.6, np.pi)
        base_rot = Rotation.from_rotvec(base)
        amp_dir = rng.uniform(-1, 1, CHANNELS)
        amp = tuple(bmag * amp_dir / np.abs(amp_dir).max())
        children = []
        for j, suffix in enumerate(suffixes):
            cid = f"{name}/{suffix}"
            if i == 0 and j == 0:
                rot = tuple(np.eye(3).ravel())
                child_amp = amp
                child_noise = noise
            else:
                tilt = Rotation.from_rotvec(_random_axis(rng) * rng.uniform(0.3, 0.7))
                rot = tuple((tilt * base_rot).as_matrix().ravel())
                child_amp = tuple(np.asarray(amp) * rng.uniform(0.8, 1.2))
                child_noise = noise * rng.uniform(0.8, 1.5)
            contexts[cid] = ContextSpec(cid, bf, child_amp, rot, float(child_noise), name)
            children.append(cid)
        coarse[name] = children
    users = {"u00": UserSpec("u00", jitter_sigma=0.02)}
    for k in range(1, n_users):
        users[f"u{k:02d}"] = UserSpec(
            f"u{k:02d}",
            amplitude_scale=float(rng.uniform(0.75, 1.25)),
            tempo_scale=float(rng.uniform(0.8, 1.2)),
            rotation=_rot(_random_axis(rng) * rng.uniform(0.0, 0.35)),
            jitter_sigma=float(rng.uniform(0.01, 0.04)),
        )
    return Catalog(gestures, contexts, users, coarse)


def gen_instance(
    g: GestureSpec | None,
    c: ContextSpec,
    u: UserSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    """One ``(6, 120)`` instance; ``g=None`` gives a null-class instance."""
    length = int(round(WINDOW * u.tempo_scale))
    t = (np.arange(length) - (length - 1) / 2) / SAMPLE_RATE_HZ
    motion = np.zeros((CHANNELS, length))
    if g is not None:
        shift = rng.normal(0.0, u.jitter_sigma) if u.jitter_sigma > 0 else 0.0
        for b in g.bursts:
            gain = u.amplitude_scale * rng.uniform(0.9, 1.1)
            center = b.center * u.tempo_scale + shift
            width = b.width * u.tempo_scale
            env = np.exp(-0.5 * ((t - center) / width) ** 2)
            carrier = np.cos(2 * np.pi * (b.freq / u.tempo_scale) * (t - center))
            motion += gain * np.outer(b.amplitude, env * carrier)
        rot = u.matrix @ c.matrix
        motion[:3] = rot @ motion[:3]
        motion[3:] = rot @ motion[3:]
    motion = _fit_length(motion, WINDOW)
    tt = (np.arange(WINDOW) - (WINDOW - 1) / 2) / SAMPLE_RATE_HZ
    if c.baseline_freq > 0 and any(c.baseline_amp):
        phase = rng.uniform(0, 2 * np.pi)
        motion += np.outer(c.baseline_amp, np.sin(2 * np.pi * c.baseline_freq * tt + phase))
    if c.noise_sigma > 0:
        motion += rng.normal(0.0, c.noise_sigma, motion.shape)
    return motion


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Center-crop or edge-pad the time axis to ``n`` samples."""
    length = x.shape[1]
    if length > n:
        off = (length - n) // 2
        return x[:, off : off + n].copy()
    if length < n:
        left = (n - length) // 2
        return np.pad(x, ((0, 0), (left, n - length - left)), mode="edge")
    return x


def window_segments(signal: np.ndarray, win: int = WINDOW, step: int = STEP) -> list:
    """Sliding windows of ``win`` samples every ``step`` samples along time."""
    length = signal.shape[-1]
    if length < win:
        raise TooShort(f"signal of {length} samples is shorter than a {win}-sample window")
    count = (length - win) // step + 1
    return [signal[..., i * step : i * step + win] for i in range(count)]


def channel_stats(windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over all windows and time steps."""
    w = np.asarray(windows, dtype=np.float64)
    return w.mean(axis=(0, 2)), w.std(axis=(0, 2))


def standardize(windows: np.ndarray, stats) -> np.ndarray:
    mean, std = stats
    std = np.maximum(std, 1e-8)
    return (np.asarray(windows, dtype=np.float64) - mean[:, None]) / std[:, None]


@dataclass
class Counts:
    """Which catalog entries to cross and how many instances per class cell."""

    per_class: int = 50
    gestures: list | None = None
    contexts: list | None = None
    users: list | None = None

    def resolve(self, catalog: Catalog) -> "Counts":
        if self.per_class < 1:
            raise CatalogError("per_class must be >= 1")
        out = Counts(
            self.per_class,
            list(self.gestures if self.gestures is not None else catalog.gestures),
            list(self.contexts if self.contexts is not None else catalog.contexts),
            list(self.users if self.users is not None else catalog.users),
        )
        for name, ids, pool in (
            ("gesture", out.gestures, catalog.gestures),
            ("context", out.contexts, catalog.contexts),
            ("user", out.users, catalog.users),
        ):
            missing = [i for i in ids if i not in pool]
            if missing:
                raise CatalogError(f"unknown {name} ids: {missing}")
        return out


@dataclass
class Dataset:
    catalog: Catalog
    counts: Counts
    seed: int
    X: np.ndarray  # (n, 6, 120) float64 promoted from float32 storage
    gesture: np.ndarray
    context: np.ndarray
    user: np.ndarray
    split: np.ndarray
    record_id: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.record_id is None:
            self.record_id = np.arange(len(self.X))

    def __len__(self):
        return len(self.X)

    def manifest(self) -> dict:
        rec_bytes = CHANNELS * WINDOW * 4
        return {
            "schema_version": SCHEMA_VERSION,
            "sample_rate_hz": SAMPLE_RATE_HZ,
            "window": WINDOW,
            "channels": CHANNELS,
            "seed": self.seed,
            "counts": asdict(self.counts),
            "n_records": len(self),
            "catalogs": self.catalog.to_dict(),
            "payload": {"file": "samples.f32", "dtype": "<f4", "layout": ["record", "channel", "time"]},
            "records": [[int(r), int(r) * rec_bytes] for r in self.record_id],
            "sha256": hashlib.sha256(self._payload()).hexdigest(),
        }

    def _payload(self) -> bytes:
        return np.ascontiguousarray(self.X, dtype="<f4").tobytes()

    def write(self, out: str | Path) -> Path:
        out = Path(out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "samples.f32").write_bytes(self._payload())
            with open(out / "labels.csv", "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["record_id", "gesture_id", "context_id", "user_id", "split"])
                for row in zip(self.record_id, self.gesture, self.context, self.user, self.split):
                    w.writerow(row)
            (out / "manifest.json").write_text(
                json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n", encoding="utf-8"
            )
        except OSError as e:
            raise DatasetIOError(f"cannot write dataset to {out}: {e}") from e
        return out

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        try:
            manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
            raw = (path / "samples.f32").read_bytes()
            with open(path / "labels.csv", newline="", encoding="utf-8") as f:
                rows = list(csv.DictReader(f))
        except (OSError, ValueError) as e:
            raise DatasetIOError(f"cannot read dataset at {path}: {e}") from e
        if manifest["sample_rate_hz"] != SAMPLE_RATE_HZ:
            raise DatasetIOError("unsupported sample rate")
        n = manifest["n_records"]
        if len(raw) != n * CHANNELS * WINDOW * 4 or len(rows) != n:
            raise DatasetIOError("payload size does not match the manifest")
        X = np.frombuffer(raw, dtype="<f4").reshape(n, CHANNELS, WINDOW).astype(np.float64)
        return cls(
            Catalog.from_dict(manifest["catalogs"]),
            Counts(**manifest["counts"]),
            manifest["seed"],
            X,
            np.array([r["gesture_id"] for r in rows], dtype=object),
            np.array([r["context_id"] for r in rows], dtype=object),
            np.array([r["user_id"] for r in rows], dtype=object),
            np.array([r["split"] for r in rows], dtype=object),
            np.array([int(r["record_id"]) for r in rows]),
        )


def _split_tags(n: int, rng: np.random.Generator) -> list:
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    tags = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    return [tags[i] for i in rng.permutation(n)]


def gen_dataset(catalog: Catalog, counts: Counts, seed: int, out: str | Path | None = None) -> Dataset:
    """Generate every (user, context, class) cell with ``counts.per_class`` instances.

    Classes are the selected gestures plus the null class.  Instance ``i``
    draws from its own stream seeded by ``(seed, i)``, so the result does not
    depend on generation order.  Splits are assigned 60/20/20 within each
    cell.
    """
    counts = counts.resolve(catalog)
    classes = list(counts.gestures) + [NULL]
    xs, gs, cs, us, ss = [], [], [], [], []
    idx = 0
    cell = 0
    for uid in counts.users:
        for cid in counts.contexts:
            for gid in classes:
                tags = _split_tags(counts.per_class, np.random.default_rng([seed, 1, cell]))
                for k in range(counts.per_class):
                    rng = np.random.default_rng([seed, 0, idx])
                    g = None if gid == NULL else catalog.gestures[gid]
                    sig = gen_instance(g, catalog.contexts[cid], catalog.users[uid], rng)
                    for w in window_segments(sig):
                        xs.append(w)
                        gs.append(gid)
                        cs.append(cid)
                        us.append(uid)
                        ss.append(tags[k])
                    idx += 1
                cell += 1
    X = np.asarray(xs, dtype="<f4").astype(np.float64)
    ds = Dataset(
        catalog,
        counts,
        seed,
        X,
        np.array(gs, dtype=object),
        np.array(cs, dtype=object),
        np.array(us, dtype=object),
        np.array(ss, dtype=object),
    )
    if out is not None:
        ds.write(out)
    return ds


def pooled_energy_features(windows: np.ndarray) -> np.ndarray:
    """Per-channel mean |x| and mean x^2 over time."""
    w = np.asarray(windows)
    return np.concatenate([np.abs(w).mean(axis=2), (w**2).mean(axis=2)], axis=1)


def linear_probe_accuracy(features: np.ndarray, labels: np.ndarray) -> float:
    """Training accuracy of a one-pass least-squares one-vs-rest linear classifier."""
    classes, y = np.unique(labels, return_inverse=True)
    A = np.c_[features, np.ones(len(features))]
    target = np.eye(len(classes))[y]
    W, *_ = np.linalg.lstsq(A, target, rcond=None)
    return float((np.argmax(A @ W, axis=1) == y).mean())
