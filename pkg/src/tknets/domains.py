"""Time-ordered domain sequences: synthetic generators, IDX images, tabular splits."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Domain:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def class_subset(self, k: int) -> np.ndarray:
        return self.x[self.y == k]


@dataclass
class DomainSequence:
    """Ordered sample sets ``S_1..S_m``; ``times`` holds each domain's position on the time axis."""

    name: str
    domains: list
    n_classes: int
    times: list = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.times is None:
            self.times = list(range(len(self.domains)))
        if len(self.times) != len(self.domains):
            raise ValueError("times and domains differ in length")
        if not self.domains:
            raise ValueError("a domain sequence needs at least one domain")
        dims = {d.x.shape[1] for d in self.domains}
        if len(dims) != 1:
            raise ValueError(f"feature dimension differs across domains: {sorted(dims)}")
        for i, d in enumerate(self.domains):
            if len(d) == 0:
                raise ValueError(f"domain {i} is empty")
            if d.y.min() < 0 or d.y.max() >= self.n_classes:
                raise ValueError(f"domain {i} has labels outside 0..{self.n_classes - 1}")

    def __len__(self):
        return len(self.domains)

    def __getitem__(self, i):
        return self.domains[i]

    @property
    def dim(self) -> int:
        return self.domains[0].x.shape[1]

    def subsequence(self, positions, name=None) -> "DomainSequence":
        positions = list(positions)
        return DomainSequence(
            name or self.name,
            [self.domains[p] for p in positions],
            self.n_classes,
            [self.times[p] for p in positions],
            dict(self.provenance),
        )

    def consecutive_pairs(self) -> list[tuple[int, int]]:
        """Positions ``(a, a+1)`` whose domains are adjacent in time."""
        return [(a, a + 1) for a in range(len(self) - 1) if self.times[a + 1] - self.times[a] == 1]

    def counts(self) -> list[list[int]]:
        return [np.bincount(d.y, minlength=self.n_classes).tolist() for d in self.domains]


@dataclass(frozen=True)
class SplitSpec:
    """Which domains are held out as targets.

    ``target`` is ``"extrapolate"`` (the last ``horizon`` domains) or
    ``"interpolate"`` (the middle domain, index ``len // 2``).
    """

    target: str = "extrapolate"
    horizon: int = 1

    def __post_init__(self):
        if self.target not in ("extrapolate", "interpolate"):
            raise ValueError(f"unknown target position {self.target!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.target == "interpolate" and self.horizon != 1:
            raise ValueError("interpolation holds out exactly one domain")


def split_sequence(seq: DomainSequence, split: SplitSpec = SplitSpec()):
    """Return ``(sources, targets)`` as two :class:`DomainSequence` objects."""
    n = len(seq)
    if split.target == "extrapolate":
        held = list(range(n - split.horizon, n))
    else:
        held = [n // 2]
    kept = [i for i in range(n) if i not in held]
    if len(kept) < 2:
        raise ValueError(f"need at least 2 source domains, have {len(kept)}")
    return seq.subsequence(kept), seq.subsequence(held)


# ---------------------------------------------------------------- generators


def _check_counts(n_domains, n_per_domain, n_classes=2):
    if n_domains < 2:
        raise ValueError("n_domains must be >= 2")
    if n_per_domain < 2 * n_classes:
        raise ValueError(f"n_per_domain must give >= 2 samples per class (got {n_per_domain})")


def evolcircle_centers(n_domains, radius=1.0, offset=0.25):
    """Class centres for each domain, shape ``(n_domains, 2, 2)``."""
    theta = np.pi * np.arange(n_domains) / (n_domains - 1)
    on_arc = radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    tangent = np.stack([-np.sin(theta), np.cos(theta)], axis=1)
    return np.stack([on_arc + offset * tangent, on_arc - offset * tangent], axis=1)


def gen_evolcircle(n_domains=30, n_per_domain=200, seed=0, radius=1.0, offset=0.25, sigma=0.1):
    """Two Gaussian classes whose centre pair walks along a half circle."""
    _check_counts(n_domains, n_per_domain)
    rng = np.random.default_rng(seed)
    centers = evolcircle_centers(n_domains, radius, offset)
    per_class = [n_per_domain - n_per_domain // 2, n_per_domain // 2]
    domains = []
    for i in range(n_domains):
        xs, ys = [], []
        for k in (0, 1):
            xs.append(centers[i, k] + sigma * rng.standard_normal((per_class[k], 2)))
            ys.append(np.full(per_class[k], k))
        domains.append(Domain(np.concatenate(xs), np.concatenate(ys)))
    prov = dict(generator="evolcircle", seed=seed, n_domains=n_domains, n_per_domain=n_per_domain,
                radius=radius, offset=offset, sigma=sigma)
    return DomainSequence("evolcircle", domains, 2, provenance=prov)


def rplate_label(points: np.ndarray, angle_deg: float) -> np.ndarray:
    """Class 1 on the side the boundary normal at ``angle_deg`` points to; ties go to class 1."""
    a = np.deg2rad(angle_deg)
    s = points[:, 0] * np.cos(a) + points[:, 1] * np.sin(a)
    return (s >= 0).astype(np.int64)


def gen_rplate(n_domains=30, n_per_domain=200, seed=0, interval_deg=12.0, sigma=1.0):
    """Fixed Gaussian cloud; the linear labelling boundary rotates by ``interval_deg`` per domain."""
    _check_counts(n_domains, n_per_domain)
    rng = np.random.default_rng(seed)
    angles = [interval_deg * i for i in range(n_domains)]
    domains = []
    for a in angles:
        x = sigma * rng.standard_normal((n_per_domain, 2))
        domains.append(Domain(x, rplate_label(x, a)))
    prov = dict(generator="rplate", seed=seed, n_domains=n_domains, n_per_domain=n_per_domain,
                interval_deg=interval_deg, sigma=sigma, boundary_angles=angles)
    return DomainSequence("rplate", domains, 2, provenance=prov)


def gen_linear_drift(transition, n_domains=6, n_per_class=10_000, n_classes=2, seed=0, sigma=1.0, spread=3.0):
    """Gaussian classes whose samples are pushed through ``transition`` from one domain to the next.

    Domain ``t+1`` is exactly ``x_{t+1} = x_t @ transition.T`` applied to freshly
    drawn domain-``t`` samples, so the class-conditional means evolve linearly.
    """
    transition = np.asarray(transition, dtype=np.float64)
    d = transition.shape[0]
    rng = np.random.default_rng(seed)
    means = spread * rng.standard_normal((n_classes, d))
    maps = [np.eye(d)]
    for _ in range(n_domains - 1):
        maps.append(transition @ maps[-1])
    domains = []
    for t in range(n_domains):
        xs, ys = [], []
        for k in range(n_classes):
            base = means[k] + sigma * rng.standard_normal((n_per_class, d))
            xs.append(base @ maps[t].T)
            ys.append(np.full(n_per_class, k))
        domains.append(Domain(np.concatenate(xs), np.concatenate(ys)))
    prov = dict(generator="linear_drift", seed=seed, n_domains=n_domains, n_per_class=n_per_class,
                transition=transition.tolist(), sigma=sigma, spread=spread)
    return DomainSequence("linear_drift", domains, n_classes, provenance=prov)


def rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image centre, bilinear, zero fill outside."""
    if angle_deg % 360 == 0:
        return img.copy()
    return ndimage.rotate(img, angle_deg, reshape=False, order=1, mode="constant", cval=0.0, prefilter=False)


def gen_rotated_images(images, labels, n_domains=12, delta_deg=10.0, per_domain=200, seed=0):
    """Partition a random subset of ``images`` into rotated domains.

    Chunk ``i`` is rotated by ``i * delta_deg`` degrees. Images must already be
    scaled to [0, 1].
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ValueError(f"expected square images (n, s, s), got {images.shape}")
    need = n_domains * per_domain
    if need > len(images):
        raise ValueError(f"need {need} base images for {n_domains} x {per_domain}, have {len(images)}")
    rng = np.random.default_rng(seed)
    pick = rng.permutation(len(images))[:need]
    n_classes = int(labels.max()) + 1
    domains = []
    for i in range(n_domains):
        idx = pick[i * per_domain:(i + 1) * per_domain]
        rot = np.stack([rotate_image(im, i * delta_deg) for im in images[idx]])
        x = np.clip(rot.reshape(per_domain, -1), 0.0, 1.0)
        domains.append(Domain(x, labels[idx].copy()))
    prov = dict(generator="rotated_images", seed=seed, n_domains=n_domains, delta_deg=delta_deg,
                per_domain=per_domain, base_indices=pick.tolist(),
                rotations=[i * delta_deg for i in range(n_domains)])
    return DomainSequence("rotated_images", domains, n_classes, provenance=prov)


# ----------------------------------------------------------------- IDX files


def _read_idx(path, magic, ndim):
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise DataFormatError(f"{path}: wrong magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataFormatError(f"{path}: truncated payload ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``(n, rows, cols)`` and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ------------------------------------------------------------------- tabular


def read_table(path, delimiter=",", header=False) -> np.ndarray:
    rows = np.genfromtxt(path, delimiter=delimiter, skip_header=1 if header else 0, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows.reshape(1, -1)
    if np.isnan(rows).any():
        raise DataFormatError(f"{path}: non-numeric or missing values")
    return rows


def split_sorted_tabular(rows, sort_column, label_column, n_domains, n_source=None, name="tabular"):
    """Sort rows by ``sort_column`` and cut them into ``n_domains`` consecutive chunks.

    Features are standardised with moments from the first ``n_source`` domains
    (default: all but the last). Labels are remapped to ``0..K-1``.
    """
    rows = np.asarray(rows)
    if not np.issubdtype(rows.dtype, np.number):
        raise DataFormatError("tabular input must be numeric")
    rows = rows.astype(np.float64)
    if np.isnan(rows).any():
        raise DataFormatError("tabular input has missing values")
    n = len(rows) - len(rows) % n_domains
    order = np.argsort(rows[:, sort_column], kind="stable")[:n]
    rows = rows[order]
    raw_labels = rows[:, label_column]
    classes, y = np.unique(raw_labels, return_inverse=True)
    x = np.delete(rows, label_column, axis=1)
    chunk = n // n_domains
    n_source = n_domains - 1 if n_source is None else n_source
    src = x[: n_source * chunk]
    mu, sd = src.mean(axis=0), src.std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd
    domains = [Domain(x[i * chunk:(i + 1) * chunk], y[i * chunk:(i + 1) * chunk]) for i in range(n_domains)]
    prov = dict(generator="sorted_tabular", sort_column=sort_column, label_column=label_column,
                n_domains=n_domains, n_source=n_source, classes=classes.tolist())
    return DomainSequence(name, domains, len(classes), provenance=prov)


# ------------------------------------------------------------ disk container


def save_sequence(seq: DomainSequence, directory) -> Path:
    """Write a manifest plus per-domain little-endian feature/label blocks."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, d in enumerate(seq.domains):
        xf, yf = f"domain_{i:03d}.x.f64", f"domain_{i:03d}.y.i64"
        (directory / xf).write_bytes(np.ascontiguousarray(d.x, dtype="<f8").tobytes())
        (directory / yf).write_bytes(np.ascontiguousarray(d.y, dtype="<i8").tobytes())
        entries.append(dict(x=xf, y=yf, rows=len(d), time=seq.times[i],
                            class_counts=np.bincount(d.y, minlength=seq.n_classes).tolist()))
    manifest = dict(format="tknets-domains", version=1, endianness="little", name=seq.name,
                    n_domains=len(seq), n_classes=seq.n_classes, dim=seq.dim,
                    provenance=seq.provenance, domains=entries)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_sequence(directory) -> DomainSequence:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "tknets-domains":
        raise DataFormatError(f"{directory}: not a domain container")
    dim = manifest["dim"]
    domains, times = [], []
    for e in manifest["domains"]:
        x = np.frombuffer((directory / e["x"]).read_bytes(), dtype="<f8")
        y = np.frombuffer((directory / e["y"]).read_bytes(), dtype="<i8")
        if x.size != e["rows"] * dim or y.size != e["rows"]:
            raise DataFormatError(f"{directory}: block size mismatch for {e['x']}")
        domains.append(Domain(x.reshape(e["rows"], dim).astype(np.float64), y.astype(np.int64)))
        times.append(e["time"])
    return DomainSequence(manifest["name"], domains, manifest["n_classes"], times, manifest["provenance"])
