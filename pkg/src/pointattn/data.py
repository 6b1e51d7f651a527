"""Synthetic partial/complete shape pairs and the on-disk corpus layout.

Six parametric surfaces stand in for scanned objects. A sample pair is a
complete cloud, normalized to fit [-1, 1]^3 by its own bounding box, plus
a partial cloud cropped from it (half-space or viewpoint occlusion) and
resampled to a fixed size. A corpus directory holds a manifest.json and
one .pcb file per cloud; any converter producing the same layout can feed
the trainer real data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud_io import read_pcb, write_pcb
from .geometry import fps

CATEGORIES = ("sphere", "box", "cylinder", "cone", "torus", "plane_hole")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ShapeSpec:
    """A posed primitive surface plus the seed that samples it."""

    kind: str
    dims: tuple
    rotation: np.ndarray
    translation: np.ndarray
    seed: int

    def validate(self):
        if self.kind not in CATEGORIES:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"shape dims must be positive, got {self.dims}")


@dataclass
class SamplePair:
    partial: np.ndarray
    complete: np.ndarray
    category: str
    pair_id: str = ""
    seed: int = 0


@dataclass
class Corpus:
    root: Path
    categories: tuple
    n_partial: int
    m_complete: int
    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)


def random_spec(kind: str, seed: int) -> ShapeSpec:
    rng = np.random.default_rng([seed, 0x5A])
    dims = {
        "sphere": (rng.uniform(0.5, 1.5),),
        "box": tuple(rng.uniform(0.4, 1.6, size=3)),
        "cylinder": (rng.uniform(0.3, 1.0), rng.uniform(0.8, 2.0)),
        "cone": (rng.uniform(0.4, 1.2), rng.uniform(0.8, 2.0)),
        "torus": (rng.uniform(0.7, 1.2), rng.uniform(0.15, 0.4)),
        "plane_hole": (rng.uniform(1.0, 2.0), rng.uniform(0.15, 0.4)),
    }[kind]
    # random rotation from a normalized quaternion
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    trans = rng.uniform(-0.2, 0.2, size=3)
    return ShapeSpec(kind=kind, dims=dims, rotation=rot, translation=trans, seed=seed)


# ---------------------------------------------------------------------------
# Surface sampling (area-weighted, deterministic under the spec seed)


def _sample_sphere(rng, m, radius):
    v = rng.normal(size=(m, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def _sample_box(rng, m, ax, ay, az):
    areas = np.array([ay * az, ay * az, ax * az, ax * az, ax * ay, ax * ay])
    face = rng.choice(6, size=m, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=m)
    v = rng.uniform(-0.5, 0.5, size=m)
    pts = np.empty((m, 3))
    half = np.array([ax, ay, az]) / 2
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        mask = axis == a
        others = [b for b in range(3) if b != a]
        pts[mask, a] = sign[mask] * half[a]
        pts[mask, others[0]] = u[mask] * [ax, ay, az][others[0]]
        pts[mask, others[1]] = v[mask] * [ax, ay, az][others[1]]
    return pts


def _sample_cylinder(rng, m, radius, height):
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    which = rng.choice(3, size=m, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=m)
    pts = np.empty((m, 3))
    side = which == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = rng.uniform(-height / 2, height / 2, size=side.sum())
    for cap_id, zval in ((1, height / 2), (2, -height / 2)):
        mask = which == cap_id
        r = radius * np.sqrt(rng.uniform(0, 1, size=mask.sum()))
        pts[mask, 0] = r * np.cos(theta[mask])
        pts[mask, 1] = r * np.sin(theta[mask])
        pts[mask, 2] = zval
    return pts


def _sample_cone(rng, m, radius, height):
    slant = np.hypot(radius, height)
    lateral = np.pi * radius * slant
    base = np.pi * radius ** 2
    which = rng.choice(2, size=m, p=np.array([lateral, base]) / (lateral + base))
    theta = rng.uniform(0, 2 * np.pi, size=m)
    pts = np.empty((m, 3))
    lat = which == 0
    frac = np.sqrt(rng.uniform(0, 1, size=lat.sum()))  # area grows with distance from apex
    pts[lat, 0] = radius * frac * np.cos(theta[lat])
    pts[lat, 1] = radius * frac * np.sin(theta[lat])
    pts[lat, 2] = height * (1 - frac) - height / 2
    mask = which == 1
    r = radius * np.sqrt(rng.uniform(0, 1, size=mask.sum()))
    pts[mask, 0] = r * np.cos(theta[mask])
    pts[mask, 1] = r * np.sin(theta[mask])
    pts[mask, 2] = -height / 2
    return pts


def _sample_torus(rng, m, major, minor):
    phi = rng.uniform(0, 2 * np.pi, size=m)
    # area element scales with (major + minor*cos theta): rejection sample theta
    theta = np.empty(m)
    filled = 0
    while filled < m:
        cand = rng.uniform(0, 2 * np.pi, size=2 * (m - filled))
        accept = rng.uniform(0, 1, size=cand.size) < (major + minor * np.cos(cand)) / (major + minor)
        good = cand[accept][:m - filled]
        theta[filled:filled + good.size] = good
        filled += good.size
    ring = major + minor * np.cos(theta)
    return np.stack([ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(theta)], axis=1)


def _sample_plane_hole(rng, m, side, hole_radius):
    pts = np.empty((m, 3))
    filled = 0
    while filled < m:
        cand = rng.uniform(-side / 2, side / 2, size=(2 * (m - filled), 2))
        keep = (cand ** 2).sum(axis=1) > hole_radius ** 2
        good = cand[keep][:m - filled]
        pts[filled:filled + good.shape[0], 0] = good[:, 0]
        pts[filled:filled + good.shape[0], 1] = good[:, 1]
        filled += good.shape[0]
    pts[:, 2] = 0.0
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "plane_hole": _sample_plane_hole,
}


def sample_surface(spec: ShapeSpec, m: int) -> np.ndarray:
    """Area-weighted uniform samples of the posed primitive surface."""
    spec.validate()
    if m < 1:
        raise ValueError(f"sample_surface: m={m} must be >= 1")
    rng = np.random.default_rng([spec.seed, 0x5F])
    pts = _SAMPLERS[spec.kind](rng, m, *spec.dims)
    return pts @ spec.rotation.T + spec.translation


def normalize_pair(complete: np.ndarray):
    """Center/scale transform putting the complete cloud inside [-1, 1]^3."""
    lo = complete.min(axis=0)
    hi = complete.max(axis=0)
    center = (lo + hi) / 2
    half = float((hi - lo).max()) / 2
    if half <= 0:
        raise ValueError("degenerate cloud: zero bounding box")
    return center, half


def make_partial(complete: np.ndarray, n: int, method: str = "half_space",
                 seed: int = 0) -> np.ndarray:
    """Crop an occluded subset of the complete cloud and resample it to n points."""
    complete = np.asarray(complete, dtype=np.float64)
    m = complete.shape[0]
    if n > m:
        raise ValueError(f"make_partial: n={n} exceeds cloud size {m}")
    if n < 1:
        raise ValueError("make_partial: n must be >= 1")
    rng = np.random.default_rng([seed, 0xCC])
    if method == "half_space":
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        proj = complete @ v
        tau = np.median(proj)                 # ~50% survive
        survivors = complete[proj <= tau]
    elif method == "viewpoint":
        cam = rng.normal(size=3)
        cam = 3.0 * cam / np.linalg.norm(cam)
        rel = complete - cam
        depth = np.linalg.norm(rel, axis=1)
        az = np.arctan2(rel[:, 1], rel[:, 0])
        el = np.arcsin(np.clip(rel[:, 2] / depth, -1, 1))
        bins_az = np.clip(((az + np.pi) / (2 * np.pi) * 32).astype(int), 0, 31)
        bins_el = np.clip(((el + np.pi / 2) / np.pi * 16).astype(int), 0, 15)
        bin_id = bins_az * 16 + bins_el
        min_depth = np.full(32 * 16, np.inf)
        np.minimum.at(min_depth, bin_id, depth)
        visible = depth <= min_depth[bin_id] * 1.03
        survivors = complete[visible]
    else:
        raise ValueError(f"make_partial: unknown method {method!r}")
    if survivors.shape[0] >= n:
        return survivors[fps(survivors, n).indices]
    reps = np.arange(n) % survivors.shape[0]
    return survivors[reps]


def build_pair(category: str, n: int, m: int, seed: int,
               method: str = "half_space") -> SamplePair:
    spec = random_spec(category, seed)
    complete = sample_surface(spec, m)
    center, half = normalize_pair(complete)
    complete = (complete - center) / half
    partial = make_partial(complete, n, method=method, seed=seed)
    return SamplePair(partial=partial.astype(np.float32),
                      complete=complete.astype(np.float32),
                      category=category, seed=seed)


# ---------------------------------------------------------------------------
# Corpus directory


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_corpus(count_per_category: int, out_dir, n_partial: int = 512,
                 m_complete: int = 2048, seed: int = 0,
                 categories=CATEGORIES, method: str = "half_space") -> Path:
    """Generate pairs deterministically and write the corpus layout.

    Returns the manifest path. Entry seeds derive from (seed, category
    index, pair index), so the corpus is a pure function of its config.
    """
    if count_per_category < 1:
        raise ValueError("count_per_category must be >= 1")
    out_dir = Path(out_dir)
    clouds = out_dir / "clouds"
    clouds.mkdir(parents=True, exist_ok=True)
    entries = []
    for ci, category in enumerate(categories):
        for i in range(count_per_category):
            pair_seed = int(np.random.SeedSequence([seed, ci, i]).generate_state(1)[0])
            pair = build_pair(category, n_partial, m_complete, pair_seed, method)
            pair_id = f"{category}_{i:04d}"
            partial_rel = f"clouds/{pair_id}_partial.pcb"
            complete_rel = f"clouds/{pair_id}_complete.pcb"
            write_pcb(pair.partial, out_dir / partial_rel)
            write_pcb(pair.complete, out_dir / complete_rel)
            entries.append({
                "id": pair_id,
                "category": category,
                "partial_path": partial_rel,
                "complete_path": complete_rel,
                "seed": pair_seed,
                "sha256_partial": _sha256(out_dir / partial_rel),
                "sha256_complete": _sha256(out_dir / complete_rel),
            })
    manifest = {
        "version": MANIFEST_VERSION,
        "categories": list(categories),
        "n_partial": n_partial,
        "m_complete": m_complete,
        "entries": entries,
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest_path


def load_corpus(root) -> Corpus:
    """Load a corpus directory, validating files against the manifest."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("version", "categories", "n_partial", "m_complete", "entries"):
        if key not in manifest:
            raise ValueError(f"{manifest_path}: manifest missing field {key!r}")
    if manifest["version"] != MANIFEST_VERSION:
        raise ValueError(f"{manifest_path}: unsupported manifest version {manifest['version']}")
    n, m = int(manifest["n_partial"]), int(manifest["m_complete"])
    corpus = Corpus(root=root, categories=tuple(manifest["categories"]),
                    n_partial=n, m_complete=m)
    for entry in manifest["entries"]:
        pair = SamplePair(partial=None, complete=None,
                          category=entry["category"],
                          pair_id=entry["id"], seed=int(entry.get("seed", 0)))
        for role, attr in (("partial", "partial"), ("complete", "complete")):
            rel = entry[f"{role}_path"]
            path = root / rel
            if not path.exists():
                raise FileNotFoundError(f"{manifest_path}: entry {entry['id']} "
                                        f"references missing file {rel}")
            digest = entry.get(f"sha256_{role}")
            if digest and _sha256(path) != digest:
                raise ValueError(f"{path}: checksum mismatch for entry {entry['id']}")
            setattr(pair, attr, read_pcb(path))
        if pair.partial.shape[0] != n or pair.complete.shape[0] != m:
            raise ValueError(
                f"{manifest_path}: entry {entry['id']} has sizes "
                f"{pair.partial.shape[0]}/{pair.complete.shape[0]}, manifest says {n}/{m}")
        corpus.pairs.append(pair)
    return corpus
