"""Synthetic "AttrGrid" dataset, manifest IO and identity-balanced sampling.

Each generated image is a pedestrian surrogate: every attribute group is
rendered as a colored/textured patch at a canonical body zone (head,
upper, lower, feet, side bags, ...).  Ground-truth zone masks are saved
next to the images so learned attention masks can be scored against
them.  Camera id drives jitter (translation bias + brightness) so a
cross-camera retrieval protocol is meaningful.

On-disk layout of a dataset directory:

    manifest.json        schema block + one record per sample
    images/*.ppm         8-bit binary PPM (P6)
    masks/*.pgm          8-bit binary PGM (P5), 0/255, one file per mask group
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import InputError, Tensor


class LoadError(RuntimeError):
    """Manifest or image file failed to load/validate."""


# ---------------------------------------------------------------------------
# PPM / PGM io
# ---------------------------------------------------------------------------

def write_ppm(path, img):
    """img: H x W x 3 uint8."""
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    magic, dims, maxval, pixels = _parse_pnm(path, data)
    if magic != b"P6":
        raise LoadError(f"{path}: expected P6, got {magic.decode(errors='replace')}")
    w, h = dims
    expect = w * h * 3
    if len(pixels) < expect:
        raise LoadError(f"{path}: truncated pixel data ({len(pixels)} < {expect})")
    return np.frombuffer(pixels[:expect], dtype=np.uint8).reshape(h, w, 3)


def write_pgm(path, mask):
    """mask: H x W bool or uint8; stored as 0/255."""
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    magic, dims, maxval, pixels = _parse_pnm(path, data)
    if magic != b"P5":
        raise LoadError(f"{path}: expected P5, got {magic.decode(errors='replace')}")
    w, h = dims
    if len(pixels) < w * h:
        raise LoadError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels[: w * h], dtype=np.uint8).reshape(h, w)


def _parse_pnm(path, data):
    # header is three whitespace-separated tokens after the magic, then one
    # whitespace byte, then raw pixels
    tokens = []
    i = 2
    magic = data[:2]
    while len(tokens) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise LoadError(f"{path}: malformed PNM header")
        tokens.append(data[start:i])
    i += 1  # single whitespace separating header from pixels
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise LoadError(f"{path}: bad PNM header tokens {tokens}") from e
    return magic, (w, h), maxval, data[i:]


# ---------------------------------------------------------------------------
# attribute schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttributeGroup:
    name: str
    num_classes: int
    mask_group: int


@dataclass(frozen=True)
class AttributeSchema:
    """Named attribute groups plus the attribute -> shared-mask assignment."""

    groups: tuple
    num_mask_groups: int
    mask_group_names: tuple = ()

    def __post_init__(self):
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise InputError(f"schema: duplicate group names in {names}")
        if not self.groups:
            raise InputError("schema: needs at least one attribute group")
        referenced = set()
        for g in self.groups:
            if g.num_classes < 2:
                raise InputError(f"schema: group {g.name!r} needs >= 2 classes")
            if not 0 <= g.mask_group < self.num_mask_groups:
                raise InputError(
                    f"schema: group {g.name!r} mask index {g.mask_group} outside [0, {self.num_mask_groups})"
                )
            referenced.add(g.mask_group)
        if referenced != set(range(self.num_mask_groups)):
            missing = sorted(set(range(self.num_mask_groups)) - referenced)
            raise InputError(f"schema: mask groups {missing} referenced by no attribute")

    @property
    def num_groups(self):
        return len(self.groups)

    def groups_for_mask(self, k):
        return [i for i, g in enumerate(self.groups) if g.mask_group == k]

    def with_single_mask(self):
        """All attributes share one mask (K = 1 ablation)."""
        groups = tuple(AttributeGroup(g.name, g.num_classes, 0) for g in self.groups)
        return AttributeSchema(groups, 1, ("all",))

    def with_mask_per_group(self):
        """One mask per attribute group (K = number of groups ablation)."""
        groups = tuple(
            AttributeGroup(g.name, g.num_classes, i) for i, g in enumerate(self.groups)
        )
        return AttributeSchema(groups, len(groups), tuple(g.name for g in self.groups))

    def to_dict(self):
        return {
            "num_mask_groups": self.num_mask_groups,
            "mask_group_names": list(self.mask_group_names),
            "groups": [
                {"name": g.name, "num_classes": g.num_classes, "mask_group": g.mask_group}
                for g in self.groups
            ],
        }

    @staticmethod
    def from_dict(d):
        groups = tuple(
            AttributeGroup(g["name"], int(g["num_classes"]), int(g["mask_group"]))
            for g in d["groups"]
        )
        return AttributeSchema(groups, int(d["num_mask_groups"]), tuple(d.get("mask_group_names", ())))


MASK_GROUP_NAMES = (
    "head", "upper", "lower", "feet", "backpack", "bag", "handbag", "gender_zone",
)


def default_schema():
    """10 attribute groups mapped onto 8 shared masks."""
    g = AttributeGroup
    return AttributeSchema(
        groups=(
            g("hat", 2, 0),
            g("hair", 2, 0),
            g("upper_color", 4, 1),
            g("sleeve", 2, 1),
            g("lower_color", 4, 2),
            g("shoes", 2, 3),
            g("backpack", 2, 4),
            g("bag", 2, 5),
            g("handbag", 2, 6),
            g("gender", 2, 7),
        ),
        num_mask_groups=8,
        mask_group_names=MASK_GROUP_NAMES,
    )


# canonical zones per mask group, as (row0, row1, col0, col1) fractions of
# the image; disjoint by construction
ZONES = {
    "head": (0 / 8, 1 / 8, 1 / 4, 3 / 4),
    "upper": (1 / 8, 4 / 8, 1 / 4, 3 / 4),
    "lower": (4 / 8, 7 / 8, 1 / 4, 3 / 4),
    "feet": (7 / 8, 8 / 8, 1 / 4, 3 / 4),
    "backpack": (1 / 8, 3 / 8, 0 / 4, 1 / 4),
    "bag": (3 / 8, 5 / 8, 0 / 4, 1 / 4),
    "handbag": (3 / 8, 5 / 8, 3 / 4, 4 / 4),
    "gender_zone": (1 / 8, 3 / 8, 3 / 4, 4 / 4),
}

# class -> base RGB color per attribute group
PALETTES = {
    "hat": [(0.85, 0.15, 0.15), (0.15, 0.35, 0.85)],
    "hair": [(0.9, 0.75, 0.2), (0.3, 0.15, 0.05)],
    "upper_color": [(0.8, 0.2, 0.2), (0.2, 0.7, 0.25), (0.2, 0.3, 0.85), (0.8, 0.75, 0.2)],
    "sleeve": None,  # rendered as a stripe pattern, not a color
    "lower_color": [(0.7, 0.25, 0.6), (0.25, 0.65, 0.65), (0.35, 0.3, 0.3), (0.85, 0.5, 0.15)],
    "shoes": [(0.1, 0.1, 0.1), (0.85, 0.85, 0.85)],
    "backpack": [(0.45, 0.3, 0.15), (0.15, 0.45, 0.35)],
    "bag": [(0.75, 0.45, 0.55), (0.3, 0.3, 0.7)],
    "handbag": [(0.8, 0.6, 0.3), (0.4, 0.2, 0.5)],
    "gender": [(0.55, 0.75, 0.9), (0.9, 0.6, 0.75)],
}

BACKGROUND = 0.10


def zone_pixels(name, height, width):
    """Integer pixel bounds (r0, r1, c0, c1) of a canonical zone."""
    r0f, r1f, c0f, c1f = ZONES[name]
    return (
        int(round(r0f * height)),
        int(round(r1f * height)),
        int(round(c0f * width)),
        int(round(c1f * width)),
    )


# ---------------------------------------------------------------------------
# sample records and manifest
# ---------------------------------------------------------------------------

@dataclass
class ImageSample:
    path: str
    identity: int
    camera: int
    attr_labels: list
    split: str
    mask_paths: list = field(default_factory=list)
    root: str = ""

    def load_pixels(self):
        """C x H x W float32 in [0, 1]."""
        img = read_ppm(os.path.join(self.root, self.path))
        return (img.astype(np.float32) / 255.0).transpose(2, 0, 1)

    def load_gt_masks(self):
        """K x H x W bool, or None when the sample carries no ground truth."""
        if not self.mask_paths:
            return None
        return np.stack([read_pgm(os.path.join(self.root, p)) > 0 for p in self.mask_paths])


@dataclass
class DatasetManifest:
    schema: AttributeSchema
    samples: list
    image_size: tuple
    num_cameras: int
    seed: int
    root: str = ""

    def split(self, name):
        return [s for s in self.samples if s.split == name]

    @property
    def train_identities(self):
        return sorted({s.identity for s in self.samples if s.split == "train"})

    def identity_index(self):
        """identity -> contiguous classifier index over the train split."""
        return {ident: i for i, ident in enumerate(self.train_identities)}


def _validate_manifest(manifest):
    schema = manifest.schema
    train_ids = {s.identity for s in manifest.samples if s.split == "train"}
    query_ids = {s.identity for s in manifest.samples if s.split == "query"}
    gallery_ids = {s.identity for s in manifest.samples if s.split == "gallery"}
    if train_ids & (query_ids | gallery_ids):
        raise LoadError(
            f"manifest: train identities overlap test identities: {sorted(train_ids & (query_ids | gallery_ids))}"
        )
    if (query_ids or gallery_ids) and not (query_ids & gallery_ids):
        raise LoadError("manifest: query and gallery identities do not overlap")
    for s in manifest.samples:
        if s.split not in ("train", "query", "gallery"):
            raise LoadError(f"manifest: sample {s.path}: unknown split {s.split!r}")
        if len(s.attr_labels) != schema.num_groups:
            raise LoadError(
                f"manifest: sample {s.path}: {len(s.attr_labels)} labels for {schema.num_groups} groups"
            )
        for g, label in zip(schema.groups, s.attr_labels):
            if not 0 <= label < g.num_classes:
                raise LoadError(
                    f"manifest: sample {s.path}: label {label} out of range for group {g.name!r}"
                )


def save_manifest(manifest, out_dir):
    doc = {
        "format_version": 1,
        "seed": manifest.seed,
        "image_size": list(manifest.image_size),
        "num_cameras": manifest.num_cameras,
        "schema": manifest.schema.to_dict(),
        "samples": [
            {
                "path": s.path,
                "identity": s.identity,
                "camera": s.camera,
                "labels": list(map(int, s.attr_labels)),
                "split": s.split,
                "mask_paths": s.mask_paths,
            }
            for s in manifest.samples
        ],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_manifest(path):
    """Load and fully validate a dataset directory or manifest.json path."""
    if os.path.isdir(path):
        root = path
        path = os.path.join(path, "manifest.json")
    else:
        root = os.path.dirname(path)
    if not os.path.exists(path):
        raise LoadError(f"manifest not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise LoadError(f"{path}: invalid JSON: {e}") from e
    try:
        schema = AttributeSchema.from_dict(doc["schema"])
        samples = [
            ImageSample(
                path=rec["path"],
                identity=int(rec["identity"]),
                camera=int(rec["camera"]),
                attr_labels=[int(x) for x in rec["labels"]],
                split=rec["split"],
                mask_paths=list(rec.get("mask_paths", [])),
                root=root,
            )
            for rec in doc["samples"]
        ]
        manifest = DatasetManifest(
            schema=schema,
            samples=samples,
            image_size=tuple(doc["image_size"]),
            num_cameras=int(doc["num_cameras"]),
            seed=int(doc["seed"]),
            root=root,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise LoadError(f"{path}: malformed manifest: {e}") from e
    _validate_manifest(manifest)
    for s in manifest.samples:
        full = os.path.join(root, s.path)
        if not os.path.exists(full):
            raise LoadError(f"manifest references missing image file: {full}")
    return manifest


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class GenerateConfig:
    train_identities: int = 50
    test_identities: int = 25
    samples_per_identity: int = 8
    image_size: tuple = (64, 32)   # (H, W)
    num_cameras: int = 4
    noise: float = 0.03            # pixel noise sigma
    jitter: float = 0.1            # translation fraction; also scales brightness shift
    id_texture: float = 0.10       # per-identity texture amplitude; 0 disables
    schema: AttributeSchema = None

    def __post_init__(self):
        if self.schema is None:
            self.schema = default_schema()


# per-camera appearance: (brightness bias, row shift bias, col shift bias),
# all scaled by the jitter knob
CAMERA_PROFILES = [
    (-0.35, -0.5, -0.5),
    (-0.12, 0.5, 0.0),
    (0.12, -0.5, 0.5),
    (0.35, 0.5, -0.5),
]


def _camera_profile(cam):
    return CAMERA_PROFILES[cam % len(CAMERA_PROFILES)]


def _render_zone(canvas, zone, color):
    r0, r1, c0, c1 = zone
    canvas[r0:r1, c0:c1, :] = color


def render_sample(labels, schema, cfg, identity_texture, camera, rng):
    """One image (H x W x 3 float) plus K boolean gt masks.

    Consumes a fixed number of rng draws regardless of knob values so
    that a zero-noise run stays aligned with a noisy one.
    """
    h, w = cfg.image_size
    canvas = np.full((h, w, 3), BACKGROUND, dtype=np.float64)
    figure = np.zeros((h, w), dtype=bool)

    by_name = {g.name: labels[i] for i, g in enumerate(schema.groups)}

    def paint(zone_name, color):
        zone = zone_pixels(zone_name, h, w)
        _render_zone(canvas, zone, color)
        figure[zone[0]:zone[1], zone[2]:zone[3]] = True

    # head: hat colors the left half, hair the right half
    r0, r1, c0, c1 = zone_pixels("head", h, w)
    mid = (c0 + c1) // 2
    canvas[r0:r1, c0:mid] = PALETTES["hat"][by_name.get("hat", 0)]
    canvas[r0:r1, mid:c1] = PALETTES["hair"][by_name.get("hair", 0)]
    figure[r0:r1, c0:c1] = True

    paint("upper", PALETTES["upper_color"][by_name.get("upper_color", 0)])
    if by_name.get("sleeve", 0) == 1:
        r0, r1, c0, c1 = zone_pixels("upper", h, w)
        canvas[r0:r1:2, c0:c1] *= 0.45
    paint("lower", PALETTES["lower_color"][by_name.get("lower_color", 0)])
    paint("feet", PALETTES["shoes"][by_name.get("shoes", 0)])
    paint("backpack", PALETTES["backpack"][by_name.get("backpack", 0)])
    paint("bag", PALETTES["bag"][by_name.get("bag", 0)])
    paint("handbag", PALETTES["handbag"][by_name.get("handbag", 0)])
    paint("gender_zone", PALETTES["gender"][by_name.get("gender", 0)])

    if identity_texture is not None:
        canvas += (cfg.id_texture * identity_texture)[:, :, None] * figure[:, :, None]

    masks = np.zeros((schema.num_mask_groups, h, w), dtype=bool)
    names = schema.mask_group_names or [f"mask{k}" for k in range(schema.num_mask_groups)]
    for k, name in enumerate(names):
        if name in ZONES:
            z = zone_pixels(name, h, w)
            masks[k, z[0]:z[1], z[2]:z[3]] = True
        else:
            masks[k] = figure  # remapped schemas fall back to the whole figure

    # per-sample jitter, biased by camera
    bright_bias, dy_bias, dx_bias = _camera_profile(camera)
    max_dy = int(round(h * cfg.jitter))
    max_dx = int(round(w * cfg.jitter))
    dy = int(rng.integers(-max_dy, max_dy + 1))
    dx = int(rng.integers(-max_dx, max_dx + 1))
    dy = int(np.clip(dy + round(dy_bias * max_dy), -max_dy, max_dy))
    dx = int(np.clip(dx + round(dx_bias * max_dx), -max_dx, max_dx))
    canvas = _translate(canvas, dy, dx, BACKGROUND)
    masks = np.stack([_translate(m.astype(np.float64), dy, dx, 0.0) > 0.5 for m in masks])

    brightness = 1.0 + cfg.jitter * (bright_bias + 0.5 * (2.0 * rng.random() - 1.0))
    canvas = canvas * brightness
    canvas = canvas + cfg.noise * rng.standard_normal((h, w, 3))
    return np.clip(canvas, 0.0, 1.0), masks


def _translate(img, dy, dx, fill):
    out = np.full_like(img, fill)
    h, w = img.shape[:2]
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = img[ys_src, xs_src]
    return out


def _draw_attribute_vectors(rng, schema, n, require_unique):
    vectors = []
    seen = set()
    for _ in range(n):
        for attempt in range(1000):
            v = tuple(int(rng.integers(0, g.num_classes)) for g in schema.groups)
            if not require_unique or v not in seen:
                break
        else:
            raise InputError(
                "generate: attribute space too small for unique per-identity vectors; "
                "enable identity texture or enlarge the schema"
            )
        seen.add(v)
        vectors.append(list(v))
    return vectors


def generate_attrgrid(cfg, seed, out_dir):
    """Generate a dataset directory; returns the loaded-back manifest."""
    if cfg.train_identities < 2:
        raise InputError("generate: need at least 2 train identities")
    if cfg.schema.num_groups == 0:
        raise InputError("generate: schema has zero attribute groups")
    if cfg.test_identities > 0 and (cfg.num_cameras < 2 or cfg.samples_per_identity < 2):
        raise InputError("generate: test split needs >= 2 cameras and >= 2 samples per identity")

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)

    rng = np.random.default_rng(seed)
    schema = cfg.schema
    h, w = cfg.image_size
    n_ids = cfg.train_identities + cfg.test_identities

    vectors = _draw_attribute_vectors(rng, schema, n_ids, require_unique=cfg.id_texture == 0)
    textures = [rng.standard_normal((h, w)) for _ in range(n_ids)]

    samples = []
    for ident in range(n_ids):
        is_train = ident < cfg.train_identities
        texture = textures[ident] if cfg.id_texture > 0 else None
        for s_idx in range(cfg.samples_per_identity):
            camera = s_idx % cfg.num_cameras
            img, masks = render_sample(vectors[ident], schema, cfg, texture, camera, rng)
            stem = f"{ident:04d}_{s_idx:02d}_c{camera}"
            img_rel = os.path.join("images", stem + ".ppm")
            write_ppm(os.path.join(out_dir, img_rel), np.round(img * 255.0).astype(np.uint8))
            mask_rels = []
            for k in range(schema.num_mask_groups):
                m_rel = os.path.join("masks", f"{stem}_m{k}.pgm")
                write_pgm(os.path.join(out_dir, m_rel), masks[k])
                mask_rels.append(m_rel)
            if is_train:
                split = "train"
            else:
                # early samples (one per camera, at most half) query; the
                # rest fill the gallery, guaranteeing cross-camera matches
                q_count = min(cfg.num_cameras, max(1, cfg.samples_per_identity // 2))
                split = "query" if s_idx < q_count else "gallery"
            samples.append(
                ImageSample(
                    path=img_rel,
                    identity=ident,
                    camera=camera,
                    attr_labels=vectors[ident],
                    split=split,
                    mask_paths=mask_rels,
                    root=out_dir,
                )
            )

    manifest = DatasetManifest(
        schema=schema,
        samples=samples,
        image_size=cfg.image_size,
        num_cameras=cfg.num_cameras,
        seed=seed,
        root=out_dir,
    )
    save_manifest(manifest, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: Tensor          # N x C x H x W
    identities: np.ndarray  # raw identity labels
    id_indices: np.ndarray  # contiguous train-classifier indices
    cameras: np.ndarray
    attr_labels: np.ndarray  # N x num_groups


class TrainSet:
    """Pre-loaded train split with per-identity row lookup."""

    def __init__(self, manifest):
        rows = manifest.split("train")
        if not rows:
            raise InputError("dataset has no train split")
        self.images = np.stack([s.load_pixels() for s in rows])
        self.identities = np.array([s.identity for s in rows], dtype=np.int64)
        self.cameras = np.array([s.camera for s in rows], dtype=np.int64)
        self.attr_labels = np.array([s.attr_labels for s in rows], dtype=np.int64)
        self.id_to_index = manifest.identity_index()
        self.rows_by_id = {
            ident: np.flatnonzero(self.identities == ident) for ident in self.id_to_index
        }

    @property
    def num_samples(self):
        return len(self.identities)

    @property
    def num_identities(self):
        return len(self.id_to_index)


def pk_sample(trainset, p, k_per_id, rng):
    """Identity-balanced batch: P distinct identities, K samples each."""
    ids = sorted(trainset.rows_by_id)
    if p > len(ids):
        raise InputError(f"pk_sample: P={p} exceeds {len(ids)} available identities")
    chosen = rng.choice(len(ids), size=p, replace=False)
    row_ids = []
    for c in chosen:
        rows = trainset.rows_by_id[ids[int(c)]]
        picked = rng.choice(len(rows), size=k_per_id, replace=len(rows) < k_per_id)
        row_ids.extend(rows[picked])
    row_ids = np.array(row_ids, dtype=np.int64)
    row_ids = row_ids[rng.permutation(len(row_ids))]
    identities = trainset.identities[row_ids]
    return Batch(
        images=Tensor(trainset.images[row_ids]),
        identities=identities,
        id_indices=np.array([trainset.id_to_index[int(i)] for i in identities], dtype=np.int64),
        cameras=trainset.cameras[row_ids],
        attr_labels=trainset.attr_labels[row_ids],
    )
