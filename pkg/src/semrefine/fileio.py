"""Plain-text file formats and the on-disk dataset layout.

Dataset layout under a root directory:

    mesh.ply            input mesh with per-face "label" property
    cameras.txt         one block per camera (see write_cameras)
    config.txt          key = value run configuration
    images/NNN.pgm      8-bit grayscale, one per camera
    masks/NNN_L.pgm     binary mask (0/255) for camera NNN, label L
    truth/truth_mesh.ply
    truth/labels_NNN.pgm    ground-truth label image (255 = unlabeled)
    truth/masks/NNN_L.pgm   pristine masks (before corruption)

Missing (camera, label) masks are treated as all-zero. Indices are
zero-padded to 3 digits. All text numbers round-trip float64 exactly
(written with repr-level precision).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .errors import ConfigError, DataError
from .geometry import LabeledMesh
from .labeling import LabelingConfig
from .refine import RefineConfig
from .render import SemanticMaskSet


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- PLY / OBJ

def write_ply(path, mesh: LabeledMesh):
    """ASCII PLY with float vertex properties x,y,z and per-face int label."""
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {mesh.n_vertices}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write(f"element face {mesh.n_facets}\n")
        f.write("property list uchar int vertex_indices\n")
        f.write("property int label\n")
        f.write("end_header\n")
        for v in mesh.vertices:
            f.write(f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
        for tri, lab in zip(mesh.facets, mesh.facet_labels):
            f.write(f"3 {tri[0]} {tri[1]} {tri[2]} {lab}\n")


def read_ply(path) -> LabeledMesh:
    """ASCII PLY reader for the subset this package writes (labels optional)."""
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise DataError(f"{path}: not a PLY file")
        n_vert = n_face = 0
        in_face = False
        face_props = []
        while True:
            line = f.readline()
            if not line:
                raise DataError(f"{path}: truncated header")
            tok = line.split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "format":
                if tok[1] != "ascii":
                    raise DataError(f"{path}: only ASCII PLY is supported")
            elif tok[0] == "element":
                in_face = tok[1] == "face"
                if tok[1] == "vertex":
                    n_vert = int(tok[2])
                elif tok[1] == "face":
                    n_face = int(tok[2])
            elif tok[0] == "property" and in_face and tok[1] != "list":
                face_props.append(tok[2])
            elif tok[0] == "end_header":
                break
        verts = np.empty((n_vert, 3))
        for i in range(n_vert):
            parts = f.readline().split()
            verts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
        facets = np.empty((n_face, 3), dtype=np.int64)
        labels = np.zeros(n_face, dtype=np.int64)
        has_label = "label" in face_props
        for i in range(n_face):
            parts = f.readline().split()
            cnt = int(parts[0])
            if cnt != 3:
                raise DataError(f"{path}: face {i} has {cnt} vertices (triangles only)")
            facets[i] = [int(parts[1]), int(parts[2]), int(parts[3])]
            if has_label:
                labels[i] = int(parts[4 + face_props.index("label")])
    label_count = int(labels.max()) + 1 if n_face else 1
    return LabeledMesh(verts, facets, labels, label_count)


def read_obj(path) -> LabeledMesh:
    """OBJ import: positions and triangular faces; labels default to 0."""
    verts = []
    facets = []
    with open(path) as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(tok[1]), float(tok[2]), float(tok[3])])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in tok[1:]]
                if len(idx) != 3:
                    raise DataError(f"{path}: only triangular faces are supported")
                facets.append(idx)
    return LabeledMesh(
        np.array(verts, dtype=np.float64),
        np.array(facets, dtype=np.int64),
        np.zeros(len(facets), dtype=np.int64),
        1,
    )


# --------------------------------------------------------------------- PGM

def write_pgm(path, image: np.ndarray):
    """Binary (P5) 8-bit PGM."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PGM is supported")
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        img = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
        return img.reshape(h, w).copy()
    if magic == b"P2":
        vals = data[pos:].split()
        return np.array(vals[: w * h], dtype=np.uint8).reshape(h, w)
    raise DataError(f"{path}: unsupported PGM magic {magic!r}")


# ------------------------------------------------------------------ cameras

def write_cameras(path, cameras: list[Camera]):
    """One block per camera: 'fx fy cx cy w h', 3 rotation rows, translation."""
    with open(path, "w") as f:
        for cam in cameras:
            f.write(f"{_fmt(cam.fx)} {_fmt(cam.fy)} {_fmt(cam.cx)} {_fmt(cam.cy)} "
                    f"{cam.width} {cam.height}\n")
            for row in cam.rotation:
                f.write(f"{_fmt(row[0])} {_fmt(row[1])} {_fmt(row[2])}\n")
            t = cam.translation
            f.write(f"{_fmt(t[0])} {_fmt(t[1])} {_fmt(t[2])}\n\n")


def read_cameras(path) -> list[Camera]:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.lstrip().startswith("#")]
    if len(lines) % 5 != 0:
        raise DataError(f"{path}: camera blocks must be 5 lines each")
    cams = []
    for b in range(0, len(lines), 5):
        head = lines[b].split()
        if len(head) != 6:
            raise DataError(f"{path}: bad camera header line {lines[b]!r}")
        fx, fy, cx, cy = (float(x) for x in head[:4])
        w, h = int(head[4]), int(head[5])
        rot = np.array([[float(x) for x in lines[b + 1 + r].split()] for r in range(3)])
        t = np.array([float(x) for x in lines[b + 4].split()])
        cams.append(Camera(fx, fy, cx, cy, rot, t, w, h))
    return cams


# ------------------------------------------------------------------- config

@dataclass
class RunConfig:
    """Union of the labeling and refinement parameters plus run plumbing.

    Serialized as 'key = value' lines; parsing rejects unknown keys and
    round-trips exactly.
    """

    # labeling
    beta: float = 0.1
    mu: float = 1.5
    smooth_same: float = 0.8
    smooth_diff: float = 0.2
    min_angle_variance: float = 0.05
    # refinement
    window_radius: int = 3
    step_size: float = 0.25
    iterations_per_level: int = 5
    levels: int = 3
    lambda_photo: float = 1.0
    lambda_sem: float = 1.0
    lambda_smooth: float = 0.5
    mask_blur_sigma: float = 1.5
    grazing_threshold: float = 0.01
    # run plumbing
    seed: int = 0
    out_dir: str = "out"

    def labeling_config(self) -> LabelingConfig:
        return LabelingConfig(
            beta=self.beta,
            mu=self.mu,
            smooth_same=self.smooth_same,
            smooth_diff=self.smooth_diff,
            min_angle_variance=self.min_angle_variance,
        )

    def refine_config(self) -> RefineConfig:
        return RefineConfig(
            window_radius=self.window_radius,
            step_size=self.step_size,
            iterations_per_level=self.iterations_per_level,
            levels=self.levels,
            lambda_photo=self.lambda_photo,
            lambda_sem=self.lambda_sem,
            lambda_smooth=self.lambda_smooth,
            mask_blur_sigma=self.mask_blur_sigma,
            grazing_threshold=self.grazing_threshold,
        )


def serialize_config(config: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(config, f.name)
        if isinstance(v, float):
            lines.append(f"{f.name} = {_fmt(v)}")
        else:
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def write_config(path, config: RunConfig):
    with open(path, "w") as f:
        f.write(serialize_config(config))


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse 'key = value' lines ('#' comments); unknown keys are rejected."""
    config = dataclasses.replace(base) if base is not None else RunConfig()
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        current = getattr(config, key)
        try:
            if isinstance(current, int):
                setattr(config, key, int(val))
            elif isinstance(current, float):
                setattr(config, key, float(val))
            else:
                setattr(config, key, val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return config


def read_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read(), base)


# ------------------------------------------------------------------ dataset

@dataclass
class Dataset:
    root: str
    mesh: LabeledMesh
    cameras: list
    images: list
    masks: SemanticMaskSet
    config: RunConfig
    truth_mesh: LabeledMesh | None = None
    truth_masks: SemanticMaskSet | None = None


def _mask_name(ci: int, label: int) -> str:
    return f"{ci:03d}_{label}.pgm"


def write_dataset(root, mesh: LabeledMesh, cameras, images, masks: SemanticMaskSet,
                  config: RunConfig, truth_mesh: LabeledMesh | None = None,
                  truth_masks: SemanticMaskSet | None = None) -> list[str]:
    """Write the full layout; returns the relative paths written (manifest)."""
    written = []

    def _put(rel):
        written.append(rel)
        return os.path.join(root, rel)

    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    write_ply(_put("mesh.ply"), mesh)
    write_cameras(_put("cameras.txt"), cameras)
    write_config(_put("config.txt"), config)
    for ci, img in enumerate(images):
        write_pgm(_put(f"images/{ci:03d}.pgm"), img)
    for ci, stack in enumerate(masks.masks):
        for l in range(masks.label_count):
            write_pgm(_put(f"masks/{_mask_name(ci, l)}"), stack[l] * 255)
    if truth_mesh is not None:
        os.makedirs(os.path.join(root, "truth"), exist_ok=True)
        write_ply(_put("truth/truth_mesh.ply"), truth_mesh)
    src_truth = truth_masks if truth_masks is not None else None
    if src_truth is not None:
        os.makedirs(os.path.join(root, "truth", "masks"), exist_ok=True)
        for ci, stack in enumerate(src_truth.masks):
            for l in range(src_truth.label_count):
                write_pgm(_put(f"truth/masks/{_mask_name(ci, l)}"), stack[l] * 255)
        if src_truth.truth_labels is not None:
            for ci, lab in enumerate(src_truth.truth_labels):
                img = np.asarray(lab)
                write_pgm(_put(f"truth/labels_{ci:03d}.pgm"), img.astype(np.uint8))
    return written


def load_dataset(root, base_config: RunConfig | None = None) -> Dataset:
    """Read a dataset layout; raises DataError on missing required parts."""
    def _need(rel):
        path = os.path.join(root, rel)
        if not os.path.exists(path):
            raise DataError(f"missing {rel} under {root}")
        return path

    mesh = read_ply(_need("mesh.ply"))
    cameras = read_cameras(_need("cameras.txt"))
    cfg_path = os.path.join(root, "config.txt")
    if os.path.exists(cfg_path):
        config = read_config(cfg_path, base_config)
    else:
        config = base_config or RunConfig()

    images = []
    for ci in range(len(cameras)):
        images.append(read_pgm(_need(f"images/{ci:03d}.pgm")))
    if len(images) != len(cameras):
        raise DataError("camera count does not match image count")

    label_count = mesh.label_count
    mask_dir = os.path.join(root, "masks")
    if os.path.isdir(mask_dir):
        for name in os.listdir(mask_dir):
            if name.endswith(".pgm") and "_" in name:
                label_count = max(label_count, int(name.rsplit("_", 1)[1][:-4]) + 1)
    mesh.label_count = label_count

    def _load_masks(base_dir):
        stacks = []
        for ci, cam in enumerate(cameras):
            stack = np.zeros((label_count, cam.height, cam.width), dtype=np.uint8)
            for l in range(label_count):
                path = os.path.join(base_dir, _mask_name(ci, l))
                if os.path.exists(path):
                    stack[l] = (read_pgm(path) > 127).astype(np.uint8)
            stacks.append(stack)
        return stacks

    masks = SemanticMaskSet(masks=_load_masks(mask_dir), label_count=label_count)
    masks.validate(cameras)

    truth_mesh = None
    truth_path = os.path.join(root, "truth", "truth_mesh.ply")
    if os.path.exists(truth_path):
        truth_mesh = read_ply(truth_path)
        truth_mesh.label_count = max(truth_mesh.label_count, label_count)

    truth_masks = None
    truth_mask_dir = os.path.join(root, "truth", "masks")
    truth_labels = None
    label_paths = [os.path.join(root, "truth", f"labels_{ci:03d}.pgm") for ci in range(len(cameras))]
    if all(os.path.exists(p) for p in label_paths):
        truth_labels = [read_pgm(p).astype(np.int32) for p in label_paths]
    if os.path.isdir(truth_mask_dir):
        truth_masks = SemanticMaskSet(
            masks=_load_masks(truth_mask_dir),
            label_count=label_count,
            truth_labels=truth_labels,
        )
    elif truth_labels is not None:
        truth_masks = SemanticMaskSet(masks=[], label_count=label_count,
                                      truth_labels=truth_labels)

    return Dataset(
        root=str(root),
        mesh=mesh,
        cameras=cameras,
        images=images,
        masks=masks,
        config=config,
        truth_mesh=truth_mesh,
        truth_masks=truth_masks,
    )


def write_data_term_csv(path, table: np.ndarray):
    """DataTermTable export: one 'facet,label,value' row per entry."""
    with open(path, "w") as f:
        f.write("facet,label,value\n")
        for fi in range(table.shape[0]):
            for l in range(table.shape[1]):
                f.write(f"{fi},{l},{_fmt(table[fi, l])}\n")


def write_energy_csv(path, reports):
    """Energy log: iteration, E_photo, E_sem, E_smooth, total."""
    with open(path, "w") as f:
        f.write("iteration,photo,sem,smooth,total\n")
        for i, rep in enumerate(reports):
            f.write(f"{i},{_fmt(rep.photo)},{_fmt(rep.sem)},{_fmt(rep.smooth)},"
                    f"{_fmt(rep.total)}\n")
