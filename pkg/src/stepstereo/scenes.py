"""Synthetic layered stereo scenes with exact dense ground truth.

A scene is a stack of fronto-parallel layers — a full-frame background plane
plus rectangles/ellipses — each carrying a constant *integer* disparity and
its own texture.  Because every layer shifts rigidly by a whole number of
columns between the two views, the right image is rendered by exact array
indexing: photometric consistency holds to machine precision (before sensor
noise), and occlusion is decided by exact visibility reasoning instead of a
resampling depth buffer.

Textures are band-limited value noise plus a horizontal sinusoid, so local
matching is well-posed everywhere.  Each layer's texture array is wider than
the image by the scene's maximum disparity: columns beyond the left view's
frame are exactly the ones revealed near the right view's right edge.

Determinism: everything is drawn from one ``numpy`` generator seeded by
``SceneSpec.seed`` in a fixed order (layer disparities, shape geometry,
per-layer texture fields, sensor noise), so a spec maps to a bit-identical
sample on every run.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractViolation
from .fieldops import _resize_values
from . import fileio

SAMPLE_FILE_KEYS = ("left", "right", "disparity", "valid", "occlusion")
SINE_AMPLITUDE = 0.2  # fixed contribution of the sinusoidal texture component


@dataclass(frozen=True)
class TextureProfile:
    """Texture parameters: noise strength in [0, 1] and sine cycles per pixel."""

    noise_amplitude: float = 0.35
    sine_frequency: float = 0.15


@dataclass(frozen=True)
class ShapeSpec:
    """A layer silhouette: half-open bounding box, rectangle or inscribed ellipse."""

    kind: str  # "rectangle" | "ellipse"
    top: int
    left: int
    bottom: int
    right: int


@dataclass(frozen=True)
class SceneSpec:
    """Full parameterization of one synthetic scene (and its random stream)."""

    seed: int
    height: int = 64
    width: int = 96
    num_layers: int = 3
    disparity_range: tuple = (0, 24)
    texture: TextureProfile = TextureProfile()
    shapes: tuple = None  # optional tuple[ShapeSpec], length num_layers - 1
    layer_disparities: tuple = None  # optional per-layer override, back to front
    sensor_noise_sigma: float = 0.02

    def validate(self):
        d_min, d_max = self.disparity_range
        if self.height < 8 or self.width < 8:
            raise ContractViolation("scene must be at least 8x8")
        if self.num_layers < 1:
            raise ContractViolation("num_layers must be >= 1")
        if not (isinstance(d_min, int) and isinstance(d_max, int)):
            raise ContractViolation("disparity_range must be integer endpoints")
        if not (0 <= d_min <= d_max):
            raise ContractViolation(f"invalid disparity_range {self.disparity_range}")
        if not d_max < self.width / 2:
            raise ContractViolation(
                f"d_max {d_max} must stay below width/2 = {self.width / 2}"
            )
        if not (0.0 <= self.texture.noise_amplitude <= 1.0):
            raise ContractViolation("noise_amplitude must lie in [0, 1]")
        if self.texture.sine_frequency < 0:
            raise ContractViolation("sine_frequency must be >= 0")
        if self.sensor_noise_sigma < 0:
            raise ContractViolation("sensor_noise_sigma must be >= 0")
        if self.shapes is not None:
            if len(self.shapes) != self.num_layers - 1:
                raise ContractViolation("need exactly num_layers - 1 shapes")
            for s in self.shapes:
                if s.kind not in ("rectangle", "ellipse"):
                    raise ContractViolation(f"unknown shape kind {s.kind!r}")
                if not (0 <= s.top < s.bottom <= self.height):
                    raise ContractViolation(f"shape rows out of frame: {s}")
                if not (0 <= s.left < s.right <= self.width):
                    raise ContractViolation(f"shape columns out of frame: {s}")
        if self.layer_disparities is not None:
            if len(self.layer_disparities) != self.num_layers:
                raise ContractViolation("need one disparity per layer")
            for d in self.layer_disparities:
                if not (isinstance(d, int) and d_min <= d <= d_max):
                    raise ContractViolation(
                        f"layer disparity {d} outside range {self.disparity_range}"
                    )
            if list(self.layer_disparities) != sorted(self.layer_disparities):
                raise ContractViolation(
                    "layer disparities must be non-decreasing back to front"
                )

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["disparity_range"] = list(self.disparity_range)
        d["shapes"] = (
            None if self.shapes is None else [dataclasses.asdict(s) for s in self.shapes]
        )
        d["layer_disparities"] = (
            None if self.layer_disparities is None else list(self.layer_disparities)
        )
        return d

    @staticmethod
    def from_dict(d):
        shapes = d.get("shapes")
        layer_disparities = d.get("layer_disparities")
        return SceneSpec(
            seed=int(d["seed"]),
            height=int(d["height"]),
            width=int(d["width"]),
            num_layers=int(d["num_layers"]),
            disparity_range=tuple(int(v) for v in d["disparity_range"]),
            texture=TextureProfile(**d["texture"]),
            shapes=None if shapes is None else tuple(ShapeSpec(**s) for s in shapes),
            layer_disparities=(
                None if layer_disparities is None else tuple(int(v) for v in layer_disparities)
            ),
            sensor_noise_sigma=float(d["sensor_noise_sigma"]),
        )


@dataclass
class DisparityMap:
    """Dense per-pixel disparity with a validity mask of the same shape."""

    values: np.ndarray  # float64 (H, W)
    valid: np.ndarray  # bool (H, W)


@dataclass
class SparseDisparity:
    """Disparity supervision after sparsification (edge erasure + random drop)."""

    values: np.ndarray
    valid: np.ndarray


@dataclass
class Layer:
    """One fronto-parallel layer: constant disparity, silhouette, texture.

    ``support`` and ``texture`` cover the extended column range
    ``[0, width + d_max)`` so that right-view reads never leave the array.
    """

    disparity: int
    support: np.ndarray  # bool (H, W + d_max)
    texture: np.ndarray  # float64 (H, W + d_max, 3) in [0, 1]


@dataclass
class StereoSample:
    """A rendered scene: views, exact ground truth, and the visibility masks.

    ``left``/``right`` include sensor noise; the ``*_clean`` pair is the
    noise-free render that satisfies exact photometric consistency.  ``valid``
    marks left pixels whose correspondence lands inside the right frame;
    ``occlusion`` marks valid pixels whose correspondence is covered by a
    nearer layer in the right view.
    """

    left: np.ndarray
    right: np.ndarray
    left_clean: np.ndarray
    right_clean: np.ndarray
    disparity: DisparityMap
    occlusion: np.ndarray
    layer_disparities: tuple
    spec: SceneSpec


def _shape_support(shape, height, width_ext):
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width_ext, dtype=np.float64)[None, :]
    if shape.kind == "rectangle":
        return (
            (ys >= shape.top)
            & (ys < shape.bottom)
            & (xs >= shape.left)
            & (xs < shape.right)
        )
    cy = (shape.top + shape.bottom - 1) / 2.0
    cx = (shape.left + shape.right - 1) / 2.0
    ry = max((shape.bottom - shape.top) / 2.0, 0.5)
    rx = max((shape.right - shape.left) / 2.0, 0.5)
    return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0


def _sample_shapes(rng, spec):
    shapes = []
    min_h = max(4, spec.height // 6)
    min_w = max(4, spec.width // 6)
    for _ in range(spec.num_layers - 1):
        kind = "rectangle" if rng.integers(0, 2) == 0 else "ellipse"
        sh = int(rng.integers(min_h, max(min_h + 1, spec.height // 2)))
        sw = int(rng.integers(min_w, max(min_w + 1, spec.width // 2)))
        top = int(rng.integers(0, spec.height - sh + 1))
        left = int(rng.integers(0, spec.width - sw + 1))
        shapes.append(ShapeSpec(kind, top, left, top + sh, left + sw))
    return tuple(shapes)


def _texture(rng, spec, width_ext):
    """Band-limited value noise plus a horizontal sinusoid around a base colour."""
    base = rng.uniform(0.2, 0.8, size=3)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    cell = 6
    coarse = rng.uniform(
        -1.0, 1.0, size=(spec.height // cell + 2, width_ext // cell + 2)
    )
    noise = (
        _resize_values(torch.from_numpy(coarse), (spec.height, width_ext))
        .numpy()
    )
    xs = np.arange(width_ext, dtype=np.float64)[None, :]
    wave = np.sin(2.0 * np.pi * spec.texture.sine_frequency * xs + phase)
    tex = (
        base[None, None, :]
        + spec.texture.noise_amplitude * noise[:, :, None]
        + SINE_AMPLITUDE * wave[:, :, None]
    )
    return np.clip(tex, 0.0, 1.0)


def build_layers(spec):
    """Materialize the scene's layer stack, ordered back to front.

    Layer 0 is the full-frame background at the range's minimum disparity
    (unless ``layer_disparities`` overrides it); shape layers follow with
    non-decreasing disparities so that nearer layers composite on top.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d_min, d_max = spec.disparity_range
    width_ext = spec.width + d_max

    if spec.num_layers > 1:
        drawn = np.sort(rng.integers(d_min, d_max + 1, size=spec.num_layers - 1))
    else:
        drawn = np.zeros(0, dtype=np.int64)
    shapes = spec.shapes if spec.shapes is not None else _sample_shapes(rng, spec)
    if spec.layer_disparities is not None:
        disparities = list(spec.layer_disparities)
    else:
        disparities = [d_min] + [int(d) for d in drawn]

    layers = []
    full = np.ones((spec.height, width_ext), dtype=bool)
    supports = [full] + [_shape_support(s, spec.height, width_ext) for s in shapes]
    for disparity, support in zip(disparities, supports):
        layers.append(Layer(disparity, support, _texture(rng, spec, width_ext)))
    return layers, rng


def generate_scene(spec):
    """Render a :class:`StereoSample` from a :class:`SceneSpec`."""
    layers, rng = build_layers(spec)
    h, w = spec.height, spec.width

    left = np.zeros((h, w, 3))
    right = np.zeros((h, w, 3))
    d_gt = np.zeros((h, w))
    vis_left = np.zeros((h, w), dtype=np.int64)
    vis_right = np.zeros((h, w), dtype=np.int64)

    # Paint back to front; the last layer covering a pixel wins in both views.
    for i, layer in enumerate(layers):
        m_left = layer.support[:, :w]
        left[m_left] = layer.texture[:, :w][m_left]
        d_gt[m_left] = layer.disparity
        vis_left[m_left] = i
        # In the right view the layer appears shifted left by its disparity.
        m_right = layer.support[:, layer.disparity : layer.disparity + w]
        right[m_right] = layer.texture[:, layer.disparity : layer.disparity + w][m_right]
        vis_right[m_right] = i

    ys, xs = np.mgrid[0:h, 0:w]
    xr = xs - d_gt.astype(np.int64)
    valid = xr >= 0
    occlusion = np.zeros((h, w), dtype=bool)
    occlusion[valid] = vis_right[ys[valid], xr[valid]] != vis_left[valid]

    left_clean = left
    right_clean = right
    if spec.sensor_noise_sigma > 0:
        left = np.clip(left + rng.normal(0.0, spec.sensor_noise_sigma, left.shape), 0, 1)
        right = np.clip(right + rng.normal(0.0, spec.sensor_noise_sigma, right.shape), 0, 1)
    else:
        left = left_clean.copy()
        right = right_clean.copy()

    return StereoSample(
        left=left,
        right=right,
        left_clean=left_clean,
        right_clean=right_clean,
        disparity=DisparityMap(values=d_gt, valid=valid),
        occlusion=occlusion,
        layer_disparities=tuple(layer.disparity for layer in layers),
        spec=spec,
    )


def sparsify_gt(disparity, edge, drop_prob, seed):
    """Erase the edge region and randomly drop non-edge ground truth.

    ``edge`` is binarized at 0.5; every edge pixel becomes invalid, and each
    remaining pixel is dropped independently with probability ``drop_prob``
    using a generator seeded by ``seed``.
    """
    if not (0.0 <= drop_prob <= 1.0):
        raise ContractViolation(f"drop_prob must lie in [0, 1], got {drop_prob}")
    edge = np.asarray(edge)
    if edge.shape != disparity.values.shape:
        raise ContractViolation("edge map shape must match the disparity map")
    edge_bin = edge >= 0.5
    rng = np.random.default_rng(seed)
    dropped = rng.random(disparity.values.shape) < drop_prob
    valid = disparity.valid & ~edge_bin & ~dropped
    return SparseDisparity(values=disparity.values.copy(), valid=valid)


def derive_seed(base_seed, index):
    """Deterministic per-domain seed derivation."""
    return int(base_seed) + 7919 * (index + 1)


def make_domain_suite(base, ranges):
    """One spec per disparity range, seeds derived from the base seed."""
    suite = []
    for i, r in enumerate(ranges):
        lo, hi = int(r[0]), int(r[1])
        spec = dataclasses.replace(
            base, disparity_range=(lo, hi), seed=derive_seed(base.seed, i)
        )
        spec.validate()
        suite.append(spec)
    return suite


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

@dataclass
class LoadedSample:
    """A training/eval sample as read back from disk (or quantized in memory)."""

    left: np.ndarray  # float64 (H, W, 3) in [0, 1]
    right: np.ndarray
    disparity: DisparityMap
    occlusion: np.ndarray
    domain: str
    spec: SceneSpec


def as_loaded(sample, domain="default"):
    """Quantize an in-memory sample exactly as the file round trip would."""
    return LoadedSample(
        left=fileio.u8_image_to_float(fileio.float_image_to_u8(sample.left)),
        right=fileio.u8_image_to_float(fileio.float_image_to_u8(sample.right)),
        disparity=DisparityMap(
            values=sample.disparity.values.astype(np.float32).astype(np.float64),
            valid=sample.disparity.valid.copy(),
        ),
        occlusion=sample.occlusion.copy(),
        domain=domain,
        spec=sample.spec,
    )


def render_suite(specs, domains=None):
    """Generate scenes for a list of specs, tagging each with a domain label."""
    if domains is None:
        domains = ["default"] * len(specs)
    return [
        as_loaded(generate_scene(spec), domain)
        for spec, domain in zip(specs, domains)
    ]


def write_dataset(out_dir, specs, domains=None, force=False):
    """Render scenes and write PPM/PFM/PGM files plus a JSON manifest.

    Refuses to write into an existing non-empty directory unless ``force``.
    Returns the manifest path.
    """
    import os

    if domains is None:
        domains = ["default"] * len(specs)
    if len(domains) != len(specs):
        raise ContractViolation("need one domain label per spec")
    os.makedirs(out_dir, exist_ok=True)
    if os.listdir(out_dir) and not force:
        raise ContractViolation(
            f"output directory {out_dir} is not empty (use force to overwrite)"
        )

    entries = []
    for i, (spec, domain) in enumerate(zip(specs, domains)):
        sample = generate_scene(spec)
        stem = f"sample_{i:04d}"
        files = {
            "left": f"{stem}_left.ppm",
            "right": f"{stem}_right.ppm",
            "disparity": f"{stem}_disp.pfm",
            "valid": f"{stem}_valid.pgm",
            "occlusion": f"{stem}_occ.pgm",
        }
        fileio.write_ppm(
            os.path.join(out_dir, files["left"]), fileio.float_image_to_u8(sample.left)
        )
        fileio.write_ppm(
            os.path.join(out_dir, files["right"]), fileio.float_image_to_u8(sample.right)
        )
        fileio.write_pfm(
            os.path.join(out_dir, files["disparity"]),
            sample.disparity.values.astype(np.float32),
        )
        fileio.write_mask_pgm(os.path.join(out_dir, files["valid"]), sample.disparity.valid)
        fileio.write_mask_pgm(os.path.join(out_dir, files["occlusion"]), sample.occlusion)
        entries.append(
            {
                "index": i,
                "seed": spec.seed,
                "domain": domain,
                "height": spec.height,
                "width": spec.width,
                "files": files,
                "spec": spec.to_dict(),
            }
        )

    manifest_path = os.path.join(out_dir, "manifest.json")
    fileio.write_json(manifest_path, {"samples": entries})
    return manifest_path


def load_dataset(manifest_path):
    """Read a dataset manifest and all referenced samples into memory."""
    import os

    manifest = fileio.read_json(manifest_path)
    base = os.path.dirname(manifest_path)
    samples = []
    for entry in manifest["samples"]:
        files = entry["files"]
        left = fileio.u8_image_to_float(fileio.read_ppm(os.path.join(base, files["left"])))
        right = fileio.u8_image_to_float(fileio.read_ppm(os.path.join(base, files["right"])))
        disp, _ = fileio.read_pfm(os.path.join(base, files["disparity"]))
        valid = fileio.read_mask_pgm(os.path.join(base, files["valid"]))
        occ = fileio.read_mask_pgm(os.path.join(base, files["occlusion"]))
        samples.append(
            LoadedSample(
                left=left,
                right=right,
                disparity=DisparityMap(values=disp.astype(np.float64), valid=valid),
                occlusion=occ,
                domain=entry["domain"],
                spec=SceneSpec.from_dict(entry["spec"]),
            )
        )
    return samples
