"""
Synthetic labeled street scenes built from simple primitives.

Surfaces are sampled at a density in points/m^2 (blobs in points/m^3), so
the number of points of a primitive is round(density * measure) and does not
depend on the seed. The seed moves primitives within their jitter box, draws
the points, the sensor noise (normal, truncated at 3 sigma) and the colors.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from utils.cloud_io import ClassCatalog, PointCloud, read_text
from utils.errors import ParameterError, StorageError

logger = logging.getLogger(__name__)

PRIMITIVE_KINDS = ('plane', 'wall', 'blob', 'pole', 'box')
NOISE_CUTOFF = 3.0


@dataclass(frozen=True)
class Primitive:
    """One labeled shape.

    ``center`` is the base center for planes, walls, poles and boxes and
    the ball center for blobs. ``size`` is (length_x, length_y) for a
    plane, (length, height) for a wall running along ``axis``, (radius,)
    for a blob, (radius, height) for a pole and (lx, ly, lz) for a box.
    """
    kind: str
    class_id: int
    center: tuple
    size: tuple
    density: float
    noise: float = 0.01
    axis: str = 'x'
    jitter: tuple = (0.0, 0.0, 0.0)
    color: tuple | None = None
    color_jitter: float = 0.05

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ParameterError(f"unknown primitive {self.kind!r}, expected one of {PRIMITIVE_KINDS}")
        if self.density <= 0 or self.noise < 0:
            raise ParameterError("density must be positive and noise non-negative")
        if any(v <= 0 for v in self.size):
            raise ParameterError(f"primitive sizes must be positive, got {self.size}")
        if self.axis not in ('x', 'y'):
            raise ParameterError(f"wall axis must be 'x' or 'y', got {self.axis!r}")
        object.__setattr__(self, 'center', tuple(float(v) for v in self.center))
        object.__setattr__(self, 'size', tuple(float(v) for v in self.size))
        object.__setattr__(self, 'jitter', tuple(float(v) for v in self.jitter))

    def measure(self):
        """Area in m^2, or volume in m^3 for blobs."""
        match self.kind:
            case 'plane' | 'wall':
                return self.size[0] * self.size[1]
            case 'blob':
                return 4.0 / 3.0 * math.pi * self.size[0] ** 3
            case 'pole':
                return 2.0 * math.pi * self.size[0] * self.size[1]
            case 'box':
                lx, ly, lz = self.size
                return lx * ly + 2.0 * (lx + ly) * lz

    def n_points(self):
        return int(round(self.density * self.measure()))


@dataclass(frozen=True)
class SceneRecipe:
    name: str
    primitives: tuple
    classes: tuple = ()
    colors: bool = True

    @property
    def catalog(self):
        return ClassCatalog(self.classes) if self.classes else None


def _sample_plane(rng, n, size):
    return np.column_stack([rng.uniform(-size[0] / 2, size[0] / 2, n),
                            rng.uniform(-size[1] / 2, size[1] / 2, n),
                            np.zeros(n)])


def _sample_wall(rng, n, size, axis):
    along = rng.uniform(-size[0] / 2, size[0] / 2, n)
    height = rng.uniform(0.0, size[1], n)
    if axis == 'x':
        return np.column_stack([along, np.zeros(n), height])
    return np.column_stack([np.zeros(n), along, height])


def _sample_blob(rng, n, size):
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return direction * (size[0] * np.cbrt(rng.uniform(0.0, 1.0, n)))[:, None]


def _sample_pole(rng, n, size):
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.column_stack([size[0] * np.cos(theta), size[0] * np.sin(theta), rng.uniform(0.0, size[1], n)])


def _sample_box(rng, n, size):
    """Top and four side faces of a box standing on z = 0."""
    lx, ly, lz = size
    areas = np.array([lx * ly, lx * lz, lx * lz, ly * lz, ly * lz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(0.0, 1.0, n)
    points = np.empty((n, 3))
    top = face == 0
    points[top] = np.column_stack([u[top] * lx, (v[top] - 0.5) * ly, np.full(top.sum(), lz)])
    for index, y_side in ((1, -ly / 2), (2, ly / 2)):
        mask = face == index
        points[mask] = np.column_stack([u[mask] * lx, np.full(mask.sum(), y_side), v[mask] * lz])
    for index, x_side in ((3, -lx / 2), (4, lx / 2)):
        mask = face == index
        points[mask] = np.column_stack([np.full(mask.sum(), x_side), u[mask] * ly, v[mask] * lz])
    return points


def sample_primitive(primitive, rng, with_colors=True):
    """Points (and colors) of one primitive placed in the scene."""
    n = primitive.n_points()
    offset = rng.uniform(-1.0, 1.0, 3) * np.asarray(primitive.jitter)
    match primitive.kind:
        case 'plane':
            local = _sample_plane(rng, n, primitive.size)
        case 'wall':
            local = _sample_wall(rng, n, primitive.size, primitive.axis)
        case 'blob':
            local = _sample_blob(rng, n, primitive.size)
        case 'pole':
            local = _sample_pole(rng, n, primitive.size)
        case 'box':
            local = _sample_box(rng, n, primitive.size)
    positions = local + np.asarray(primitive.center) + offset
    if primitive.noise > 0 and n:
        positions += truncnorm.rvs(-NOISE_CUTOFF, NOISE_CUTOFF, scale=primitive.noise,
                                   size=(n, 3), random_state=rng)
    colors = None
    if with_colors:
        base = np.asarray(primitive.color if primitive.color is not None else (0.5, 0.5, 0.5))
        colors = np.clip(base + rng.normal(0.0, primitive.color_jitter, (n, 3)), 0.0, 1.0)
    return positions, colors


def generate_synthetic_scene(recipe, seed=0):
    """Sample every primitive of ``recipe`` (or a named recipe) into one labeled cloud."""
    if isinstance(recipe, str):
        recipe = get_recipe(recipe)
    if not recipe.primitives:
        raise ParameterError(f"recipe {recipe.name!r} has no primitives")
    rng = np.random.default_rng(seed)
    positions, colors, labels = [], [], []
    for primitive in recipe.primitives:
        points, rgb = sample_primitive(primitive, rng, recipe.colors)
        positions.append(points)
        colors.append(rgb)
        labels.append(np.full(len(points), primitive.class_id, dtype=np.int32))
    cloud = PointCloud(np.vstack(positions), np.vstack(colors) if recipe.colors else None, np.concatenate(labels))
    classes, counts = np.unique(cloud.labels, return_counts=True)
    logger.info("Generated scene %s (seed %d): %d points, class counts %s", recipe.name, seed, len(cloud),
                dict(zip(classes.tolist(), counts.tolist())))
    return cloud


def _street_v1():
    ground, facade, car, pole, vegetation, trash_can, clutter = 1, 2, 3, 4, 5, 6, 0
    primitives = [
        Primitive('plane', ground, (0.0, 0.0, 0.0), (60.0, 20.0), density=60.0, noise=0.015,
                  color=(0.35, 0.35, 0.35)),
        Primitive('wall', facade, (0.0, 10.0, 0.0), (60.0, 10.0), density=50.0, noise=0.02,
                  color=(0.75, 0.65, 0.55)),
        Primitive('wall', facade, (0.0, -10.0, 0.0), (60.0, 10.0), density=50.0, noise=0.02,
                  color=(0.7, 0.6, 0.5)),
    ]
    for i in range(8):
        primitives.append(Primitive('box', car, (-24.0 + 7.0 * i, 6.0 if i % 2 == 0 else -6.0, 0.2),
                                    (4.2, 1.8, 1.3), density=150.0, noise=0.01, jitter=(1.0, 0.3, 0.0),
                                    color=(0.6, 0.1, 0.1)))
    for i in range(6):
        primitives.append(Primitive('pole', pole, (-25.0 + 10.0 * i, 8.0 if i % 2 == 0 else -8.0, 0.0),
                                    (0.1, 6.0), density=400.0, noise=0.01, jitter=(0.5, 0.2, 0.0),
                                    color=(0.3, 0.3, 0.35)))
    for i in range(6):
        primitives.append(Primitive('blob', vegetation, (-20.0 + 8.0 * i, -8.0 if i % 2 == 0 else 8.0, 4.0),
                                    (1.5,), density=300.0, noise=0.02, jitter=(0.5, 0.3, 0.5),
                                    color=(0.2, 0.5, 0.15), color_jitter=0.1))
    for i in range(6):
        primitives.append(Primitive('pole', trash_can, (-20.0 + 9.0 * i, 9.0 if i % 2 == 0 else -9.0, 0.0),
                                    (0.3, 1.0), density=800.0, noise=0.01, jitter=(0.3, 0.1, 0.0),
                                    color=(0.1, 0.3, 0.2)))
    for x, y in ((-10.0, 3.0), (0.0, -3.0), (10.0, 3.0), (20.0, -3.0)):
        primitives.append(Primitive('box', clutter, (x, y, 0.0), (0.6, 0.6, 0.6), density=400.0,
                                    noise=0.01, jitter=(0.5, 0.5, 0.0), color=(0.5, 0.5, 0.2)))
    classes = ((ground, 'ground'), (facade, 'facade'), (car, 'car'), (pole, 'pole'),
               (vegetation, 'vegetation'), (trash_can, 'trash_can'))
    return SceneRecipe('street-v1', tuple(primitives), classes)


STREET_V1 = _street_v1()
RECIPES = {STREET_V1.name: STREET_V1}


def get_recipe(name):
    """A named recipe, or a recipe read from a JSON file path."""
    if name in RECIPES:
        return RECIPES[name]
    if Path(name).suffix.lower() == '.json':
        return load_recipe(name)
    raise ParameterError(f"unknown recipe {name!r}, expected one of {sorted(RECIPES)} or a .json file")


def load_recipe(path):
    """Read a recipe from JSON: ``{"name", "colors", "classes": {id: name}, "primitives": [...]}``."""
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"no such recipe file: {path}")
    text = read_text(path)
    try:
        data = json.loads(text)
        primitives = tuple(Primitive(**item) for item in data.get('primitives', []))
    except (ValueError, TypeError, AttributeError) as exc:
        raise ParameterError(f"{path}: bad recipe ({exc})") from exc
    classes = tuple((int(k), str(v)) for k, v in data.get('classes', {}).items())
    return SceneRecipe(data.get('name', path.stem), primitives, classes, bool(data.get('colors', True)))
