"""Procedural multi-task data: rendered shape scenes, derived query maps,
template captions, and context sets.

Forward tasks (map-to-image) use a derived map as the query and real renders
as context; reverse tasks (image-to-map) swap those roles.  Context images
always share the target's palette (same color multiset, permuted), background,
and style, but re-randomized layout -- so context carries appearance while the
query carries layout.  All derivations are pure functions of the scene;
stochastic-looking effects (speckle, scribble jitter) key their draws off a
hash of the scene itself.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .conditioning import DEFAULT_VOCAB, save_vocab
from .errors import DataError, UsageError
from .png import read_png, write_png
from .rng import SeededRng

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.15, 0.25, 1.0),
    "yellow": (1.0, 0.95, 0.1),
    "cyan": (0.1, 0.9, 0.9),
    "magenta": (0.95, 0.1, 0.95),
    "orange": (1.0, 0.55, 0.05),
    "purple": (0.55, 0.1, 0.85),
}
BACKGROUNDS: dict[str, tuple[float, float, float]] = {
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
    "white": (1.0, 1.0, 1.0),
}
STYLES = ("plain", "snowy", "night")
SHAPE_KINDS = ("circle", "square", "triangle")
NIGHT_FACTOR = 0.45

# index colors for segmentation maps (fixed per shape kind, distinct background)
SEG_COLORS = {
    "background": (0.1, 0.1, 0.1),
    "circle": (0.9, 0.15, 0.15),
    "square": (0.15, 0.9, 0.15),
    "triangle": (0.15, 0.15, 0.9),
}
DEPTH_BACKGROUND = 0.1
CANNY_THRESHOLD = 0.25

FORWARD_TASKS = {"hed2img": "hed", "seg2img": "seg", "depth2img": "depth",
                 "canny2img": "canny", "scribble2img": "scribble"}
REVERSE_TASKS = {"img2hed": "hed", "img2seg": "seg", "img2depth": "depth"}
IN_DOMAIN_TASKS = ("hed2img", "seg2img", "depth2img", "img2hed", "img2seg", "img2depth")
OOD_TASKS = ("canny2img", "scribble2img", "edit")
ALL_TASKS = IN_DOMAIN_TASKS + OOD_TASKS

_MAP_WORDS = {"hed": "edge", "seg": "segmentation", "depth": "depth",
              "canny": "canny", "scribble": "scribble"}


# --------------------------------------------------------------------------- #
# scenes and rendering
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    cx: int
    cy: int
    size: int  # half-extent: every kind fits in the (2*size+1)^2 box


@dataclass(frozen=True)
class Scene:
    background: str
    shapes: tuple[Shape, ...]  # draw order; later entries sit in front
    style: str = "plain"

    def __post_init__(self):
        if not self.shapes:
            raise UsageError("a scene needs at least one shape")
        if self.background not in BACKGROUNDS:
            raise UsageError(f"unknown background {self.background!r}")
        if self.style not in STYLES:
            raise UsageError(f"unknown style {self.style!r}")
        for s in self.shapes:
            if s.kind not in SHAPE_KINDS:
                raise UsageError(f"unknown shape kind {s.kind!r}")
            if s.color not in PALETTE:
                raise UsageError(f"color {s.color!r} not in the palette")


def _scene_rng(scene: Scene, salt: str) -> SeededRng:
    """Deterministic per-scene stream for speckle/jitter effects."""
    desc = f"{scene.background}|{scene.style}|{salt}|" + "|".join(
        f"{s.kind},{s.color},{s.cx},{s.cy},{s.size}" for s in scene.shapes)
    return SeededRng(zlib.crc32(desc.encode()))


def shape_mask(shape: Shape, size: int = 32) -> np.ndarray:
    """Boolean (size, size) coverage mask; hard edges, no anti-aliasing."""
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - shape.cx, yy - shape.cy
    s = shape.size
    if shape.kind == "circle":
        return dx * dx + dy * dy <= s * s
    if shape.kind == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    # upward triangle: single-pixel apex at cy - s, base of half-width s at cy + s
    return (dy >= -s) & (dy <= s) & (2 * np.abs(dx) <= dy + s)


def render(scene: Scene, size: int = 32) -> np.ndarray:
    """Rasterize to (3, size, size) float32 in [0, 1]."""
    img = np.empty((3, size, size), dtype=np.float32)
    img[:] = np.asarray(BACKGROUNDS[scene.background], np.float32)[:, None, None]
    for shape in scene.shapes:
        m = shape_mask(shape, size)
        img[:, m] = np.asarray(PALETTE[shape.color], np.float32)[:, None]
    if scene.style == "snowy":
        g = _scene_rng(scene, "snow")
        n = max(size * size // 25, 1)
        ys = g.integers(0, size, (n,))
        xs = g.integers(0, size, (n,))
        img[:, ys, xs] = 1.0
    elif scene.style == "night":
        img *= NIGHT_FACTOR
    return img


def sample_scene(rng: SeededRng, *, size: int = 32, n_shapes=None,
                 kinds=SHAPE_KINDS, colors=tuple(PALETTE),
                 backgrounds=tuple(BACKGROUNDS), styles=STYLES,
                 assigned_colors=None) -> Scene:
    """Draw a random scene.  Draw order is fixed (background, style, count,
    then kind/color/size/center per shape) so a given rng state always yields
    the same scene.  ``assigned_colors`` pins per-shape colors (and the shape
    count) for palette-matched context generation."""
    background = backgrounds[int(rng.integers(0, len(backgrounds)))]
    style = styles[int(rng.integers(0, len(styles)))]
    if assigned_colors is not None:
        n = len(assigned_colors)
    elif n_shapes is None:
        n = int(rng.integers(1, 4))
    elif isinstance(n_shapes, int):
        n = n_shapes
    else:
        lo, hi = n_shapes
        n = int(rng.integers(lo, hi + 1))
    if not 1 <= n <= 3:
        raise UsageError(f"scenes carry 1-3 shapes, got {n}")
    shapes = []
    for i in range(n):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        if assigned_colors is not None:
            color = assigned_colors[i]
        else:
            color = colors[int(rng.integers(0, len(colors)))]
        s = int(rng.integers(4, 10))
        cx = int(rng.integers(s, size - s))
        cy = int(rng.integers(s, size - s))
        shapes.append(Shape(kind=kind, color=color, cx=cx, cy=cy, size=s))
    return Scene(background=background, shapes=tuple(shapes), style=style)


def render_scene(rng: SeededRng, **constraints) -> tuple[Scene, np.ndarray]:
    scene = sample_scene(rng, **constraints)
    return scene, render(scene, constraints.get("size", 32))


# --------------------------------------------------------------------------- #
# derived query maps
# --------------------------------------------------------------------------- #


def _gray(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64).mean(axis=0)


def _sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    """Gradient magnitude with replicate padding (no frame artifacts)."""
    p = np.pad(gray, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) \
        - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) \
        - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.sqrt(gx * gx + gy * gy)


def _box_blur3(gray: np.ndarray) -> np.ndarray:
    p = np.pad(gray, 1, mode="edge")
    return sum(p[dy:dy + gray.shape[0], dx:dx + gray.shape[1]]
               for dy in range(3) for dx in range(3)) / 9.0


def _to_rgb(gray: np.ndarray) -> np.ndarray:
    return np.repeat(np.clip(gray, 0.0, 1.0)[None].astype(np.float32), 3, axis=0)


def derive_edge_map(target: np.ndarray) -> np.ndarray:
    """Soft edges: Sobel magnitude scaled so a unit step saturates, then a
    3x3 box blur."""
    mag = np.clip(_sobel_magnitude(_gray(target)) / 4.0, 0.0, 1.0)
    return _to_rgb(_box_blur3(mag))


def derive_canny(target: np.ndarray) -> np.ndarray:
    """Thin binary edges: thresholded Sobel magnitude, no blur."""
    mag = _sobel_magnitude(_gray(target)) / 4.0
    return _to_rgb((mag > CANNY_THRESHOLD).astype(np.float32))


def derive_seg_map(scene: Scene, size: int = 32) -> np.ndarray:
    img = np.empty((3, size, size), dtype=np.float32)
    img[:] = np.asarray(SEG_COLORS["background"], np.float32)[:, None, None]
    for shape in scene.shapes:
        m = shape_mask(shape, size)
        img[:, m] = np.asarray(SEG_COLORS[shape.kind], np.float32)[:, None]
    return img


def derive_depth_map(scene: Scene, size: int = 32) -> np.ndarray:
    """Front shapes bright, back shapes dimmer, background near-black."""
    depth = np.full((size, size), DEPTH_BACKGROUND, dtype=np.float64)
    n = len(scene.shapes)
    for i, shape in enumerate(scene.shapes):
        depth[shape_mask(shape, size)] = 0.35 + 0.6 * (i + 1) / n
    return _to_rgb(_box_blur3(depth))


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels inside the mask with at least one 4-neighbour outside."""
    p = np.pad(mask, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~interior


def derive_scribble(scene: Scene, size: int = 32) -> np.ndarray:
    """White outline strokes on black, each boundary pixel jittered by up to
    one pixel (deterministically, keyed off the scene)."""
    g = _scene_rng(scene, "scribble")
    canvas = np.zeros((size, size), dtype=np.float32)
    for shape in scene.shapes:
        ys, xs = np.nonzero(_boundary(shape_mask(shape, size)))
        jy = g.integers(-1, 2, ys.shape)
        jx = g.integers(-1, 2, xs.shape)
        canvas[np.clip(ys + jy, 0, size - 1), np.clip(xs + jx, 0, size - 1)] = 1.0
    return _to_rgb(canvas)


def derive_map(map_kind: str, scene: Scene, target: np.ndarray) -> np.ndarray:
    if map_kind == "hed":
        return derive_edge_map(target)
    if map_kind == "canny":
        return derive_canny(target)
    if map_kind == "seg":
        return derive_seg_map(scene, target.shape[-1])
    if map_kind == "depth":
        return derive_depth_map(scene, target.shape[-1])
    if map_kind == "scribble":
        return derive_scribble(scene, target.shape[-1])
    raise UsageError(f"unknown map kind {map_kind!r}")


# --------------------------------------------------------------------------- #
# captions
# --------------------------------------------------------------------------- #


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def make_caption(scene: Scene, map_kind: str | None = None,
                 include_colors: bool = True) -> str:
    """Template caption; reverse tasks get a "<maptype> map of" head."""
    parts = []
    for s in scene.shapes:
        noun = f"{s.color} {s.kind}" if include_colors else s.kind
        parts.append(f"{_article(noun.split()[0])} {noun}")
    body = " and ".join(parts)
    if include_colors:
        tail = f"on {_article(scene.background)} {scene.background} background"
    else:
        tail = "on a background"
    if map_kind is not None:
        word = _MAP_WORDS[map_kind]
        return f"{_article(word)} {word} map of {body} {tail}"
    return f"a {scene.style} image of {body} {tail}"


def make_quality_caption(object_word: str) -> str:
    """High-quality prompt template used for out-of-domain sketch-style evals."""
    return f"a professional, detailed, high-quality image of {_article(object_word)} {object_word}"


# --------------------------------------------------------------------------- #
# examples
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class TaskExample:
    task: str
    query: np.ndarray
    contexts: tuple  # of (3, H, W) arrays
    caption: str
    target: np.ndarray
    seed: int = 0
    scene: Scene | None = field(default=None, compare=False)


def _layout_key(scene: Scene):
    return tuple((s.kind, s.cx, s.cy, s.size) for s in scene.shapes)


def _context_scene(rng: SeededRng, base: Scene, size: int,
                   colors=None) -> Scene:
    """Same background/style/color-multiset as ``base``; fresh geometry."""
    palette = colors if colors is not None else [s.color for s in base.shapes]
    order = rng.permutation(len(palette))
    for _ in range(10):
        cand = sample_scene(rng, size=size,
                            backgrounds=(base.background,), styles=(base.style,),
                            assigned_colors=[palette[i] for i in order])
        if _layout_key(cand) != _layout_key(base):
            return cand
    raise DataError("could not draw a context layout distinct from the target")


def build_example(task: str, k: int, rng: SeededRng, *, size: int = 32,
                  caption_colors: bool = True, **constraints) -> TaskExample:
    """Assemble one training/eval example for ``task`` with ``k`` context images.

    ``caption_colors=False`` drops color words from plain and map captions so
    palette information reaches the model only through the context images;
    edit captions always name the attribute being changed and ignore the flag.
    """
    if task == "edit":
        return make_edit_example(rng, k=k, size=size, **constraints)
    if task not in FORWARD_TASKS and task not in REVERSE_TASKS:
        raise UsageError(f"unknown task {task!r}; expected one of {ALL_TASKS}")
    if not 1 <= k <= 3:
        raise UsageError(f"context count must be 1-3, got {k}")
    scene = sample_scene(rng, size=size, **constraints)
    target_render = render(scene, size)
    ctx_scenes = [_context_scene(rng, scene, size) for _ in range(k)]
    if task in FORWARD_TASKS:
        map_kind = FORWARD_TASKS[task]
        return TaskExample(
            task=task,
            query=derive_map(map_kind, scene, target_render),
            contexts=tuple(render(c, size) for c in ctx_scenes),
            caption=make_caption(scene, include_colors=caption_colors),
            target=target_render,
            scene=scene)
    map_kind = REVERSE_TASKS[task]
    return TaskExample(
        task=task,
        query=target_render,
        contexts=tuple(derive_map(map_kind, c, render(c, size)) for c in ctx_scenes),
        caption=make_caption(scene, map_kind=map_kind, include_colors=caption_colors),
        target=derive_map(map_kind, scene, target_render),
        scene=scene)


def make_edit_example(rng: SeededRng, k: int = 1, *, size: int = 32,
                      **constraints) -> TaskExample:
    """Editing pair: the query is a real render, the target re-renders the
    same geometry with one attribute changed (a shape's color, or the style),
    context images exhibit the new attribute, and the caption names it."""
    if not 1 <= k <= 3:
        raise UsageError(f"context count must be 1-3, got {k}")
    scene = sample_scene(rng, size=size, **constraints)
    allowed_colors = list(constraints.get("colors", tuple(PALETTE)))
    allowed_styles = list(constraints.get("styles", STYLES))
    # only edit a shape the viewer can see; a fully occluded shape's color
    # change would leave the render untouched
    masks = [shape_mask(s, size) for s in scene.shapes]
    candidates = []
    for i, m in enumerate(masks):
        vis = m.copy()
        for later in masks[i + 1:]:
            vis &= ~later
        if vis.any():
            candidates.append(i)
    idx = candidates[int(rng.integers(0, len(candidates)))]
    old = scene.shapes[idx]
    color_options = [c for c in allowed_colors if c != old.color]
    style_options = [s for s in allowed_styles if s != scene.style]
    do_color = bool(color_options) and (not style_options or rng.random() < 0.7)
    if not color_options and not style_options:
        raise UsageError("edit example needs at least two colors or two styles to choose from")
    if do_color:
        new_color = color_options[int(rng.integers(0, len(color_options)))]
        shapes = list(scene.shapes)
        shapes[idx] = Shape(old.kind, new_color, old.cx, old.cy, old.size)
        edited = Scene(scene.background, tuple(shapes), scene.style)
        caption = f"make the {old.kind} {new_color}"
        ctx_colors = [new_color] * len(scene.shapes)
        ctx_scenes = [_context_scene(rng, edited, size, colors=ctx_colors)
                      for _ in range(k)]
    else:
        new_style = style_options[int(rng.integers(0, len(style_options)))]
        edited = Scene(scene.background, scene.shapes, new_style)
        caption = f"make the image {new_style}"
        ctx_scenes = [_context_scene(rng, edited, size) for _ in range(k)]
    return TaskExample(
        task="edit",
        query=render(scene, size),
        contexts=tuple(render(c, size) for c in ctx_scenes),
        caption=caption,
        target=render(edited, size),
        scene=edited)


# --------------------------------------------------------------------------- #
# dataset directory I/O
# --------------------------------------------------------------------------- #


def write_dataset(out_dir, count: int, seed: int, *, tasks=IN_DOMAIN_TASKS,
                  k: int = 3, size: int = 32, caption_colors: bool = True,
                  **constraints) -> dict:
    """Generate ``count`` records under ``out_dir``.

    Layout: vocab.txt + manifest.txt at the root, one record_NNNNN directory
    per example holding query/target/context PNGs and a meta.txt sidecar.
    Same arguments produce byte-identical trees.
    """
    from pathlib import Path

    out = Path(out_dir)
    if count < 1:
        raise UsageError(f"dataset needs at least one record, got {count}")
    for t in tasks:
        if t not in ALL_TASKS:
            raise UsageError(f"unknown task {t!r}; expected one of {ALL_TASKS}")
    out.mkdir(parents=True, exist_ok=True)
    if any(out.iterdir()):
        raise UsageError(f"refusing to write into non-empty directory {out}")
    master = SeededRng(seed)
    record_seeds = [int(s) for s in master.integers(0, 2**31 - 1, (count,))]
    for i, rec_seed in enumerate(record_seeds):
        sub = SeededRng(rec_seed)
        task = tasks[int(sub.integers(0, len(tasks)))]
        ex = build_example(task, k, sub, size=size,
                           caption_colors=caption_colors, **constraints)
        rec = out / f"record_{i:05d}"
        rec.mkdir()
        write_png(rec / "query.png", ex.query)
        write_png(rec / "target.png", ex.target)
        for j, ctx in enumerate(ex.contexts):
            write_png(rec / f"context_{j}.png", ctx)
        (rec / "meta.txt").write_text(
            f"task: {task}\ncaption: {ex.caption}\nseed: {rec_seed}\nk: {k}\n")
    save_vocab(out / "vocab.txt", DEFAULT_VOCAB)
    manifest = {"count": count, "seed": seed, "size": size, "k": k,
                "tasks": ",".join(tasks)}
    (out / "manifest.txt").write_text(
        "".join(f"{key}: {val}\n" for key, val in manifest.items()))
    return manifest


def _parse_sidecar(text: str, path) -> dict:
    meta = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if ": " not in line:
            raise DataError(f"malformed line in {path}: {line!r}")
        key, val = line.split(": ", 1)
        meta[key] = val
    return meta


def load_dataset(path) -> tuple[list[TaskExample], dict]:
    """Read a dataset directory back into memory."""
    from pathlib import Path

    root = Path(path)
    manifest_file = root / "manifest.txt"
    if not manifest_file.is_file():
        raise DataError(f"{root} is not a dataset directory (no manifest.txt)")
    manifest = _parse_sidecar(manifest_file.read_text(), manifest_file)
    for key in ("count", "seed", "size", "k"):
        if key not in manifest:
            raise DataError(f"manifest.txt missing field {key!r}")
        manifest[key] = int(manifest[key])
    records = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("record_"))
    if len(records) != manifest["count"]:
        raise DataError(f"manifest promises {manifest['count']} records, found {len(records)}")
    examples = []
    for rec in records:
        meta = _parse_sidecar((rec / "meta.txt").read_text(), rec / "meta.txt")
        task = meta.get("task", "")
        if task not in ALL_TASKS:
            raise DataError(f"{rec}/meta.txt names unknown task {task!r}")
        n_ctx = int(meta.get("k", 0))
        contexts = tuple(read_png(rec / f"context_{j}.png") for j in range(n_ctx))
        examples.append(TaskExample(
            task=task,
            query=read_png(rec / "query.png"),
            contexts=contexts,
            caption=meta.get("caption", ""),
            target=read_png(rec / "target.png"),
            seed=int(meta.get("seed", 0))))
    return examples, manifest
