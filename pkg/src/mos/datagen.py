"""Synthetic grid scenes: rendering, captions, edit pairs, latent codec, scoring.

A scene is up to four coloured shapes on a 4x4 grid of 8x8-pixel cells over
a 32x32 mid-gray canvas. Captions use a tiny token grammar that parses back
to the exact scene, so alignment can be scored procedurally.
"""

from __future__ import annotations

import functools
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GRID = 4
CELL = 8
CANVAS = GRID * CELL
BACKGROUND = 0.5
MAX_ENTITIES = 4

COLORS = {
    "black": (0.0, 0.0, 0.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
}
SHAPES = ("square", "circle", "triangle", "cross")
EDIT_OPS = ("recolor", "move", "remove", "add")

# alignment thresholds
COLOR_DISTANCE_MAX = 0.25
MASK_CORRELATION_MIN = 0.5
# every palette colour sits at this distance from the gray background
_FOREGROUND_SCALE = float(np.sqrt(3 * 0.5**2))


def _shape_masks() -> dict[str, np.ndarray]:
    r, c = np.mgrid[0:CELL, 0:CELL]
    centre = (CELL - 1) / 2
    square = np.zeros((CELL, CELL), bool)
    square[1:7, 1:7] = True
    square[2:6, 2:6] = False
    circle = (r - centre) ** 2 + (c - centre) ** 2 <= 2.6**2
    triangle = c <= r
    cross = (np.abs(r - c) <= 1) | (np.abs(r + c - (CELL - 1)) <= 1)
    return {"square": square, "circle": circle, "triangle": triangle, "cross": cross}


SHAPE_MASKS = _shape_masks()

# -- vocabulary ---------------------------------------------------------------
SPECIAL = ("<pad>", "<empty>", "at", "to")
VOCAB: tuple[str, ...] = SPECIAL + tuple(COLORS) + SHAPES + tuple(str(i) for i in range(GRID)) + EDIT_OPS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)
PAD, EMPTY, AT, TO = (TOKEN_ID[w] for w in SPECIAL)


class GrammarError(ValueError):
    pass


PROMPT_GRAMMAR = (
    "caption := entity+ | 'empty';  entity := COLOR SHAPE 'at' ROW COL\n"
    f"  COLOR in {{{', '.join(COLORS)}}}; SHAPE in {{{', '.join(SHAPES)}}}; ROW, COL in 0..{GRID - 1}\n"
    "instruction := 'recolor' ROW COL 'to' COLOR | 'move' ROW COL 'to' ROW COL\n"
    "             | 'remove' ROW COL | 'add' COLOR SHAPE 'at' ROW COL"
)


@dataclass(frozen=True, order=True)
class Entity:
    row: int
    col: int
    shape: str
    color: str

    def __post_init__(self):
        if self.shape not in SHAPE_MASKS:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if not (0 <= self.row < GRID and 0 <= self.col < GRID):
            raise ValueError(f"cell ({self.row}, {self.col}) outside the {GRID}x{GRID} grid")

    @property
    def cell(self) -> tuple[int, int]:
        return self.row, self.col


@dataclass(frozen=True)
class SceneSpec:
    """Entities are kept in row-major cell order so equal scenes compare equal."""

    entities: tuple[Entity, ...] = field(default_factory=tuple)

    def __post_init__(self):
        ents = tuple(sorted(self.entities))
        cells = [e.cell for e in ents]
        if len(set(cells)) != len(cells):
            raise ValueError(f"overlapping cells in scene: {cells}")
        if len(ents) > MAX_ENTITIES:
            raise ValueError(f"at most {MAX_ENTITIES} entities per scene, got {len(ents)}")
        object.__setattr__(self, "entities", ents)

    @classmethod
    def of(cls, *items: tuple[str, str, int, int]) -> "SceneSpec":
        """Build from (color, shape, row, col) tuples."""
        return cls(tuple(Entity(r, c, shape, color) for color, shape, r, c in items))

    def at(self, row: int, col: int) -> Entity | None:
        for e in self.entities:
            if e.cell == (row, col):
                return e
        return None

    def __len__(self) -> int:
        return len(self.entities)


# -- rendering ----------------------------------------------------------------------
def render_scene(spec: SceneSpec) -> np.ndarray:
    image = np.full((CANVAS, CANVAS, 3), BACKGROUND, dtype=np.float32)
    for e in spec.entities:
        cell = image[e.row * CELL:(e.row + 1) * CELL, e.col * CELL:(e.col + 1) * CELL]
        cell[SHAPE_MASKS[e.shape]] = COLORS[e.color]
    return image


# -- captions -----------------------------------------------------------------------
def caption_of(spec: SceneSpec) -> list[int]:
    if not spec.entities:
        return [EMPTY]
    ids: list[int] = []
    for e in spec.entities:
        ids += [TOKEN_ID[e.color], TOKEN_ID[e.shape], AT, TOKEN_ID[str(e.row)], TOKEN_ID[str(e.col)]]
    return ids


def _digit(tok: int) -> int:
    word = VOCAB[tok]
    if not word.isdigit():
        raise GrammarError(f"expected a grid index, got {word!r}")
    return int(word)


def parse_caption(ids: Sequence[int]) -> SceneSpec:
    ids = list(ids)
    if ids == [EMPTY]:
        return SceneSpec()
    if not ids or len(ids) % 5:
        raise GrammarError(f"caption length {len(ids)} is not a multiple of 5\n{PROMPT_GRAMMAR}")
    items = []
    for i in range(0, len(ids), 5):
        color, shape, at, row, col = (VOCAB[t] for t in ids[i:i + 5])
        if color not in COLORS or shape not in SHAPES or at != "at":
            raise GrammarError(f"bad entity {color} {shape} {at} {row} {col}\n{PROMPT_GRAMMAR}")
        items.append((color, shape, _digit(ids[i + 3]), _digit(ids[i + 4])))
    try:
        return SceneSpec.of(*items)
    except ValueError as exc:
        raise GrammarError(str(exc)) from exc


def tokenize(text: str) -> list[int]:
    """Words to ids; commas and the word 'and' are ignored."""
    words = [w for w in re.split(r"[\s,]+", text.strip().lower()) if w and w != "and"]
    if words == ["empty"]:
        return [EMPTY]
    unknown = [w for w in words if w not in TOKEN_ID or w.startswith("<")]
    if unknown or not words:
        raise GrammarError(f"unparseable prompt {text!r} (unknown words: {unknown})\n{PROMPT_GRAMMAR}")
    return [TOKEN_ID[w] for w in words]


def parse_prompt(text: str) -> SceneSpec:
    return parse_caption(tokenize(text))


def detokenize(ids: Iterable[int]) -> str:
    return " ".join("empty" if t == EMPTY else VOCAB[t] for t in ids)


# -- editing ------------------------------------------------------------------------
@dataclass(frozen=True)
class EditPair:
    source: SceneSpec
    instruction: tuple[int, ...]
    target: SceneSpec


def apply_instruction(instruction: Sequence[int], spec: SceneSpec) -> SceneSpec:
    words = [VOCAB[t] for t in instruction]
    if not words or words[0] not in EDIT_OPS:
        raise GrammarError(f"instruction must start with one of {EDIT_OPS}\n{PROMPT_GRAMMAR}")
    op = words[0]
    try:
        if op == "add":
            if len(words) != 6 or words[3] != "at":
                raise GrammarError(f"bad add instruction {words}")
            new = Entity(int(words[4]), int(words[5]), words[2], words[1])
            if spec.at(*new.cell):
                raise GrammarError(f"cell {new.cell} already occupied")
            return SceneSpec(spec.entities + (new,))
        row, col = int(words[1]), int(words[2])
        old = spec.at(row, col)
        if old is None:
            raise GrammarError(f"no entity at ({row}, {col})")
        rest = tuple(e for e in spec.entities if e is not old)
        if op == "remove" and len(words) == 3:
            return SceneSpec(rest)
        if op == "recolor" and len(words) == 5 and words[3] == "to":
            return SceneSpec(rest + (Entity(row, col, old.shape, words[4]),))
        if op == "move" and len(words) == 6 and words[3] == "to":
            dest = (int(words[4]), int(words[5]))
            if spec.at(*dest):
                raise GrammarError(f"cell {dest} already occupied")
            return SceneSpec(rest + (Entity(dest[0], dest[1], old.shape, old.color),))
    except ValueError as exc:
        if isinstance(exc, GrammarError):
            raise
        raise GrammarError(f"{exc}\n{PROMPT_GRAMMAR}") from exc
    raise GrammarError(f"malformed {op} instruction {words}\n{PROMPT_GRAMMAR}")


# -- latent codec ---------------------------------------------------------------------
CODEC_PATCH = 2
CODEC_CHANNELS = CODEC_PATCH * CODEC_PATCH * 3
LATENT_SHAPE = (CANVAS // CODEC_PATCH, CANVAS // CODEC_PATCH, CODEC_CHANNELS)
_CODEC_SEED = 1234


def _codec_matrix() -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(_CODEC_SEED).normal(size=(CODEC_CHANNELS, CODEC_CHANNELS)))
    return q * np.sign(np.diag(r))


CODEC = _codec_matrix()


def encode_latent(image: np.ndarray) -> np.ndarray:
    """(..., 32, 32, 3) image -> (..., 16, 16, 12) latent via a fixed orthogonal patch map."""
    image = np.asarray(image, dtype=np.float64)
    *lead, h, w, ch = image.shape
    p = CODEC_PATCH
    patches = image.reshape(*lead, h // p, p, w // p, p, ch)
    patches = np.moveaxis(patches, -4, -3).reshape(*lead, h // p, w // p, p * p * ch)
    return (patches @ CODEC).astype(np.float32)


def decode_latent(latent: np.ndarray) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    *lead, hp, wp, _ = latent.shape
    p = CODEC_PATCH
    patches = (latent @ CODEC.T).reshape(*lead, hp, wp, p, p, 3)
    return np.moveaxis(patches, -3, -4).reshape(*lead, hp * p, wp * p, 3).astype(np.float32)


# Codec latents sit at ~0.13 std around large per-channel offsets; the flow works on
# standardized latents so data and noise have comparable scale.
_STATS_SEED, _STATS_SIZE = 4321, 2048


@functools.cache
def latent_statistics() -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (mean, std) of codec latents over a fixed reference dataset."""
    rng = np.random.default_rng(_STATS_SEED)
    z = np.stack([encode_latent(render_scene(random_scene(rng))) for _ in range(_STATS_SIZE)]).astype(np.float64)
    return z.mean(axis=(0, 1, 2)), z.std(axis=(0, 1, 2))


def normalize_latent(latent: np.ndarray) -> np.ndarray:
    mean, std = latent_statistics()
    return ((np.asarray(latent, dtype=np.float64) - mean) / std).astype(np.float32)


def denormalize_latent(z: np.ndarray) -> np.ndarray:
    mean, std = latent_statistics()
    return (np.asarray(z, dtype=np.float64) * std + mean).astype(np.float32)


def image_to_flow(image: np.ndarray) -> np.ndarray:
    return normalize_latent(encode_latent(image))


def flow_to_image(z: np.ndarray) -> np.ndarray:
    return np.clip(decode_latent(denormalize_latent(z)), 0.0, 1.0)


# -- datasets -------------------------------------------------------------------------
@dataclass(frozen=True)
class Sample:
    spec: SceneSpec
    caption: tuple[int, ...]
    latent: np.ndarray = field(compare=False, repr=False)

    def __iter__(self):
        # unpacks as (caption, latent)
        return iter((self.caption, self.latent))


def random_scene(rng: np.random.Generator, count: int | None = None) -> SceneSpec:
    count = int(rng.integers(1, MAX_ENTITIES + 1)) if count is None else count
    cells = rng.choice(GRID * GRID, size=count, replace=False)
    return SceneSpec(tuple(
        Entity(int(c) // GRID, int(c) % GRID, SHAPES[rng.integers(len(SHAPES))],
               tuple(COLORS)[rng.integers(len(COLORS))])
        for c in cells))


def make_sample(spec: SceneSpec) -> Sample:
    return Sample(spec, tuple(caption_of(spec)), encode_latent(render_scene(spec)))


def make_dataset(seed: int, size: int) -> list[Sample]:
    if size < 1:
        raise ValueError("dataset size must be >= 1")
    rng = np.random.default_rng(seed)
    return [make_sample(random_scene(rng)) for _ in range(size)]


def random_edit(rng: np.random.Generator) -> EditPair:
    op = EDIT_OPS[rng.integers(len(EDIT_OPS))]
    while True:
        source = random_scene(rng)
        occupied = [e.cell for e in source.entities]
        free = [(r, c) for r in range(GRID) for c in range(GRID) if (r, c) not in occupied]
        if op == "add" and len(source) < MAX_ENTITIES:
            r, c = free[rng.integers(len(free))]
            color = tuple(COLORS)[rng.integers(len(COLORS))]
            shape = SHAPES[rng.integers(len(SHAPES))]
            words = ["add", color, shape, "at", str(r), str(c)]
        elif op == "remove" and len(source) > 1:
            r, c = occupied[rng.integers(len(occupied))]
            words = ["remove", str(r), str(c)]
        elif op == "recolor":
            r, c = occupied[rng.integers(len(occupied))]
            others = [k for k in COLORS if k != source.at(r, c).color]
            words = ["recolor", str(r), str(c), "to", others[rng.integers(len(others))]]
        elif op == "move":
            r, c = occupied[rng.integers(len(occupied))]
            r2, c2 = free[rng.integers(len(free))]
            words = ["move", str(r), str(c), "to", str(r2), str(c2)]
        else:
            continue
        instruction = tuple(TOKEN_ID[w] for w in words)
        return EditPair(source, instruction, apply_instruction(instruction, source))


def make_edit_dataset(seed: int, size: int) -> list[EditPair]:
    if size < 1:
        raise ValueError("dataset size must be >= 1")
    rng = np.random.default_rng(seed)
    return [random_edit(rng) for _ in range(size)]


# -- scoring --------------------------------------------------------------------------
def entity_scores(image: np.ndarray, entity: Entity) -> tuple[float, float]:
    """(colour distance, mask correlation) of one entity's cell in ``image``."""
    cell = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)[
        entity.row * CELL:(entity.row + 1) * CELL, entity.col * CELL:(entity.col + 1) * CELL]
    mask = SHAPE_MASKS[entity.shape]
    target = np.array(COLORS[entity.color])
    color_distance = float(np.linalg.norm(cell[mask].mean(axis=0) - target) / np.sqrt(3))
    foreground = np.linalg.norm(cell - BACKGROUND, axis=-1) / _FOREGROUND_SCALE
    f, m = foreground.ravel(), mask.ravel().astype(np.float64)
    if f.std() < 1e-12:
        return color_distance, 0.0
    return color_distance, float(np.corrcoef(f, m)[0, 1])


def alignment_score(image: np.ndarray, spec: SceneSpec) -> float:
    """Fraction of entities whose colour and shape are both recognisable in their cell.

    An empty spec scores 1.0 when the canvas is background-only within the colour
    threshold, else 0.0.
    """
    if not spec.entities:
        dist = np.linalg.norm(np.clip(image, 0, 1) - BACKGROUND, axis=-1).mean() / np.sqrt(3)
        return float(dist < COLOR_DISTANCE_MAX)
    hits = 0
    for e in spec.entities:
        dist, corr = entity_scores(image, e)
        hits += dist < COLOR_DISTANCE_MAX and corr > MASK_CORRELATION_MIN
    return hits / len(spec.entities)


# -- file formats ---------------------------------------------------------------------
def write_ppm(path: str | Path, image: np.ndarray) -> None:
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w, _ = pixels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def _read_netpbm(path: str | Path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    body = raw[pos + 1:pos + 1 + w * h * channels]
    if len(body) != w * h * channels:
        raise ValueError(f"{path}: pixel data truncated")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return np.frombuffer(body, dtype=np.uint8).reshape(shape).astype(np.float32) / 255.0


def read_ppm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Grayscale heatmap; ``values`` in [0, 1] map linearly to 0..255."""
    pixels = np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


# Dataset cache: 16-byte header <4s magic><u32 version><u64 count>, then records.
_TEXT_MAGIC, _EDIT_MAGIC, _CACHE_VERSION = b"MOSD", b"MOSE", 1
_HEADER = struct.Struct("<4sIQ")


def save_dataset(path: str | Path, samples: Sequence[Sample]) -> None:
    """Record: <u32 n_tokens><u8 tokens...><f32 latent 16x16x12>."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_TEXT_MAGIC, _CACHE_VERSION, len(samples)))
        for s in samples:
            fh.write(struct.pack("<I", len(s.caption)) + bytes(s.caption))
            fh.write(np.ascontiguousarray(s.latent, dtype="<f4").tobytes())


def load_dataset(path: str | Path) -> list[Sample]:
    raw = Path(path).read_bytes()
    magic, version, count = _HEADER.unpack_from(raw)
    if magic != _TEXT_MAGIC or version != _CACHE_VERSION:
        raise ValueError(f"{path}: not a v{_CACHE_VERSION} caption dataset")
    pos, out = _HEADER.size, []
    nbytes = int(np.prod(LATENT_SHAPE)) * 4
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        caption = tuple(raw[pos + 4:pos + 4 + n])
        pos += 4 + n
        latent = np.frombuffer(raw[pos:pos + nbytes], dtype="<f4").reshape(LATENT_SHAPE).astype(np.float32)
        pos += nbytes
        out.append(Sample(parse_caption(caption), caption, latent))
    return out


def save_edit_dataset(path: str | Path, pairs: Sequence[EditPair]) -> None:
    """Record: three <u32 n><u8 tokens...> blocks (source caption, instruction, target caption)."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_EDIT_MAGIC, _CACHE_VERSION, len(pairs)))
        for p in pairs:
            for ids in (caption_of(p.source), p.instruction, caption_of(p.target)):
                fh.write(struct.pack("<I", len(ids)) + bytes(ids))


def load_edit_dataset(path: str | Path) -> list[EditPair]:
    raw = Path(path).read_bytes()
    magic, version, count = _HEADER.unpack_from(raw)
    if magic != _EDIT_MAGIC or version != _CACHE_VERSION:
        raise ValueError(f"{path}: not a v{_CACHE_VERSION} edit dataset")
    pos, out = _HEADER.size, []
    for _ in range(count):
        blocks = []
        for _ in range(3):
            (n,) = struct.unpack_from("<I", raw, pos)
            blocks.append(tuple(raw[pos + 4:pos + 4 + n]))
            pos += 4 + n
        out.append(EditPair(parse_caption(blocks[0]), blocks[1], parse_caption(blocks[2])))
    return out
