"""Raster rendering for synthetic page elements.

Patches are H x W x 3 uint8 arrays on a white background. Text uses the
embedded bitmap font; figures and tables are procedural graphics driven
by a seeded RNG, so every patch is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError
from ..geometry import Box
from . import font

WHITE = 255
INK = (0, 0, 0)

PAD = 1  # blank border inside every text patch, in glyph-scale units

_FIGURE_PALETTE = (
    (31, 96, 160),
    (178, 60, 44),
    (44, 130, 68),
    (150, 100, 30),
    (90, 70, 140),
    (40, 40, 40),
)


@dataclass(frozen=True)
class TextStyle:
    scale: int = 1
    bullets: bool = False

    @property
    def line_height(self) -> int:
        return font.LINE_HEIGHT * self.scale

    @property
    def pad(self) -> int:
        return PAD * self.scale


BODY = TextStyle()
HEADING = TextStyle(scale=2)
LIST = TextStyle(bullets=True)

_BULLET_INDENT = 2 * font.ADVANCE  # glyph columns reserved for the bullet


def blank_patch(height: int, width: int) -> np.ndarray:
    return np.full((height, width, 3), WHITE, dtype=np.uint8)


def draw_glyph(canvas: np.ndarray, x: int, y: int, char: str, scale: int,
               color=INK):
    """Paint one glyph; returns the tight box of painted pixels or None."""
    bitmap = font.glyph(char)
    if not bitmap.any():
        return None
    mask = np.repeat(np.repeat(bitmap, scale, axis=0), scale, axis=1)
    h, w = mask.shape
    canvas[y:y + h, x:x + w][mask] = color
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(x + cols[0], y + rows[0], x + cols[-1] + 1, y + rows[-1] + 1)


def draw_text(canvas: np.ndarray, x: int, y: int, text: str, scale: int,
              color=INK):
    """Paint a line of text; returns the tight box over painted pixels."""
    bounds = None
    for i, char in enumerate(text):
        b = draw_glyph(canvas, x + i * font.ADVANCE * scale, y, char, scale, color)
        if b is None:
            continue
        if bounds is None:
            bounds = b
        else:
            bounds = Box(min(bounds.x0, b.x0), min(bounds.y0, b.y0),
                         max(bounds.x1, b.x1), max(bounds.y1, b.y1))
    return bounds


def wrap_words(text: str, width_chars: int) -> list[str]:
    """Greedy word wrap; overlong words are split hard at the width."""
    if width_chars < 1:
        raise InputError(f"cannot wrap text into {width_chars} columns")
    lines: list[str] = []
    current = ""
    for word in text.split():
        while len(word) > width_chars:
            if current:
                lines.append(current)
                current = ""
            lines.append(word[:width_chars])
            word = word[width_chars:]
        if not word:
            continue
        if not current:
            current = word
        elif len(current) + 1 + len(word) <= width_chars:
            current += " " + word
        else:
            lines.append(current)
            current = word
    if current:
        lines.append(current)
    return lines


def _layout(sentences: list[str], width: int, style: TextStyle) -> list[list[str]]:
    """Wrapped lines per sentence; each sentence starts on a fresh line.

    Keeping sentences on separate lines keeps their tight pixel boxes
    disjoint, which the embedding map builder requires.
    """
    indent = _BULLET_INDENT * style.scale if style.bullets else 0
    inner = width - 2 * style.pad - indent
    width_chars = (inner + style.scale) // (font.ADVANCE * style.scale)
    if width_chars < 1:
        raise InputError(f"text box width {width} too small at scale {style.scale}")
    return [wrap_words(s, width_chars) for s in sentences]


def text_block_height(sentences: list[str], width: int, style: TextStyle) -> int:
    """Patch height that fits every sentence, including padding."""
    lines = sum(len(wrapped) for wrapped in _layout(sentences, width, style))
    return max(1, lines) * style.line_height + 2 * style.pad


def render_text_block(sentences: list[str], box: Box, style: TextStyle):
    """Render sentences into a patch sized to the box.

    Returns (patch, records) where records are (sentence, tight box)
    pairs in patch coordinates. Sentences that do not fully fit the
    remaining height are dropped whole; a box too narrow for a single
    glyph column is an error.
    """
    if box.height < style.line_height + 2 * style.pad:
        raise InputError(f"text box {box.as_tuple()} shorter than one line")
    per_sentence = _layout(sentences, box.width, style)
    patch = blank_patch(box.height, box.width)
    records = []
    indent = _BULLET_INDENT * style.scale if style.bullets else 0
    y = style.pad
    limit = box.height - style.pad
    for sentence, lines in zip(sentences, per_sentence):
        needed = len(lines) * style.line_height
        if y + needed > limit:
            break
        if style.bullets:
            draw_glyph(patch, style.pad, y, font.BULLET, style.scale)
        bounds = None
        for line in lines:
            b = draw_text(patch, style.pad + indent, y, line, style.scale)
            y += style.line_height
            if b is None:
                continue
            if bounds is None:
                bounds = b
            else:
                bounds = Box(min(bounds.x0, b.x0), min(bounds.y0, b.y0),
                             max(bounds.x1, b.x1), max(bounds.y1, b.y1))
        if bounds is not None:
            records.append((sentence, bounds))
    return patch, records


def _grid_from_rng(rng, box: Box):
    max_rows = max(2, min(5, box.height // 14))
    max_cols = max(2, min(4, box.width // 22))
    rows = int(rng.integers(2, max_rows + 1))
    cols = int(rng.integers(2, max_cols + 1))
    ys = [round(i * (box.height - 1) / rows) for i in range(rows + 1)]
    xs = [round(j * (box.width - 1) / cols) for j in range(cols + 1)]
    return ys, xs


def table_grid(seed, box: Box):
    """Row/column line coordinates the table renderer will use.

    Lines evenly divide the box within rounding; cell size floors keep
    glyphs legible, so small boxes get fewer rows and columns.
    """
    return _grid_from_rng(np.random.default_rng(seed), box)


def render_table(seed, box: Box) -> np.ndarray:
    if box.height < 24 or box.width < 24:
        raise InputError(f"table box {box.as_tuple()} below minimum size")
    rng = np.random.default_rng(seed)
    ys, xs = _grid_from_rng(rng, box)
    patch = blank_patch(box.height, box.width)
    for y in ys:
        patch[y, xs[0]:xs[-1] + 1] = 0
    for x in xs:
        patch[ys[0]:ys[-1] + 1, x] = 0
    alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
    for r in range(len(ys) - 1):
        for c in range(len(xs) - 1):
            cell_w = xs[c + 1] - xs[c]
            cell_h = ys[r + 1] - ys[r]
            room = (cell_w - 4) // font.ADVANCE
            if room < 1 or cell_h < font.GLYPH_HEIGHT + 4:
                continue
            count = int(rng.integers(1, min(3, room) + 1))
            text = "".join(alphabet[rng.integers(0, len(alphabet))]
                           for _ in range(count))
            ty = ys[r] + (cell_h - font.GLYPH_HEIGHT) // 2
            draw_text(patch, xs[c] + 3, ty, text, scale=1)
    return patch


def render_figure(seed, box: Box) -> np.ndarray:
    if box.height < 24 or box.width < 24:
        raise InputError(f"figure box {box.as_tuple()} below minimum size")
    rng = np.random.default_rng(seed)
    h, w = box.height, box.width
    patch = blank_patch(h, w)
    yy, xx = np.mgrid[0:h, 0:w]

    # gradient band over the lower third anchors the non-background census
    band_top = (2 * h) // 3
    shade = np.linspace(120, 230, w, dtype=np.float64)
    tint = _FIGURE_PALETTE[int(rng.integers(0, len(_FIGURE_PALETTE)))]
    for ch in range(3):
        patch[band_top:, :, ch] = (shade * tint[ch] / 255.0).astype(np.uint8)

    for _ in range(int(rng.integers(2, 5))):
        color = _FIGURE_PALETTE[int(rng.integers(0, len(_FIGURE_PALETTE)))]
        kind = int(rng.integers(0, 3))
        if kind == 0:  # filled rectangle
            x0 = int(rng.integers(0, w - 8))
            y0 = int(rng.integers(0, h - 8))
            x1 = int(rng.integers(x0 + 4, min(w, x0 + w // 2) + 1))
            y1 = int(rng.integers(y0 + 4, min(h, y0 + h // 2) + 1))
            patch[y0:y1, x0:x1] = color
        elif kind == 1:  # filled disc
            r = int(rng.integers(4, max(5, min(h, w) // 4)))
            cx = int(rng.integers(r, w - r))
            cy = int(rng.integers(r, h - r))
            disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            patch[disc] = color
        else:  # jagged polyline, drawn as thick column segments
            n = int(rng.integers(4, 9))
            pts_x = np.sort(rng.integers(0, w, size=n))
            pts_y = rng.integers(0, h, size=n)
            for i in range(n - 1):
                x0, x1 = int(pts_x[i]), int(pts_x[i + 1])
                if x1 <= x0:
                    continue
                y_line = np.linspace(pts_y[i], pts_y[i + 1], x1 - x0)
                for dx, yv in enumerate(y_line):
                    yi = int(round(float(yv)))
                    patch[max(0, yi - 1):min(h, yi + 2), x0 + dx] = color

    # frame
    patch[0:2, :] = 40
    patch[-2:, :] = 40
    patch[:, 0:2] = 40
    patch[:, -2:] = 40
    return patch
