"""Synthetic page generation.

A page is built by choosing a column layout, then repeatedly drawing an
element class and packing a fresh instance into the emptiest column
until no column can hold even a single text line. Everything downstream
of the seed is deterministic, so a page is a pure function of
(seed, config digest).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import ConfigError, InputError
from ..geometry import Box
from . import render
from .render import BODY, HEADING, LIST, TextStyle

CLASS_NAMES = ("background", "figure", "table", "section_heading",
               "caption", "list", "paragraph")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
TEXT_CLASSES = ("section_heading", "caption", "list", "paragraph")
ELEMENT_CLASSES = CLASS_NAMES[1:]

_MIN_ELEMENT_HEIGHT = render.BODY.line_height + 2 * render.BODY.pad
_MIN_GRAPHIC = 24


@dataclass(frozen=True)
class GeneratorConfig:
    page_width: int = 384
    page_height: int = 512
    margin: int = 8
    gutter: int = 12
    element_gap: int = 6
    column_types: tuple = ("single", "double", "triple")
    element_classes: tuple = ELEMENT_CLASSES
    span_columns: bool = False
    attach_captions: bool = True
    paragraph_sentences: tuple = (2, 6)
    list_items: tuple = (2, 5)
    caption_sentences: tuple = (1, 2)
    figure_height: tuple = (60, 160)
    table_height: tuple = (40, 110)
    uniform_text_style: bool = False
    text_sources: tuple = ()  # ((class_name, path), ...) overrides
    max_elements: int = 40

    def __post_init__(self):
        coerce = {
            "column_types": tuple(self.column_types),
            "element_classes": tuple(self.element_classes),
            "paragraph_sentences": tuple(self.paragraph_sentences),
            "list_items": tuple(self.list_items),
            "caption_sentences": tuple(self.caption_sentences),
            "figure_height": tuple(self.figure_height),
            "table_height": tuple(self.table_height),
            "text_sources": tuple(
                (str(c), str(p)) for c, p in
                (self.text_sources.items() if isinstance(self.text_sources, dict)
                 else self.text_sources)
            ),
        }
        for name, value in coerce.items():
            object.__setattr__(self, name, value)
        if self.page_width < 48 or self.page_height < 48:
            raise ConfigError(f"page {self.page_width}x{self.page_height} too small")
        for ctype in self.column_types:
            if ctype not in ("single", "double", "triple"):
                raise ConfigError(f"unknown column type {ctype!r}")
        for cls in self.element_classes:
            if cls not in ELEMENT_CLASSES:
                raise ConfigError(f"unknown element class {cls!r}")
        for cls, _ in self.text_sources:
            if cls not in TEXT_CLASSES:
                raise ConfigError(f"text source override for non-text class {cls!r}")
        if not self.column_types or not self.element_classes:
            raise ConfigError("column_types and element_classes must be non-empty")


def _data_root():
    return resources.files("docseg.synth") / "data"


def _read_lines(path) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read corpus file {path}: {exc}") from exc
    return [line.strip() for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class Corpora:
    """Per-class text pools; each pool is a list of documents."""
    pools: dict

    def documents(self, cls: str) -> list[list[str]]:
        return self.pools[cls]


def load_corpora(config: GeneratorConfig) -> Corpora:
    root = _data_root()
    overrides = dict(config.text_sources)
    pools = {}
    paragraph_docs = None
    for cls in TEXT_CLASSES:
        if cls in overrides:
            pools[cls] = [_read_lines(Path(overrides[cls]))]
        elif cls == "section_heading":
            pools[cls] = [_read_lines(root / "headings.txt")]
        elif cls == "caption":
            pools[cls] = [_read_lines(root / "captions.txt")]
        else:
            if paragraph_docs is None:
                para_dir = root / "corpus" / "paragraphs"
                names = sorted(p.name for p in para_dir.iterdir()
                               if p.name.endswith(".txt"))
                paragraph_docs = [_read_lines(para_dir / n) for n in names]
            pools[cls] = paragraph_docs
    for cls, docs in pools.items():
        if not docs or not any(docs):
            raise InputError(f"empty text pool for class {cls!r}")
    return Corpora(pools)


def config_digest(config: GeneratorConfig) -> str:
    """Digest over config values with text sources replaced by content hashes.

    Hashing file contents (bundled defaults included) makes the digest
    identify the corpus actually used, not where it happened to live.
    """
    payload = {f.name: getattr(config, f.name) for f in fields(config)}
    corpora = load_corpora(config)
    payload["corpus_hashes"] = {
        cls: [hashlib.sha256("\n".join(doc).encode("utf-8")).hexdigest()
              for doc in corpora.documents(cls)]
        for cls in sorted(corpora.pools)
    }
    payload.pop("text_sources")
    blob = json.dumps(payload, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PageSentence:
    text: str
    box: Box


@dataclass
class DocumentPage:
    image: np.ndarray  # 3 x H x W uint8
    mask: np.ndarray   # H x W uint8
    elements: list     # (class_name, Box)
    sentences: list    # PageSentence
    column_type: str
    column_spans: tuple
    warnings: list


# ---------------------------------------------------------------------------
# element construction
# ---------------------------------------------------------------------------

def _style_for(cls: str, config: GeneratorConfig) -> TextStyle:
    if config.uniform_text_style:
        return BODY
    if cls == "section_heading":
        return HEADING
    if cls == "list":
        return LIST
    return BODY


def _sample_sentences(rng, corpora: Corpora, cls: str, config: GeneratorConfig):
    docs = corpora.documents(cls)
    doc = docs[int(rng.integers(0, len(docs)))]
    if cls == "section_heading" and not config.uniform_text_style:
        lo, hi = 1, 1
    elif cls == "caption":
        lo, hi = config.caption_sentences
    elif cls == "list" and not config.uniform_text_style:
        lo, hi = config.list_items
    else:
        lo, hi = config.paragraph_sentences
    count = int(rng.integers(lo, hi + 1))
    count = min(count, len(doc))
    start = int(rng.integers(0, len(doc) - count + 1))
    return doc[start:start + count]


def _fit_sentences(sentences, width, style, max_height):
    """Trim trailing sentences until the block fits; None if none fit."""
    kept = list(sentences)
    while kept:
        if render.text_block_height(kept, width, style) <= max_height:
            return kept
        kept.pop()
    return None


def _build_text(rng, corpora, cls, width, max_height, config):
    style = _style_for(cls, config)
    if width <= 2 * style.pad + render.font.ADVANCE * style.scale:
        return None
    sentences = _sample_sentences(rng, corpora, cls, config)
    kept = _fit_sentences(sentences, width, style, max_height)
    if kept is None:
        return None
    height = render.text_block_height(kept, width, style)
    patch, records = render.render_text_block(kept, Box(0, 0, width, height), style)
    return patch, records, height


def _element_seed(rng) -> int:
    return int(rng.integers(0, 2 ** 63 - 1))


def _build_graphic(rng, cls, col_width, max_height, config):
    lo, hi = config.figure_height if cls == "figure" else config.table_height
    height = int(rng.integers(lo, hi + 1))
    height = min(height, max_height)
    width = int(col_width * rng.uniform(0.7, 1.0))
    if height < _MIN_GRAPHIC or width < _MIN_GRAPHIC:
        return None
    seed = _element_seed(rng)
    box = Box(0, 0, width, height)
    patch = (render.render_figure(seed, box) if cls == "figure"
             else render.render_table(seed, box))
    offset = (col_width - width) // 2
    return patch, offset, height


# ---------------------------------------------------------------------------
# page assembly
# ---------------------------------------------------------------------------

def _column_spans(config: GeneratorConfig, column_type: str) -> tuple:
    n = {"single": 1, "double": 2, "triple": 3}[column_type]
    inner = config.page_width - 2 * config.margin
    col_w = (inner - (n - 1) * config.gutter) // n
    if col_w < _MIN_GRAPHIC:
        raise ConfigError(f"{column_type} columns too narrow on a "
                          f"{config.page_width}px page")
    spans = []
    for i in range(n):
        x0 = config.margin + i * (col_w + config.gutter)
        spans.append((x0, x0 + col_w))
    return tuple(spans)


class _PageBuilder:
    def __init__(self, height: int, width: int):
        self.canvas = np.full((height, width, 3), render.WHITE, dtype=np.uint8)
        self.mask = np.zeros((height, width), dtype=np.uint8)
        self.elements = []
        self.sentences = []
        self.warnings = []

    def paste(self, cls, patch, x, y, records=()):
        h, w = patch.shape[:2]
        box = Box(x, y, x + w, y + h)
        self.canvas[y:y + h, x:x + w] = patch
        self.mask[y:y + h, x:x + w] = CLASS_INDEX[cls]
        self.elements.append((cls, box))
        for text, rec_box in records:
            self.sentences.append(PageSentence(text, rec_box.translated(x, y)))
        return box

    def finish(self, column_type, column_spans) -> DocumentPage:
        return DocumentPage(
            image=np.ascontiguousarray(self.canvas.transpose(2, 0, 1)),
            mask=self.mask,
            elements=self.elements,
            sentences=self.sentences,
            column_type=column_type,
            column_spans=tuple(column_spans),
            warnings=self.warnings,
        )


def generate_page(seed, config: GeneratorConfig) -> DocumentPage:
    """Lay out and render one page; deterministic in (seed, config)."""
    corpora = load_corpora(config)
    rng = np.random.default_rng(seed)
    column_type = str(rng.choice(np.array(config.column_types)))
    spans = _column_spans(config, column_type)
    builder = _PageBuilder(config.page_height, config.page_width)

    bottom = config.page_height - config.margin
    cursors = [config.margin] * len(spans)
    attempts = 0

    while len(builder.elements) < config.max_elements and attempts < 200:
        open_cols = [i for i in range(len(spans))
                     if bottom - cursors[i] >= _MIN_ELEMENT_HEIGHT]
        if not open_cols:
            break
        attempts += 1
        col = min(open_cols, key=lambda i: (cursors[i], i))
        x0, x1 = spans[col]
        remaining = bottom - cursors[col]
        cls = str(rng.choice(np.array(config.element_classes)))

        span_wide = (
            config.span_columns and cls in ("figure", "table")
            and len(spans) > 1 and all(c == config.margin for c in cursors)
            and rng.random() < 0.5
        )
        if span_wide:
            x0, x1 = spans[0][0], spans[-1][1]
            remaining = bottom - config.margin

        width = x1 - x0
        if cls in ("figure", "table"):
            built = _build_graphic(rng, cls, width, remaining, config)
            if built is None:
                continue
            patch, offset, _ = built
            box = builder.paste(cls, patch, x0 + offset, cursors[col])

            def advance(to_y):
                nonlocal cursors
                if span_wide:
                    cursors = [to_y + config.element_gap] * len(spans)
                else:
                    cursors[col] = to_y + config.element_gap

            advance(box.y1)
            cap_top = cursors[0] if span_wide else cursors[col]
            if config.attach_captions and rng.random() < 0.7:
                cap = _build_text(rng, corpora, "caption", box.width,
                                  bottom - cap_top, config)
                if cap is not None:
                    cpatch, crecords, _ = cap
                    cbox = builder.paste("caption", cpatch, box.x0, cap_top,
                                         crecords)
                    advance(cbox.y1)
        else:
            built = _build_text(rng, corpora, cls, width, remaining, config)
            if built is None:
                continue
            patch, records, _ = built
            box = builder.paste(cls, patch, x0, cursors[col], records)
            cursors[col] = box.y1 + config.element_gap

    return builder.finish(column_type, spans)


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TemplateLayout:
    page_width: int
    page_height: int
    slots: tuple  # (class_name, Box)


def load_template(path) -> TemplateLayout:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read template {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"template {path} is not valid JSON: {exc}") from exc
    try:
        width, height = (int(v) for v in raw["page"])
        slots = tuple((str(s["class"]), Box.from_tuple(s["box"]))
                      for s in raw["slots"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"template {path} has malformed fields: {exc}") from exc
    for cls, box in slots:
        if cls not in ELEMENT_CLASSES:
            raise InputError(f"template slot class {cls!r} unknown")
        if not box.within(width, height):
            raise InputError(f"template slot {box.as_tuple()} outside page")
    for i, (_, a) in enumerate(slots):
        for _, b in slots[i + 1:]:
            if a.intersects(b):
                raise InputError(
                    f"template slots {a.as_tuple()} and {b.as_tuple()} overlap")
    return TemplateLayout(width, height, slots)


def bundled_template(name: str) -> TemplateLayout:
    return load_template(_data_root() / "templates" / f"{name}.json")


def generate_from_template(template: TemplateLayout, seed,
                           config: GeneratorConfig) -> DocumentPage:
    """Fill each template slot with fresh content of the slot's class."""
    corpora = load_corpora(config)
    rng = np.random.default_rng(seed)
    builder = _PageBuilder(template.page_height, template.page_width)
    for cls, slot in template.slots:
        if cls in ("figure", "table"):
            if slot.width < _MIN_GRAPHIC or slot.height < _MIN_GRAPHIC:
                builder.warnings.append(
                    f"slot {slot.as_tuple()} too small for {cls}; skipped")
                continue
            seed_i = _element_seed(rng)
            patch = (render.render_figure(seed_i, Box(0, 0, slot.width, slot.height))
                     if cls == "figure"
                     else render.render_table(seed_i, Box(0, 0, slot.width, slot.height)))
            builder.paste(cls, patch, slot.x0, slot.y0)
        else:
            style = _style_for(cls, config)
            sentences = _sample_sentences(rng, corpora, cls, config)
            kept = _fit_sentences(sentences, slot.width, style, slot.height)
            if kept is None:
                builder.warnings.append(
                    f"slot {slot.as_tuple()} too small for {cls}; skipped")
                continue
            patch, records = render.render_text_block(
                kept, Box(0, 0, slot.width, slot.height), style)
            builder.paste(cls, patch, slot.x0, slot.y0, records)
    return builder.finish("template", ())


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------

def audit_page(page: DocumentPage, span_columns: bool = False) -> list[str]:
    """Brute-force consistency audit; returns human-readable violations."""
    violations = []
    height, width = page.mask.shape
    occupancy = np.zeros((height, width), dtype=np.int32)
    expected = np.zeros((height, width), dtype=np.uint8)
    for cls, box in page.elements:
        if cls not in CLASS_INDEX:
            violations.append(f"element class {cls!r} unknown")
            continue
        if not box.within(width, height):
            violations.append(f"element box {box.as_tuple()} outside page")
            continue
        occupancy[box.y0:box.y1, box.x0:box.x1] += 1
        expected[box.y0:box.y1, box.x0:box.x1] = CLASS_INDEX[cls]
    overlap = int((occupancy > 1).sum())
    if overlap:
        violations.append(f"{overlap} pixels covered by more than one element box")
    elif not np.array_equal(page.mask, expected):
        bad = int((page.mask != expected).sum())
        violations.append(f"{bad} mask pixels disagree with element boxes")

    text_boxes = [(cls, box) for cls, box in page.elements if cls in TEXT_CLASSES]
    sentence_occupancy = np.zeros((height, width), dtype=np.int32)
    for record in page.sentences:
        box = record.box
        if not box.within(width, height):
            violations.append(f"sentence box {box.as_tuple()} outside page")
            continue
        sentence_occupancy[box.y0:box.y1, box.x0:box.x1] += 1
        owners = sum(1 for _, eb in text_boxes if eb.contains(box))
        if owners != 1:
            violations.append(
                f"sentence box {box.as_tuple()} contained in {owners} text elements")
    overlap = int((sentence_occupancy > 1).sum())
    if overlap:
        violations.append(f"{overlap} pixels covered by more than one sentence box")

    if page.column_spans:
        for cls, box in page.elements:
            if span_columns and cls in ("figure", "table"):
                continue
            inside = any(x0 <= box.x0 and box.x1 <= x1
                         for x0, x1 in page.column_spans)
            if not inside:
                violations.append(
                    f"{cls} box {box.as_tuple()} crosses a column gutter")
    return violations


def class_presence(pages: list[DocumentPage]) -> dict[str, float]:
    """Fraction of pages in which each element class appears."""
    counts = {cls: 0 for cls in ELEMENT_CLASSES}
    for page in pages:
        present = {cls for cls, _ in page.elements}
        for cls in present:
            counts[cls] += 1
    total = max(1, len(pages))
    return {cls: counts[cls] / total for cls in ELEMENT_CLASSES}
