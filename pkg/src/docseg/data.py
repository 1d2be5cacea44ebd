"""Dataset directory io and label-side preprocessing.

A dataset is a flat `pages/` directory holding, per page index NNNNNN,
an RGB raster `NNNNNN.img.png`, an optional single-channel label mask
`NNNNNN.mask.png` (class indices), and `NNNNNN.sidecar.json` carrying
element boxes, sentence records, and provenance. Pages without masks are
"real" pages: their boxes still feed the consistency loss even though no
per-pixel labels exist.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .geometry import Box
from .synth.generate import DocumentPage, PageSentence

IGNORE_LABEL = 255


@dataclass
class PageRecord:
    index: int
    image: np.ndarray          # 3 x H x W uint8
    mask: np.ndarray | None    # H x W uint8, None for unlabeled pages
    elements: list             # (class_name, Box)
    sentences: list            # PageSentence
    sidecar: dict


def _names(index: int) -> tuple[str, str, str]:
    stem = f"{index:06d}"
    return f"{stem}.img.png", f"{stem}.mask.png", f"{stem}.sidecar.json"


def save_page(dataset_dir, index: int, page: DocumentPage, *,
              provenance: dict | None = None, write_mask: bool = True) -> None:
    pages_dir = Path(dataset_dir) / "pages"
    pages_dir.mkdir(parents=True, exist_ok=True)
    img_name, mask_name, sidecar_name = _names(index)

    hwc = np.ascontiguousarray(page.image.transpose(1, 2, 0))
    Image.fromarray(hwc, mode="RGB").save(pages_dir / img_name)
    if write_mask:
        Image.fromarray(page.mask, mode="L").save(pages_dir / mask_name)

    sidecar = {
        "elements": [{"class": cls, "box": list(box.as_tuple())}
                     for cls, box in page.elements],
        "sentences": [{"text": s.text, "box": list(s.box.as_tuple())}
                      for s in page.sentences],
        "column_type": page.column_type,
        "columns": [list(span) for span in page.column_spans],
        "warnings": list(page.warnings),
    }
    if provenance:
        sidecar["provenance"] = provenance
    with open(pages_dir / sidecar_name, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
        fh.write("\n")


def list_pages(dataset_dir) -> list[int]:
    pages_dir = Path(dataset_dir) / "pages"
    if not pages_dir.is_dir():
        raise InputError(f"{dataset_dir} has no pages/ directory")
    indices = sorted(int(p.name.split(".")[0]) for p in pages_dir.glob("*.img.png"))
    if not indices:
        raise InputError(f"{dataset_dir} contains no pages")
    return indices


def load_page(dataset_dir, index: int) -> PageRecord:
    pages_dir = Path(dataset_dir) / "pages"
    img_name, mask_name, sidecar_name = _names(index)
    img_path = pages_dir / img_name
    if not img_path.is_file():
        raise InputError(f"page {index} missing from {dataset_dir}")
    with Image.open(img_path) as img:
        image = np.asarray(img.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)

    mask = None
    mask_path = pages_dir / mask_name
    if mask_path.is_file():
        with Image.open(mask_path) as m:
            mask = np.asarray(m.convert("L"), dtype=np.uint8)
        if mask.shape != image.shape[1:]:
            raise InputError(f"page {index}: mask shape {mask.shape} does not "
                             f"match image {image.shape[1:]}")

    sidecar_path = pages_dir / sidecar_name
    if not sidecar_path.is_file():
        raise InputError(f"page {index} has no sidecar in {dataset_dir}")
    try:
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"sidecar for page {index} is not valid JSON: {exc}") from exc

    try:
        elements = [(str(e["class"]), Box.from_tuple(e["box"]))
                    for e in sidecar.get("elements", [])]
        sentences = [PageSentence(str(s["text"]), Box.from_tuple(s["box"]))
                     for s in sidecar.get("sentences", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"sidecar for page {index} malformed: {exc}") from exc

    return PageRecord(index=index, image=image, mask=mask,
                      elements=elements, sentences=sentences, sidecar=sidecar)


def load_dataset(dataset_dir) -> list[PageRecord]:
    return [load_page(dataset_dir, i) for i in list_pages(dataset_dir)]


# ---------------------------------------------------------------------------
# geometry alignment with image preprocessing
# ---------------------------------------------------------------------------

def preprocess_labels(mask: np.ndarray, max_side: int, stages: int) -> np.ndarray:
    """Resize and pad a label mask the way preprocess() treats the image.

    Nearest-neighbour resampling keeps labels categorical; padding gets
    the ignore label so padded pixels never contribute loss or metrics.
    """
    from .model import fit_size, padded_size

    if mask.ndim != 2:
        raise InputError(f"label mask must be 2-d, got shape {mask.shape}")
    height, width = mask.shape
    new_h, new_w, _ = fit_size(height, width, max_side)
    if (new_h, new_w) != (height, width):
        img = Image.fromarray(mask, mode="L")
        mask = np.asarray(img.resize((new_w, new_h), Image.NEAREST), dtype=np.uint8)
    pad_h, pad_w = padded_size(new_h, new_w, stages)
    out = np.full((pad_h, pad_w), IGNORE_LABEL, dtype=np.uint8)
    out[:new_h, :new_w] = mask
    return out


def scale_boxes(boxes: list[Box], height: int, width: int,
                max_side: int) -> list[Box]:
    """Map page boxes into the resized coordinate frame of preprocess()."""
    from .model import fit_size

    _, _, factor = fit_size(height, width, max_side)
    if factor == 1.0:
        return list(boxes)
    return [box.scaled(factor) for box in boxes]
