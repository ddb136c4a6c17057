"""Draw labelled boxes onto images so a vision-language model can read them.

Labels are drawn with Pillow's bundled bitmap font, scaled by whole
multiples, so rendering is byte-for-byte reproducible. Output is always PNG.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from PIL import Image, ImageDraw, ImageFont, PngImagePlugin

from trapline.domain import Detection, validate_bbox
from trapline.errors import RenderFailure

RGB = tuple[int, int, int]

MIN_CONTRAST = 4.5
STROKE_FRACTION = 0.002
FONT_FRACTION = 0.015
MIN_STROKE = 2
MIN_FONT = 12
GLYPH_HEIGHT = 11  # line height of the bundled bitmap font

ASSET_KEY = "trapline:asset_id"
LABELS_KEY = "trapline:labels"


@dataclass(frozen=True)
class OverlayStyle:
    box_color: RGB = (255, 215, 0)
    text_color: RGB = (255, 255, 255)
    stroke_width: int = MIN_STROKE
    font_height: int = MIN_FONT
    label_background: RGB = (0, 0, 0)


@dataclass(frozen=True)
class AnnotatedImage:
    asset_id: str
    png: bytes
    rendered_labels: tuple[tuple[Detection, str], ...]
    label_boxes: tuple[tuple[int, int, int, int], ...] = ()


def _channel(c: int) -> float:
    s = c / 255.0
    return s / 12.92 if s <= 0.03928 else ((s + 0.055) / 1.055) ** 2.4


def relative_luminance(rgb: RGB) -> float:
    r, g, b = (_channel(c) for c in rgb)
    return 0.2126 * r + 0.7152 * g + 0.0722 * b


def contrast_ratio(a: RGB, b: RGB) -> float:
    la, lb = sorted((relative_luminance(a), relative_luminance(b)), reverse=True)
    return (la + 0.05) / (lb + 0.05)


def min_stroke(width: int) -> int:
    return max(MIN_STROKE, round(STROKE_FRACTION * width))


def min_font(height: int) -> int:
    return max(MIN_FONT, round(FONT_FRACTION * height))


def default_style(width: int, height: int) -> OverlayStyle:
    """Resolution-proportional strokes and text, white on a black plate."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    return OverlayStyle(stroke_width=min_stroke(width), font_height=min_font(height))


def legibility_check(style: OverlayStyle, width: int, height: int) -> list[str]:
    warnings = []
    ratio = contrast_ratio(style.text_color, style.label_background)
    if ratio < MIN_CONTRAST:
        warnings.append(
            f"contrast {ratio:.2f}:1 between text {style.text_color} and plate "
            f"{style.label_background} is below {MIN_CONTRAST}:1"
        )
    if style.stroke_width < min_stroke(width):
        warnings.append(f"stroke {style.stroke_width}px below {min_stroke(width)}px for width {width}")
    if style.font_height < min_font(height):
        warnings.append(f"font {style.font_height}px below {min_font(height)}px for height {height}")
    return warnings


def label_text(det: Detection) -> str:
    return f"{det.label.scientific_name} {det.confidence:.2f}"


@lru_cache(maxsize=1)
def _font() -> ImageFont.ImageFont:
    return ImageFont.load_default_imagefont()


def _text_mask(text: str, scale: int) -> Image.Image:
    font = _font()
    _, _, w, h = font.getbbox(text)
    mask = Image.new("L", (max(w, 1), max(h, GLYPH_HEIGHT)), 0)
    ImageDraw.Draw(mask).text((0, 0), text, fill=255, font=font)
    if scale > 1:
        mask = mask.resize((mask.width * scale, mask.height * scale), Image.NEAREST)
    return mask


def encode_png(image: Image.Image, asset_id: str, labels: Sequence[str] = (), legible: bool = True) -> bytes:
    """Lossless PNG with the asset id and drawn label strings as text chunks.

    The label chunk is what the mock vision-language endpoint reads in place
    of optical character recognition.
    """
    info = PngImagePlugin.PngInfo()
    info.add_text(ASSET_KEY, asset_id)
    info.add_text(LABELS_KEY, json.dumps({"labels": list(labels), "legible": legible}))
    buf = io.BytesIO()
    image.save(buf, format="PNG", pnginfo=info, compress_level=6)
    return buf.getvalue()


def decode_png_meta(png: bytes) -> tuple[str | None, list[str], bool]:
    with Image.open(io.BytesIO(png)) as im:
        text = getattr(im, "text", {}) or {}
    asset_id = text.get(ASSET_KEY)
    meta = json.loads(text.get(LABELS_KEY, '{"labels": [], "legible": true}'))
    return asset_id, list(meta.get("labels", [])), bool(meta.get("legible", True))


def _load(image: bytes | Image.Image) -> Image.Image:
    if isinstance(image, Image.Image):
        return image.convert("RGB")
    try:
        with Image.open(io.BytesIO(image)) as im:
            return im.convert("RGB")
    except Exception as exc:  # Pillow raises a zoo of types for corrupt data
        raise RenderFailure(f"cannot decode image: {exc}") from exc


def _place(x: int, y: int, w: int, h: int, width: int, height: int) -> tuple[int, int]:
    """Top-left of a label plate: above the box if it fits, else inside; always on canvas."""
    top = y - h if y - h >= 0 else y
    top = min(max(top, 0), max(height - h, 0))
    left = min(max(x, 0), max(width - w, 0))
    return left, top


def render_overlays(
    asset_id: str,
    image: bytes | Image.Image,
    detections: Sequence[Detection],
    style: OverlayStyle | None = None,
    *,
    strict: bool = True,
) -> AnnotatedImage:
    """Draw each detection's box and a ``"<scientific name> <conf>"`` plate.

    With ``strict`` an illegible style is rejected; otherwise it is rendered
    and flagged in the PNG metadata.
    """
    canvas = _load(image)
    width, height = canvas.size
    style = style or default_style(width, height)
    warnings = legibility_check(style, width, height)
    if warnings and strict:
        raise ValueError("; ".join(warnings))

    draw = ImageDraw.Draw(canvas)
    rendered, plates = [], []
    scale = max(1, math.ceil(style.font_height / GLYPH_HEIGHT))
    for det in detections:
        box = validate_bbox(det.box, width, height)
        x0, y0 = int(math.floor(box.x_min)), int(math.floor(box.y_min))
        x1, y1 = int(math.ceil(box.x_max)), int(math.ceil(box.y_max))
        draw.rectangle([x0, y0, x1 - 1, y1 - 1], outline=style.box_color, width=style.stroke_width)

        text = label_text(det)
        s = scale
        mask = _text_mask(text, s)
        pad = s * 2
        while s > 1 and mask.width + 2 * pad > width:
            s -= 1
            mask = _text_mask(text, s)
            pad = s * 2
        pw, ph = mask.width + 2 * pad, mask.height + 2 * pad
        left, top = _place(x0, y0, pw, ph, width, height)
        draw.rectangle([left, top, left + pw - 1, top + ph - 1], fill=style.label_background)
        canvas.paste(style.text_color, (left + pad, top + pad), mask)
        rendered.append((det, text))
        plates.append((left, top, min(left + pw, width), min(top + ph, height)))

    png = encode_png(canvas, asset_id, [t for _, t in rendered], legible=not warnings)
    return AnnotatedImage(asset_id, png, tuple(rendered), tuple(plates))
