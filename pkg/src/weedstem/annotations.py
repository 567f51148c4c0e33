"""Annotation file I/O: per-image XML documents plus a stem-point sidecar.

Canonical on-save schema is a VOC-style XML extended with an optional
<stem> child per object. A read-only sidecar file ("stems.txt", lines of
"<image_id> <x> <y>") is also accepted for datasets that store points
separately; sidecar points are joined to the smallest-area enclosing weed
box.
"""
from __future__ import annotations

import os
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image

from .errors import AnnotationError, ValidationError
from .types import CLASS_NAMES, NAME_TO_ID, ImageSample, LabeledInstance

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
SIDECAR_NAME = "stems.txt"


def _int_field(obj: ET.Element, path: str, fname: str) -> int:
    node = obj.find(path)
    if node is None or node.text is None:
        raise AnnotationError(f"{fname}: missing field {path!r}")
    try:
        return int(node.text)
    except ValueError as e:
        raise AnnotationError(f"{fname}: field {path!r} is not an integer: {node.text!r}") from e


def _parse_xml(path: Path) -> List[LabeledInstance]:
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as e:
        raise AnnotationError(f"{path.name}: malformed XML: {e}") from e
    instances = []
    for obj in root.findall("object"):
        name_node = obj.find("name")
        if name_node is None or name_node.text is None:
            raise AnnotationError(f"{path.name}: object missing field 'name'")
        name = name_node.text.strip()
        if name not in NAME_TO_ID:
            raise AnnotationError(f"{path.name}: unknown class name {name!r}")
        bbox = tuple(_int_field(obj, f"bndbox/{k}", path.name) for k in ("xmin", "ymin", "xmax", "ymax"))
        stem = None
        stem_node = obj.find("stem")
        if stem_node is not None:
            stem = (_int_field(obj, "stem/x", path.name), _int_field(obj, "stem/y", path.name))
        instances.append(LabeledInstance(NAME_TO_ID[name], bbox, stem))
    return instances


def _read_sidecar(path: Path) -> dict:
    points: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise AnnotationError(f"{path.name}:{lineno}: expected '<image_id> <x> <y>', got {line!r}")
        try:
            pt = (int(parts[1]), int(parts[2]))
        except ValueError as e:
            raise AnnotationError(f"{path.name}:{lineno}: non-integer coordinate in {line!r}") from e
        points.setdefault(parts[0], []).append(pt)
    return points


def _join_stems(image_id: str, instances: List[LabeledInstance], points: List[tuple]) -> List[LabeledInstance]:
    out = list(instances)
    for pt in points:
        candidates = [
            (i, inst)
            for i, inst in enumerate(out)
            if inst.is_weed
            and inst.stem is None
            and inst.bbox[0] <= pt[0] <= inst.bbox[2]
            and inst.bbox[1] <= pt[1] <= inst.bbox[3]
        ]
        if not candidates:
            raise ValidationError(f"{image_id}: stem point {pt} lies outside every unassigned weed box")
        # smallest-area containing box wins
        i, _ = min(candidates, key=lambda c: c[1].area)
        out[i] = LabeledInstance(out[i].class_id, out[i].bbox, pt)
    return out


def load_annotations(directory) -> List[ImageSample]:
    """Read every image in the directory plus its annotation document.

    Images without an annotation file are returned with labeled=False.
    """
    directory = Path(directory)
    sidecar_path = directory / SIDECAR_NAME
    sidecar = _read_sidecar(sidecar_path) if sidecar_path.exists() else {}

    samples = []
    for img_path in sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS):
        image_id = img_path.stem
        image = np.asarray(Image.open(img_path).convert("RGB"))
        xml_path = directory / f"{image_id}.xml"
        if not xml_path.exists():
            samples.append(ImageSample(image=image, id=image_id, instances=[], labeled=False))
            continue
        instances = _parse_xml(xml_path)
        if image_id in sidecar:
            instances = _join_stems(image_id, instances, sidecar[image_id])
        sample = ImageSample(image=image, id=image_id, instances=instances, labeled=True)
        try:
            sample.validate()
        except ValidationError as e:
            raise ValidationError(f"{image_id}: {e}") from e
        samples.append(sample)
    return samples


def save_annotations(samples: List[ImageSample], directory) -> None:
    """Write images (PNG) and, for labeled samples, the extended XML schema."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe = directory / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as e:
        raise OSError(f"annotation directory {directory} is not writable: {e}") from e

    for sample in samples:
        sample.validate()
        Image.fromarray(sample.image).save(directory / f"{sample.id}.png")
        if not sample.labeled:
            continue
        root = ET.Element("annotation")
        ET.SubElement(root, "filename").text = f"{sample.id}.png"
        size = ET.SubElement(root, "size")
        ET.SubElement(size, "width").text = str(sample.width)
        ET.SubElement(size, "height").text = str(sample.height)
        ET.SubElement(size, "depth").text = "3"
        for inst in sample.instances:
            obj = ET.SubElement(root, "object")
            ET.SubElement(obj, "name").text = CLASS_NAMES[inst.class_id]
            bnd = ET.SubElement(obj, "bndbox")
            for key, val in zip(("xmin", "ymin", "xmax", "ymax"), inst.bbox):
                ET.SubElement(bnd, key).text = str(int(val))
            if inst.stem is not None:
                stem = ET.SubElement(obj, "stem")
                ET.SubElement(stem, "x").text = str(int(inst.stem[0]))
                ET.SubElement(stem, "y").text = str(int(inst.stem[1]))
        tree = ET.ElementTree(root)
        ET.indent(tree)
        tree.write(directory / f"{sample.id}.xml", encoding="unicode")


def write_manifest(samples: List[ImageSample], directory, name: str = "manifest.txt") -> Path:
    """One record per sample: id, labeled flag, image path."""
    directory = Path(directory)
    path = directory / name
    lines = [f"{s.id} {int(s.labeled)} {os.path.join(str(directory), s.id + '.png')}" for s in samples]
    path.write_text("\n".join(lines) + "\n")
    return path
