"""Export jobs: authentic image features and reconstructed features."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .container import write_container
from .encoders import CLIPImageEncoder
from .generator import LatentImageGenerator

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class GenerationSettings:
    steps: int = 50
    guidance: float = 7.5
    seed: int = 47
    batch_size: int = 8


@dataclass
class ExportJob:
    corpus: Path
    output: Path
    image_dir: Optional[Path] = None
    settings: GenerationSettings = field(default_factory=GenerationSettings)
    pooled: bool = False


@dataclass
class ExportResult:
    written: int
    skipped: List[tuple]  # (sentence_id, reason)

    @property
    def clean(self) -> bool:
        return not self.skipped


def _read_corpus(path) -> List[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def _find_image(image_dir: Path, sentence_id: int) -> Optional[Path]:
    for suffix in IMAGE_SUFFIXES:
        candidate = image_dir / f"{sentence_id}{suffix}"
        if candidate.exists():
            return candidate
    return None


def export_authentic(job: ExportJob, encoder: CLIPImageEncoder) -> ExportResult:
    """Encode one image per corpus line; images are named <line>.png/.jpg."""
    if job.image_dir is None:
        raise ValueError("authentic export needs an image directory")
    lines = _read_corpus(job.corpus)
    matrices, skipped = {}, []
    for sid in range(len(lines)):
        path = _find_image(Path(job.image_dir), sid)
        if path is None:
            skipped.append((sid, "missing image"))
            continue
        try:
            with Image.open(path) as image:
                matrices[sid] = encoder.encode(image)
        except (OSError, UnidentifiedImageError) as exc:
            skipped.append((sid, f"unreadable image: {exc}"))
    if matrices:
        write_container(job.output, matrices)
    return ExportResult(len(matrices), skipped)


def export_reconstructed(job: ExportJob, encoder: CLIPImageEncoder,
                         generator: LatentImageGenerator) -> ExportResult:
    """Generate an image per sentence, then encode it like an authentic one."""
    lines = _read_corpus(job.corpus)
    matrices, skipped = {}, []
    batch = job.settings.batch_size
    for start in range(0, len(lines), batch):
        ids = list(range(start, min(start + batch, len(lines))))
        texts = [lines[i] for i in ids]
        try:
            images = generator.generate(texts, sentence_ids=ids)
        except Exception as exc:  # record the whole failed batch
            skipped.extend((i, f"generation failed: {exc}") for i in ids)
            continue
        for sid, image in zip(ids, images):
            matrices[sid] = encoder.encode(image)
    if matrices:
        write_container(job.output, matrices)
    return ExportResult(len(matrices), skipped)
