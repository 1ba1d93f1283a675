"""
Manifest-backed image access with an access log.

Every image read goes through a CaseStore, which remembers which case ids (and which splits) were
touched. Commands use the log to prove that they never read the TEST split.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple

from .actions import read_image, read_manifest
from .data import (
    DatasetManifest,
    HierarchyStage,
    Image2D,
    ImagePair,
    ManifestEntry,
    Split,
)

logger = logging.getLogger(__name__)


class CaseStore:
    def __init__(self, manifest: DatasetManifest, base_dir: Path):
        self.manifest = manifest
        self.base_dir = Path(base_dir)
        self.accessed: Set[str] = set()
        self.accessed_splits: Set[Split] = set()
        self._cache: Dict[Tuple[str, str], Image2D] = {}

    @classmethod
    def from_manifest_path(cls, manifest_path: Path) -> "CaseStore":
        manifest = read_manifest(manifest_path)
        return cls(manifest, Path(manifest_path).parent)

    def entries(self, split: Optional[Split] = None) -> List[ManifestEntry]:
        if split is None:
            return list(self.manifest.entries)
        return self.manifest.entries_in(split)

    def _touch(self, entry: ManifestEntry) -> None:
        if entry.id not in self.accessed:
            logger.debug(f"Reading case {entry.id} ({entry.split.value})")
        self.accessed.add(entry.id)
        self.accessed_splits.add(entry.split)

    def _load(self, entry: ManifestEntry, relative_path: str) -> Image2D:
        self._touch(entry)
        key = (entry.id, relative_path)
        image = self._cache.get(key)
        if image is None:
            image = read_image(self.base_dir / relative_path)
            self._cache[key] = image
        return image

    def xray(self, entry: ManifestEntry) -> Image2D:
        return self._load(entry, entry.xray_path)

    def repeat_xrays(self, entry: ManifestEntry) -> List[Image2D]:
        return [self._load(entry, path) for path in entry.repeat_xray_paths]

    def target(self, entry: ManifestEntry, stage: HierarchyStage) -> Image2D:
        if stage == HierarchyStage.STAGE1_BONES:
            return self._load(entry, entry.target_stage1_path)
        return self._load(entry, entry.target_stage2_path)

    def pair(self, entry: ManifestEntry, stage: HierarchyStage) -> ImagePair:
        return ImagePair(
            id=entry.id,
            xray=self.xray(entry),
            target=self.target(entry, stage),
            stage=stage,
            side=entry.side,
        )
