from typing import List, Literal, Optional

from pydantic import BaseModel, Field

from metapix.schemas.config import DatasetSpec

Split = Literal["source", "target_train", "target_val"]
Domain = Literal["source", "target"]

SPLIT_DOMAINS = {"source": "source", "target_train": "target", "target_val": "target"}


class ManifestEntry(BaseModel):
    index: int
    split: Split
    domain: Domain
    image: str
    label: str
    corruption_mask: Optional[str] = None


class Manifest(BaseModel):
    """Index of a generated dataset; paths are relative to the dataset root."""
    spec: DatasetSpec
    seed: int
    entries: List[ManifestEntry] = Field(default_factory=list)

    def split(self, name: str) -> List[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == name]
