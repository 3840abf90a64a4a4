from modality_forge.data.manifest import ManifestError, read_manifest, write_manifest
from modality_forge.data.phantom import PhantomSpec, PhantomSpecError, analytic_image, generate_phantom
from modality_forge.data.preprocess import augment, normalize, resize
from modality_forge.data.sampling import SlicePool, build_pool, sample_training_pair
from modality_forge.data.types import (DatasetManifest, LabelMap, ManifestEntry, ModalityCode,
                                       SliceImage)
from modality_forge.data.volume_io import VolumeFormatError, load_volume, save_volume

__all__ = [
    "DatasetManifest", "LabelMap", "ManifestEntry", "ManifestError", "ModalityCode",
    "PhantomSpec", "PhantomSpecError", "SliceImage", "SlicePool", "VolumeFormatError",
    "analytic_image", "augment", "build_pool", "generate_phantom", "load_volume", "normalize",
    "read_manifest", "resize", "sample_training_pair", "save_volume", "write_manifest",
]
