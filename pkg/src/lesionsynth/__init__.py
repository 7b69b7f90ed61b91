"""Mask-guided healthy/pathological 3D image synthesis, microbleed detection and FROC evaluation."""
from .volume_io import (PathologyMask, PatchSpec, SampleRecord, Volume, clip_and_rescale, extract_patches,
                        load_volume, save_volume, stitch_patches)

__version__ = "0.1.0"
