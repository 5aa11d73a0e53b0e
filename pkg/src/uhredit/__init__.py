"""uhredit: curation pipeline and numerics kernel for ultra-high-resolution
image editing data.

Subpackages:

* ``images``     shared raster carriers and PNG/JPEG I/O
* ``quality``    single-image quality metrics and verdicts
* ``pairs``      frame-pair mining (scenes, optical flow, keep/drop rule)
* ``adherence``  instruction-adherence scoring
* ``numerics``   rotary embeddings, rescaled attention, frequency losses
* ``pfid``       patch-level Fréchet distance evaluator
* ``pipeline``   manifest filtering stages and the end-to-end runner
* ``formats``    EMB1 / FLO1 / TEN1 binary formats
"""

from .images import GrayImage, ImageTensor, load_image, save_image, to_grayscale
from .manifest import TripletRecord, load_manifest, save_manifest
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "GrayImage",
    "ImageTensor",
    "load_image",
    "save_image",
    "to_grayscale",
    "TripletRecord",
    "load_manifest",
    "save_manifest",
    "PipelineConfig",
    "run_pipeline",
    "__version__",
]
