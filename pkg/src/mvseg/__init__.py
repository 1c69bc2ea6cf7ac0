"""Multi-view contrastive prostate segmentation on synthetic MRI phantoms.

Subpackages and modules:

``core``      numpy reverse-mode autodiff, layers, Adam, gradient checks
``data``      phantom cohort generation, preprocessing, slice pairing, I/O
``model``     shared-encoder U-Net and its checkpoint format
``losses``    dice, InfoNCE and the multi-view contrastive objective
``metrics``   DSC / 95-HD / ABD / RVD with apex/mid/base reports
``stats``     bootstrap and two-sample tests
``trainer``   training loop, inference and cross-validation
``cli``       the ``mvseg`` command line
"""

from .errors import MVSegError

__version__ = "0.1.0"

__all__ = ["MVSegError", "__version__"]
