"""featexport: offline dataset preparation for tetramorph.

Runs a frozen vision-transformer backbone over object-centric video
frames and writes feature maps, masks, distance transforms, camera poses,
and canonicalized point clouds in the byte-exact layout the tetramorph
loader validates.
"""

from .backbone import FrozenBackbone
from .export import ExportJob, export

__version__ = "0.1.0"

__all__ = ["FrozenBackbone", "ExportJob", "export", "__version__"]
