"""tetramorph: category-level morphable 3D shape models with neural
vertex features.

The engine learns, per object category, a template shape (an implicit
distance field meshed on a tetrahedral grid), an instance deformation field,
and a semantic feature field, from posed masked views with precomputed
feature maps. At inference it estimates 3-DoF object rotation by inverse
rendering, segments instances, and transfers semantic correspondences.
"""

from .autodiff import Tape, Var, ContractError, DimensionError

__version__ = "0.1.0"

__all__ = ["Tape", "Var", "ContractError", "DimensionError", "__version__"]
