"""Deformable image registration toolkit with text-conditioned spatially
covariant filters.

The package is organized along the processing pipeline:

- ``tensorio``    dense tensor container and the ``.scft`` on-disk format
- ``field``       displacement fields, warping, composition, gradients
- ``diffeo``      scaling-and-squaring integration of velocity fields
- ``metrics``     Dice, HD95, Jacobian determinant, SDlogJ, folding
- ``embeddings``  region embedding matrices and the SVD background vector
- ``nn``          reverse-mode autodiff engine, backbone, implicit MLP
- ``scf``         spatially covariant filter head and full model assembly
- ``train``       losses, Adam, polynomial LR schedule, training loop
- ``synth``       synthetic image/mask/deformation generator
- ``cli``         ``scfreg`` command-line interface
"""

__version__ = "0.1.0"
