"""Folding-free quasi-conformal deformations on regular simplicial grids.

Modules: ``grid`` (triangulation and discrete operators), ``image`` (cubic
B-spline images), ``measures`` (Jacobian determinant, distortion, Beltrami
coefficient), ``energy`` (discrete energies and their Gauss-Newton models),
``solver`` (ADMM driver), ``io`` (file formats and run configs) and ``apps``
(solver modes, inversion, warping and synthetic examples).
"""

__version__ = "0.1.0"
