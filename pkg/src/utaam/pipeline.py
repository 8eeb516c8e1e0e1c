"""From annotated samples to a fitted UT-AAM."""
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgumentError
from .geometry import build_reference_mesh, procrustes_align, warp_to_reference
from .model import UTAAM, AssembledTensors, SampleGrid, assemble_tensors


@dataclass
class BuildResult:
    model: UTAAM
    assembled: AssembledTensors
    aligned: np.ndarray
    transforms: list
    cells: list


def samples_to_grid(extents, cells, values):
    """Scatter per-sample vectors into an ``extents + feature`` array.

    Returns the array (zeros at absent cells) and the availability grid.
    """
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros(tuple(extents) + values.shape[1:])
    present = np.zeros(tuple(extents), dtype=bool)
    for cell, v in zip(cells, values):
        cell = tuple(cell)
        if present[cell]:
            raise InvalidArgumentError(f"duplicate sample for cell {cell}")
        out[cell] = v
        present[cell] = True
    return out, present


def build_from_samples(extents, frontal, cells, shapes, images=None, shape_ranks=None,
                       texture_ranks=None, completion="tucker", init="variation_aware",
                       completion_ranks=None, mesh_height=64, orientation=(0, -1), hog=None,
                       max_iter=200, tol=1e-6, random_state=0, texture=True):
    """Align shapes, sample textures, complete the grid and fit the model.

    Parameters
    ----------
    extents : tuple of 4 int
    frontal : int
        Frontal pose index; frontal shapes define the texture reference mesh.
    cells : sequence of (identity, pose, illumination, expression)
    shapes : ndarray, shape (n, L, 2)
        Annotated landmarks in image coordinates.
    images : sequence of ndarray, optional
        One raster per sample; required for a texture model.
    completion_ranks : tuple of 4 int, optional
        Multilinear ranks of the sample modes used by the completion solver;
        the feature mode always keeps full rank.
    texture : bool
        Build the texture model when images are given.
    """
    cells = [tuple(int(v) for v in c) for c in cells]
    shapes = np.asarray(shapes, dtype=np.float64)
    if len(cells) != len(shapes):
        raise InvalidArgumentError("need one cell per shape")
    aligned, _, transforms = procrustes_align(shapes, orientation=orientation)
    s_grid, present = samples_to_grid(extents, cells, aligned.reshape(len(cells), -1))
    grid = SampleGrid(extents, frontal, present)

    mesh = t_grid = None
    if images is not None:
        frontal_shapes = [a for a, c in zip(aligned, cells) if c[1] == frontal]
        if not frontal_shapes:
            raise InvalidArgumentError("no frontal sample available for the reference mesh")
        mesh = build_reference_mesh(frontal_shapes, height=mesh_height, orientation=orientation)
        if texture:
            tex = np.array([warp_to_reference(im, s, mesh) for im, s in zip(images, shapes)])
            t_grid, _ = samples_to_grid(extents, cells, tex)

    ranks = None if completion_ranks is None else tuple(completion_ranks) + (None,)
    assembled = assemble_tensors(grid, s_grid, t_grid, completion=completion, init=init,
                                 shape_ranks=ranks, texture_ranks=ranks, max_iter=max_iter,
                                 tol=tol, random_state=random_state)
    model = UTAAM(shape_ranks, texture_ranks, hog=hog).fit(
        assembled.shape_tensor, assembled.texture_tensor, mesh=mesh,
        shape_mean=assembled.shape_mean, texture_mean=assembled.texture_mean)
    return BuildResult(model, assembled, aligned, transforms, cells)
