"""Boundary ground truth from label masks, and resizing of boundary maps."""

import math

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

DEFAULT_THICKNESS = 8


def _radius(thickness):
    return int(math.ceil(thickness / 2))


def generate_boundary(mask, thickness=DEFAULT_THICKNESS):
    """Binary boundary band around every object edge of a label mask.

    For each foreground class the band is ``dilate(M) & ~erode(M)`` with a
    square structuring element of radius ``ceil(thickness / 2)``, so the band
    is ``thickness`` pixels wide, straddling the edge. Pixels outside the image
    are treated as copies of the border, hence the frame itself never produces
    a boundary. Thing/stuff contacts produce boundary as well.

    Returns a ``uint8`` array with values in {0, 1}.
    """
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D label mask, got shape {mask.shape}")
    r = _radius(thickness)
    selem = np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
    band = np.zeros(mask.shape, dtype=bool)
    for class_id in np.unique(mask):
        if class_id == 0:
            continue
        region = mask == class_id
        dil = ndimage.binary_dilation(region, structure=selem, border_value=0)
        ero = ndimage.binary_erosion(region, structure=selem, border_value=1)
        band |= dil & ~ero
    return band.astype(np.uint8)


def resize_boundary(bmap, target_h, target_w):
    """Bilinear resampling of a boundary map to ``(target_h, target_w)``.

    Accepts a 2-D numpy array or a torch tensor shaped (H, W), (C, H, W) or
    (N, C, H, W); the result has the same kind and rank. Values stay in [0, 1]
    because bilinear weights are a convex combination.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {(target_h, target_w)}")
    is_numpy = isinstance(bmap, np.ndarray)
    t = torch.from_numpy(np.asarray(bmap, dtype=np.float32)) if is_numpy else bmap
    ndim = t.dim()
    if ndim == 2:
        t = t[None, None]
    elif ndim == 3:
        t = t[None]
    if tuple(t.shape[-2:]) == (target_h, target_w):
        out = t
    else:
        out = F.interpolate(t.float() if not t.is_floating_point() else t,
                            size=(target_h, target_w), mode="bilinear", align_corners=False)
    if ndim == 2:
        out = out[0, 0]
    elif ndim == 3:
        out = out[0]
    return out.numpy() if is_numpy else out
