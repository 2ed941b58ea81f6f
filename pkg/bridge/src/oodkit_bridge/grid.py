"""Patch walk used while exporting.

The bridge computes its own sliding-window origins instead of importing the
toolkit's grid helper, then cross-checks the two at export time.  Keeping an
independent copy means a silent change on either side turns into a loud
GeometryMismatch instead of a subtly shifted feature set.

Walk contract, per axis: 50% overlap (stride = half the patch edge, at least
one voxel), plus a final window clamped flush to the end of the axis so the
volume is always fully covered.  An axis shorter than the patch edge yields
the single origin 0.
"""

import itertools

__all__ = ["axis_starts", "patch_origins"]


def axis_starts(extent: int, patch: int) -> list[int]:
    """Window start offsets along one axis."""
    if patch >= extent:
        return [0]
    stride = max(patch // 2, 1)
    starts = list(range(0, extent - patch, stride))
    starts.append(extent - patch)
    return starts


def patch_origins(shape, patch_size) -> tuple[tuple[int, ...], ...]:
    """All window origins for a volume, axis-major (last axis fastest)."""
    if len(shape) != len(patch_size):
        raise ValueError(
            f"volume is {len(shape)}-d but the patch size has {len(patch_size)} axes"
        )
    per_axis = [axis_starts(int(e), int(p)) for e, p in zip(shape, patch_size)]
    return tuple(itertools.product(*per_axis))
