import torch
from torchvision.ops import roi_align

from models.ops import DimensionError


def roi_pool(feature: torch.Tensor, boxes: torch.Tensor, spatial_scale: float, out_size: int = 7) -> torch.Tensor:
    """
    Bilinear RoI pooling with one sample at each bin centre (pixel-centre aligned).
    feature: (1, C, h, w); boxes: (N, 4) image coordinates; returns (N, C, out_size, out_size).
    Box coordinates are treated as constants.
    """
    if feature.ndim != 4 or feature.shape[0] != 1:
        raise DimensionError(f'[roi_pool] feature must be (1, C, h, w), got {tuple(feature.shape)}')
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise DimensionError(f'[roi_pool] boxes must be (N, 4), got {tuple(boxes.shape)}')
    N = boxes.shape[0]
    if N == 0:
        return feature.new_zeros(0, feature.shape[1], out_size, out_size)
    rois = torch.cat((boxes.new_zeros(N, 1), boxes.detach()), dim=1).to(feature.dtype)
    return roi_align(feature, rois, output_size=(out_size, out_size), spatial_scale=spatial_scale, sampling_ratio=1, aligned=True)
