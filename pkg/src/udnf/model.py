"""The denoiser: pose encoder feeding a volume-rendered radiance field."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .diffusion import DenoiseResult
from .geometry import CameraPose, CandidateSpec, Intrinsics, candidate_pose, rodrigues
from .nerfield import RadianceField, RenderOutput, render_image
from .posenet import EncoderConfig, PoseNet


@dataclass
class RenderSettings:
    n_samples: int = 64
    near: float = 2.0
    far: float = 6.0
    background: tuple = (1.0, 1.0, 1.0)
    bound: float | None = None


class DenoisingRenderer(nn.Module):
    """Maps a noisy view to a camera pose, then renders the field from it.

    ``mode`` is ``"single"`` (axis-angle + translation head) or ``"multi"``
    (K candidate cameras plus a score vector).
    """

    def __init__(self, field: RadianceField, posenet: PoseNet, intrinsics: Intrinsics,
                 candidates: CandidateSpec | None = None, render: RenderSettings | None = None):
        super().__init__()
        self.field = field
        self.posenet = posenet
        self.intrinsics = intrinsics
        self.candidates = candidates
        self.render_cfg = render or RenderSettings()
        if posenet.mode == "multi" and (candidates is None or candidates.K != posenet.head.K):
            raise ValueError("multi-pose head needs a candidate spec with matching K")

    @property
    def mode(self) -> str:
        return self.posenet.mode

    def field_parameters(self):
        return list(self.field.parameters())

    def pose_parameters(self):
        return list(self.posenet.parameters())

    def head(self, x_t: torch.Tensor, t):
        """Head outputs for a single image ``x_t`` (H, W, 3), diffusion range."""
        x = x_t.permute(2, 0, 1)[None].to(self._dtype())
        a, b = self.posenet(x, t)
        return a[0], b[0]

    def _dtype(self):
        return next(self.posenet.parameters()).dtype

    def pose_from_head(self, a, b, index: int = 0) -> CameraPose:
        if self.mode == "single":
            return CameraPose(rodrigues(a), b)
        return candidate_pose(a, index, self.candidates)

    def render(self, pose: CameraPose, stratified=False, generator=None, t_vals=None) -> RenderOutput:
        rc = self.render_cfg
        return render_image(self.field, pose, self.intrinsics, rc.n_samples, rc.near, rc.far,
                            stratified, generator, rc.background, t_vals, rc.bound)

    @torch.no_grad()
    def denoise(self, x_t: torch.Tensor, t: int) -> DenoiseResult:
        a, b = self.head(x_t, t)
        if self.mode == "single":
            pose = self.pose_from_head(a, b)
            out = self.render(pose)
            return DenoiseResult(out.rgb, pose, 0, None, None, omega=a, ts=b)
        index = int(torch.argmax(b).item())
        pose = self.pose_from_head(a, b, index)
        return DenoiseResult(self.render(pose).rgb, pose, index, b, a)


def build_model(head: str = "multi", K: int = 12, candidates: CandidateSpec | None = None,
                encoder: EncoderConfig | None = None, intrinsics: Intrinsics | None = None,
                render: RenderSettings | None = None, field_hidden: int = 64, field_depth: int = 4,
                L_pos: int = 6, view_dependent: bool = False, ts_init=(0.0, 0.0, 4.0),
                seed: int = 0) -> DenoisingRenderer:
    encoder = encoder or EncoderConfig()
    intrinsics = intrinsics or Intrinsics(focal=1.5 * encoder.resolution, width=encoder.resolution,
                                          height=encoder.resolution)
    torch.manual_seed(seed)
    field = RadianceField(hidden=field_hidden, depth=field_depth, L_pos=L_pos, view_dependent=view_dependent)
    if head == "multi":
        K = candidates.K if candidates is not None else K
    posenet = PoseNet(encoder, head, K, ts_init)
    return DenoisingRenderer(field, posenet, intrinsics, candidates if head == "multi" else None, render)
