"""Gaussian splat renderer driven by morphable-model vertices.

Two sets of Gaussians are built from a reference image: template Gaussians, one per mesh
vertex, and UV Gaussians, one per triangle placed at the triangle barycenter plus a decoded
offset. A new frame is rendered by replacing the Gaussian positions with positions derived
from the new mesh vertices, splatting all Gaussians into a feature image and refining that
image with a small encoder-decoder network. The first three feature channels are a coarse
RGB image; the refiner predicts a residual on top of them.

Every step is written in plain torch, so gradients reach the mesh vertices and, through
`mangotalk.morphable.decode`, the motion parameters.

Classes:
    GaussianSet: Positions and attributes of a set of Gaussians.
    RefEncoding: Features of the reference image.
    RendererConfig: Sizes and switches of the renderer.
    ReferenceState: Everything prepared once per reference identity.
    Refiner: Encoder-decoder refinement network.
    MetaGaussianRenderer: All trainable stage-2 parameters.
    Stage2Weights: Loss weights of the stage-2 objective.

Functions:
    encode_reference: Encode a reference image with a registered image encoder.
    build_template_gaussians: One Gaussian per vertex, attributes decoded by an MLP.
    build_uv_gaussians: One Gaussian per triangle, attributes decoded by a conv decoder.
    animate: Move Gaussians to a new mesh.
    splat: Depth-sorted front-to-back compositing of projected Gaussians.
    refine: Turn a splatted feature image into RGB.
    render: animate, splat and refine.
    stage2_loss: Photometric and multi-scale feature losses.
"""

from __future__ import annotations
from dataclasses import asdict, dataclass, replace
import math
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from mangotalk.camera import CameraPose, project, to_camera_space
from mangotalk.encoders import get_image_encoder
from mangotalk.errors import ConfigurationError
from mangotalk.morphable import MorphableModel, decode

# Gaussian kernel value at three standard deviations.
_CUTOFF = math.exp(-4.5)


@dataclass
class GaussianSet:
    """A set of G Gaussians.

    Attributes:
        mu: Positions in meters, shape (G, 3).
        rot: Unit quaternions (w, x, y, z), shape (G, 4).
        scale: Log standard deviations along the local axes, shape (G, 3).
        opacity: Opacities in [0, 1], shape (G,).
        appearance: Latent appearance, shape (G, C); channels 0-2 are the coarse colour.
        vertex_idx: Anchor vertex of each template Gaussian.
        triangles: Anchor triangle (vertex triples) of each UV Gaussian.
        local_offset: Offset of each UV Gaussian in its triangle frame.
    """

    mu: torch.Tensor
    rot: torch.Tensor
    scale: torch.Tensor
    opacity: torch.Tensor
    appearance: torch.Tensor
    vertex_idx: Optional[torch.Tensor] = None
    triangles: Optional[torch.Tensor] = None
    local_offset: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def empty(cls, channels: int, dtype: torch.dtype = torch.float32) -> GaussianSet:
        return cls(
            mu=torch.zeros(0, 3, dtype=dtype),
            rot=torch.zeros(0, 4, dtype=dtype),
            scale=torch.zeros(0, 3, dtype=dtype),
            opacity=torch.zeros(0, dtype=dtype),
            appearance=torch.zeros(0, channels, dtype=dtype),
        )


def concat_gaussians(sets: list[GaussianSet]) -> GaussianSet:
    """Join several sets into one; the anchors are dropped."""
    return GaussianSet(
        *(torch.cat([getattr(s, name) for s in sets]) for name in ("mu", "rot", "scale", "opacity", "appearance"))
    )


@dataclass
class RefEncoding:
    """Reference image features.

    The per-vertex base features are persistent renderer state
    (`MetaGaussianRenderer.base_features`), not part of the per-image encoding.

    Attributes:
        feature_map: Feature map of shape (H_f, W_f, d_f).
        f_id: Identity embedding, the spatial mean of the feature map, shape (d_f,).
        image_size: (height, width) of the encoded image in pixels.
    """

    feature_map: torch.Tensor
    f_id: torch.Tensor
    image_size: tuple[int, int]


@dataclass
class RendererConfig:
    """Renderer settings.

    Attributes:
        image_size: Default rendered image size for the default camera.
        appearance_dim: Latent appearance channels C.
        base_dim: Width of the per-vertex base features.
        hidden_dim: Hidden width of the attribute decoders.
        refiner_width: Channel width of the refiner.
        image_encoder: Name of the registered image encoder.
        blur: Screen-space variance added to every projected covariance, pixels squared.
        use_uv: If False, only template Gaussians are used.
    """

    image_size: int = 128
    appearance_dim: int = 16
    base_dim: int = 32
    hidden_dim: int = 128
    refiner_width: int = 32
    image_encoder: str = "desk"
    blur: float = 0.3
    use_uv: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RendererConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown renderer settings: {sorted(unknown)}")
        return cls(**data)


def _as_image_tensor(image) -> torch.Tensor:
    """(H, W, 3) float image in [0, 1] from a uint8 or float array or tensor."""
    if isinstance(image, torch.Tensor):
        return image if image.is_floating_point() else image.float() / 255.0
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return torch.as_tensor(image.astype(np.float32) / 255.0)
    return torch.as_tensor(image)


def encode_reference(image, encoder_id: str = "desk") -> RefEncoding:
    """Encode a reference image of shape (H, W, 3).

    Raises:
        ValueError: If the image is smaller than 64x64 or not RGB.
        ConfigurationError: If the encoder is not registered.
    """
    pixels = _as_image_tensor(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"Reference image must be (H, W, 3), got {tuple(pixels.shape)}")
    height, width = pixels.shape[:2]
    if height < 64 or width < 64:
        raise ValueError(f"Reference image must be at least 64x64, got {height}x{width}")
    encoder = get_image_encoder(encoder_id)
    feature_map = encoder.pyramid(pixels.permute(2, 0, 1)[None])[-1][0].permute(1, 2, 0)
    return RefEncoding(feature_map, feature_map.mean(dim=(0, 1)), (height, width))


def sample_features(ref: RefEncoding, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear samples of the feature map at pixel coordinates (N, 2), edge-clamped."""
    height, width = ref.image_size
    fmap = ref.feature_map.permute(2, 0, 1)[None]
    gx = uv[:, 0] / (width - 1) * 2 - 1
    gy = uv[:, 1] / (height - 1) * 2 - 1
    grid = torch.stack([gx, gy], dim=-1)[None, None].to(fmap.dtype)
    sampled = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return sampled[0, :, 0].T


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (..., 3, 3) from quaternions (w, x, y, z)."""
    q = F.normalize(q, dim=-1)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def triangle_frames(vertices: torch.Tensor, triangles: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Barycenters (F, 3) and orthonormal frames (F, 3, 3) with columns edge, in-plane, normal."""
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    edge = F.normalize(b - a, dim=-1)
    normal = F.normalize(torch.cross(b - a, c - a, dim=-1), dim=-1)
    in_plane = torch.cross(normal, edge, dim=-1)
    return (a + b + c) / 3, torch.stack([edge, in_plane, normal], dim=-1)


def mean_edge_length(vertices: torch.Tensor, triangles: torch.Tensor) -> torch.Tensor:
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    return torch.cat(
        [torch.linalg.norm(b - a, dim=-1), torch.linalg.norm(c - b, dim=-1), torch.linalg.norm(a - c, dim=-1)]
    ).mean()


def uv_layout(points: np.ndarray) -> tuple[int, np.ndarray]:
    """Arrange points on a square grid by spherical coordinates.

    Rows follow the height (top row first), columns the azimuth about the vertical axis.

    Returns:
        The grid side length and the flat grid cell of every point.
    """
    count = points.shape[0]
    side = max(1, math.ceil(math.sqrt(count)))
    azimuth = np.arctan2(points[:, 0], points[:, 2])
    by_height = np.argsort(-points[:, 1], kind="stable")
    cells = np.empty(count, dtype=np.int64)
    for row in range(side):
        members = by_height[row * side : (row + 1) * side]
        members = members[np.argsort(azimuth[members], kind="stable")]
        cells[members] = row * side + np.arange(members.shape[0])
    return side, cells


class Refiner(nn.Module):
    """Two-level encoder-decoder with a skip connection that predicts an RGB residual.

    The output layer starts at zero, so an untrained refiner returns the squashed coarse RGB.
    """

    def __init__(self, in_channels: int, width: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.encoder = nn.Sequential(nn.Conv2d(in_channels, width, 3, padding=1), nn.GELU())
        self.bottleneck = nn.Sequential(
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.GELU(),
        )
        self.up = nn.Sequential(nn.Conv2d(2 * width, width, 3, padding=1), nn.GELU())
        self.fuse = nn.Sequential(nn.Conv2d(2 * width, width, 3, padding=1), nn.GELU())
        self.out = nn.Conv2d(width, 3, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        skip = self.encoder(features)
        deep = F.interpolate(self.bottleneck(skip), size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.out(self.fuse(torch.cat([self.up(deep), skip], dim=1)))


def _decode_attributes(raw: torch.Tensor, log_scale: torch.Tensor, channels: int):
    rot_raw, scale_raw, opacity_raw, appearance = raw.split([4, 3, 1, channels], dim=-1)
    identity = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=raw.dtype, device=raw.device)
    rot = F.normalize(rot_raw + identity, dim=-1)
    scale = log_scale + torch.tanh(scale_raw)
    return rot, scale, torch.sigmoid(opacity_raw[..., 0]), appearance


@dataclass
class ReferenceState:
    """Gaussians and encoding prepared for one reference identity."""

    encoding: RefEncoding
    vertices: torch.Tensor
    template: GaussianSet
    uv: Optional[GaussianSet] = None


class MetaGaussianRenderer(nn.Module):
    """All stage-2 parameters: base features, attribute decoders and refiner.

    Args:
        model: The morphable model whose meshes drive the Gaussians.
        config: Renderer settings.
    """

    def __init__(self, model: MorphableModel, config: RendererConfig = None):
        super().__init__()
        self.config = config or RendererConfig()
        self.model = model
        c = self.config
        d_f = self.encoder.feature_dim
        n_attributes = 4 + 3 + 1 + c.appearance_dim
        self.base_features = nn.Parameter(0.1 * torch.randn(model.V, c.base_dim))
        self.template_decoder = nn.Sequential(
            nn.Linear(2 * d_f + c.base_dim, c.hidden_dim),
            nn.GELU(),
            nn.Linear(c.hidden_dim, c.hidden_dim),
            nn.GELU(),
            nn.Linear(c.hidden_dim, n_attributes),
        )
        self.uv_decoder = nn.Sequential(
            nn.Conv2d(2 * d_f + c.base_dim, c.hidden_dim, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(c.hidden_dim, c.hidden_dim, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(c.hidden_dim, 3 + n_attributes, 1),
        )
        self.refiner = Refiner(c.appearance_dim, c.refiner_width)

        triangles = torch.as_tensor(model.triangles, dtype=torch.long)
        barycenters = model.template[model.triangles].mean(axis=1)
        self.grid_size, cells = uv_layout(barycenters)
        self.register_buffer("triangles", triangles, persistent=False)
        self.register_buffer("uv_cells", torch.as_tensor(cells), persistent=False)

    @property
    def encoder(self):
        return get_image_encoder(self.config.image_encoder)

    @property
    def dtype(self) -> torch.dtype:
        return self.base_features.dtype

    def prepare(self, image, beta_ref, camera: CameraPose, ref_motion=None) -> ReferenceState:
        """Encode the reference image and build both Gaussian sets for it.

        Args:
            image: Reference image (H, W, 3).
            beta_ref: Shape coefficients of the reference identity.
            camera: Camera of the reference image.
            ref_motion: Motion frame of the reference image; zero motion if omitted.
        """
        if ref_motion is None:
            ref_motion = torch.zeros(self.model.E + 6, dtype=self.dtype)
        vertices = decode(self.model, beta_ref, torch.as_tensor(ref_motion, dtype=self.dtype))
        encoding = encode_reference(_as_image_tensor(image).to(self.dtype), self.config.image_encoder)
        template = build_template_gaussians(self, encoding, vertices, camera)
        uv = build_uv_gaussians(self, encoding, vertices, camera) if self.config.use_uv else None
        return ReferenceState(encoding, vertices, template, uv)

    def render(self, vertices: torch.Tensor, state: ReferenceState, camera: CameraPose) -> torch.Tensor:
        return render(vertices, state, camera, self)


def build_template_gaussians(
    renderer: MetaGaussianRenderer, ref: RefEncoding, ref_vertices: torch.Tensor, camera: CameraPose
) -> GaussianSet:
    """One Gaussian per reference vertex.

    Each vertex is projected into the reference image, the feature map is sampled there and
    the attributes are decoded from the sampled feature, the vertex base feature and the
    identity embedding. Vertices projecting outside the image (or behind the camera) sample
    the clamped image border.
    """
    ref_vertices = ref_vertices.to(renderer.dtype)
    uv, _ = project(ref_vertices, camera)
    sampled = sample_features(ref, uv).to(renderer.dtype)
    identity = ref.f_id.to(renderer.dtype).expand(ref_vertices.shape[0], -1)
    raw = renderer.template_decoder(torch.cat([sampled, renderer.base_features, identity], dim=-1))
    log_scale = torch.log(0.5 * mean_edge_length(ref_vertices, renderer.triangles)).detach()
    rot, scale, opacity, appearance = _decode_attributes(raw, log_scale, renderer.config.appearance_dim)
    return GaussianSet(
        mu=ref_vertices,
        rot=rot,
        scale=scale,
        opacity=opacity,
        appearance=appearance,
        vertex_idx=torch.arange(ref_vertices.shape[0]),
    )


def build_uv_gaussians(
    renderer: MetaGaussianRenderer, ref: RefEncoding, ref_vertices: torch.Tensor, camera: CameraPose
) -> GaussianSet:
    """One Gaussian per triangle at the barycenter plus a decoded offset.

    Per-triangle features (sampled image feature at the projected barycenter, mean base
    feature of the corners, identity embedding) are laid out on a square grid ordered by
    spherical coordinates and decoded by a convolutional network. The offset length is
    clamped to the mean edge length; the offset is stored in the triangle frame so it moves
    rigidly with the triangle.
    """
    ref_vertices = ref_vertices.to(renderer.dtype)
    triangles = renderer.triangles
    barycenters, frames = triangle_frames(ref_vertices, triangles)
    uv, _ = project(barycenters, camera)
    sampled = sample_features(ref, uv).to(renderer.dtype)
    base = renderer.base_features[triangles].mean(dim=1)
    identity = ref.f_id.to(renderer.dtype).expand(triangles.shape[0], -1)
    per_triangle = torch.cat([sampled, base, identity], dim=-1)

    side = renderer.grid_size
    grid = per_triangle.new_zeros(side * side, per_triangle.shape[1]).index_copy(0, renderer.uv_cells, per_triangle)
    decoded = renderer.uv_decoder(grid.T.reshape(1, -1, side, side))[0]
    raw = decoded.reshape(decoded.shape[0], side * side).T[renderer.uv_cells]

    edge = mean_edge_length(ref_vertices, triangles).detach()
    offset = raw[:, :3]
    length = torch.sqrt((offset * offset).sum(-1, keepdim=True) + 1e-12)
    offset = offset * (edge / torch.clamp(length, min=edge))
    local_offset = (frames.transpose(-1, -2) @ offset[..., None])[..., 0]
    rot, scale, opacity, appearance = _decode_attributes(
        raw[:, 3:], torch.log(0.5 * edge), renderer.config.appearance_dim
    )
    return GaussianSet(
        mu=barycenters + offset,
        rot=rot,
        scale=scale,
        opacity=opacity,
        appearance=appearance,
        triangles=triangles,
        local_offset=local_offset,
    )


def animate(gaussians: GaussianSet, ref_vertices: torch.Tensor, new_vertices: torch.Tensor) -> GaussianSet:
    """Move Gaussians to a new mesh, keeping every other attribute.

    Template Gaussians take the position of their vertex. UV Gaussians take the barycenter
    of their triangle on the new mesh plus their stored offset in the new triangle frame.

    Raises:
        ValueError: If the vertex arrays differ in shape or the set has no anchors.
    """
    new_vertices = torch.as_tensor(new_vertices)
    if tuple(new_vertices.shape) != tuple(ref_vertices.shape):
        raise ValueError(
            f"New vertices {tuple(new_vertices.shape)} do not match reference {tuple(ref_vertices.shape)}"
        )
    if gaussians.vertex_idx is not None:
        mu = new_vertices[gaussians.vertex_idx]
    elif gaussians.triangles is not None:
        barycenters, frames = triangle_frames(new_vertices, gaussians.triangles)
        mu = barycenters + (frames @ gaussians.local_offset.to(frames.dtype)[..., None])[..., 0]
    else:
        raise ValueError("Gaussians are not anchored to the mesh.")
    return replace(gaussians, mu=mu.to(gaussians.mu.dtype))


def splat(
    gaussians: GaussianSet, camera: CameraPose, blur: float = 0.3, near: float = 1e-3, chunk: int = 256
) -> tuple[torch.Tensor, torch.Tensor]:
    """Project and composite Gaussians front to back.

    Each Gaussian's covariance is projected with the Jacobian of the perspective projection;
    its kernel falls off continuously to zero at three standard deviations. Gaussians are
    sorted by camera depth (ties by index) and composited with
    weight_i = alpha_i * prod_{j<i} (1 - alpha_j).

    Returns:
        Feature image (H, W, C) and alpha map (H, W). Without visible Gaussians both are zero.
    """
    intrinsics = camera.intrinsics
    height, width = intrinsics.height, intrinsics.width
    channels = gaussians.appearance.shape[-1]
    dtype = gaussians.mu.dtype
    empty = (torch.zeros(height, width, channels, dtype=dtype), torch.zeros(height, width, dtype=dtype))
    if len(gaussians) == 0:
        return empty

    cam = to_camera_space(gaussians.mu, camera)
    depth = cam[:, 2]
    visible = torch.nonzero(depth > near)[:, 0]
    if visible.numel() == 0:
        return empty
    order = visible[torch.sort(depth[visible], stable=True).indices]
    cam, depth = cam[order], depth[order]

    rotation = quaternion_to_matrix(gaussians.rot[order])
    axes = rotation * torch.exp(gaussians.scale[order])[:, None, :]
    view = torch.as_tensor(camera.extrinsic[:3, :3], dtype=dtype)
    axes = view @ axes
    covariance = axes @ axes.transpose(-1, -2)

    f = intrinsics.focal
    zero = torch.zeros_like(depth)
    jacobian = torch.stack(
        [f / depth, zero, -f * cam[:, 0] / depth**2, zero, f / depth, -f * cam[:, 1] / depth**2], dim=-1
    ).reshape(-1, 2, 3)
    cov2d = jacobian @ covariance @ jacobian.transpose(-1, -2)
    a = cov2d[:, 0, 0] + blur
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + blur
    det = a * c - b * b
    mean_x = f * cam[:, 0] / depth + intrinsics.cx
    mean_y = f * cam[:, 1] / depth + intrinsics.cy

    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij"
    )
    xs, ys = xs.reshape(-1), ys.reshape(-1)
    opacity = gaussians.opacity[order]
    appearance = gaussians.appearance[order]

    image = torch.zeros(height * width, channels, dtype=dtype)
    transmittance = torch.ones(height * width, dtype=dtype)
    for start in range(0, order.shape[0], chunk):
        part = slice(start, start + chunk)
        dx = xs[None] - mean_x[part, None]
        dy = ys[None] - mean_y[part, None]
        mahalanobis = (c[part, None] * dx * dx - 2 * b[part, None] * dx * dy + a[part, None] * dy * dy) / det[
            part, None
        ]
        kernel = torch.clamp(torch.exp(-0.5 * mahalanobis) - _CUTOFF, min=0) / (1 - _CUTOFF)
        alpha = torch.clamp(opacity[part, None] * kernel, 0, 1)
        passed = torch.cumprod(1 - alpha, dim=0)
        before = transmittance * torch.cat([torch.ones_like(passed[:1]), passed[:-1]], dim=0)
        image = image + (alpha * before).T @ appearance[part]
        transmittance = transmittance * passed[-1]
    return image.reshape(height, width, channels), (1 - transmittance).reshape(height, width)


def refine(features: torch.Tensor, refiner: Refiner) -> torch.Tensor:
    """Refine a splatted feature image (H, W, C) to an RGB image (H, W, 3) in [0, 1].

    Raises:
        ValueError: If the channel count does not match the refiner.
    """
    if features.ndim != 3 or features.shape[-1] != refiner.in_channels:
        raise ValueError(
            f"Refiner expects (H, W, {refiner.in_channels}) features, got {tuple(features.shape)}"
        )
    residual = refiner(features.permute(2, 0, 1)[None].to(refiner.out.weight.dtype))[0].permute(1, 2, 0)
    return torch.sigmoid(features[..., :3] + residual)


def render(
    vertices: torch.Tensor, state: ReferenceState, camera: CameraPose, renderer: MetaGaussianRenderer
) -> torch.Tensor:
    """Render mesh vertices (V, 3) with the Gaussians prepared for a reference identity."""
    vertices = torch.as_tensor(vertices).to(renderer.dtype)
    sets = [animate(state.template, state.vertices, vertices)]
    if state.uv is not None:
        sets.append(animate(state.uv, state.vertices, vertices))
    features, _ = splat(concat_gaussians(sets), camera, renderer.config.blur)
    return refine(features, renderer.refiner)


@dataclass
class Stage2Weights:
    """Weights of the stage-2 objective."""

    pho: float = 1.0
    per: float = 0.025

    def to_dict(self) -> dict:
        return asdict(self)


def stage2_loss(
    pred: torch.Tensor, gt: torch.Tensor, weights: Stage2Weights = None, encoder_id: str = "desk"
) -> dict[str, torch.Tensor]:
    """Stage-2 loss terms for images of shape (..., H, W, 3).

    pho is the mean absolute pixel error, per the sum over the image encoder's pyramid levels
    of the mean squared feature difference.

    Returns:
        Dictionary with the keys pho, per and total.
    """
    weights = weights or Stage2Weights()
    pred = _as_image_tensor(pred)
    gt = _as_image_tensor(gt).to(pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"Prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ in shape.")
    if pred.shape[-1] != 3:
        raise ValueError("Images must have three channels.")
    encoder = get_image_encoder(encoder_id)
    to_batch = lambda image: image.reshape(-1, *image.shape[-3:]).permute(0, 3, 1, 2)  # noqa: E731
    per = sum(
        torch.mean((p - g) ** 2) for p, g in zip(encoder.pyramid(to_batch(pred)), encoder.pyramid(to_batch(gt)))
    )
    pho = torch.mean(torch.abs(pred - gt))
    return {"pho": pho, "per": per, "total": weights.pho * pho + weights.per * per}
