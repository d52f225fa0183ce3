"""Query-based sensor fusion over camera and dual radar feature pyramids.

A fixed set of polar 3D query points carries a feature vector each. One
fusion block runs five steps: self-attention across queries, projection of
every query onto each sensor's image plane, per-sensor deformable
cross-attention against that sensor's feature pyramid, a per-sensor
feed-forward network, and an element-wise max over the per-sensor results.
Queries that fall outside a sensor's view are excluded from that sensor's
contribution entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

TWO_PI = 2.0 * math.pi


def polar_to_cartesian_t(polar: torch.Tensor) -> torch.Tensor:
    """(range, azimuth, elevation) -> ego (x, y, z), batched torch version."""
    r, az, el = polar.unbind(-1)
    cos_el = torch.cos(el)
    return torch.stack([r * cos_el * torch.cos(az),
                        r * cos_el * torch.sin(az),
                        r * torch.sin(el)], dim=-1)


def cartesian_to_polar_t(cart: torch.Tensor) -> torch.Tensor:
    """Ego (x, y, z) -> (range, azimuth, elevation), batched torch version."""
    x, y, z = cart.unbind(-1)
    r = torch.linalg.vector_norm(cart, dim=-1)
    az = torch.atan2(y, x)
    el = torch.asin(torch.clamp(z / torch.clamp(r, min=1e-12), -1.0, 1.0))
    return torch.stack([r, az, el], dim=-1)


@dataclass
class QuerySet:
    """Polar reference positions (N, 3) plus feature vectors (N, D)."""

    positions: torch.Tensor
    features: torch.Tensor

    def __post_init__(self):
        if self.positions.shape[:-1] != self.features.shape[:-1]:
            raise ValueError("positions and features must agree on query count")
        if not torch.isfinite(self.features).all():
            raise ValueError("query features must be finite")


def init_queries(num_queries: int, range_max: float, fov_azimuth: float,
                 feature_dim: int, seed: int = 0) -> QuerySet:
    """Evenly spaced polar query grid with uniform-random features.

    Queries sit at the centers of a sqrt(N) x sqrt(N) grid over
    (0, range_max] x [-fov_azimuth, +fov_azimuth] at zero elevation, so the
    set covers the whole field of view without touching its boundary.
    Features are i.i.d. uniform on [0, 1) from a dedicated generator.
    """
    side = math.isqrt(num_queries)
    if side * side != num_queries:
        raise ValueError(f"num_queries must be a perfect square, got {num_queries}")
    idx = (torch.arange(side, dtype=torch.float32) + 0.5) / side
    r = idx * range_max
    az = (idx * 2.0 - 1.0) * fov_azimuth
    grid_r, grid_az = torch.meshgrid(r, az, indexing="ij")
    positions = torch.stack([grid_r.reshape(-1), grid_az.reshape(-1),
                             torch.zeros(num_queries)], dim=-1)
    gen = torch.Generator().manual_seed(seed)
    features = torch.rand(num_queries, feature_dim, generator=gen)
    return QuerySet(positions=positions, features=features)


@dataclass
class ProjectionResult:
    """Continuous map coordinates per query plus an in-view mask.

    Coordinate order depends on the producing projection (documented
    there); `valid` marks queries whose coordinates lie inside the map.
    """

    coords: torch.Tensor
    valid: torch.Tensor


def project_to_camera(polar: torch.Tensor, intrinsics: torch.Tensor,
                      rotation: torch.Tensor, translation: torch.Tensor,
                      width: int, height: int) -> ProjectionResult:
    """Pinhole projection of polar ego points; coords are (u, v) pixels.

    Invalid (masked, not an error) when the point sits at or behind the
    image plane or projects outside pixel-center bounds
    [-0.5, size - 0.5).
    """
    cam = polar_to_cartesian_t(polar) @ rotation.transpose(-1, -2) + translation
    z = cam[..., 2]
    z_safe = torch.clamp(z, min=1e-6)
    u = intrinsics[0, 0] * cam[..., 0] / z_safe + intrinsics[0, 2]
    v = intrinsics[1, 1] * cam[..., 1] / z_safe + intrinsics[1, 2]
    valid = ((z > 1e-6)
             & (u >= -0.5) & (u < width - 0.5)
             & (v >= -0.5) & (v < height - 0.5))
    return ProjectionResult(coords=torch.stack([u, v], dim=-1), valid=valid)


def radar_plane_fractions(polar: torch.Tensor, plane: str, range_max: float,
                          fov_azimuth: float, fov_elevation: float
                          ) -> ProjectionResult:
    """Fractional (row, col) position of polar points on a radar plane.

    Fractions are resolution independent: multiplying by the bin count and
    subtracting 0.5 yields the continuous cell index on a concrete grid.
    The RA plane maps range to rows over [0, range_max] and azimuth to
    columns; the AE plane maps azimuth to rows and elevation to columns.
    Validity is inclusive at the bounds.
    """
    r, az, el = polar.unbind(-1)
    az_frac = (az + fov_azimuth) / (2.0 * fov_azimuth)
    if plane == "ra":
        row, col = r / range_max, az_frac
        valid = (r >= 0) & (r <= range_max) & (az.abs() <= fov_azimuth)
    elif plane == "ae":
        row, col = az_frac, (el + fov_elevation) / (2.0 * fov_elevation)
        valid = (az.abs() <= fov_azimuth) & (el.abs() <= fov_elevation)
    else:
        raise ValueError(f"unknown radar plane {plane!r}; expected 'ra' or 'ae'")
    return ProjectionResult(coords=torch.stack([row, col], dim=-1), valid=valid)


def project_to_radar_plane(polar: torch.Tensor, plane: str, rows: int, cols: int,
                           range_max: float, fov_azimuth: float,
                           fov_elevation: float) -> ProjectionResult:
    """Continuous (row, col) cell coordinates of polar points on a radar grid.

    Linear bin maps send the axis span onto [-0.5, bins - 0.5], so a point
    at the k-th bin center lands exactly on index k.
    """
    frac = radar_plane_fractions(polar, plane, range_max, fov_azimuth,
                                 fov_elevation)
    scale = torch.tensor([rows, cols], dtype=frac.coords.dtype,
                         device=frac.coords.device)
    return ProjectionResult(coords=frac.coords * scale - 0.5, valid=frac.valid)


class PositionalEncoding2D(nn.Module):
    """Fixed sinusoidal 2D encoding added to a feature map.

    Half the channels encode the normalized row coordinate, half the
    column, as (sin, cos) pairs at frequencies 2^k * 2*pi. Coordinates use
    the cell-center convention t = (index + 0.5) / size, so the encoding
    depends only on relative position within the map, not its resolution.
    """

    def __init__(self, channels: int):
        super().__init__()
        if channels % 4 != 0:
            raise ValueError(f"channels must be divisible by 4, got {channels}")
        self.channels = channels

    def encoding(self, height: int, width: int, dtype=torch.float32,
                 device=None) -> torch.Tensor:
        k = torch.arange(self.channels // 4, dtype=dtype, device=device)
        freqs = TWO_PI * torch.pow(2.0, k)
        t_row = (torch.arange(height, dtype=dtype, device=device) + 0.5) / height
        t_col = (torch.arange(width, dtype=dtype, device=device) + 0.5) / width

        def axis_encoding(t):
            phase = freqs[:, None] * t[None, :]
            return torch.stack([phase.sin(), phase.cos()], dim=1).flatten(0, 1)

        rows = axis_encoding(t_row)[:, :, None].expand(-1, height, width)
        cols = axis_encoding(t_col)[:, None, :].expand(-1, height, width)
        return torch.cat([rows, cols], dim=0)

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        c, h, w = feature_map.shape[-3:]
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        return feature_map + self.encoding(h, w, dtype=feature_map.dtype,
                                           device=feature_map.device)


class DeformableCrossAttention(nn.Module):
    """Multi-head, multi-level deformable attention for one sensor.

    Each query samples `num_points` bilinear taps per head and level around
    its projected reference point; offsets and per-tap weights come from
    linear layers on the query feature. Offset and weight layers start at
    zero, so the initial operator averages taps at the reference point
    itself. Samples outside a map read as zero, and queries whose reference
    is invalid output an exact zero vector.
    """

    def __init__(self, dim: int, num_heads: int = 4, num_levels: int = 4,
                 num_points: int = 4):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        n_taps = num_heads * num_levels * num_points
        self.sampling_offsets = nn.Linear(dim, n_taps * 2)
        self.attention_weights = nn.Linear(dim, n_taps)
        nn.init.zeros_(self.sampling_offsets.weight)
        nn.init.zeros_(self.sampling_offsets.bias)
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)

    def tap_parameters(self, features: torch.Tensor
                       ) -> tuple[torch.Tensor, torch.Tensor]:
        """Offsets (B,N,H,L,K,2) in level cells and softmax weights (B,N,H,L,K)."""
        b, n = features.shape[:2]
        shape = (b, n, self.num_heads, self.num_levels, self.num_points)
        offsets = self.sampling_offsets(features).view(*shape, 2)
        logits = self.attention_weights(features).view(
            b, n, self.num_heads, self.num_levels * self.num_points)
        weights = torch.softmax(logits, dim=-1).view(*shape)
        return offsets, weights

    def forward(self, features: torch.Tensor, levels: list[torch.Tensor],
                ref_fractions: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        if len(levels) != self.num_levels:
            raise ValueError(f"expected {self.num_levels} levels, got {len(levels)}")
        b, n, d = features.shape
        if d != self.dim:
            raise ValueError(f"expected feature dim {self.dim}, got {d}")
        heads, head_dim = self.num_heads, self.dim // self.num_heads
        offsets, weights = self.tap_parameters(features)

        accum = features.new_zeros(b * heads, head_dim, n)
        for lvl, level_map in enumerate(levels):
            if level_map.shape[-3] != self.dim:
                raise ValueError("level channel width must match attention dim")
            h_l, w_l = level_map.shape[-2:]
            value = self.value_proj(level_map.permute(0, 2, 3, 1))
            value = value.permute(0, 3, 1, 2).reshape(b * heads, head_dim, h_l, w_l)

            # Reference fraction -> continuous cell index on this level, plus
            # the predicted per-tap offset (in cells of this level).
            ref_cells = ref_fractions * ref_fractions.new_tensor([h_l, w_l]) - 0.5
            taps = ref_cells[:, :, None, None, :] + offsets[:, :, :, lvl]
            # grid_sample wants (x, y) normalized to [-1, 1], align_corners=False.
            grid = (taps.flip(-1) + 0.5) / taps.new_tensor([w_l, h_l]) * 2.0 - 1.0
            grid = grid.permute(0, 2, 1, 3, 4).reshape(b * heads, n,
                                                       self.num_points, 2)
            sampled = F.grid_sample(value, grid, mode="bilinear",
                                    padding_mode="zeros", align_corners=False)
            w = weights[:, :, :, lvl].permute(0, 2, 1, 3)
            w = w.reshape(b * heads, 1, n, self.num_points)
            accum = accum + (sampled * w).sum(dim=-1)

        out = accum.view(b, heads, head_dim, n).permute(0, 3, 1, 2).reshape(b, n, d)
        return self.output_proj(out) * valid.unsqueeze(-1).to(out.dtype)


@dataclass
class SensorGeometry:
    """Everything needed to project polar queries onto each sensor plane.

    Camera intrinsics must correspond to the resized image actually fed to
    the encoder, i.e. `image_width`/`image_height` are post-resize.
    """

    intrinsics: torch.Tensor
    rotation: torch.Tensor
    translation: torch.Tensor
    image_width: int
    image_height: int
    range_max: float
    fov_azimuth: float
    fov_elevation: float


SENSOR_IDS = ("camera", "radar_ra", "radar_ae")


def project_queries(positions: torch.Tensor, sensor: str,
                    geometry: SensorGeometry) -> ProjectionResult:
    """Fractional (row, col) reference points of queries on one sensor plane."""
    if sensor == "camera":
        proj = project_to_camera(positions, geometry.intrinsics,
                                 geometry.rotation, geometry.translation,
                                 geometry.image_width, geometry.image_height)
        u, v = proj.coords.unbind(-1)
        frac = torch.stack([(v + 0.5) / geometry.image_height,
                            (u + 0.5) / geometry.image_width], dim=-1)
        return ProjectionResult(coords=frac, valid=proj.valid)
    if sensor in ("radar_ra", "radar_ae"):
        return radar_plane_fractions(positions, sensor.removeprefix("radar_"),
                                     geometry.range_max, geometry.fov_azimuth,
                                     geometry.fov_elevation)
    raise ValueError(f"unknown sensor {sensor!r}; expected one of {SENSOR_IDS}")


class FusionBlock(nn.Module):
    """One five-step fusion round updating query features in place of old ones.

    Sub-layers follow the dropout -> residual add -> layer norm pattern.
    The final max pool runs element-wise over the per-sensor branches;
    (query, sensor) pairs whose projection is invalid are excluded, and a
    query visible to no sensor comes out as the zero vector.
    """

    def __init__(self, dim: int, sensors: tuple[str, ...] = SENSOR_IDS,
                 num_heads: int = 4, num_levels: int = 4, num_points: int = 4,
                 dropout: float = 0.1, ffn_hidden: int | None = None):
        super().__init__()
        unknown = set(sensors) - set(SENSOR_IDS)
        if unknown or not sensors:
            raise ValueError(f"sensors must be a non-empty subset of {SENSOR_IDS}")
        self.sensors = tuple(sensors)
        ffn_hidden = ffn_hidden or 4 * dim
        self.self_attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm_self = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)
        self.cross_attn = nn.ModuleDict({
            s: DeformableCrossAttention(dim, num_heads, num_levels, num_points)
            for s in self.sensors})
        self.norm_cross = nn.ModuleDict({s: nn.LayerNorm(dim) for s in self.sensors})
        self.ffn = nn.ModuleDict({
            s: nn.Sequential(nn.Linear(dim, ffn_hidden), nn.ReLU(),
                             nn.Linear(ffn_hidden, dim))
            for s in self.sensors})
        self.norm_ffn = nn.ModuleDict({s: nn.LayerNorm(dim) for s in self.sensors})

    def forward(self, features: torch.Tensor, positions: torch.Tensor,
                pyramids: dict, geometry: SensorGeometry) -> torch.Tensor:
        attn, _ = self.self_attn(features, features, features, need_weights=False)
        features = self.norm_self(features + self.dropout(attn))

        branches, masks = [], []
        for sensor in self.sensors:
            proj = project_queries(positions, sensor, geometry)
            levels = pyramids[sensor].levels
            cross = self.cross_attn[sensor](features, levels, proj.coords,
                                            proj.valid)
            x = self.norm_cross[sensor](features + self.dropout(cross))
            y = self.norm_ffn[sensor](x + self.dropout(self.ffn[sensor](x)))
            branches.append(y)
            masks.append(proj.valid)

        stacked = torch.stack(branches)
        mask = torch.stack(masks).unsqueeze(-1)
        fused = stacked.masked_fill(~mask, float("-inf")).amax(dim=0)
        any_valid = mask.any(dim=0)
        return torch.where(any_valid, fused, torch.zeros_like(fused))
