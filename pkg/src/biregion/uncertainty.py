"""Entropy maps and percentile-thresholded uncertainty masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import torch

from .errors import ConfigError


@dataclass
class RegionMask:
    values: torch.Tensor  # float {0, 1}, [B, H, W]; 1 = uncertain
    threshold_used: Union[float, torch.Tensor]
    percentile_q: float

    @property
    def density(self) -> float:
        return float(self.values.mean())


def entropy_map(P: torch.Tensor) -> torch.Tensor:
    """Shannon entropy in nats over the class axis of a [B, C, H, W] probability map.

    0 * ln 0 is taken as 0, so one-hot pixels have exactly zero entropy.
    """
    return -torch.special.xlogy(P, P).sum(dim=1)


def _check_q(q: float) -> None:
    if not 0 < q < 100:
        raise ConfigError(f"percentile q must lie in (0, 100), got {q}")


def percentile_threshold(U: torch.Tensor, q: float, scope: str = "batch"):
    """q-th percentile (linear interpolation) of the entropy values.

    ``scope="batch"`` pools every pixel of the batch and returns a float;
    ``scope="image"`` returns one threshold per image as a [B] tensor.
    """
    _check_q(q)
    if U.numel() == 0:
        raise ConfigError("cannot take a percentile of an empty entropy map")
    U = U.detach()
    if scope == "batch":
        return float(torch.quantile(U.reshape(-1).double(), q / 100.0))
    if scope == "image":
        return torch.quantile(U.reshape(U.shape[0], -1).double(), q / 100.0, dim=1)
    raise ConfigError(f"unknown percentile scope {scope!r}")


def uncertainty_mask(U: torch.Tensor, mu, q: float = float("nan")) -> RegionMask:
    """Mark pixels whose entropy strictly exceeds ``mu``; ties count as certain."""
    U = U.detach()
    if isinstance(mu, torch.Tensor) and mu.ndim == 1:
        thr = mu.double().view(-1, *([1] * (U.ndim - 1)))
    else:
        mu = float(mu)
        thr = torch.tensor(mu, dtype=torch.float64)
    return RegionMask((U.double() > thr).to(U.dtype), mu, q)


def region_mask(P: torch.Tensor, q: float, scope: str = "batch") -> RegionMask:
    U = entropy_map(P.detach())
    return uncertainty_mask(U, percentile_threshold(U, q, scope), q)
