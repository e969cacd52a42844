"""Traffic density reconstruction on road networks."""

from ._roadmrf import Model, RoadGraph, fit, loocv, mae, mask, reconstruct, sample

__all__ = ["Model", "RoadGraph", "fit", "loocv", "mae", "mask", "reconstruct", "sample"]
