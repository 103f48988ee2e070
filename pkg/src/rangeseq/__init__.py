"""Range-image sequence forecasting for spinning LiDAR scans."""

from rangeseq.rangeimg import PointCloud, RangeImage, SensorModel

__all__ = ["PointCloud", "RangeImage", "SensorModel"]
__version__ = "0.1.0"
