"""MobileNetV3 architectures in numpy: specs, cost model, inference, search and segmentation heads."""

from .spec import NetworkSpec, LayerRow, builtin_spec, parse_spec, resolve_spec, serialize_spec
from .cost import count, estimate_latency, calibrate_profile, DeviceProfile
from .model import build, forward, init_weights

__version__ = "0.1.0"
