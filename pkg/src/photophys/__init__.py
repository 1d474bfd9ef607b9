"""Workbench for single-photon emitter photophysics built on photon time tags."""

__version__ = "0.1.0"

from .errors import PhotophysError  # noqa: E402
from .timetag import StreamMeta, TimeTagStream, hbt_split, merge_streams, read_stream, write_stream  # noqa: E402

__all__ = [
    "PhotophysError",
    "StreamMeta",
    "TimeTagStream",
    "hbt_split",
    "merge_streams",
    "read_stream",
    "write_stream",
    "__version__",
]
