import contextlib
import logging
import sys
import time
import tracemalloc
from dataclasses import dataclass
from typing import Iterator, Optional

logger = logging.getLogger(__name__)


@dataclass
class Usage:
    wall_time: float = 0.0
    peak_memory: int = 0


@contextlib.contextmanager
def measure(track_memory: bool = True) -> Iterator[Usage]:
    """Wall time and allocation high-water mark of the enclosed block.

    Memory is the tracemalloc peak above the level at entry; numpy buffers are
    reported to tracemalloc, so this covers the solver's arrays. When tracing was
    already active the global peak cannot be reset without disturbing the outer
    measurement, and the figure becomes an upper bound.
    """
    usage = Usage()
    started = False
    baseline = 0
    if track_memory:
        started = not tracemalloc.is_tracing()
        if started:
            tracemalloc.start()
            tracemalloc.reset_peak()
        baseline, _ = tracemalloc.get_traced_memory()
    t0 = time.perf_counter()
    try:
        yield usage
    finally:
        usage.wall_time = time.perf_counter() - t0
        if track_memory:
            _, peak = tracemalloc.get_traced_memory()
            usage.peak_memory = max(peak - baseline, 0)
            if started:
                tracemalloc.stop()


def max_rss() -> Optional[int]:
    """Process max resident set size in bytes, None where unavailable."""
    try:
        import resource
    except ImportError:
        return None
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # kilobytes on Linux, bytes on macOS
    return int(rss if sys.platform == "darwin" else rss * 1024)
