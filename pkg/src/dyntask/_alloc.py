"""Process-level performance tuning applied when the tape core loads.

Two knobs, both measured on the training loop:

* malloc thresholds: a training step retains every intermediate activation
  on its tape and frees the whole previous tape at once. Under default
  settings those multi-megabyte buffers are mmap'd and returned to the OS on
  free, so every step pays page-fault cost for the same memory again.
  Raising the mmap and trim thresholds keeps freed chunks on the heap free
  list, where the next step recycles them without faulting.

* BLAS threads: the matmuls here are small (im2col patches, bottleneck
  dense layers); multi-threaded BLAS spends more time handing work off than
  computing and roughly doubles step time on 2-core boxes. One thread wins.
"""

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_applied = False
_limits_handle = None


def enable_buffer_reuse() -> None:
    """Idempotent; each knob is best-effort and silently skipped where
    unsupported (non-glibc, no threadpoolctl)."""
    global _applied, _limits_handle
    if _applied:
        return
    _applied = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError):
        pass
    try:
        import threadpoolctl
        _limits_handle = threadpoolctl.threadpool_limits(limits=1, user_api="blas")
    except Exception:
        pass
