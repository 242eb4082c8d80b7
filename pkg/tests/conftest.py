"""Pin BLAS pools to one thread for the whole session: timing-sensitive
benchmarks stay valid and parallel-vs-serial comparisons are bitwise
meaningful (our concurrency is batch-level, above BLAS)."""

from threadpoolctl import threadpool_limits

_LIMITS = threadpool_limits(limits=1)
