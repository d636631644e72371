import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "SERIALSDF_THREADS"


def thread_count():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def map_chunks(fn, n, chunk):
    """Apply ``fn(start, stop)`` over ``[0, n)`` in chunks, results in order.

    numpy releases the GIL inside most kernels, so a thread pool gives real
    parallelism here. Output order never depends on the thread count.
    """
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    workers = thread_count()
    if workers == 1 or len(bounds) <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))
