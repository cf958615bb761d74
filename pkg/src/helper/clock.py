import time as time_module


def time() -> float:
    """
    Get current time in seconds since epoch.
    In tests, this can be patched, thats the reason of this function.
    Round wall times and log prefixes both read it.
    """
    return time_module.time()


def log(message: str) -> None:
    """
    Print a timestamped log line.

    Every component reports through this function so that a single
    switch (VERBOSE in the config) silences a run. Messages are expected
    to carry their component prefix, e.g. "FedAvg: round 3 ...".

    Args:
        message (str): Text to print after the timestamp prefix
    """
    try:
        from src.config import VERBOSE
    except (ImportError, AttributeError):
        VERBOSE = True

    if VERBOSE:
        print(f"[{time()}] {message}")


def elapsed_ms(start: float) -> int:
    """Whole milliseconds since `start` (a value returned by time())."""
    return int(round((time() - start) * 1000.0))
