"""Utility functions and helper classes shared by the reduction toolkit."""

from typing import Any, Callable, List, Optional, Tuple
import os
import json
import queue
import hashlib
import logging
import threading
from contextlib import contextmanager

import numpy as np

# Configuration Constants
THREADS_ENV = "SLOWFAST_THREADS"
DEFAULT_CHUNK_SIZE = 256
MASK64 = (1 << 64) - 1
GOLDEN64 = 0x9E3779B97F4A7C15


class SlowFastError(Exception):
    """Base exception for all toolkit errors."""

    pass


class DirectoryError(SlowFastError):
    """Exception raised when directory operations fail."""

    pass


def ensure_dir(directory: str) -> None:
    """
    Ensure a directory exists, creating it if necessary.

    Args:
        directory: Path to the directory to create

    Raises:
        DirectoryError: If directory creation fails
    """
    try:
        os.makedirs(directory, exist_ok=True)
    except Exception as e:
        raise DirectoryError(f"Failed to create directory {directory}: {e}")


def _avalanche(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def tag_word(tag: str) -> int:
    """Map a branch tag to a stable 64-bit word."""
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


def mix64(*words: int) -> int:
    """
    Combine integers into one 64-bit seed with a SplitMix64 avalanche per word.

    Args:
        words: Integers to mix; negative values are taken modulo 2**64

    Returns:
        int: Mixed 64-bit value
    """
    h = GOLDEN64
    for word in words:
        h = _avalanche((h + GOLDEN64 + (word & MASK64)) & MASK64)
    return h


def worker_count() -> int:
    """Number of worker threads, capped by SLOWFAST_THREADS when set."""
    default = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        logging.getLogger(__name__).warning(
            f"Ignoring non-integer {THREADS_ENV}={raw!r}, using {default}"
        )
        return default


def apply_matrix(matrix: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Multiply every vector along the last axis by ``matrix``."""
    return np.einsum("ij,...j->...i", matrix, vectors)


def batch_means(series: np.ndarray, n_batches: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Batch-means estimate of the mean of a correlated series.

    Args:
        series: Array whose first axis is time
        n_batches: Number of equal batches; a remainder at the end is dropped

    Returns:
        Tuple of (mean, standard error, per-batch means)
    """
    series = np.asarray(series, dtype=float)
    if n_batches < 2:
        raise ValueError("batch means need at least two batches")
    size = series.shape[0] // n_batches
    if size < 1:
        raise ValueError(f"series of length {series.shape[0]} is too short for {n_batches} batches")
    trimmed = series[: size * n_batches]
    means = trimmed.reshape((n_batches, size) + series.shape[1:]).mean(axis=1)
    mean = means.mean(axis=0)
    stderr = means.std(axis=0, ddof=1) / np.sqrt(n_batches)
    return mean, stderr, means


def mean_and_stderr(samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sample mean and standard error along the first axis."""
    samples = np.asarray(samples, dtype=float)
    count = samples.shape[0]
    mean = samples.mean(axis=0)
    if count < 2:
        return mean, np.zeros_like(mean)
    return mean, samples.std(axis=0, ddof=1) / np.sqrt(count)


def float_text(value: float) -> str:
    """Format a float with 17 significant digits."""
    return format(float(value), ".17g")


def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps_json(payload: Any) -> str:
    """Deterministic JSON text (sorted keys, numpy-aware)."""
    return json.dumps(payload, indent=2, sort_keys=True, default=_to_builtin) + "\n"


class ReplicaPool:
    """Runs fixed-size replica chunks on worker threads.

    Chunk boundaries depend only on ``chunk_size``, so results reassembled in
    chunk order do not depend on how many workers ran them.
    """

    def __init__(self, n_workers: Optional[int] = None, chunk_size: int = DEFAULT_CHUNK_SIZE):
        self.n_workers = n_workers or worker_count()
        self.chunk_size = chunk_size
        self.logger = logging.getLogger(self.__class__.__name__)

    def chunks(self, n_items: int) -> List[Tuple[int, int]]:
        """Split ``range(n_items)`` into consecutive (start, stop) spans."""
        return [
            (start, min(start + self.chunk_size, n_items))
            for start in range(0, n_items, self.chunk_size)
        ]

    def map(self, fn: Callable[[int, int], Any], n_items: int) -> List[Any]:
        """
        Apply ``fn(start, stop)`` to every chunk.

        Args:
            fn: Worker function for one span of replica indices
            n_items: Total number of replicas

        Returns:
            List of per-chunk results in chunk order

        Raises:
            Exception: The first error raised by any chunk, in chunk order
        """
        spans = self.chunks(n_items)
        results: List[Any] = [None] * len(spans)
        errors: List[Optional[BaseException]] = [None] * len(spans)

        def run(index: int) -> None:
            try:
                results[index] = fn(*spans[index])
            except BaseException as e:
                errors[index] = e

        if self.n_workers == 1 or len(spans) <= 1:
            for index in range(len(spans)):
                run(index)
        else:
            jobs: "queue.Queue[int]" = queue.Queue()
            for index in range(len(spans)):
                jobs.put(index)

            def worker() -> None:
                while True:
                    try:
                        index = jobs.get_nowait()
                    except queue.Empty:
                        return
                    run(index)

            threads = [
                threading.Thread(target=worker, daemon=True)
                for _ in range(min(self.n_workers, len(spans)))
            ]
            for thread in threads:
                thread.start()
            for thread in threads:
                thread.join()

        for error in errors:
            if error is not None:
                raise error
        return results

    def concat(self, fn: Callable[[int, int], np.ndarray], n_items: int) -> np.ndarray:
        """Run ``fn`` per chunk and concatenate the arrays along axis 0."""
        parts = self.map(fn, n_items)
        if not parts:
            return np.empty((0,))
        return np.concatenate(parts, axis=0)


class OutputDirectory:
    """Lock-guarded writer for experiment outputs."""

    def __init__(self, path: str):
        """
        Initialize the writer.

        Args:
            path: Directory that receives every output file
        """
        self.path = path
        self.lock = threading.Lock()
        self.written: List[str] = []
        self.logger = logging.getLogger(self.__class__.__name__)
        ensure_dir(self.path)

    @contextmanager
    def _open(self, name: str):
        """
        Context manager for one output file.

        Yields:
            Text file handle opened for writing

        Raises:
            DirectoryError: If the file cannot be written
        """
        target = os.path.join(self.path, name)
        try:
            with self.lock:
                with open(target, "w", encoding="utf-8", newline="\n") as handle:
                    yield handle
                if name not in self.written:
                    self.written.append(name)
        except OSError as e:
            raise DirectoryError(f"Failed to write {target}: {e}")

    def file_path(self, name: str) -> str:
        """Absolute path of an output file."""
        return os.path.join(self.path, name)

    def write_text(self, name: str, text: str) -> str:
        """Write a text file and return its path."""
        with self._open(name) as handle:
            handle.write(text)
        self.logger.debug(f"Wrote {name}")
        return self.file_path(name)

    def write_json(self, name: str, payload: Any) -> str:
        """Write deterministic JSON and return its path."""
        return self.write_text(name, dumps_json(payload))
