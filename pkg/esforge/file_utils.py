"""
Atomic file operations and file locking utilities.

Checkpoints, CSV tables and SVG reports are written through a temp file and
an atomic replace, and a run directory is guarded by an fcntl lock so two
experiments never write into it at once.
"""

import atexit
import fcntl
import os
import tempfile
import time
from pathlib import Path
from typing import Any, Optional


class AtomicFileWriter:
    """
    Atomic file writer using temp file + atomic replace.

    Artifacts are never left half-written: data goes to a temporary file in
    the same directory first, is fsync'ed, then replaces the target with
    os.replace().
    """

    @staticmethod
    def write_bytes(filepath: Path, data: bytes) -> None:
        """
        Atomically write binary data to a file.

        Args:
            filepath: Target file path
            data: Bytes to write

        Raises:
            OSError: If the write fails (temp file is cleaned up)
        """
        filepath = Path(filepath)
        filepath.parent.mkdir(parents=True, exist_ok=True)

        temp_path = None
        try:
            with tempfile.NamedTemporaryFile(
                mode="wb",
                dir=filepath.parent,
                prefix=f".{filepath.name}.",
                suffix=".tmp",
                delete=False,
            ) as tmp_file:
                temp_path = Path(tmp_file.name)
                tmp_file.write(data)
                tmp_file.flush()
                os.fsync(tmp_file.fileno())

            os.replace(temp_path, filepath)

        except Exception:
            if temp_path and temp_path.exists():
                try:
                    temp_path.unlink()
                except OSError:
                    pass
            raise

    @staticmethod
    def write_text(filepath: Path, text: str) -> None:
        """Atomically write UTF-8 text with '\\n' line endings."""
        AtomicFileWriter.write_bytes(filepath, text.encode("utf-8"))

    @staticmethod
    def read_text(filepath: Path, default: Any = None) -> Any:
        """
        Read a UTF-8 text file with a safe default.

        Args:
            filepath: File to read
            default: Value returned when the file doesn't exist

        Returns:
            File contents or default
        """
        filepath = Path(filepath)
        if not filepath.exists():
            return default
        return filepath.read_text(encoding="utf-8")

    @staticmethod
    def read_bytes(filepath: Path) -> bytes:
        """Read a binary file."""
        return Path(filepath).read_bytes()


class FileLock:
    """
    Exclusive fcntl lock held on a file for as long as a run writes.

    The holder's pid is written into the file, and the file is removed on
    release. A lock still held at interpreter exit is released then.

    Usage:
        with FileLock(run_dir / "run.lock"):
            ...
    """

    POLL_INTERVAL = 0.05

    def __init__(self, lockfile: Path):
        self.lockfile = Path(lockfile)
        self.lockfile.parent.mkdir(parents=True, exist_ok=True)
        self._fd: Optional[int] = None

    @property
    def held(self) -> bool:
        return self._fd is not None

    def acquire(self, timeout: float = 10.0) -> bool:
        """
        Poll for the lock until `timeout` seconds have passed.

        Returns:
            True once held (immediately if this object already holds it),
            False on timeout
        """
        if self.held:
            return True
        deadline = time.monotonic() + timeout
        fd = os.open(self.lockfile, os.O_RDWR | os.O_CREAT, 0o644)
        while True:
            try:
                fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
                break
            except BlockingIOError:
                if time.monotonic() >= deadline:
                    os.close(fd)
                    return False
                time.sleep(self.POLL_INTERVAL)
        os.ftruncate(fd, 0)
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        self._fd = fd
        atexit.register(self.release)
        return True

    def release(self) -> None:
        """Drop the lock and delete the lock file; a no-op when not held."""
        if self._fd is None:
            return
        fd, self._fd = self._fd, None
        atexit.unregister(self.release)
        try:
            self.lockfile.unlink(missing_ok=True)
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
            os.close(fd)

    def __enter__(self) -> "FileLock":
        if not self.acquire():
            raise RuntimeError(f"run directory is locked by another process: {self.lockfile}")
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> bool:
        self.release()
        return False

    def is_locked(self) -> bool:
        """Whether some holder (this object included) has the lock."""
        if not self.lockfile.exists():
            return False
        fd = os.open(self.lockfile, os.O_RDONLY)
        try:
            fcntl.flock(fd, fcntl.LOCK_SH | fcntl.LOCK_NB)
        except BlockingIOError:
            return True
        finally:
            os.close(fd)
        return False
