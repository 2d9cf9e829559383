"""On-disk formats: checkpoints, sample files, run manifests and metrics CSVs.

All writes go to a temporary file in the destination directory first and are
moved into place with ``os.replace``.
"""

import csv
import io
import json
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from .exceptions import CheckpointError, SampleFormatError, StorageError
from .types import DTYPE, MixedState, RunManifest

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "EGMC"
CHECKPOINT_VERSION = 1
SAMPLES_MAGIC = b"EGMS"
SAMPLES_VERSION = 1

METRICS_COLUMNS = [
    "outer",
    "inner",
    "loss_egm",
    "loss_nem",
    "ess_mean",
    "buffer_energy_mean",
    "lr",
    "wallclock_s",
]

SAMPLES_HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u2"),
        ("d_disc", "<u4"),
        ("d_cont", "<u4"),
        ("vocab_size", "<u4"),
        ("count", "<u8"),
    ]
)


def ensure_dir(path: Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"{path}: cannot create directory: {e}") from e
    return path


def atomic_write_bytes(path: Path, data: bytes):
    """Write ``data`` to a temporary sibling, then rename it over ``path``.

    Raises:
        StorageError: If the directory or file cannot be written
    """
    path = Path(path)
    ensure_dir(path.parent)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    except OSError as e:
        raise StorageError(f"{path}: cannot write: {e}") from e
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise StorageError(f"{path}: cannot write: {e}") from e
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path: Path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(path: Path, arrays: Dict[str, torch.Tensor], meta: Dict[str, Any]) -> Path:
    """Write a checkpoint directory: ``manifest.json`` plus one ``.bin`` per array.

    Every array is stored as flat little-endian float64; the manifest records
    its name, shape and byte size. The manifest is written last.

    Args:
        path: Checkpoint directory
        arrays: Named tensors (token ids and RNG bytes are stored exactly as floats)
        meta: JSON-serializable counters and architecture descriptors

    Returns:
        Path: Manifest path
    """
    path = Path(path)
    ensure_dir(path)
    index = []
    for i, (name, tensor) in enumerate(arrays.items()):
        blob = np.ascontiguousarray(
            tensor.detach().to(DTYPE).cpu().numpy(), dtype="<f8"
        ).tobytes()
        file_name = f"{i:04d}.bin"
        atomic_write_bytes(path / file_name, blob)
        index.append(
            {
                "name": name,
                "file": file_name,
                "shape": list(tensor.shape),
                "dtype": str(tensor.dtype).replace("torch.", ""),
                "nbytes": len(blob),
            }
        )
    manifest = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "arrays": index,
    }
    manifest_path = path / "manifest.json"
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2))
    logger.info(f"Checkpoint written to {path}")
    return manifest_path


def load_checkpoint(path: Path) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """Read a checkpoint directory written by ``save_checkpoint``.

    Raises:
        CheckpointError: On a missing manifest, foreign magic, version mismatch
            or a blob whose size disagrees with its recorded shape
    """
    path = Path(path)
    manifest_path = path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{manifest_path}: cannot read checkpoint manifest: {e}") from e

    if manifest.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{manifest_path}: not a checkpoint (bad magic)")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{manifest_path}: checkpoint format version {manifest.get('version')} "
            f"is not supported (expected {CHECKPOINT_VERSION})"
        )

    arrays: Dict[str, torch.Tensor] = {}
    for entry in manifest["arrays"]:
        blob_path = path / entry["file"]
        try:
            blob = blob_path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"{blob_path}: missing array blob") from e
        expected = 8 * int(np.prod(entry["shape"], dtype=np.int64))
        if len(blob) != expected or len(blob) != entry["nbytes"]:
            raise CheckpointError(
                f"{blob_path}: truncated blob ({len(blob)} bytes, expected {expected})"
            )
        values = np.frombuffer(blob, dtype="<f8").reshape(entry["shape"])
        tensor = torch.from_numpy(values.copy())
        dtype = getattr(torch, entry["dtype"], DTYPE)
        arrays[entry["name"]] = tensor.to(dtype)
    return arrays, manifest["meta"]


def _row_dtype(d_disc: int, d_cont: int) -> np.dtype:
    fields = []
    if d_disc:
        fields.append(("tokens", "<u2", (d_disc,)))
    if d_cont:
        fields.append(("cont", "<f8", (d_cont,)))
    return np.dtype(fields)


def write_samples(states: MixedState, path: Path, vocab_size: int) -> Path:
    """Write terminal samples with an ``EGMS`` header and a row-major payload."""
    if len(states.batch_shape) != 1:
        raise SampleFormatError("samples must have exactly one batch axis")
    n, d_disc, d_cont = len(states), states.d_disc, states.d_cont
    header = np.zeros(1, dtype=SAMPLES_HEADER)
    header[0] = (SAMPLES_MAGIC, SAMPLES_VERSION, d_disc, d_cont, vocab_size, n)
    buf = io.BytesIO()
    buf.write(header.tobytes())
    if d_disc + d_cont:
        rows = np.zeros(n, dtype=_row_dtype(d_disc, d_cont))
        if d_disc:
            rows["tokens"] = states.disc.cpu().numpy()
        if d_cont:
            rows["cont"] = states.cont.to(DTYPE).cpu().numpy()
        buf.write(rows.tobytes())
    atomic_write_bytes(Path(path), buf.getvalue())
    return Path(path)


def read_samples(path: Path) -> Tuple[MixedState, int]:
    """Read a sample file.

    Returns:
        Tuple[MixedState, int]: States and the vocabulary size

    Raises:
        SampleFormatError: If the header is foreign or disagrees with the payload
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise SampleFormatError(f"{path}: cannot read samples: {e}") from e
    if len(data) < SAMPLES_HEADER.itemsize:
        raise SampleFormatError(f"{path}: file shorter than header")
    header = np.frombuffer(data[: SAMPLES_HEADER.itemsize], dtype=SAMPLES_HEADER)[0]
    if header["magic"] != SAMPLES_MAGIC:
        raise SampleFormatError(f"{path}: bad magic {header['magic']!r}")
    if header["version"] != SAMPLES_VERSION:
        raise SampleFormatError(f"{path}: unsupported version {header['version']}")
    d_disc, d_cont = int(header["d_disc"]), int(header["d_cont"])
    n = int(header["count"])
    row = _row_dtype(d_disc, d_cont)
    payload = data[SAMPLES_HEADER.itemsize :]
    if len(payload) != n * row.itemsize:
        raise SampleFormatError(
            f"{path}: payload has {len(payload)} bytes, header promises {n} rows"
        )
    rows = np.frombuffer(payload, dtype=row, count=n) if row.itemsize else None
    disc = (
        torch.from_numpy(rows["tokens"].astype(np.int64))
        if d_disc
        else torch.zeros(n, 0, dtype=torch.long)
    )
    cont = (
        torch.from_numpy(rows["cont"].astype("=f8"))
        if d_cont
        else torch.zeros(n, 0, dtype=DTYPE)
    )
    return MixedState(disc=disc, cont=cont), int(header["vocab_size"])


class RunStore:
    """File layout of one training run.

    ``<root>/manifest.json``, ``<root>/metrics.csv``, ``<root>/checkpoints/outer_NNNN``
    and ``<root>/samples/*.bin``.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.manifest: Optional[RunManifest] = None

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def metrics_path(self) -> Path:
        return self.root / "metrics.csv"

    def checkpoint_dir(self, outer: int) -> Path:
        return self.root / "checkpoints" / f"outer_{outer:04d}"

    def initialize(
        self, config: Dict[str, Any], seed: int, version: str, resume: bool = False
    ) -> RunManifest:
        """Write the manifest before any work starts.

        A resumed run reuses the existing manifest. A fresh run discards any
        previous manifest, metrics and checkpoints under the same root.
        """
        ensure_dir(self.root)
        if resume and self.manifest_path.exists():
            self.manifest = RunManifest.model_validate_json(self.manifest_path.read_text())
            self.manifest.status = "running"
        else:
            if not resume:
                self._clear_previous_run()
            self.manifest = RunManifest(
                config=config,
                seed=seed,
                version=version,
                metrics_path=str(self.metrics_path),
            )
        self._write_manifest()
        return self.manifest

    def _clear_previous_run(self):
        ckpt_root = self.root / "checkpoints"
        try:
            if ckpt_root.exists():
                logger.warning(f"Discarding checkpoints of a previous run under {self.root}")
                shutil.rmtree(ckpt_root)
            self.metrics_path.unlink(missing_ok=True)
            self.manifest_path.unlink(missing_ok=True)
        except OSError as e:
            raise StorageError(f"{self.root}: cannot clear previous run: {e}") from e

    def _write_manifest(self):
        atomic_write_text(self.manifest_path, self.manifest.model_dump_json(indent=2))

    def latest_checkpoint(self) -> Optional[Path]:
        ckpt_root = self.root / "checkpoints"
        if not ckpt_root.exists():
            return None
        done = sorted(p for p in ckpt_root.glob("outer_*") if (p / "manifest.json").exists())
        return done[-1] if done else None

    def write_checkpoint(
        self, outer: int, arrays: Dict[str, torch.Tensor], meta: Dict[str, Any]
    ) -> Path:
        path = self.checkpoint_dir(outer)
        save_checkpoint(path, arrays, meta)
        if str(path) not in self.manifest.checkpoint_paths:
            self.manifest.checkpoint_paths.append(str(path))
        self._write_manifest()
        return path

    def write_samples(self, name: str, states: MixedState, vocab_size: int) -> Path:
        path = write_samples(states, self.root / "samples" / f"{name}.bin", vocab_size)
        if str(path) not in self.manifest.sample_paths:
            self.manifest.sample_paths.append(str(path))
        self._write_manifest()
        return path

    def read_metrics(self) -> List[Dict[str, str]]:
        if not self.metrics_path.exists():
            return []
        with open(self.metrics_path, newline="") as f:
            return list(csv.DictReader(f))

    def write_metrics(self, rows: List[Dict[str, Any]]):
        """Rewrite the metrics CSV with ``rows`` (header included)."""
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRICS_COLUMNS})
        atomic_write_text(self.metrics_path, buf.getvalue())

    def finalize(self, status: str = "completed"):
        self.manifest.status = status
        self._write_manifest()


def write_csv(path: Path, rows: List[Dict[str, Any]], columns: Optional[List[str]] = None):
    """Write report rows (histograms, sweeps, oracle tables) as CSV."""
    columns = columns or (list(rows[0].keys()) if rows else [])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(Path(path), buf.getvalue())
