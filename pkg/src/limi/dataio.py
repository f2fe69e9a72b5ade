"""On-disk formats: dataset archives, parameter checkpoints, small CSVs.

Both binary formats open with a short self-describing text header so a hexdump
is enough to identify the file, followed by raw little-endian arrays. Loads
validate sizes exactly and raise DataFormatError on anything unexpected;
writes are deterministic byte-for-byte given equal inputs.
"""

import json
import os

import numpy as np

from .errors import DataFormatError
from .numeric import ParamVector
from .world import WorldDataset

DATASET_MAGIC = "limi-dataset 1"
CHECKPOINT_MAGIC = b"LIMICKPT"
CHECKPOINT_VERSION = 1


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------
# Images are stored quantized to uint8 (256 gray levels); loading maps back to
# float64 in [0, 1]. Tokens are int16, hidden states and labels int8.

def save_dataset(path, ds: WorldDataset, seed: int):
    n, px, _ = ds.images.shape
    _, n_sentences, sent_len = ds.report_tokens.shape
    n_regions = ds.hiddens.shape[1]
    header = "\n".join([
        DATASET_MAGIC,
        f"n_samples = {n}",
        f"image_pixels = {px}",
        f"n_sentences = {n_sentences}",
        f"sentence_length = {sent_len}",
        f"n_regions = {n_regions}",
        f"world_hash = {ds.world_hash}",
        f"seed = {seed}",
        "payload = images u8, tokens i16, hiddens i8, labels i8",
        "", ""])
    images_q = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    _ensure_parent(path)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(images_q.tobytes())
        fh.write(ds.report_tokens.astype("<i2").tobytes())
        fh.write(ds.hiddens.astype("<i1").tobytes())
        fh.write(ds.labels.astype("<i1").tobytes())


def load_dataset(path) -> tuple:
    """Returns (WorldDataset, seed). Images come back quantized to 1/255 steps."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read dataset {path}: {exc}") from exc
    sep = blob.find(b"\n\n")
    if sep < 0 or not blob.startswith(DATASET_MAGIC.encode("ascii")):
        raise DataFormatError(f"{path}: not a limi dataset file")
    fields = {}
    for line in blob[:sep].decode("ascii").splitlines()[1:]:
        key, _, val = line.partition(" = ")
        fields[key] = val
    try:
        n = int(fields["n_samples"])
        px = int(fields["image_pixels"])
        n_sentences = int(fields["n_sentences"])
        sent_len = int(fields["sentence_length"])
        n_regions = int(fields["n_regions"])
        world_hash = fields["world_hash"]
        seed = int(fields["seed"])
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: bad dataset header: {exc}") from exc
    body = blob[sep + 2:]
    sizes = (n * px * px, n * n_sentences * sent_len * 2, n * n_regions,
             n * n_regions)
    if len(body) != sum(sizes):
        raise DataFormatError(
            f"{path}: payload holds {len(body)} bytes, header implies {sum(sizes)}")
    cuts = np.cumsum(sizes)
    images = np.frombuffer(body[:cuts[0]], dtype=np.uint8).astype(np.float64)
    images = (images / 255.0).reshape(n, px, px)
    tokens = np.frombuffer(body[cuts[0]:cuts[1]], dtype="<i2").astype(np.int64)
    tokens = tokens.reshape(n, n_sentences, sent_len)
    hiddens = np.frombuffer(body[cuts[1]:cuts[2]], dtype="<i1").astype(np.int64)
    labels = np.frombuffer(body[cuts[2]:], dtype="<i1").astype(np.int64)
    ds = WorldDataset(images=images, report_tokens=tokens,
                      hiddens=hiddens.reshape(n, n_regions),
                      labels=labels.reshape(n, n_regions), world_hash=world_hash)
    return ds, seed


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout: magic, u32 version, u64 header length, JSON header, then float64
# little-endian parameter values. Groups are written in sorted name order;
# segments within a group follow the order recorded in the header.

def save_checkpoint(path, groups: dict, config_hash: str, seed: int,
                    extra: dict = None):
    """groups maps a name (e.g. 'image', 'text', 'critic') to a ParamVector."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "seed": int(seed),
        "extra": extra or {},
        "groups": {
            name: [[seg, list(pv.layout[seg][1])] for seg in pv.names()]
            for name, pv in groups.items()
        },
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
    _ensure_parent(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint64(len(head)).tobytes())
        fh.write(head)
        for name in sorted(groups):
            fh.write(groups[name].values.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Returns (groups, header) with groups name -> ParamVector."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataFormatError(f"{path}: not a limi checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version = int(np.frombuffer(blob[pos:pos + 4], dtype=np.uint32)[0])
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    pos += 4
    head_len = int(np.frombuffer(blob[pos:pos + 8], dtype=np.uint64)[0])
    pos += 8
    try:
        header = json.loads(blob[pos:pos + head_len].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt checkpoint header") from exc
    pos += head_len
    groups = {}
    for name in sorted(header["groups"]):
        segments = {}
        for seg_name, shape in header["groups"][name]:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = count * 8
            if pos + nbytes > len(blob):
                raise DataFormatError(f"{path}: truncated checkpoint payload")
            arr = np.frombuffer(blob[pos:pos + nbytes], dtype="<f8")
            segments[seg_name] = arr.reshape(shape).copy()
            pos += nbytes
        groups[name] = ParamVector.from_segments(segments)
    if pos != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return groups, header


# ---------------------------------------------------------------------------
# Small delimited text outputs
# ---------------------------------------------------------------------------

def write_text_file(path, text: str):
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def region_mi_csv_text(info, n_regions: int) -> str:
    """One row per region. Regions are exchangeable by construction, so a
    single RegionInformation covers all of them."""
    lines = ["region,patch_mi_nats,sentence_mi_nats,patch_sentence_mi_nats"]
    for r in range(n_regions):
        lines.append(f"region-{r},{info.patch_hidden_nats!r},"
                     f"{info.sentence_hidden_nats!r},{info.patch_sentence_nats!r}")
    return "\n".join(lines) + "\n"


def train_log_csv_text(steps) -> str:
    """steps: iterable of (step, objective, estimate, grad_norm)."""
    lines = ["step,objective,estimate,grad_norm"]
    for step, objective, estimate, grad_norm in steps:
        lines.append(f"{step},{objective!r},{estimate!r},{grad_norm!r}")
    return "\n".join(lines) + "\n"
