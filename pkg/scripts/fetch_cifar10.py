#!/usr/bin/env python3
"""Build the bundled CIFAR-10 binary subset fixture.

The test suite reads data/cifar10-subset-5000.bin, the first 5000 records
of the CIFAR-10 training split in the standard binary layout (3073-byte
records: label byte + 3x1024 pixel planes). Rebuild it from either source:

  python scripts/fetch_cifar10.py --from-binary /path/to/cifar-10-batches-bin
  python scripts/fetch_cifar10.py --from-parquet /path/to/train.parquet

The binary source is the extracted official cifar-10-binary.tar.gz; the
parquet source is the HuggingFace uoft-cs/cifar10 train file (needs
polars and Pillow).
"""

import argparse
import io
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
DEFAULT_OUT = REPO / "data" / "cifar10-subset-5000.bin"
RECORD = 3073


def from_binary(src: Path, n: int) -> bytes:
    batches = sorted(src.glob("data_batch_*.bin")) if src.is_dir() else [src]
    if not batches:
        sys.exit(f"no data_batch_*.bin files under {src}")
    out = bytearray()
    for path in batches:
        raw = path.read_bytes()
        if len(raw) % RECORD:
            sys.exit(f"{path}: not a multiple of {RECORD} bytes")
        out.extend(raw)
        if len(out) >= n * RECORD:
            break
    if len(out) < n * RECORD:
        sys.exit(f"only {len(out) // RECORD} records available, need {n}")
    return bytes(out[: n * RECORD])


def from_parquet(src: Path, n: int) -> bytes:
    import numpy as np
    import polars as pl
    from PIL import Image

    df = pl.read_parquet(src).head(n)
    if len(df) < n:
        sys.exit(f"{src} holds only {len(df)} rows, need {n}")
    out = bytearray()
    for row in df.iter_rows(named=True):
        arr = np.asarray(Image.open(io.BytesIO(row["img"]["bytes"])), dtype=np.uint8)
        assert arr.shape == (32, 32, 3)
        out.append(int(row["label"]))
        out.extend(arr.transpose(2, 0, 1).tobytes())
    return bytes(out)


def main() -> None:
    parser = argparse.ArgumentParser()
    src = parser.add_mutually_exclusive_group(required=True)
    src.add_argument("--from-binary", type=Path)
    src.add_argument("--from-parquet", type=Path)
    parser.add_argument("--n", type=int, default=5000)
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = parser.parse_args()

    if args.from_binary:
        payload = from_binary(args.from_binary, args.n)
    else:
        payload = from_parquet(args.from_parquet, args.n)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_bytes(payload)
    print(f"wrote {args.out} ({args.n} records, {len(payload)} bytes)")


if __name__ == "__main__":
    main()
