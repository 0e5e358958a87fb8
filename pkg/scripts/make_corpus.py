"""Build the byte-level toy corpus from the Gutenberg Shakespeare texts on PyPI.

The ``shakespeare`` sdist bundles ~13 MB of public-domain Project Gutenberg
texts (modern and First Folio editions). Plays that reach into the positional
held-out tail keep only one edition, so held-out text never reappears in the
training split in another spelling.

    python scripts/make_corpus.py --out data/shakespeare.txt
"""
import argparse
import re
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "shakespeare==0.6"


def play_key(name: str) -> str:
    stem = re.sub(r"_gut(_f)?\.txt$", "", name)
    return stem


def fetch_texts(workdir: Path) -> list[Path]:
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", ":all:",
                    "-q", "-d", str(workdir), PACKAGE], check=True)
    archive = next(workdir.glob("shakespeare-*.tar.gz"))
    with tarfile.open(archive) as tar:
        tar.extractall(workdir, filter="data") if sys.version_info >= (3, 12) else tar.extractall(workdir)
    return sorted(p for p in workdir.rglob("texts/*_gut*.txt"))


def drop_tail_siblings(texts: list[tuple[str, bytes]], holdout: float) -> list[tuple[str, bytes]]:
    """Keep a single edition of every play that overlaps the held-out tail."""
    while True:
        total = sum(len(t) + 1 for _, t in texts)
        tail, seen = 0, []
        for name, text in reversed(texts):
            seen.append(name)
            tail += len(text) + 1
            if tail >= holdout * total:
                break
        keys = [play_key(n) for n, _ in texts]
        doubled = [n for n in seen if keys.count(play_key(n)) > 1]
        if not doubled:
            return texts
        drop = play_key(doubled[0])
        first = next(n for n, _ in texts if play_key(n) == drop)
        texts = [(n, t) for n, t in texts if n != first]


def build(out: Path, source: Path | None = None, holdout: float = 0.02) -> int:
    with tempfile.TemporaryDirectory() as tmp:
        files = sorted(source.glob("*_gut*.txt")) if source else fetch_texts(Path(tmp))
        ordered = sorted(files, key=lambda p: (play_key(p.name), p.name))
        texts = [(p.name, p.read_bytes().replace(b"\r\n", b"\n")) for p in ordered]
        texts = drop_tail_siblings(texts, holdout)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "wb") as fh:
            for _, text in texts:
                fh.write(text)
                fh.write(b"\n")
    return out.stat().st_size


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/shakespeare.txt")
    parser.add_argument("--source", help="directory of *_gut*.txt files (skips the download)")
    parser.add_argument("--holdout", type=float, default=0.02)
    args = parser.parse_args()
    size = build(Path(args.out), Path(args.source) if args.source else None, args.holdout)
    print(f"wrote {args.out} ({size / 1e6:.1f} MB)")


if __name__ == "__main__":
    main()
