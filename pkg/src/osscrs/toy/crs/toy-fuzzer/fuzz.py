"""Dictionary mutator for the toy target.

Runs the harness on batches of mutated inputs, keeps inputs that show a
new token combination, submits them as seeds, and stops after the first
crash, which it submits as a PoV. With a fixed seed the sequence of
inputs, and therefore every submitted artifact, is reproducible.
"""

import hashlib
import os
import random
import subprocess
import sys
import tempfile
from pathlib import Path

DICTIONARY = [b"CRA", b"SH", b",", b"=", b"key", b"value", b"\n"]
MARKERS = (b"ERROR: AddressSanitizer", b"ERROR: libFuzzer")
BATCH = 64


def features(data: bytes) -> frozenset:
    found = {tok for tok in DICTIONARY if tok in data}
    return frozenset(found | {("fields", min(data.count(b","), 4))})


def mutate(rng: random.Random, data: bytes, corpus: list[bytes]) -> bytes:
    out = bytearray(data)
    for _ in range(rng.randint(1, 3)):
        op = rng.randrange(4)
        pos = rng.randint(0, len(out))
        if op == 0:
            out[pos:pos] = rng.choice(DICTIONARY)
        elif op == 1 and out:
            del out[min(pos, len(out) - 1)]
        elif op == 2:
            out[pos:pos] = bytes([rng.randrange(32, 127)])
        else:
            other = rng.choice(corpus)
            cut = rng.randint(0, len(other))
            out[pos:] = other[cut:]
    return bytes(out[:256])


def crashed(returncode: int, output: bytes) -> bool:
    return returncode < 0 or returncode >= 128 or any(m in output for m in MARKERS)


def crashing_input(output: bytes) -> str | None:
    running = [line for line in output.splitlines() if line.startswith(b"Running: ")]
    return running[-1][len(b"Running: "):].decode() if running else None


def libcrs(*args) -> str:
    return subprocess.run(["libcrs", *map(str, args)], check=True, stdout=subprocess.PIPE,
                          text=True).stdout.strip()


def drop(directory: Path, data: bytes) -> None:
    name = hashlib.sha256(data).hexdigest()[:16]
    tmp = directory / f".{name}.part"
    tmp.write_bytes(data)
    tmp.rename(directory / name)


def main() -> int:
    rng = random.Random(int(os.environ.get("TOY_FUZZ_SEED", "1337")))
    budget = int(os.environ.get("TOY_FUZZ_ITERATIONS", "50000"))
    harness = Path(os.environ["OSS_CRS_BUILD_OUTPUT_DIR"]) / "fuzzer-bin" / os.environ["OSS_CRS_TARGET_HARNESS"]
    shared = Path(os.environ["OSS_CRS_SHARED_DIR"])
    seeds_out, povs_out = shared / "seeds-out", shared / "povs-out"
    seeds_out.mkdir(parents=True, exist_ok=True)
    povs_out.mkdir(parents=True, exist_ok=True)
    libcrs("register-submit-dir", "seed", seeds_out)
    libcrs("register-submit-dir", "pov", povs_out)

    corpus = [b"a,b", b"key=value"]
    incoming = Path(tempfile.mkdtemp(prefix="seeds-in-"))
    libcrs("fetch", "seed", incoming)
    corpus += [p.read_bytes() for p in sorted(incoming.iterdir())]
    seen = {features(c) for c in corpus}

    work = Path(tempfile.mkdtemp(prefix="toy-fuzz-"))
    executed = 0
    while executed < budget:
        batch = [mutate(rng, rng.choice(corpus), corpus) for _ in range(BATCH)]
        paths = []
        for i, data in enumerate(batch):
            path = work / f"input-{i}"
            path.write_bytes(data)
            paths.append(str(path))
        proc = subprocess.run([str(harness), *paths], stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
        if crashed(proc.returncode, proc.stdout):
            culprit = crashing_input(proc.stdout)
            pov = Path(culprit).read_bytes()
            executed += paths.index(culprit) + 1
            drop(povs_out, pov)
            print(f"crash after {executed} executions: {pov!r}", flush=True)
            return 0
        executed += len(batch)
        for data in batch:
            f = features(data)
            if f not in seen:
                seen.add(f)
                corpus.append(data)
                drop(seeds_out, data)
    print(f"no crash in {executed} executions; corpus {len(corpus)}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
