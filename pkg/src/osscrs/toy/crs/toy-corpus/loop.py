"""Long-running toy CRS roles used to observe the exchange.

    loop.py seeder            submit three seeds, then idle until stopped
    loop.py watcher SECONDS   submit one seed, record what the fetch dir shows, exit after SECONDS
    loop.py corpus FILES DISTINCT
                              submit FILES seeds drawn from DISTINCT contents in a name-seeded
                              order, then exit once the fetch dir shows all DISTINCT of them
"""

import json
import os
import random
import subprocess
import sys
import time
from pathlib import Path

name = os.environ["OSS_CRS_NAME"]
shared = Path(os.environ["OSS_CRS_SHARED_DIR"])
fetch = Path(os.environ["OSS_CRS_FETCH_DIR"])
out = shared / "seeds-out"
out.mkdir(parents=True, exist_ok=True)
subprocess.run(["libcrs", "register-submit-dir", "seed", str(out)], check=True, stdout=subprocess.DEVNULL)


def submit(text: str) -> None:
    tmp = out / f".{text}.part"
    tmp.write_text(text)
    tmp.rename(out / text)


role = sys.argv[1]
if role == "seeder":
    for i in range(3):
        submit(f"seed-from-{name}-{i}")
    while True:
        time.sleep(1)

if role == "corpus":
    files, distinct = int(sys.argv[2]), int(sys.argv[3])
    order = [i % distinct for i in range(files)]
    random.Random(name).shuffle(order)
    for n, i in enumerate(order):
        tmp = out / f".{n}.part"
        tmp.write_text(f"corpus entry {i}\n" * (i + 1))
        tmp.rename(out / f"{name}-{n}")
        time.sleep(0.01)
    deadline = time.time() + 30
    while time.time() < deadline:
        if (fetch / "seeds").is_dir() and len(list((fetch / "seeds").iterdir())) >= distinct:
            sys.exit(0)
        time.sleep(0.1)
    sys.exit(1)

duration = float(sys.argv[2]) if len(sys.argv) > 2 else 5.0
submit(f"seed-from-{name}")
deadline = time.time() + duration
while time.time() < deadline:
    visible = sorted(p.name for p in (fetch / "seeds").glob("*")) if (fetch / "seeds").is_dir() else []
    limits = {"cpuset": os.environ.get("OSS_CRS_CPUSET"), "memory": os.environ.get("OSS_CRS_MEMORY_LIMIT")}
    tmp = shared / ".visible.json.part"
    tmp.write_text(json.dumps({"time": time.time(), "seeds": visible, "limits": limits}))
    tmp.rename(shared / "visible.json")
    time.sleep(0.25)
