"""libcrs: the command suite CRS code uses to talk to the framework.

Everything it needs comes from the injected environment and the mounted
directories; there is no configuration file. Exit codes are the same for
every subcommand:

    0   success / positive result
    1   negative result (duplicate build output, patch rejected, crash reproduced, ...)
    64  usage error (bad arguments, unknown artifact type, path outside the mounts)
    69  framework service unavailable (builder unreachable, exchange not mounted)

Only the standard library is imported so the module can ship as a single
zipapp mounted into containers that carry nothing but a Python interpreter.
"""

from __future__ import annotations

import argparse
import fcntl
import hashlib
import json
import os
import shutil
import sys
import time
import urllib.error
import urllib.request
import uuid
from pathlib import Path

from osscrs.exchange import ArtifactType, ExchangeStore, fetch_into

EX_OK = 0
EX_NEGATIVE = 1
EX_USAGE = 64
EX_UNAVAILABLE = 69

REGISTRATIONS = "registrations.jsonl"
LAST_BUILD = "builder-last.json"
MANIFESTS = ".manifests"

# container-side mount points; the variables below may override them
CONTROL_DIR = "/oss-crs/control"
FETCH_DIR = "/oss-crs/fetch"
SHARED_DIR = "/oss-crs/shared"
BUILD_OUTPUT_DIR = "/oss-crs/build-output"
EXCHANGE_DIR = "/oss-crs/exchange"

DIR_VARS = {
    "OSS_CRS_CONTROL_DIR": CONTROL_DIR,
    "OSS_CRS_FETCH_DIR": FETCH_DIR,
    "OSS_CRS_SHARED_DIR": SHARED_DIR,
    "OSS_CRS_BUILD_OUTPUT_DIR": BUILD_OUTPUT_DIR,
    "OSS_CRS_EXCHANGE_DIR": EXCHANGE_DIR,
}


class CommandError(Exception):
    def __init__(self, message: str, code: int = EX_NEGATIVE):
        super().__init__(message)
        self.code = code


def _env_dir(var: str) -> Path:
    return Path(os.environ.get(var) or DIR_VARS[var])


def _crs_name() -> str:
    return os.environ.get("OSS_CRS_NAME", "")


def _artifact_type(text: str) -> ArtifactType:
    try:
        return ArtifactType.parse(text)
    except ValueError as exc:
        raise CommandError(str(exc), EX_USAGE) from None


def _emit(payload) -> None:
    print(json.dumps(payload) if isinstance(payload, (dict, list)) else payload, flush=True)


def _inside(path: Path, roots: list[Path]) -> bool:
    real = Path(os.path.realpath(path))
    for root in roots:
        r = Path(os.path.realpath(root))
        if real == r or r in real.parents:
            return True
    return False


# ---------------------------------------------------------------- build output


def tree_manifest(root: Path) -> dict:
    files = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and not p.is_symlink():
            files.append({"path": p.relative_to(root).as_posix(), "size": p.stat().st_size,
                          "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
    return {"files": files, "bytes": sum(f["size"] for f in files)}


def submit_build_output(name: str, src: Path) -> dict:
    if not name or "/" in name or name.startswith("."):
        raise CommandError(f"invalid build output name {name!r}", EX_USAGE)
    if not src.is_dir():
        raise CommandError(f"{src} is not a directory", EX_USAGE)
    store = _env_dir("OSS_CRS_BUILD_OUTPUT_DIR")
    if not store.is_dir():
        raise CommandError(f"build output store {store} is not mounted", EX_UNAVAILABLE)
    dest = store / name
    if dest.exists():
        _raise_taken(name)
    staging = store / f".{name}.{uuid.uuid4().hex}"
    shutil.copytree(src, staging, symlinks=True)
    try:
        # rename is the commit point; a concurrent publisher of the same name fails here
        os.rename(staging, dest)
    except OSError:
        shutil.rmtree(staging, ignore_errors=True)
        _raise_taken(name)
    manifest = tree_manifest(dest)
    (store / MANIFESTS).mkdir(exist_ok=True)
    (store / MANIFESTS / f"{name}.json").write_text(json.dumps({"name": name, "crs": _crs_name(), **manifest}))
    warnings = []
    if not manifest["files"]:
        warnings.append(f"build output {name!r} is empty")
        print(f"libcrs: warning: {warnings[-1]}", file=sys.stderr)
    return {"name": name, "files": len(manifest["files"]), "bytes": manifest["bytes"], "warnings": warnings}


def _raise_taken(name: str):
    raise CommandError(f"build output {name!r} was already published by this CRS")


# ---------------------------------------------------------------- registrations


def _mount_roots(kind: str) -> list[Path]:
    roots = [_env_dir("OSS_CRS_SHARED_DIR"), _env_dir("OSS_CRS_CONTROL_DIR")]
    if kind == "fetch":
        roots.append(_env_dir("OSS_CRS_FETCH_DIR"))
    return roots


def register(kind: str, directory: Path, artifact_type: ArtifactType | None = None) -> dict:
    """Append a registration record unless an identical one exists."""
    control = _env_dir("OSS_CRS_CONTROL_DIR")
    if not control.is_dir():
        raise CommandError(f"control directory {control} is not mounted", EX_UNAVAILABLE)
    directory = Path(os.path.abspath(directory))
    if kind == "shared":
        _share(directory)
    else:
        directory.mkdir(parents=True, exist_ok=True)
        if not _inside(directory, _mount_roots(kind)):
            raise CommandError(f"{directory} is not inside a framework-visible mount "
                               f"(use a directory under $OSS_CRS_SHARED_DIR)", EX_USAGE)
    record = {"kind": kind, "dir": str(directory), "resolved": os.path.realpath(directory),
              "artifact_type": artifact_type.value if artifact_type else None,
              "crs_name": _crs_name(), "container": os.environ.get("HOSTNAME", ""), "time": time.time()}
    path = control / REGISTRATIONS
    with open(path, "a+") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        fh.seek(0)
        for line in fh:
            try:
                old = json.loads(line)
            except ValueError:
                continue
            if (old.get("kind"), old.get("dir"), old.get("artifact_type")) == \
                    (kind, record["dir"], record["artifact_type"]):
                return {**old, "status": "already-registered"}
        fh.write(json.dumps(record) + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    return {**record, "status": "registered"}


def _slug(directory: Path) -> str:
    text = directory.as_posix().strip("/").replace("/", "_") or "root"
    return text[-80:]


def _share(directory: Path) -> None:
    """Back ``directory`` by a per-CRS shared area so every container of this CRS sees one tree."""
    shared_root = _env_dir("OSS_CRS_SHARED_DIR")
    if not shared_root.is_dir():
        raise CommandError(f"shared directory {shared_root} is not mounted", EX_UNAVAILABLE)
    target = shared_root / "dirs" / _slug(directory)
    target.mkdir(parents=True, exist_ok=True)
    if directory.is_symlink():
        if os.path.realpath(directory) == os.path.realpath(target):
            return
        raise CommandError(f"{directory} is a symlink to somewhere else", EX_USAGE)
    if _inside(directory, [shared_root]):
        return
    if directory.is_dir():
        for child in directory.iterdir():
            dest = target / child.name
            if not dest.exists():
                shutil.move(str(child), str(dest))
        shutil.rmtree(directory)
    elif directory.exists():
        raise CommandError(f"{directory} exists and is not a directory", EX_USAGE)
    directory.parent.mkdir(parents=True, exist_ok=True)
    directory.symlink_to(target)


# ---------------------------------------------------------------- exchange


def _store() -> ExchangeStore:
    root = _env_dir("OSS_CRS_EXCHANGE_DIR")
    if not root.is_dir():
        raise CommandError(f"exchange {root} is not mounted", EX_UNAVAILABLE)
    return ExchangeStore(root)


def submit(artifact_type: ArtifactType, file: Path) -> tuple[str, int]:
    try:
        data = file.read_bytes()
    except OSError as exc:
        raise CommandError(f"cannot read {file}: {exc.strerror}", EX_USAGE) from None
    result = _store().ingest(artifact_type, data, _crs_name() or "libcrs", file.name)
    if result.status == "admitted":
        return result.hash, EX_OK
    if result.status == "duplicate":
        return f"duplicate({result.hash})", EX_OK
    return f"rejected({result.hash})", EX_NEGATIVE


def fetch(artifact_type: ArtifactType, dest: Path) -> int:
    root = _env_dir("OSS_CRS_EXCHANGE_DIR")
    if not root.is_dir():
        raise CommandError(f"exchange {root} is not mounted", EX_UNAVAILABLE)
    return fetch_into(root, artifact_type, dest)


# ---------------------------------------------------------------- builder client


def _builder_url() -> str:
    url = os.environ.get("OSS_CRS_BUILDER_URL")
    if not url:
        raise CommandError("OSS_CRS_BUILDER_URL is not set (only bug-fixing CRSs have a builder)",
                           EX_UNAVAILABLE)
    return url.rstrip("/")


def _post(path: str, body: bytes, content_type: str, timeout: float = 3600) -> dict:
    req = urllib.request.Request(_builder_url() + path, data=body, method="POST",
                                 headers={"Content-Type": content_type})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        try:
            detail = json.loads(exc.read()).get("error", "")
        except ValueError:
            detail = exc.reason
        raise CommandError(f"builder rejected the request ({exc.code}): {detail}") from None
    except (urllib.error.URLError, OSError) as exc:
        raise CommandError(f"builder unreachable: {getattr(exc, 'reason', exc)}", EX_UNAVAILABLE) from None


def multipart(fields: dict[str, bytes | str], files: dict[str, tuple[str, bytes]]) -> tuple[bytes, str]:
    boundary = uuid.uuid4().hex
    out = bytearray()
    for name, value in fields.items():
        data = value.encode() if isinstance(value, str) else value
        out += (f"--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n").encode()
        out += data + b"\r\n"
    for name, (filename, data) in files.items():
        out += (f"--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"; "
                f"filename=\"{filename}\"\r\nContent-Type: application/octet-stream\r\n\r\n").encode()
        out += data + b"\r\n"
    out += f"--{boundary}--\r\n".encode()
    return bytes(out), f"multipart/form-data; boundary={boundary}"


def _last_build() -> str | None:
    path = _env_dir("OSS_CRS_CONTROL_DIR") / LAST_BUILD
    try:
        return json.loads(path.read_text()).get("build")
    except (OSError, ValueError):
        return None


def _remember_build(ref: str) -> None:
    control = _env_dir("OSS_CRS_CONTROL_DIR")
    if control.is_dir():
        tmp = control / f".{LAST_BUILD}.{uuid.uuid4().hex}"
        tmp.write_text(json.dumps({"build": ref}))
        os.replace(tmp, control / LAST_BUILD)


def apply_patch_build(diff: Path) -> dict:
    try:
        body = diff.read_bytes()
    except OSError as exc:
        raise CommandError(f"cannot read {diff}: {exc.strerror}", EX_USAGE) from None
    result = _post("/patch-build", body, "text/x-diff")
    if result.get("status") == "ok" and result.get("build"):
        _remember_build(result["build"])
    return result


def run_pov(pov: Path, harness: str, build: str | None) -> dict:
    try:
        data = pov.read_bytes()
    except OSError as exc:
        raise CommandError(f"cannot read {pov}: {exc.strerror}", EX_USAGE) from None
    fields = {"harness": harness, "build": build or _last_build() or "base"}
    body, ctype = multipart(fields, {"pov": (pov.name, data)})
    return _post("/run-pov", body, ctype)


def run_test(build: str | None) -> dict:
    body = json.dumps({"build": build or _last_build() or "base"}).encode()
    return _post("/run-test", body, "application/json")


# ---------------------------------------------------------------- CLI


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="libcrs", description="CRS-side client for the oss-crs framework.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("submit-build-output", help="publish a build artifact directory")
    s.add_argument("name")
    s.add_argument("dir", type=Path)

    s = sub.add_parser("register-submit-dir", help="sync new files in DIR into the exchange")
    s.add_argument("type")
    s.add_argument("dir", type=Path)
    s = sub.add_parser("register-fetch-dir", help="mirror the exchange into DIR")
    s.add_argument("dir", type=Path)
    s = sub.add_parser("register-shared-dir", help="share DIR among this CRS's containers")
    s.add_argument("dir", type=Path)

    s = sub.add_parser("submit", help="submit one artifact now")
    s.add_argument("type")
    s.add_argument("file", type=Path)
    s = sub.add_parser("fetch", help="copy all artifacts of TYPE into DIR")
    s.add_argument("type")
    s.add_argument("dir", type=Path)

    s = sub.add_parser("apply-patch-build", help="apply a unified diff and rebuild")
    s.add_argument("diff", type=Path)
    s = sub.add_parser("run-pov", help="run a PoV against the latest patched build")
    s.add_argument("pov", type=Path)
    s.add_argument("harness")
    s.add_argument("--build", help="build ref, or 'base' for the unpatched snapshot")
    s = sub.add_parser("run-test", help="run the target's regression tests")
    s.add_argument("--build", help="build ref, or 'base' for the unpatched snapshot")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["builder-step"]:
        from osscrs.builder import step

        return step.main(argv[1:])
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EX_OK if exc.code == 0 else EX_USAGE
    try:
        return _dispatch(args)
    except CommandError as exc:
        print(f"libcrs {args.command}: {exc}", file=sys.stderr)
        return exc.code


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "submit-build-output":
        _emit(submit_build_output(args.name, args.dir))
    elif cmd == "register-submit-dir":
        _emit(register("submit", args.dir, _artifact_type(args.type)))
    elif cmd == "register-fetch-dir":
        _emit(register("fetch", args.dir))
    elif cmd == "register-shared-dir":
        _emit(register("shared", args.dir))
    elif cmd == "submit":
        text, code = submit(_artifact_type(args.type), args.file)
        _emit(text)
        return code
    elif cmd == "fetch":
        _emit(fetch(_artifact_type(args.type), args.dir))
    elif cmd == "apply-patch-build":
        result = apply_patch_build(args.diff)
        _emit(result)
        return EX_OK if result.get("status") == "ok" else EX_NEGATIVE
    elif cmd == "run-pov":
        result = run_pov(args.pov, args.harness, args.build)
        _emit(result)
        return EX_OK if result.get("status") == "no_crash" else EX_NEGATIVE
    elif cmd == "run-test":
        result = run_test(args.build)
        _emit(result)
        return EX_OK if result.get("status") == "tests_passed" else EX_NEGATIVE
    return EX_OK


def build_zipapp(dest: Path | str) -> Path:
    """Package libcrs and its stdlib-only dependencies as one executable file."""
    import tempfile
    import zipapp

    dest = Path(dest)
    pkg = Path(__file__).resolve().parent
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        (root / "osscrs" / "builder").mkdir(parents=True)
        (root / "osscrs" / "__init__.py").write_text("")
        (root / "osscrs" / "builder" / "__init__.py").write_text("")
        for rel in ("libcrs.py", "exchange.py", "patching.py", "builder/step.py"):
            shutil.copyfile(pkg / rel, root / "osscrs" / rel)
        (root / "__main__.py").write_text("import sys\nfrom osscrs.libcrs import main\nsys.exit(main())\n")
        dest.parent.mkdir(parents=True, exist_ok=True)
        zipapp.create_archive(root, dest, interpreter="/usr/bin/env python3")
    dest.chmod(0o755)
    return dest


if __name__ == "__main__":
    sys.exit(main())
