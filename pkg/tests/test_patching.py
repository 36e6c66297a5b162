import difflib
import subprocess

import pytest
from hypothesis import given, settings, strategies as st, HealthCheck

from osscrs.patching import DiffParseError, PatchConflict, apply_patch, parse_unified_diff
from osscrs.toy import TOY_ROOT, patch_text


def udiff(old: str, new: str, name: str = "f.txt", n: int = 3) -> str:
    return "".join(difflib.unified_diff(old.splitlines(True), new.splitlines(True),
                                        f"a/{name}", f"b/{name}", n=n))


def test_parse_counts_hunks():
    patches = parse_unified_diff(patch_text("correct"))
    assert len(patches) == 1 and patches[0].path(1) == "parse.c"
    assert len(patches[0].hunks) == 1


@pytest.mark.parametrize("text", ["", "just words\n", "--- a/x\n+++ b/x\n", "--- a/x\n+++ b/x\n@@ -1,3 +1,3 @@\n a\n"])
def test_parse_rejects(text):
    with pytest.raises(DiffParseError):
        parse_unified_diff(text)


def test_apply_with_offset(tmp_path):
    old = "".join(f"line {i}\n" for i in range(20))
    new = old.replace("line 10\n", "line ten\n")
    diff = udiff(old, new)
    (tmp_path / "f.txt").write_text("extra\nextra\n" + old)
    assert apply_patch(diff, tmp_path) == 1
    assert (tmp_path / "f.txt").read_text() == "extra\nextra\n" + new


def test_strip_zero_fallback(tmp_path):
    (tmp_path / "f.txt").write_text("a\nb\n")
    diff = "--- f.txt\n+++ f.txt\n@@ -1,2 +1,2 @@\n a\n-b\n+c\n"
    assert apply_patch(diff, tmp_path) == 0
    assert (tmp_path / "f.txt").read_text() == "a\nc\n"


def test_conflict_is_all_or_nothing(tmp_path):
    (tmp_path / "one.txt").write_text("x\ny\n")
    (tmp_path / "two.txt").write_text("p\nq\n")
    diff = udiff("x\ny\n", "x\nY\n", "one.txt") + udiff("p\nWRONG\n", "p\nQ\n", "two.txt")
    with pytest.raises(PatchConflict, match="two.txt"):
        apply_patch(diff, tmp_path)
    assert (tmp_path / "one.txt").read_text() == "x\ny\n"


def test_create_and_delete(tmp_path):
    (tmp_path / "gone.txt").write_text("bye\n")
    diff = ("--- /dev/null\n+++ b/new.txt\n@@ -0,0 +1,1 @@\n+hello\n"
            "--- a/gone.txt\n+++ /dev/null\n@@ -1,1 +0,0 @@\n-bye\n")
    apply_patch(diff, tmp_path)
    assert (tmp_path / "new.txt").read_text() == "hello\n"
    assert not (tmp_path / "gone.txt").exists()


def test_no_newline_marker(tmp_path):
    (tmp_path / "f.txt").write_text("a\nb")
    diff = "--- a/f.txt\n+++ b/f.txt\n@@ -1,2 +1,2 @@\n a\n-b\n\\ No newline at end of file\n+c\n\\ No newline at end of file\n"
    apply_patch(diff, tmp_path)
    assert (tmp_path / "f.txt").read_text() == "a\nc"


def test_path_escape_refused(tmp_path):
    (tmp_path / "root").mkdir()
    (tmp_path / "secret").write_text("s\n")
    diff = "--- a/../secret\n+++ b/../secret\n@@ -1 +1 @@\n-s\n+t\n"
    with pytest.raises(PatchConflict):
        apply_patch(diff, tmp_path / "root")
    assert (tmp_path / "secret").read_text() == "s\n"


@pytest.mark.parametrize("name,ok", [("correct", True), ("nonfixing", True), ("regressing", True),
                                     ("broken", True), ("conflicting", False)])
def test_toy_patches_against_fixture(tmp_path, name, ok):
    src = TOY_ROOT / "projects" / "toy-parser" / "parse.c"
    (tmp_path / "parse.c").write_text(src.read_text())
    if ok:
        apply_patch(patch_text(name), tmp_path)
        assert (tmp_path / "parse.c").read_text() != src.read_text()
    else:
        with pytest.raises(PatchConflict):
            apply_patch(patch_text(name), tmp_path)


def test_agrees_with_git_apply(tmp_path):
    # git is an independent implementation of the same format
    src = TOY_ROOT / "projects" / "toy-parser" / "parse.c"
    for name in ("correct", "nonfixing", "regressing", "conflicting"):
        ours, theirs = tmp_path / name / "ours", tmp_path / name / "git"
        for d in (ours, theirs):
            d.mkdir(parents=True)
            (d / "parse.c").write_text(src.read_text())
        try:
            apply_patch(patch_text(name), ours)
            ours_ok = True
        except PatchConflict:
            ours_ok = False
        proc = subprocess.run(["git", "apply", "-p1", "-"], input=patch_text(name), text=True,
                              cwd=theirs, capture_output=True)
        assert ours_ok == (proc.returncode == 0), name
        assert (ours / "parse.c").read_text() == (theirs / "parse.c").read_text(), name


lines = st.lists(st.sampled_from(["a\n", "b\n", "c\n", "int x;\n", "}\n", "\n"]), max_size=30)


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(old=lines, new=lines, context=st.integers(0, 4))
def test_difflib_roundtrip(tmp_path_factory, old, new, context):
    old_text, new_text = "".join(old), "".join(new)
    diff = udiff(old_text, new_text, n=context)
    if not diff:
        return
    root = tmp_path_factory.mktemp("p")
    (root / "f.txt").write_text(old_text)
    try:
        apply_patch(diff, root)
    except PatchConflict:
        # zero-context hunks can be ambiguous; then the file must be untouched
        assert context == 0
        assert (root / "f.txt").read_text() == old_text
        return
    if context > 0:
        assert (root / "f.txt").read_text() == new_text
