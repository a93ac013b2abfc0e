"""Canonical archive serialization of file trees (Nix Archive compatible).

The encoding keeps only what defines a build output's content: file bytes,
the executable bit, symlink targets and directory structure. Timestamps,
owners and other permission bits are dropped, and directory entries are
written in bytewise name order, so the same logical tree always yields the
same bytes and therefore the same ``sha256`` content hash.
"""

from __future__ import annotations

import hashlib
import os
import stat
import struct
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .model import LilaError, OutputHash

MAGIC = b"nix-archive-1"
CHUNK_SIZE = 1 << 16


class InvalidEntryName(LilaError, ValueError):
    pass


class MalformedArchive(LilaError, ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedNodeType(LilaError, ValueError):
    pass


class IoError(LilaError, OSError):
    pass


@dataclass(frozen=True)
class Regular:
    contents: bytes
    executable: bool = False


@dataclass(frozen=True)
class Symlink:
    target: str


@dataclass(frozen=True)
class Directory:
    entries: Mapping[str, FsTree] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in self.entries:
            check_entry_name(name)

    def sorted_entries(self) -> list[tuple[str, FsTree]]:
        return sorted(self.entries.items(), key=lambda kv: _fsencode(kv[0]))


FsTree = Union[Regular, Symlink, Directory]


def _fsencode(s: str) -> bytes:
    return s.encode("utf-8", "surrogateescape")


def _fsdecode(b: bytes) -> str:
    return b.decode("utf-8", "surrogateescape")


def check_entry_name(name: str) -> None:
    if not name or name in (".", "..") or "/" in name or "\0" in name:
        raise InvalidEntryName(f"invalid directory entry name {name!r}")


def encode_string(s: bytes) -> bytes:
    """Length-prefixed (u64 little endian) and zero-padded to 8 bytes."""
    return struct.pack("<Q", len(s)) + s + bytes(-len(s) % 8)


class _Writer:
    def __init__(self, sink: Callable[[bytes], object]) -> None:
        self.sink = sink

    def s(self, *items: bytes) -> None:
        for item in items:
            self.sink(encode_string(item))

    def tree(self, node: FsTree) -> None:
        self.s(b"(")
        if isinstance(node, Regular):
            self.s(b"type", b"regular")
            if node.executable:
                self.s(b"executable", b"")
            self.s(b"contents", node.contents)
        elif isinstance(node, Symlink):
            self.s(b"type", b"symlink", b"target", _fsencode(node.target))
        elif isinstance(node, Directory):
            self.s(b"type", b"directory")
            for name, child in node.sorted_entries():
                self.s(b"entry", b"(", b"name", _fsencode(name), b"node")
                self.tree(child)
                self.s(b")")
        else:
            raise TypeError(f"not an FsTree node: {node!r}")
        self.s(b")")

    def path(self, p: str) -> None:
        try:
            st = os.lstat(p)
        except OSError as exc:
            raise IoError(exc.errno, exc.strerror, p) from exc
        self.s(b"(")
        if stat.S_ISREG(st.st_mode):
            self.s(b"type", b"regular")
            if st.st_mode & stat.S_IXUSR:
                self.s(b"executable", b"")
            self.s(b"contents")
            self._file_contents(p)
        elif stat.S_ISLNK(st.st_mode):
            self.s(b"type", b"symlink", b"target", os.fsencode(os.readlink(p)))
        elif stat.S_ISDIR(st.st_mode):
            self.s(b"type", b"directory")
            try:
                names = sorted(os.fsencode(n) for n in os.listdir(p))
            except OSError as exc:
                raise IoError(exc.errno, exc.strerror, p) from exc
            for name in names:
                self.s(b"entry", b"(", b"name", name, b"node")
                self.path(os.path.join(p, os.fsdecode(name)))
                self.s(b")")
        else:
            raise UnsupportedNodeType(f"{p}: unsupported file type {stat.filemode(st.st_mode)}")
        self.s(b")")

    def _file_contents(self, p: str) -> None:
        # Streams the file; only CHUNK_SIZE bytes are held at once.
        try:
            with open(p, "rb") as f:
                size = os.fstat(f.fileno()).st_size
                self.sink(struct.pack("<Q", size))
                remaining = size
                while remaining:
                    chunk = f.read(min(CHUNK_SIZE, remaining))
                    if not chunk:
                        raise IoError(f"{p}: file shrank while being hashed")
                    self.sink(chunk)
                    remaining -= len(chunk)
                if f.read(1):
                    raise IoError(f"{p}: file grew while being hashed")
        except IoError:
            raise
        except OSError as exc:
            raise IoError(exc.errno, exc.strerror, p) from exc
        self.sink(bytes(-size % 8))


def encode_tree(t: FsTree) -> bytes:
    out = bytearray()
    w = _Writer(out.extend)
    w.s(MAGIC)
    w.tree(t)
    return bytes(out)


def dump_path(path: str | os.PathLike[str], sink: Callable[[bytes], object]) -> None:
    """Stream the archive of a filesystem path into ``sink``."""
    w = _Writer(sink)
    w.s(MAGIC)
    w.path(os.fspath(path))


def hash_tree(root: str | os.PathLike[str] | FsTree) -> OutputHash:
    h = hashlib.sha256()
    if isinstance(root, (Regular, Symlink, Directory)):
        h.update(encode_tree(root))
    else:
        dump_path(root, h.update)
    return OutputHash.from_digest(h.digest())


def snapshot(path: str | os.PathLike[str]) -> FsTree:
    """Read a filesystem path into an in-memory FsTree."""
    p = os.fspath(path)
    try:
        st = os.lstat(p)
        if stat.S_ISREG(st.st_mode):
            return Regular(Path(p).read_bytes(), bool(st.st_mode & stat.S_IXUSR))
        if stat.S_ISLNK(st.st_mode):
            return Symlink(os.readlink(p))
        if stat.S_ISDIR(st.st_mode):
            return Directory({name: snapshot(os.path.join(p, name)) for name in os.listdir(p)})
    except OSError as exc:
        raise IoError(exc.errno, exc.strerror, p) from exc
    raise UnsupportedNodeType(f"{p}: unsupported file type {stat.filemode(st.st_mode)}")


def materialize(t: FsTree, path: str | os.PathLike[str]) -> None:
    """Write an FsTree to ``path``, which must not exist yet."""
    p = os.fspath(path)
    if isinstance(t, Regular):
        with open(p, "wb") as f:
            f.write(t.contents)
        os.chmod(p, 0o755 if t.executable else 0o644)
    elif isinstance(t, Symlink):
        os.symlink(t.target, p)
    else:
        os.mkdir(p)
        for name, child in t.entries.items():
            materialize(child, os.path.join(p, name))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = memoryview(data)
        self.pos = 0

    def fail(self, message: str, offset: int | None = None) -> MalformedArchive:
        return MalformedArchive(message, self.pos if offset is None else offset)

    def string(self) -> bytes:
        start = self.pos
        if len(self.data) - start < 8:
            raise self.fail("truncated length field")
        (n,) = struct.unpack_from("<Q", self.data, start)
        padded = n + (-n % 8)
        if len(self.data) - start - 8 < padded:
            raise self.fail("truncated string payload", start)
        body = bytes(self.data[start + 8:start + 8 + n])
        if any(self.data[start + 8 + n:start + 8 + padded]):
            raise self.fail("non-zero padding", start + 8 + n)
        self.pos = start + 8 + padded
        return body

    def expect(self, token: bytes) -> None:
        start = self.pos
        got = self.string()
        if got != token:
            raise self.fail(f"expected {token!r}, found {got[:32]!r}", start)

    def node(self, depth: int = 0) -> FsTree:
        if depth > 256:
            raise self.fail("directory nesting too deep")
        self.expect(b"(")
        self.expect(b"type")
        start = self.pos
        kind = self.string()
        if kind == b"regular":
            executable = False
            tag_at = self.pos
            tag = self.string()
            if tag == b"executable":
                self.expect(b"")
                executable = True
                tag_at = self.pos
                tag = self.string()
            if tag != b"contents":
                raise self.fail(f"expected b'contents', found {tag[:32]!r}", tag_at)
            result: FsTree = Regular(self.string(), executable)
        elif kind == b"symlink":
            self.expect(b"target")
            result = Symlink(_fsdecode(self.string()))
        elif kind == b"directory":
            entries: dict[str, FsTree] = {}
            prev: bytes | None = None
            while True:
                tag_at = self.pos
                tag = self.string()
                if tag == b")":
                    return Directory(entries)
                if tag != b"entry":
                    raise self.fail(f"expected b'entry' or b')', found {tag[:32]!r}", tag_at)
                self.expect(b"(")
                self.expect(b"name")
                name_at = self.pos
                raw = self.string()
                name = _fsdecode(raw)
                try:
                    check_entry_name(name)
                except InvalidEntryName as exc:
                    raise self.fail(str(exc), name_at) from None
                if prev is not None and raw <= prev:
                    raise self.fail("directory entries not in strictly ascending order", name_at)
                prev = raw
                self.expect(b"node")
                entries[name] = self.node(depth + 1)
                self.expect(b")")
        else:
            raise self.fail(f"unknown node type {kind[:32]!r}", start)
        self.expect(b")")
        return result


def decode_tree(b: bytes) -> FsTree:
    """Strict inverse of encode_tree; anything non-canonical is rejected."""
    r = _Reader(b)
    r.expect(MAGIC)
    tree = r.node()
    if r.pos != len(r.data):
        raise r.fail("trailing bytes after archive")
    return tree
