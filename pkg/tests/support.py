from __future__ import annotations

import contextlib
import hashlib
import random
import socket
import threading
import time
from dataclasses import dataclass, field

import uvicorn

from lila.model import DIGEST_ALPHABET, DrvId, Submission, parse_store_path
from lila.nar import Directory, FsTree, Regular, Symlink, hash_tree
from lila.signing import sign

ENTRY_NAME_CHARS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-+"


def digest_for(seed: str) -> str:
    """A valid, deterministic 32-character store digest."""
    h = hashlib.sha256(seed.encode()).digest()
    return "".join(DIGEST_ALPHABET[b % 32] for b in h)


def drv_path(prefix: str, name: str, tag: str = "") -> str:
    return f"{prefix}/{digest_for('drv:' + name + tag)}-{name}.drv"


def out_path(prefix: str, name: str, output: str = "out", tag: str = "") -> str:
    suffix = "" if output == "out" else f"-{output}"
    return f"{prefix}/{digest_for('out:' + name + output + tag)}-{name}{suffix}"


def random_name(rng: random.Random) -> str:
    while True:
        name = "".join(rng.choice(ENTRY_NAME_CHARS) for _ in range(rng.randint(1, 12)))
        if name not in (".", ".."):
            return name


def random_tree(rng: random.Random, max_depth: int = 6, max_files: int = 20) -> FsTree:
    """Random directory tree with at most ``max_files`` leaves."""
    budget = [rng.randint(1, max_files)]

    def leaf() -> FsTree:
        budget[0] -= 1
        if rng.random() < 0.15:
            return Symlink(random_name(rng) + "/" + random_name(rng))
        size = rng.choice([0, 1, 7, 8, 9, rng.randint(0, 300)])
        return Regular(rng.randbytes(size), rng.random() < 0.3)

    def directory(depth: int) -> Directory:
        entries: dict[str, FsTree] = {}
        for _ in range(rng.randint(0, 4)):
            if budget[0] <= 0:
                break
            name = random_name(rng)
            if depth < max_depth and rng.random() < 0.3:
                entries[name] = directory(depth + 1)
            else:
                entries[name] = leaf()
        return Directory(entries)

    if rng.random() < 0.1:
        return leaf()
    return directory(1)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@contextlib.contextmanager
def live_server(app):
    """Serve ``app`` with uvicorn on a background thread; yields the base URL."""
    port = free_port()
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error", access_log=False)
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("server did not start")
        time.sleep(0.01)
    try:
        yield f"http://127.0.0.1:{port}"
    finally:
        server.should_exit = True
        thread.join(timeout=10)


# synthetic fleets


@dataclass
class SyntheticDrv:
    name: str
    drv_path: str
    outputs: dict[str, FsTree]  # output path -> canonical tree
    builders: list[str]
    diverged: set[tuple[str, str]] = field(default_factory=set)  # (output path, builder)

    def tree_for(self, output: str, builder: str) -> FsTree:
        base = self.outputs[output]
        if (output, builder) not in self.diverged:
            return base
        stamp = Regular(f"built by {builder} at {self.name}\n".encode())
        if isinstance(base, Directory):
            entries = dict(base.entries)
            entries["BUILD-STAMP.lila-test"] = stamp
            return Directory(entries)
        return Directory({"payload": base, "BUILD-STAMP.lila-test": stamp})


def generate_fleet(seed: int, prefix: str, n_drvs: int, builders: list[str], p_diverge: float,
                   participation: float = 0.7) -> list[SyntheticDrv]:
    rng = random.Random(seed)
    drvs = []
    for i in range(n_drvs):
        name = f"pkg{i}-{rng.randint(0, 9)}.{rng.randint(0, 20)}"
        outs = ["out", "dev", "lib"][: rng.randint(1, 3)]
        who = [b for b in builders if rng.random() < participation] or [rng.choice(builders)]
        d = SyntheticDrv(
            name=name,
            drv_path=drv_path(prefix, name, str(seed)),
            outputs={out_path(prefix, name, o, str(seed)): random_tree(rng, 3, 20) for o in outs},
            builders=who,
        )
        for o in d.outputs:
            for b in who:
                if rng.random() < p_diverge:
                    d.diverged.add((o, b))
        drvs.append(d)
    return drvs


def oracle_status(d: SyntheticDrv) -> str:
    """Derivation verdict from the generator's ground truth alone."""
    verdicts = []
    for o in d.outputs:
        variants = {b if (o, b) in d.diverged else "canonical" for b in d.builders}
        if len(variants) > 1:
            verdicts.append("nonreproducible")
        elif len(d.builders) > 1:
            verdicts.append("reproducible")
        else:
            verdicts.append("unconfirmed")
    if "nonreproducible" in verdicts:
        return "nonreproducible"
    if "unconfirmed" in verdicts:
        return "unconfirmed"
    return "reproducible"


# Canonical-archive golden vectors. The digests were produced by an
# independent implementation (the Rust nix-nar crate, 0.6.0) hashing these
# trees materialized on disk, and cross-checked against archives dumped by
# Nix itself where the tree is one of Nix's own test fixtures.
GOLDEN_TREES: dict[str, tuple[FsTree, int, str]] = {
    "hello": (
        Regular(b"hello\n"),
        120,
        "1c37d01af40be2e80691de3cc3df44377a699afbb17c68f080964b2fd071fc13",
    ),
    "script": (
        Regular(b"#!/bin/sh\necho jq 1.8.1\n", executable=True),
        168,
        "787e908ade2bff7df0a1dda7f15d7b54afc3919e4be10cf25471a4109cff6505",
    ),
    "tree": (
        Directory({
            "bin": Directory({"jq": Regular(b"\x7fELF" + bytes(range(256)) * 3, executable=True)}),
            "share": Directory({
                "doc": Directory({"README": Regular(b"Lightweight command-line JSON processor\n")}),
                "empty": Directory({}),
            }),
            "lib": Symlink("share/doc"),
            "a": Regular(b""),
        }),
        2368,
        "8b86fc78d6d354c0ec0141f5e953e7cbe7dd4bc2b734a71592318b3826c7714c",
    ),
}

# sha256 of archives produced by `nix-store --dump`, with the trees they hold.
NIX_DUMPED: dict[str, tuple[FsTree, str]] = {
    "empty-dir": (Directory({}), "a50a5ab6d992f5598edd92105059fae9acfc192981e08bd88534c2167e92526a"),
    "empty-file": (Regular(b""), "77ac62e2629d8e45f624589c0c8bf99e24b3a722349bf1e79bc186008534e246"),
    "dir-one-empty-file": (
        Directory({"an-empty-file": Regular(b"")}),
        "1690d799aa23b29dd82fee4a593ffc395488c67fed08281fd6ac8772f9446a2c",
    ),
    "small-file": (
        Regular(b"This is a test file.\n"),
        "c0e1e80adee59f0d38d28663f4e53064d56d3f6fce494b022c42a322da9c9788",
    ),
    "executable-file": (
        Regular(b"", executable=True),
        "34e00b8592a6ad465851a46a67464e076102fd5106ca6cb33a2f15009d30d590",
    ),
    "symlink": (Symlink("02-empty-file.in"), "1577c7f476cdebfb55951f10ccdd3a1adbad40f377200807c784e6c4f867f273"),
}


def submission(key, prefix: str, name: str, output: str = "out", content: bytes = b"",
               tag: str = "") -> Submission:
    """A correctly signed record for a one-file output holding ``content``."""
    drv = DrvId.parse(drv_path(prefix, name, tag), prefix)
    out = parse_store_path(out_path(prefix, name, output, tag), prefix)
    h = hash_tree(Regular(content))
    return Submission(drv, out, h, sign(key, drv, out, h))


def reference_archive(node) -> bytes:
    """Second, deliberately naive encoder used as an oracle in these tests."""

    def s(x):
        if isinstance(x, str):
            x = x.encode()
        pad = (8 - len(x) % 8) % 8
        return len(x).to_bytes(8, "little") + x + b"\0" * pad

    def node_bytes(n):
        if type(n) is Regular:
            inner = s("type") + s("regular")
            if n.executable:
                inner += s("executable") + s("")
            inner += s("contents") + s(n.contents)
        elif type(n) is Symlink:
            inner = s("type") + s("symlink") + s("target") + s(n.target)
        else:
            inner = s("type") + s("directory")
            for name in sorted(n.entries, key=lambda k: k.encode()):
                inner += s("entry") + s("(") + s("name") + s(name) + s("node") + node_bytes(n.entries[name]) + s(")")
        return s("(") + inner + s(")")

    return s("nix-archive-1") + node_bytes(node)


# RFC 8032, section 7.1
RFC8032 = [
    (
        "9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60",
        "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a",
        "",
        "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b",
    ),
    (
        "4ccd089b28ff96da9db6c346ec114e0f5b8a319f35aba624da8cf6ed4fb8a6fb",
        "3d4017c3e843895a92b70aa74d1b7ebc9c982ccf2ec4968cc0cd55f12af4660c",
        "72",
        "92a009a9f0d4cab8720e820b5f642540a2b27b5416503f8fb3762223ebdb69da085ac1e43e15996e458f3613d0f11d8c387b2eaeb4302aeeb00d291612bb0c00",
    ),
    (
        "c5aa8df43f9f837bedb7442f31dcb7b166d38535076f094b85ce3a2e0b4458f7",
        "fc51cd8e6218a1a38da47ed00230f0580816ed13ba3303ac5deb911548908025",
        "af82",
        "6291d657deec24024827e69c3abe01a30ce548a284743a445e3680d7db5ac3ac18ff9b538d16f290ae67f760984dc6594a7c15e9716ed28dc027beceea1ec40a",
    ),
]
