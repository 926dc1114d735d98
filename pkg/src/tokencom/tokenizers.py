"""Tokenizer catalog, rate formulas and the tokenizer-agreement handshake.

The agreement runs in two messages per user::

    user -> BS   CAP <user_id> <tag1>,<tag2>,...
    BS -> user   SEL <user_id> <tag>

Both are single ASCII lines terminated by ``\\n``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AgreementImpossible, ConfigurationError, ProtocolError, ProtocolViolation

log = logging.getLogger(__name__)

METRICS = ("psnr", "ssim", "rfvd")

CATALOG_COLUMNS = (
    "name_tag", "mu_f", "mu_h", "mu_w", "codebook_size",
    "psnr", "ssim", "rfvd", "bpp_declared",
)


@dataclass(frozen=True)
class TokenizerSpec:
    name_tag: str
    mu_f: float
    mu_h: float
    mu_w: float
    codebook_size: int
    psnr: float
    ssim: float
    rfvd: float
    bpp_declared: float

    @property
    def eta(self) -> float:
        return compression_rate(self)


@dataclass(frozen=True)
class VideoParams:
    height: int = 1080
    width: int = 1920
    fps: float = 24.0

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.fps < 0:
            raise ConfigurationError(f"invalid video parameters {self}")

    @property
    def pixel_rate(self) -> float:
        return self.fps * self.height * self.width


RESOLUTIONS = {
    "360p": VideoParams(360, 640),
    "720p": VideoParams(720, 1280),
    "1080p": VideoParams(1080, 1920),
}


def compression_rate(spec: TokenizerSpec) -> float:
    """Bits per pixel produced by a tokenizer: ``mu_f * mu_h * mu_w * log2|O|``."""
    if spec.codebook_size < 2:
        raise ConfigurationError(
            f"{spec.name_tag}: codebook size must be >= 2, got {spec.codebook_size}")
    return spec.mu_f * spec.mu_h * spec.mu_w * math.log2(spec.codebook_size)


def required_bitrate(spec_or_eta, video: VideoParams) -> float:
    """Bit/s needed to stream ``video`` at the tokenizer's compression rate."""
    eta = spec_or_eta if isinstance(spec_or_eta, (int, float, np.floating)) else compression_rate(spec_or_eta)
    return video.fps * eta * video.height * video.width


def quality_of(spec: TokenizerSpec, metric: str = "psnr") -> float:
    """Catalog quality under a larger-is-better convention (rFVD is negated)."""
    if metric == "psnr":
        return spec.psnr
    if metric == "ssim":
        return spec.ssim
    if metric == "rfvd":
        return -spec.rfvd
    raise ConfigurationError(f"unknown quality metric {metric!r}; expected one of {METRICS}")


def _validate_spec(spec: TokenizerSpec) -> None:
    if not spec.name_tag or any(c.isspace() or c == "," for c in spec.name_tag):
        raise ConfigurationError(f"invalid name tag {spec.name_tag!r}")
    for mu in (spec.mu_f, spec.mu_h, spec.mu_w):
        if not 0 < mu <= 1:
            raise ConfigurationError(f"{spec.name_tag}: compression factor {mu} outside (0, 1]")
    if not (math.isfinite(spec.psnr) and spec.psnr > 0):
        raise ConfigurationError(f"{spec.name_tag}: psnr must be finite and positive")
    eta = compression_rate(spec)
    if abs(eta - spec.bpp_declared) > 1e-3:
        raise ConfigurationError(
            f"{spec.name_tag}: computed bpp {eta:.6f} differs from declared {spec.bpp_declared}")


def default_catalog_path() -> Path:
    return Path(str(resources.files("tokencom") / "data" / "catalog.csv"))


def load_catalog(path: str | Path | None = None) -> tuple[TokenizerSpec, ...]:
    """Read a catalog file (see ``data/catalog.csv`` for the format)."""
    path = Path(path) if path is not None else default_catalog_path()
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != CATALOG_COLUMNS:
        raise ConfigurationError(f"{path}: header must be {','.join(CATALOG_COLUMNS)}")
    specs = []
    for row in reader:
        spec = TokenizerSpec(
            name_tag=row["name_tag"].strip(),
            mu_f=float(row["mu_f"]), mu_h=float(row["mu_h"]), mu_w=float(row["mu_w"]),
            codebook_size=int(row["codebook_size"]),
            psnr=float(row["psnr"]), ssim=float(row["ssim"]), rfvd=float(row["rfvd"]),
            bpp_declared=float(row["bpp_declared"]),
        )
        _validate_spec(spec)
        specs.append(spec)
    tags = [s.name_tag for s in specs]
    if len(set(tags)) != len(tags):
        raise ConfigurationError(f"{path}: duplicate name tags")
    if not specs:
        raise ConfigurationError(f"{path}: empty catalog")
    return tuple(specs)


@dataclass(frozen=True)
class CompatiblePairSet:
    """Pairs usable with one user, indexed 1..M in ascending bpp."""

    user_id: int
    pairs: tuple[TokenizerSpec, ...]
    ignored: tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index: int) -> TokenizerSpec:
        if not 1 <= index <= len(self.pairs):
            raise IndexError(f"pair index {index} outside 1..{len(self.pairs)}")
        return self.pairs[index - 1]

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(p.name_tag for p in self.pairs)

    def index_of(self, tag: str) -> int:
        return self.tags.index(tag) + 1


def compatible_pairs(bs_catalog: Sequence[TokenizerSpec], user_detokenizers: Iterable[str],
                     user_id: int = 0) -> CompatiblePairSet:
    by_tag = {s.name_tag: s for s in bs_catalog}
    wanted = list(dict.fromkeys(user_detokenizers))
    ignored = tuple(t for t in wanted if t not in by_tag)
    for tag in ignored:
        log.warning("user %d declared unknown de-tokenizer %r; ignored", user_id, tag)
    matched = sorted((by_tag[t] for t in wanted if t in by_tag), key=compression_rate)
    if not matched:
        raise AgreementImpossible(f"user {user_id}: no compatible tokenizer/de-tokenizer pair")
    return CompatiblePairSet(user_id, tuple(matched), ignored)


# ---------------------------------------------------------------- wire format

def _check_tag(tag: str) -> None:
    if not tag or not tag.isascii() or any(c.isspace() or c == "," for c in tag):
        raise ProtocolError(f"tag {tag!r} must be non-empty ASCII without commas or whitespace", 0)


def encode_capability_message(user_id: int, tags: Sequence[str]) -> bytes:
    if not tags:
        raise ProtocolError("empty capability list", 0)
    for t in tags:
        _check_tag(t)
    return f"CAP {int(user_id)} {','.join(tags)}\n".encode("ascii")


def encode_selection_message(user_id: int, name_tag: str) -> bytes:
    _check_tag(name_tag)
    return f"SEL {int(user_id)} {name_tag}\n".encode("ascii")


def _split_line(data: bytes, keyword: str) -> tuple[int, str, int]:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ProtocolError("message is not ASCII", exc.start) from None
    if text.endswith("\n"):
        text = text[:-1]
    if "\n" in text:
        raise ProtocolError("embedded newline", text.index("\n"))
    prefix = keyword + " "
    if not text.startswith(prefix):
        raise ProtocolError(f"expected {keyword!r} keyword", 0)
    rest = text[len(prefix):]
    sp = rest.find(" ")
    if sp < 0:
        raise ProtocolError("missing payload after user id", len(text))
    uid_text = rest[:sp]
    if not uid_text.isdigit():
        raise ProtocolError(f"bad user id {uid_text!r}", len(prefix))
    offset = len(prefix) + sp + 1
    return int(uid_text), rest[sp + 1:], offset


def parse_capability_message(data: bytes) -> tuple[int, list[str]]:
    user_id, payload, offset = _split_line(data, "CAP")
    if not payload:
        raise ProtocolError("empty capability", offset)
    tags = payload.split(",")
    pos = offset
    for t in tags:
        if not t or any(c.isspace() for c in t):
            raise ProtocolError(f"malformed tag {t!r}", pos)
        pos += len(t) + 1
    return user_id, tags


def parse_selection_message(data: bytes) -> tuple[int, str]:
    user_id, payload, offset = _split_line(data, "SEL")
    if not payload or any(c.isspace() or c == "," for c in payload):
        raise ProtocolError(f"malformed tag {payload!r}", offset)
    return user_id, payload


# ---------------------------------------------------------------- endpoints

class BaseStationEndpoint:
    """BS side of the handshake: collects capabilities, issues selections."""

    def __init__(self, catalog: Sequence[TokenizerSpec]):
        self.catalog = tuple(catalog)
        self.pair_sets: dict[int, CompatiblePairSet] = {}

    def receive_capability(self, data: bytes) -> CompatiblePairSet:
        user_id, tags = parse_capability_message(data)
        pairs = compatible_pairs(self.catalog, tags, user_id)
        self.pair_sets[user_id] = pairs
        return pairs

    def select(self, user_id: int, index: int) -> bytes:
        if user_id not in self.pair_sets:
            raise ProtocolViolation(f"user {user_id} has not declared its capabilities")
        pairs = self.pair_sets[user_id]
        if not 1 <= index <= len(pairs):
            raise ProtocolViolation(f"user {user_id}: pair index {index} outside 1..{len(pairs)}")
        return encode_selection_message(user_id, pairs[index].name_tag)


class UserEndpoint:
    """User side of the handshake."""

    def __init__(self, user_id: int, detokenizers: Sequence[str]):
        self.user_id = user_id
        self.detokenizers = tuple(detokenizers)
        self.agreed: str | None = None

    def capability_message(self) -> bytes:
        return encode_capability_message(self.user_id, self.detokenizers)

    def receive_selection(self, data: bytes) -> str:
        user_id, tag = parse_selection_message(data)
        if user_id != self.user_id:
            raise ProtocolViolation(f"selection addressed to user {user_id}, not {self.user_id}")
        if tag not in self.detokenizers:
            raise ProtocolViolation(f"user {self.user_id}: {tag!r} was never declared")
        if self.agreed is not None and self.agreed != tag:
            raise ProtocolViolation(f"user {self.user_id}: agreement already concluded on {self.agreed!r}")
        self.agreed = tag
        return tag


class SimulatedLink:
    """In-process ordered message channel with optional drop/duplication."""

    def __init__(self, rng: np.random.Generator | None = None, drop_prob: float = 0.0,
                 dup_prob: float = 0.0):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.drop_prob = drop_prob
        self.dup_prob = dup_prob
        self.log: list[bytes] = []

    def send(self, data: bytes) -> list[bytes]:
        self.log.append(data)
        if self.drop_prob and self.rng.random() < self.drop_prob:
            return []
        if self.dup_prob and self.rng.random() < self.dup_prob:
            return [data, data]
        return [data]


def run_agreement(bs: BaseStationEndpoint, users: Sequence[UserEndpoint], choose,
                  link: SimulatedLink | None = None, max_retries: int = 3) -> dict[int, TokenizerSpec]:
    """Drive Steps 1-2 for every user.

    ``choose(user_id, pair_set) -> index`` picks the 1-based pair index. Lost
    messages are resent up to ``max_retries`` times.
    """
    link = link or SimulatedLink()
    agreed = {}
    for user in users:
        pairs = None
        for _ in range(max_retries + 1):
            for msg in link.send(user.capability_message()):
                pairs = bs.receive_capability(msg)
            if pairs is not None:
                break
        if pairs is None:
            raise ProtocolError(f"user {user.user_id}: capability message lost", 0)
        index = choose(user.user_id, pairs)
        tag = None
        for _ in range(max_retries + 1):
            for msg in link.send(bs.select(user.user_id, index)):
                tag = user.receive_selection(msg)
            if tag is not None:
                break
        if tag is None:
            raise ProtocolError(f"user {user.user_id}: selection message lost", 0)
        agreed[user.user_id] = pairs[index]
    return agreed


# ---------------------------------------------------------------- H.265 ladder

@dataclass(frozen=True)
class CodecLadder:
    """Rate-adaptive codec operating points, lowest rate first."""

    bpp: tuple[float, ...] = (0.021, 0.042, 0.084, 0.168)
    psnr: tuple[float, ...] = (27.21, 30.21, 33.21, 36.21)

    def select(self, rate: float, video: VideoParams) -> tuple[int, bool]:
        """Highest level whose bitrate fits ``rate``; ``(0, True)`` when none fits."""
        level = -1
        for k, eta in enumerate(self.bpp):
            if required_bitrate(eta, video) <= rate:
                level = k
        return (0, True) if level < 0 else (level, False)


def h265_ladder(anchor_bpp: float = 0.084, anchor_psnr: float = 33.21,
                db_per_doubling: float = 3.0, levels: int = 4) -> CodecLadder:
    """Ladder at bpp ``anchor / 4 ... anchor * 2`` with a log-linear R-D curve."""
    exps = range(-2, levels - 2)
    return CodecLadder(
        bpp=tuple(anchor_bpp * 2.0 ** e for e in exps),
        psnr=tuple(round(anchor_psnr + db_per_doubling * e, 10) for e in exps),
    )
