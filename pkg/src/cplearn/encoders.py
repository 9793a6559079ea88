"""Frozen text/image encoder interfaces plus deterministic desk-scale stand-ins.

The toy text encoder hashes each token to a fixed random direction and takes
a position-weighted sum.  On top of that it adds a small token-pair
("binding") component: a prompt naming a class *together with* attribute
words gets pair directions that a bag of independent tokens cannot express.
Without such cross-token structure a class-independent prompt suffix shifts
every class logit by the same amount and concept-guided prompts could never
change a prediction, so the stand-in would be useless for exercising the
pipeline it exists to test.

The toy image encoder builds features whose geometry mirrors that model:
attribute directions, the class-name direction, class/attribute pair
directions, a per-class style direction that only the final feature carries,
and seeded noise.  Per-layer maps mix attribute-heavy content at early
levels and class-heavy content at later levels.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import socket
import threading
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, TransportError
from .feature_store import FeatureRecord, SPLIT_TRAIN

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _stable_rng(*key: object) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(str(k) for k in key).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _seeded_unit(dim: int, *key: object) -> np.ndarray:
    vec = _stable_rng(*key).standard_normal(dim)
    return vec / np.linalg.norm(vec)


class TextEncoder(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray: ...


class ToyTextEncoder:
    """Deterministic hash-based text encoder with token-pair binding terms."""

    def __init__(self, dim: int, seed: int = 0, pair_weight: float = 0.35):
        if dim < 2:
            raise DimensionError("toy text encoder needs dim >= 2")
        self.dim = dim
        self.seed = seed
        self.pair_weight = pair_weight
        self._memo: dict[str, np.ndarray] = {}
        self._tokens: dict[str, np.ndarray] = {}
        self._pairs: dict[tuple[str, str], np.ndarray] = {}

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._tokens.get(token)
        if vec is None:
            vec = _seeded_unit(self.dim, self.seed, "tok", token)
            self._tokens[token] = vec
        return vec

    def pair_vector(self, a: str, b: str) -> np.ndarray:
        key = (a, b) if a <= b else (b, a)
        vec = self._pairs.get(key)
        if vec is None:
            vec = _seeded_unit(self.dim, self.seed, "pair", key[0], key[1])
            self._pairs[key] = vec
        return vec

    @staticmethod
    def _position_weight(pos: int) -> float:
        return 1.0 / np.sqrt(1.0 + pos)

    def encode(self, text: str) -> np.ndarray:
        cached = self._memo.get(text)
        if cached is not None:
            return cached
        tokens = tokenize(text)
        if not tokens:
            raise DegenerateInputError(f"no tokens in {text!r}")
        acc = np.zeros(self.dim)
        for pos, tok in enumerate(tokens):
            acc += self._position_weight(pos) * self.token_vector(tok)
        out = acc / np.linalg.norm(acc)
        if len(tokens) > 1 and self.pair_weight != 0.0:
            pair_acc = np.zeros(self.dim)
            for i in range(len(tokens)):
                wi = self._position_weight(i)
                for j in range(i + 1, len(tokens)):
                    pair_acc += wi * self._position_weight(j) \
                        * self.pair_vector(tokens[i], tokens[j])
            norm = np.linalg.norm(pair_acc)
            if norm > 0:
                out = out + self.pair_weight * (pair_acc / norm)
                out = out / np.linalg.norm(out)
        out.flags.writeable = False
        self._memo[text] = out
        return out


class RemoteEncoderClient:
    """encode_text over the newline-delimited JSON wire protocol.

    Responses are memoized; repeated texts never hit the network twice.
    Transport failures are retried with backoff, then surfaced as
    ``TransportError`` carrying the attempt count -- a training run must not
    silently skip prompts.
    """

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 2,
                 backoff: float = 0.05):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._memo: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._fh = None
        self._next_id = 0
        self._dim: int | None = None

    @property
    def dim(self) -> int:
        if self._dim is None:
            self._dim = int(self.info()["d_t"])
        return self._dim

    def _connect(self):
        host, _, port = self.endpoint.rpartition(":")
        sock = socket.create_connection((host or "127.0.0.1", int(port)),
                                        timeout=self.timeout)
        self._sock = sock
        self._fh = sock.makefile("rwb")

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock, self._fh = None, None

    def _roundtrip(self, request: dict) -> dict:
        last_error: Exception | None = None
        attempts = 0
        for attempt in range(self.retries + 1):
            attempts = attempt + 1
            try:
                if self._fh is None:
                    self._connect()
                self._fh.write(json.dumps(request).encode("utf-8") + b"\n")
                self._fh.flush()
                line = self._fh.readline()
                if not line:
                    raise ConnectionError("server closed the stream")
                return json.loads(line.decode("utf-8"))
            except (OSError, ValueError, ConnectionError) as exc:
                last_error = exc
                self.close()
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise TransportError(f"encoder endpoint {self.endpoint}: {last_error}",
                             retries=attempts)

    def info(self) -> dict:
        reply = self._roundtrip({"op": "info"})
        if "error" in reply:
            raise TransportError(f"info rejected: {reply['error']}", retries=1)
        return reply

    def encode(self, text: str) -> np.ndarray:
        if not text:
            raise DegenerateInputError("cannot encode an empty string")
        with self._lock:
            cached = self._memo.get(text)
        if cached is not None:
            return cached
        with self._lock:  # serialize request/response pairing and memo writes
            cached = self._memo.get(text)
            if cached is not None:
                return cached
            self._next_id += 1
            request_id = self._next_id
            reply = self._roundtrip({"id": request_id, "op": "encode_text", "text": text})
            if "error" in reply:
                raise TransportError(f"encode_text rejected: {reply['error']}", retries=1)
            if reply.get("id") != request_id:
                raise TransportError(
                    f"reply id {reply.get('id')} does not match request {request_id}",
                    retries=1)
            vec = np.asarray(reply.get("vec", []), dtype=np.float64)
            if vec.ndim != 1 or vec.size != int(reply.get("dim", -1)):
                raise TransportError("malformed encode_text reply", retries=1)
            norm = np.linalg.norm(vec)
            if abs(norm - 1.0) > 1e-4:
                raise TransportError(f"reply vector norm {norm:.6f} not unit", retries=1)
            vec.flags.writeable = False
            self._memo[text] = vec
            return vec


def multi_level_summary(feature_maps: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Spatially average each W x H x C map into one C-vector, in level order."""
    if not feature_maps:
        raise DimensionError("no feature maps given")
    rows = []
    for q, fmap in enumerate(feature_maps):
        arr = np.asarray(fmap, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"level {q}: expected W x H x C map, got {arr.shape}")
        rows.append(arr.mean(axis=(0, 1)))
    return rows


@dataclass
class ToyImageSpec:
    """Synthetic attribute descriptor for one toy image."""

    record_id: str
    class_id: int
    class_name: str
    attributes: list[str]
    split_tag: str = SPLIT_TRAIN
    noise_scale: float = 0.0
    seed: int = 0


@dataclass
class ToySignalMix:
    """Relative strength of each channel in a toy image feature."""

    attribute: float = 1.0
    binding: float = 1.6
    class_name: float = 1.0
    style: float = 0.6
    level_noise: float = 0.05
    # how far each level's channel basis rotates away from the text basis
    level_basis_noise: float = 0.35
    # fraction of attribute (vs class) content per encoder level, early to late
    level_attr_fractions: tuple[float, ...] = (0.9, 0.7, 0.3, 0.1)
    # share of the style direction visible in level maps; the rest reaches
    # only the final feature, so no image-side module can recover it
    level_style_fraction: float = 0.5


class ToyImageEncoder:
    """Builds FeatureRecords whose geometry matches the toy text encoder."""

    def __init__(self, text_encoder: ToyTextEncoder, channel_dims: Sequence[int],
                 mix: ToySignalMix | None = None, map_size: int = 2):
        self.text_encoder = text_encoder
        self.channel_dims = list(channel_dims)
        self.mix = mix or ToySignalMix()
        self.map_size = map_size
        if len(self.mix.level_attr_fractions) != len(self.channel_dims):
            fractions = tuple(np.linspace(0.9, 0.1, len(self.channel_dims)).tolist())
            self.mix = dataclasses.replace(self.mix, level_attr_fractions=fractions)
        dim = text_encoder.dim
        # fixed per-level projections from text space into channel space; a
        # square channel basis stays near the text basis (rotated by
        # level_basis_noise) so the content is recoverable at desk scale
        self._projections = []
        for q, cdim in enumerate(self.channel_dims):
            rand = np.stack([_seeded_unit(dim, text_encoder.seed, "level", q, c)
                             for c in range(cdim)], axis=1)
            if cdim == dim:
                basis = np.eye(dim) + self.mix.level_basis_noise * rand
                basis /= np.linalg.norm(basis, axis=0, keepdims=True)
            else:
                basis = rand
            self._projections.append(basis * np.sqrt(dim / 3.0))

    def style_direction(self, class_id: int) -> np.ndarray:
        return _seeded_unit(self.text_encoder.dim, self.text_encoder.seed,
                            "style", class_id)

    def encode(self, spec: ToyImageSpec) -> FeatureRecord:
        if not spec.attributes:
            raise DegenerateInputError(f"toy image {spec.record_id!r} has no attributes")
        te = self.text_encoder
        mix = self.mix
        rng = _stable_rng(te.seed, "image", spec.seed, spec.record_id)

        name_tokens = tokenize(spec.class_name)
        attr_part = np.mean([te.encode(word) for word in spec.attributes], axis=0)
        attr_part /= np.linalg.norm(attr_part)
        bind_part = np.mean([te.pair_vector(name_tokens[-1], tokenize(word)[-1])
                             for word in spec.attributes], axis=0)
        bind_part /= np.linalg.norm(bind_part)
        class_part = te.token_vector(name_tokens[-1])
        style_part = self.style_direction(spec.class_id)

        # the same two content bundles feed the final feature and the levels:
        # low-level bundle (attributes + bound conjunctions) and high-level
        # bundle (class identity + per-class style)
        low = mix.attribute * attr_part + mix.binding * bind_part
        high = mix.class_name * class_part + mix.style * style_part
        high_visible = mix.class_name * class_part \
            + mix.level_style_fraction * mix.style * style_part

        final = low + high + spec.noise_scale * rng.standard_normal(te.dim)
        final /= np.linalg.norm(final)

        maps = []
        for q, cdim in enumerate(self.channel_dims):
            lam = self.mix.level_attr_fractions[q]
            content = lam * low + (1.0 - lam) * high_visible
            content = content + mix.level_noise * rng.standard_normal(te.dim)
            row = content @ self._projections[q]
            detail = rng.standard_normal((self.map_size, self.map_size, cdim))
            detail -= detail.mean(axis=(0, 1), keepdims=True)  # GAP removes it
            maps.append(row[None, None, :] + detail)
        summaries = multi_level_summary(maps)

        # round to single precision so in-memory records equal their bank bytes
        final32 = final.astype(np.float32).astype(np.float64)
        return FeatureRecord(
            record_id=spec.record_id,
            class_id=spec.class_id,
            final_feature=final32,
            level_summaries=[s.astype(np.float32).astype(np.float64) for s in summaries],
            split_tag=spec.split_tag,
        )


def encoder_from_notes(notes: dict, endpoint: str | None = None) -> TextEncoder:
    """Build the text encoder a manifest's notes describe.

    ``endpoint`` forces a remote client regardless of the recorded kind.
    """
    cfg = dict(notes.get("encoder", {}))
    if endpoint:
        return RemoteEncoderClient(endpoint)
    kind = cfg.pop("kind", "toy")
    if kind == "toy":
        return ToyTextEncoder(dim=int(cfg.get("dim", 32)),
                              seed=int(cfg.get("seed", 0)),
                              pair_weight=float(cfg.get("pair_weight", 0.35)))
    if kind == "remote":
        return RemoteEncoderClient(cfg.get("endpoint", ""))
    raise DegenerateInputError(f"unknown encoder kind {kind!r}")
