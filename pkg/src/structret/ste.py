"""Caption restructuring: turn image/caption pairs into structured documents.

A structured document has three entity classes mirroring a recipe: a short
title (global description), a list of local entities (ingredient-like object
strings), and the event sentences (instruction-like free text). Titles come
from a heuristic object extractor run on the caption, local entities from
cosine top-k retrieval against an embedding index of every object seen in the
corpus, and the event is the caption itself split into sentences.

The object extractor is a deliberately simple stand-in for a full linguistic
parser: it keeps caption tokens that survive a fixed stopword list and a
verb-suffix filter, merging adjacent survivors into one phrase. It is
deterministic and swappable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

# Articles, conjunctions, pronouns, auxiliaries/copulas, and common adverbs
# that never name an object. Matched case-insensitively.
STOPWORDS = frozenset(
    """
    a an the and or but nor so yet both either neither
    i you he she it we they me him her us them my your his its our their
    this that these those who whom whose which what
    is are was were be been being am do does did done has have had having
    will would shall should can could may might must
    not no very too also just only quite rather there here
    as if then than because while when where how why
    """.split()
)

# Prepositions are filtered like stopwords but tracked separately so callers
# can reason about prepositional objects if they need to.
PREPOSITIONS = frozenset(
    """
    of in on at by for with from to into onto over under above below behind
    beside between among through during before after against about around
    across along near without within upon off up down out inside outside
    """.split()
)

_VERB_SUFFIXES = (("ing", 5), ("ed", 4))  # (suffix, minimum token length)

_SENTENCE_DELIMS = ".!?;"
_TOKEN_PUNCT = ".,!?;:'\"()[]{}"


class EmptyIndexError(ValueError):
    """Raised when an entity index would be built from zero objects."""


class TitleExtraction(NamedTuple):
    title: str
    used_fallback: bool


@dataclass
class Caption:
    """A raw caption attached to an image."""

    text: str
    image_id: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("caption text must be non-empty")


@dataclass
class StructuredDocument:
    """(title, local entities, event sentences) triple."""

    title: str
    local_entities: list[str] = field(default_factory=list)
    event: list[str] = field(default_factory=list)

    def validate(self) -> "StructuredDocument":
        """Check the construction invariants for freshly extracted documents.

        Evaluation code may build variants with emptied fields (e.g. for the
        missing-entity protocol); those bypass validate() on purpose.
        """
        if not self.title.strip():
            raise ValueError("document title must be non-empty")
        folded = [e.casefold() for e in self.local_entities]
        if len(set(folded)) != len(folded):
            raise ValueError("duplicate local entities: %r" % (self.local_entities,))
        for sent in self.event:
            if not sent.strip():
                raise ValueError("event sentences must be non-empty")
        return self

    def entity_classes(self) -> dict[str, list[str]]:
        """Sentence lists keyed by entity class name."""
        return {
            "title": [self.title] if self.title.strip() else [],
            "ingredients": list(self.local_entities),
            "instructions": [s for s in self.event if s.strip()],
        }


@dataclass
class ImageEncoderHandle:
    """Pluggable image encoder: any callable producing a fixed-dim vector."""

    encode: Callable[[np.ndarray], np.ndarray]
    embed_dim: int


def _tokens_of(text: str) -> list[str]:
    toks = []
    for raw in text.split():
        tok = raw.strip(_TOKEN_PUNCT)
        if tok:
            toks.append(tok)
    return toks


def _is_object_token(token: str) -> bool:
    low = token.lower()
    if low in STOPWORDS or low in PREPOSITIONS:
        return False
    for suffix, min_len in _VERB_SUFFIXES:
        if len(low) >= min_len and low.endswith(suffix):
            return False
    return True


def extract_objects(text: str) -> list[str]:
    """Object phrases of a caption, in caption order, deduplicated.

    Tokens surviving the stopword/preposition/verb-suffix filters are kept
    with their original casing; adjacent survivors merge into a single
    phrase. Duplicates (case-insensitive) keep their first occurrence.
    """
    tokens = _tokens_of(text)
    phrases: list[str] = []
    current: list[str] = []
    for tok in tokens:
        if _is_object_token(tok):
            current.append(tok)
        elif current:
            phrases.append(" ".join(current))
            current = []
    if current:
        phrases.append(" ".join(current))

    seen: set[str] = set()
    out = []
    for phrase in phrases:
        key = phrase.casefold()
        if key not in seen:
            seen.add(key)
            out.append(phrase)
    return out


def _headline_case(objects: list[str], caption: str) -> list[str]:
    # Sentence-cased captions get headline-style titles: every object except
    # the trailing one is title-cased; lowercase captions pass through as-is.
    if not caption or not caption.strip()[0].isupper():
        return objects
    cased = []
    for i, phrase in enumerate(objects):
        if i == len(objects) - 1:
            cased.append(phrase)
        else:
            cased.append(" ".join(w[:1].upper() + w[1:] for w in phrase.split()))
    return cased


def extract_title_info(caption: Caption | str) -> TitleExtraction:
    """Title for a caption, with a flag marking the no-objects fallback."""
    text = caption.text if isinstance(caption, Caption) else caption
    objects = extract_objects(text)
    if not objects:
        return TitleExtraction(title=text.strip(), used_fallback=True)
    return TitleExtraction(" and ".join(_headline_case(objects, text)), False)


def extract_title(caption: Caption | str) -> str:
    return extract_title_info(caption).title


def split_sentences(text: str) -> list[str]:
    parts = []
    current = []
    for ch in text:
        if ch in _SENTENCE_DELIMS:
            sent = "".join(current).strip()
            if sent:
                parts.append(sent)
            current = []
        else:
            current.append(ch)
    sent = "".join(current).strip()
    if sent:
        parts.append(sent)
    return parts


@dataclass
class EntityIndex:
    """Entity strings paired with unit-norm embedding rows, cosine-queryable."""

    entities: list[str]
    embeddings: np.ndarray  # (num_entities, embed_dim), rows unit L2 norm

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.entities):
            raise ValueError("embedding row count must equal entity count")
        if len(set(self.entities)) != len(self.entities):
            raise ValueError("entity strings must be unique")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if self.embeddings.shape[0] and not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("embedding rows must be unit L2 norm")

    def __len__(self) -> int:
        return len(self.entities)

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for ent in self.entities:
            h.update(ent.encode("utf-8"))
            h.update(b"\x00")
        h.update(np.ascontiguousarray(self.embeddings).tobytes())
        return h.hexdigest()

    def top_k(self, query: np.ndarray, k: int) -> list[str]:
        """k entities closest to ``query`` by cosine, ties to the lower index."""
        if k < 0:
            raise ValueError("k must be >= 0")
        if k > len(self):
            raise ValueError(f"k={k} exceeds index size {len(self)}")
        if k == 0:
            return []
        q = np.asarray(query, dtype=np.float32).reshape(-1)
        if q.shape[0] != self.embed_dim:
            raise ValueError(
                f"query dim {q.shape[0]} does not match index dim {self.embed_dim}"
            )
        norm = np.linalg.norm(q)
        if norm > 0:
            q = q / norm
        sims = self.embeddings @ q
        order = np.lexsort((np.arange(len(self)), -sims))
        return [self.entities[i] for i in order[:k]]


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float32)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot L2-normalize a zero embedding")
    return mat / norms


def build_entity_index(
    captions: Sequence[Caption],
    text_encoder: Callable[[str], np.ndarray],
) -> EntityIndex:
    """Index the union of objects extracted from every caption.

    Entities are casefolded and kept in first-appearance order; embeddings
    are L2-normalized rows from ``text_encoder``.
    """
    if not captions:
        raise ValueError("caption list must be non-empty")
    entities: list[str] = []
    seen: set[str] = set()
    for cap in captions:
        for obj in extract_objects(cap.text):
            key = obj.casefold()
            if key not in seen:
                seen.add(key)
                entities.append(key)
    if not entities:
        raise EmptyIndexError("no objects extracted from the caption corpus")
    vecs = np.stack([np.asarray(text_encoder(e), dtype=np.float32) for e in entities])
    return EntityIndex(entities=entities, embeddings=normalize_rows(vecs))


def retrieve_local_entities(
    image: np.ndarray,
    index: EntityIndex,
    encoder: ImageEncoderHandle,
    k: int,
) -> list[str]:
    """Top-k entities by cosine similarity between the encoded image and the index."""
    if encoder.embed_dim != index.embed_dim:
        raise ValueError(
            f"encoder dim {encoder.embed_dim} does not match index dim {index.embed_dim}"
        )
    return index.top_k(np.asarray(encoder.encode(image)), k)


def build_structured_pair(
    caption: Caption,
    image: np.ndarray,
    index: EntityIndex,
    encoder: ImageEncoderHandle,
    k: int,
) -> StructuredDocument:
    """Compose title extraction, entity retrieval, and sentence splitting."""
    title = extract_title(caption)
    entities = retrieve_local_entities(image, index, encoder, k)
    event = split_sentences(caption.text)
    return StructuredDocument(title=title, local_entities=entities, event=event).validate()


def adapt_structured_record(fields: dict) -> StructuredDocument:
    """Adapt a record with pre-structured roles into a document.

    ``fields`` must carry an ``event`` text; ``title`` and ``local_entities``
    are optional. A missing title is extracted from the event text, and
    provided entities pass through deduplicated.
    """
    event_text = fields.get("event")
    if not event_text or not str(event_text).strip():
        raise ValueError("adapter input requires a non-empty 'event' text")
    event_text = str(event_text)

    title = fields.get("title")
    if title is None or not str(title).strip():
        title = extract_title(event_text)
    else:
        title = str(title)

    entities: list[str] = []
    seen: set[str] = set()
    for ent in fields.get("local_entities", []) or []:
        key = str(ent).casefold()
        if key not in seen:
            seen.add(key)
            entities.append(str(ent))

    return StructuredDocument(
        title=title, local_entities=entities, event=split_sentences(event_text)
    ).validate()


def save_entity_index(index: EntityIndex, path) -> None:
    """Write the index: a header line, then one JSON line per entity."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"embed_dim": index.embed_dim, "count": len(index)}) + "\n")
        for ent, vec in zip(index.entities, index.embeddings):
            fh.write(json.dumps({"entity": ent, "vec": [float(x) for x in vec]}) + "\n")


def load_entity_index(path) -> EntityIndex:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        entities = []
        vecs = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            entities.append(rec["entity"])
            vecs.append(np.asarray(rec["vec"], dtype=np.float32))
    if len(entities) != header["count"]:
        raise ValueError(
            f"index header count {header['count']} != entity lines {len(entities)}"
        )
    emb = np.stack(vecs) if vecs else np.zeros((0, header["embed_dim"]), np.float32)
    if emb.shape[0] and emb.shape[1] != header["embed_dim"]:
        raise ValueError("embedding width does not match header embed_dim")
    return EntityIndex(entities=entities, embeddings=emb)


def _seeded_gaussian(key: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.standard_normal(dim).astype(np.float32)


def hash_text_encoder(dim: int) -> Callable[[str], np.ndarray]:
    """Deterministic stand-in text encoder: a hash-seeded gaussian per string.

    Stable across processes (no reliance on interpreter hashing), so index
    files built with it are reproducible.
    """

    def encode(text: str) -> np.ndarray:
        return _seeded_gaussian("text:" + text, dim)

    return encode


class ToyImageEncoder:
    """Deterministic image encoder: block-mean downsample + fixed projection.

    Satisfies the ``ImageEncoderHandle`` contract (``encode`` / ``embed_dim``).
    """

    _GRID = 8

    def __init__(self, embed_dim: int = 64, seed: int = 0):
        self.embed_dim = embed_dim
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal(
            (self._GRID * self._GRID * 3, embed_dim)
        ).astype(np.float32) / np.sqrt(self._GRID * self._GRID * 3)

    def _downsample(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("image must be HxWx3")
        h, w, _ = img.shape
        gh, gw = h // self._GRID, w // self._GRID
        if gh == 0 or gw == 0:
            raise ValueError(f"image must be at least {self._GRID}x{self._GRID}")
        img = img[: gh * self._GRID, : gw * self._GRID]
        return img.reshape(self._GRID, gh, self._GRID, gw, 3).mean(axis=(1, 3))

    def encode(self, image: np.ndarray) -> np.ndarray:
        feats = self._downsample(image).reshape(-1)
        return feats @ self._proj

    def as_handle(self) -> ImageEncoderHandle:
        return ImageEncoderHandle(encode=self.encode, embed_dim=self.embed_dim)


def transform_captions(
    records: Iterable[tuple[Caption, np.ndarray]],
    index: EntityIndex,
    encoder: ImageEncoderHandle,
    k: int,
) -> list[StructuredDocument]:
    """Batch form of build_structured_pair, order preserved."""
    return [build_structured_pair(cap, img, index, encoder, k) for cap, img in records]
