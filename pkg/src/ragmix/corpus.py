"""Corpus and dataset handling: passages, QA examples, tokenization, normalization."""

from __future__ import annotations

import json
import re
import string
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

SOURCE_RETRIEVED = "retrieved"
SOURCE_GENERATED = "generated"
_SOURCES = (SOURCE_RETRIEVED, SOURCE_GENERATED)

_TSV_HEADER = "id\ttext\ttitle"


class CorpusError(ValueError):
    """Malformed corpus or dataset input."""


@dataclass(frozen=True)
class Passage:
    """One unit of context: either a corpus document or a generated one."""

    id: str
    text: str
    title: str = ""
    source: str = SOURCE_RETRIEVED

    def __post_init__(self) -> None:
        if not self.id:
            raise CorpusError("passage id is empty")
        if not self.text.strip():
            raise CorpusError(f"passage {self.id!r}: text is empty")
        if self.source not in _SOURCES:
            raise CorpusError(f"passage {self.id!r}: unknown source {self.source!r}")


@dataclass(frozen=True)
class QAExample:
    """A question with its gold answers."""

    id: str
    question: str
    answers: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise CorpusError(f"example {self.id!r}: question is empty")
        if not self.answers:
            raise CorpusError(f"example {self.id!r}: no answers")
        if any(not isinstance(a, str) for a in self.answers):
            raise CorpusError(f"example {self.id!r}: answers must be strings")


@dataclass(frozen=True)
class TokenizerConfig:
    lowercase: bool = True
    strip_accents: bool = True
    min_token_len: int = 1
    # Stemming is off by default; turn on only when an experiment calls for it.
    stem: bool = False

    def __post_init__(self) -> None:
        if self.min_token_len < 1:
            raise ValueError("min_token_len must be >= 1")


@dataclass(frozen=True)
class Corpus:
    """An ordered collection of passages plus token statistics."""

    passages: tuple[Passage, ...]
    doc_count: int
    total_tokens: int
    avg_doc_len: float

    @classmethod
    def from_passages(
        cls, passages: Iterable[Passage], cfg: TokenizerConfig | None = None
    ) -> "Corpus":
        cfg = cfg or TokenizerConfig()
        passages = tuple(passages)
        if not passages:
            raise CorpusError("no passages")
        seen: set[str] = set()
        for p in passages:
            if p.id in seen:
                raise CorpusError(f"duplicate passage id {p.id!r}")
            seen.add(p.id)
        total = sum(len(tokenize(p.text, cfg)) for p in passages)
        return cls(
            passages=passages,
            doc_count=len(passages),
            total_tokens=total,
            avg_doc_len=total / len(passages),
        )

    def by_id(self) -> dict[str, Passage]:
        return {p.id: p for p in self.passages}


# Tokens are maximal runs of alphanumeric codepoints; underscore is a separator.
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def _strip_accents(token: str) -> str:
    decomposed = unicodedata.normalize("NFD", token)
    return "".join(ch for ch in decomposed if not unicodedata.combining(ch))


def tokenize(text: str, cfg: TokenizerConfig | None = None) -> list[str]:
    """Split text into normalized tokens according to cfg."""
    cfg = cfg or TokenizerConfig()
    tokens = _TOKEN_RE.findall(text)
    if cfg.lowercase:
        tokens = [t.lower() for t in tokens]
    if cfg.strip_accents:
        tokens = [_strip_accents(t) for t in tokens]
    if cfg.stem:
        tokens = [porter_stem(t) for t in tokens]
    return [t for t in tokens if len(t) >= cfg.min_token_len]


_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def load_corpus(
    path: str | Path,
    format: str | None = None,
    cfg: TokenizerConfig | None = None,
) -> Corpus:
    """Load a passage corpus from a TSV or JSONL file.

    TSV rows are ``id<TAB>text<TAB>title`` with one optional header row; JSONL
    rows are objects with ``id``, ``text``, and optional ``title``. Errors name
    the offending line number.
    """
    path = Path(path)
    fmt = format or _infer_format(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    passages: list[Passage] = []
    seen: set[str] = set()

    def add(pid: str, text: str, title: str, lineno: int) -> None:
        if pid in seen:
            raise CorpusError(f"{path}: line {lineno}: duplicate passage id {pid!r}")
        if not text.strip():
            raise CorpusError(f"{path}: line {lineno}: empty text")
        seen.add(pid)
        passages.append(Passage(id=pid, text=text, title=title))

    if fmt == "tsv":
        for lineno, line in enumerate(lines, start=1):
            if lineno == 1 and line == _TSV_HEADER:
                continue
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise CorpusError(
                    f"{path}: line {lineno}: expected 2 or 3 tab-separated fields, "
                    f"got {len(fields)}"
                )
            title = fields[2] if len(fields) == 3 else ""
            add(fields[0], fields[1], title, lineno)
    elif fmt == "jsonl":
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(row, dict) or "id" not in row:
                raise CorpusError(f"{path}: line {lineno}: missing 'id' field")
            if "text" not in row:
                raise CorpusError(f"{path}: line {lineno}: missing 'text' field")
            add(str(row["id"]), str(row["text"]), str(row.get("title", "")), lineno)
    else:
        raise CorpusError(f"unknown corpus format {fmt!r}")

    if not passages:
        raise CorpusError(f"{path}: no passages")
    return Corpus.from_passages(passages, cfg)


def write_corpus(corpus: Corpus, path: str | Path, format: str | None = None) -> Path:
    """Write a corpus back out; the inverse of load_corpus."""
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt == "tsv":
        out = [_TSV_HEADER]
        for p in corpus.passages:
            for field in (p.id, p.text, p.title):
                if "\t" in field or "\n" in field:
                    raise CorpusError(
                        f"passage {p.id!r}: tabs/newlines cannot be written as TSV; "
                        "use jsonl"
                    )
            out.append(f"{p.id}\t{p.text}\t{p.title}")
        path.write_text("\n".join(out) + "\n", encoding="utf-8")
    elif fmt == "jsonl":
        rows = [
            json.dumps({"id": p.id, "text": p.text, "title": p.title}, ensure_ascii=False)
            for p in corpus.passages
        ]
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    else:
        raise CorpusError(f"unknown corpus format {fmt!r}")
    return path


def load_qa_examples(path: str | Path) -> list[QAExample]:
    """Load QA examples from JSONL rows of {"id", "question", "answers"}."""
    path = Path(path)
    examples: list[QAExample] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
        for key in ("id", "question", "answers"):
            if key not in row:
                raise CorpusError(f"{path}: line {lineno}: missing {key!r} field")
        if not isinstance(row["answers"], list) or not row["answers"]:
            raise CorpusError(f"{path}: line {lineno}: 'answers' must be a non-empty list")
        ex_id = str(row["id"])
        if ex_id in seen:
            raise CorpusError(f"{path}: line {lineno}: duplicate example id {ex_id!r}")
        seen.add(ex_id)
        try:
            examples.append(
                QAExample(
                    id=ex_id,
                    question=str(row["question"]),
                    answers=tuple(str(a) for a in row["answers"]),
                )
            )
        except CorpusError as exc:
            raise CorpusError(f"{path}: line {lineno}: {exc}") from exc
    if not examples:
        raise CorpusError(f"{path}: no examples")
    return examples


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".tsv":
        return "tsv"
    if suffix == ".jsonl":
        return "jsonl"
    raise CorpusError(f"{path}: cannot infer format from suffix {suffix!r}")


# --- Porter stemming ---------------------------------------------------------

_VOWELS = "aeiou"


def _is_consonant(word: str, i: int) -> bool:
    ch = word[i]
    if ch in _VOWELS:
        return False
    if ch == "y":
        return i == 0 or not _is_consonant(word, i - 1)
    return True


def _measure(stem: str) -> int:
    # Number of VC blocks in the [C](VC)^m[V] decomposition.
    m = 0
    prev_vowel = False
    for i in range(len(stem)):
        cons = _is_consonant(stem, i)
        if cons and prev_vowel:
            m += 1
        prev_vowel = not cons
    return m


def _has_vowel(stem: str) -> bool:
    return any(not _is_consonant(stem, i) for i in range(len(stem)))


def _ends_double_consonant(word: str) -> bool:
    return (
        len(word) >= 2
        and word[-1] == word[-2]
        and _is_consonant(word, len(word) - 1)
    )


def _ends_cvc(word: str) -> bool:
    if len(word) < 3:
        return False
    return (
        _is_consonant(word, len(word) - 3)
        and not _is_consonant(word, len(word) - 2)
        and _is_consonant(word, len(word) - 1)
        and word[-1] not in "wxy"
    )


_STEP2 = (
    ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
    ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
    ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
    ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
    ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"),
)

_STEP3 = (
    ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
    ("ical", "ic"), ("ful", ""), ("ness", ""),
)

_STEP4 = (
    "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
    "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
)


def porter_stem(word: str) -> str:
    """Stem an English word with the classic Porter algorithm."""
    w = word
    if len(w) <= 2:
        return w

    # Step 1a: plurals.
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies"):
        w = w[:-2]
    elif not w.endswith("ss") and w.endswith("s"):
        w = w[:-1]

    # Step 1b: -ed and -ing.
    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
    else:
        stripped = False
        if w.endswith("ed") and _has_vowel(w[:-2]):
            w = w[:-2]
            stripped = True
        elif w.endswith("ing") and _has_vowel(w[:-3]):
            w = w[:-3]
            stripped = True
        if stripped:
            if w.endswith(("at", "bl", "iz")):
                w += "e"
            elif _ends_double_consonant(w) and w[-1] not in "lsz":
                w = w[:-1]
            elif _measure(w) == 1 and _ends_cvc(w):
                w += "e"

    # Step 1c: y -> i after a vowel.
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"

    # Step 2: longest matching suffix decides, applied when m(stem) > 0.
    for suffix, repl in _STEP2:
        if w.endswith(suffix):
            stem = w[: -len(suffix)]
            if _measure(stem) > 0:
                w = stem + repl
            break

    # Step 3.
    for suffix, repl in _STEP3:
        if w.endswith(suffix):
            stem = w[: -len(suffix)]
            if _measure(stem) > 0:
                w = stem + repl
            break

    # Step 4: drop the suffix outright when m(stem) > 1.
    for suffix in _STEP4:
        if w.endswith(suffix):
            stem = w[: -len(suffix)]
            if suffix == "ion":
                if stem and stem[-1] in "st" and _measure(stem) > 1:
                    w = stem
            elif _measure(stem) > 1:
                w = stem
            break

    # Step 5a: trailing e.
    if w.endswith("e"):
        stem = w[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _ends_cvc(stem)):
            w = stem

    # Step 5b: -ll -> -l for long stems.
    if _measure(w) > 1 and _ends_double_consonant(w) and w.endswith("l"):
        w = w[:-1]

    return w
