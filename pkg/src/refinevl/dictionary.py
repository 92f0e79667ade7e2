"""Clinical dictionary: disease -> keywords, positive and negative sentences."""

from __future__ import annotations

import hashlib
import json
import os
import re
import urllib.request
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Protocol

from .corpus import negative_template, positive_template

SOURCES = ("manual", "claude3", "gpt4o", "custom")
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
                "nine", "ten")

POSITIVE_PROMPT = (
    "According to the diseases listed by me, please give {n} possible imaging diagnosis "
    "reports for each disease, which can give specific possible parts and corresponding "
    "image descriptions, and different diseases should be differentiated. Answer in "
    "English, be professional, concise, short, and as comprehensive as possible. Start the "
    "description directly, without `chest X-ray' and other statements, no numbers. "
    "{diseases}."
)
NEGATIVE_PROMPT = POSITIVE_PROMPT.replace("imaging diagnosis", "negative imaging diagnosis")


class DictionaryError(ValueError):
    pass


@dataclass(frozen=True)
class DiseaseEntry:
    name: str
    keywords: tuple[str, ...]
    positives: tuple[str, ...]
    negatives: tuple[str, ...]

    def validate(self) -> None:
        if not self.name or not self.name.strip():
            raise DictionaryError("disease entry with empty name")
        if not self.keywords:
            raise DictionaryError(f"{self.name!r}: keyword list is empty")
        for k in self.keywords:
            if not k or k != k.lower():
                raise DictionaryError(f"{self.name!r}: keyword {k!r} must be lowercase and non-empty")
        if not self.positives or self.positives[0] != positive_template(self.name):
            raise DictionaryError(
                f"{self.name!r}: positives[0] must be the manual template "
                f"{positive_template(self.name)!r}")
        if not self.negatives or self.negatives[0] != negative_template(self.name):
            raise DictionaryError(
                f"{self.name!r}: negatives[0] must be the manual template "
                f"{negative_template(self.name)!r}")
        for s in self.positives + self.negatives:
            if not s.strip():
                raise DictionaryError(f"{self.name!r}: empty sentence")

    @property
    def positive_template(self) -> str:
        return self.positives[0]

    @property
    def negative_template(self) -> str:
        return self.negatives[0]


@dataclass(frozen=True)
class ClinicalDictionary:
    entries: tuple[DiseaseEntry, ...]
    source: str = "manual"
    version: str = "1"
    _by_name: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise DictionaryError(f"unknown dictionary source {self.source!r}")
        seen = set()
        for e in self.entries:
            e.validate()
            if e.name in seen:
                raise DictionaryError(f"duplicate disease entry {e.name!r}")
            seen.add(e.name)
        object.__setattr__(self, "_by_name", {e.name: e for e in self.entries})

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name: str) -> DiseaseEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"disease {name!r} not in dictionary") from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def all_sentences(self) -> list[str]:
        return [s for e in self.entries for s in e.positives + e.negatives]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "source": self.source,
            "entries": [{"name": e.name, "keywords": list(e.keywords),
                         "positives": list(e.positives), "negatives": list(e.negatives)}
                        for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClinicalDictionary:
        if not isinstance(d, dict) or not isinstance(d.get("entries"), list):
            raise DictionaryError("dictionary file must be an object with an 'entries' list")
        entries = []
        for i, e in enumerate(d["entries"]):
            missing = {"name", "keywords", "positives", "negatives"} - set(e)
            if missing:
                raise DictionaryError(f"entry {i} ({e.get('name')!r}) missing {sorted(missing)}")
            entries.append(DiseaseEntry(e["name"], tuple(e["keywords"]),
                                        tuple(e["positives"]), tuple(e["negatives"])))
        return cls(tuple(entries), d.get("source", "custom"), str(d.get("version", "1")))


def _keyword_table() -> dict[str, list[str]]:
    text = resources.files("refinevl").joinpath("data/keywords.json").read_text("utf-8")
    return json.loads(text)


def build_manual_dictionary() -> ClinicalDictionary:
    """17 diseases, each with one manual positive and one manual negative template."""
    entries = tuple(
        DiseaseEntry(name, tuple(kws), (positive_template(name),), (negative_template(name),))
        for name, kws in _keyword_table().items()
    )
    return ClinicalDictionary(entries, "manual", "1")


def save_dictionary(d: ClinicalDictionary, path: str | Path) -> None:
    Path(path).write_text(json.dumps(d.to_dict(), indent=2, ensure_ascii=False) + "\n",
                          encoding="utf-8")


def load_dictionary(path: str | Path) -> ClinicalDictionary:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DictionaryError(f"{path}: invalid JSON: {e}") from None
    return ClinicalDictionary.from_dict(data)


def keyword_index(d: ClinicalDictionary) -> dict[str, list[str]]:
    index: dict[str, list[str]] = {}
    for e in d.entries:
        for k in e.keywords:
            names = index.setdefault(k, [])
            if e.name not in names:
                names.append(e.name)
    return index


# ---------------------------------------------------------------------------
# LLM augmentation


class CompletionClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class LLMClientError(RuntimeError):
    pass


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class FixtureClient:
    """Replays recorded responses stored as ``<sha256(prompt)>.txt``."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise LLMClientError(f"fixture directory {self.directory} does not exist")

    def complete(self, prompt: str) -> str:
        p = self.directory / f"{prompt_key(prompt)}.txt"
        if not p.exists():
            raise LLMClientError(f"no recorded response for prompt (expected {p.name})")
        return p.read_text(encoding="utf-8")


class HTTPClient:
    """Minimal chat-completions client; the API key is read from an env variable."""

    def __init__(self, endpoint: str, model: str, api_key_env: str = "LLM_API_KEY",
                 timeout: float = 120.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise LLMClientError(f"environment variable {self.api_key_env} is not set")
        body = json.dumps({"model": self.model,
                           "messages": [{"role": "user", "content": prompt}]}).encode()
        req = urllib.request.Request(self.endpoint, data=body, headers={
            "Content-Type": "application/json", "Authorization": f"Bearer {key}"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read())
            return payload["choices"][0]["message"]["content"]
        except Exception as e:  # network, HTTP and schema failures alike
            raise LLMClientError(f"completion request failed: {e}") from e


def build_prompts(names: list[str], n: int) -> tuple[str, str]:
    count = NUMBER_WORDS[n] if n < len(NUMBER_WORDS) else str(n)
    fill = {"n": count, "diseases": ", ".join(names)}
    return POSITIVE_PROMPT.format(**fill), NEGATIVE_PROMPT.format(**fill)


_NUMBERING = re.compile(r"^\s*(?:\d+\s*[.)]|[-*•])\s*")
_HEADER = re.compile(r"^[#*\s]*(.+?)[*\s]*:?[*\s]*$")


def parse_response(text: str, names: list[str]) -> dict[str, list[str]]:
    """Group response lines under disease header lines; strip list numbering."""
    lookup = {n.lower(): n for n in names}
    out: dict[str, list[str]] = {n: [] for n in names}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        m = _HEADER.match(line)
        if m and m.group(1).strip().lower() in lookup:
            current = lookup[m.group(1).strip().lower()]
            continue
        if current is None:
            continue
        sentence = _NUMBERING.sub("", line).strip()
        if sentence:
            out[current].append(sentence)
    return out


def augment_with_llm(d: ClinicalDictionary, client: CompletionClient, n_per_disease: int = 5,
                     source: str = "custom") -> ClinicalDictionary:
    """Append ``n_per_disease`` generated sentences after each manual template."""
    if n_per_disease < 0:
        raise ValueError("n_per_disease must be >= 0")
    if n_per_disease == 0:
        return d
    pos_prompt, neg_prompt = build_prompts(d.names, n_per_disease)
    try:
        generated = [parse_response(client.complete(p), d.names) for p in (pos_prompt, neg_prompt)]
    except LLMClientError:
        raise
    except Exception as e:
        raise LLMClientError(f"client failure: {e}") from e
    bad = [f"{name} ({kind}: {len(g[name])})"
           for kind, g in zip(("positive", "negative"), generated)
           for name in d.names if len(g[name]) != n_per_disease]
    if bad:
        raise DictionaryError(
            f"malformed LLM response, expected {n_per_disease} sentences for: {', '.join(bad)}")
    entries = tuple(
        replace(e, positives=e.positives + tuple(generated[0][e.name]),
                negatives=e.negatives + tuple(generated[1][e.name]))
        for e in d.entries
    )
    return ClinicalDictionary(entries, source, d.version)


def bundled_fixture_dir() -> Path:
    return Path(str(resources.files("refinevl").joinpath("data/llm_fixtures")))
