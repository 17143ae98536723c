"""Audio-to-video label mapping.

Top-K audio category predictions are turned into a pseudo video label
either through a prompted chat-completion endpoint or through a fully
offline lexical scorer. Replies are resolved against the video label
space; anything that does not resolve is reported invalid rather than
guessed.
"""

from __future__ import annotations

import hashlib
import json
import os
import string
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

MAX_TOPK = 10
STEM_LEN = 4


class LLMRequestError(RuntimeError):
    """All transport attempts to the completion endpoint failed."""


@dataclass
class AudioTopK:
    """Top-K (label, probability) pairs from an audio tagger, best first."""

    entries: list[tuple[str, float]]
    sample_id: str = ""

    def __post_init__(self):
        self.entries = [(str(label), float(p)) for label, p in self.entries]
        k = len(self.entries)
        if not 1 <= k <= MAX_TOPK:
            raise ValueError(f"need 1..{MAX_TOPK} entries, got {k}")
        labels = [label for label, _ in self.entries]
        if any(not label for label in labels):
            raise ValueError("audio labels must be nonempty")
        if len(set(labels)) != k:
            raise ValueError("audio labels must be unique")
        probs = [p for _, p in self.entries]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError(f"probabilities must lie in [0, 1]: {probs}")
        if any(probs[i] < probs[i + 1] for i in range(k - 1)):
            raise ValueError(f"probabilities must be non-increasing: {probs}")

    @property
    def k(self) -> int:
        return len(self.entries)


def normalize_label(text: str) -> str:
    return " ".join(text.strip().casefold().split())


class VideoLabelSpace:
    """Ordered video class names with lookup by normalized name."""

    def __init__(self, labels: Sequence[str]):
        self.labels = [str(lbl) for lbl in labels]
        if not self.labels:
            raise ValueError("label space is empty")
        self._index: dict[str, int] = {}
        for i, lbl in enumerate(self.labels):
            norm = normalize_label(lbl)
            if not norm:
                raise ValueError("labels must be nonempty after normalization")
            if norm in self._index:
                raise ValueError(f"duplicate label after normalization: {lbl!r}")
            self._index[norm] = i

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def index_of(self, name: str) -> Optional[int]:
        return self._index.get(normalize_label(name))


@dataclass
class PromptBundle:
    """The five prompt sections; ``render`` produces the final wire string."""

    background: str
    task: str
    examples: str
    requirements: str
    inputs: str

    def __post_init__(self):
        for name in ("background", "task", "examples", "requirements", "inputs"):
            if not getattr(self, name).strip():
                raise ValueError(f"prompt section {name!r} is empty")

    def render(self) -> str:
        sections = (self.background, self.task, self.examples, self.requirements, self.inputs)
        return "#Human: " + " ".join(sections) + " #Assistant:"


@dataclass
class MappingResult:
    raw_reply: str
    resolved_label: Optional[str]
    class_index: Optional[int]
    valid: bool
    source: str  # "llm" | "lexical" | "fixture"
    note: str = ""


def _default_template() -> dict:
    with resources.files("avtta.data").joinpath("prompt_template.json").open("r") as fh:
        return json.load(fh)


def build_prompt(space: VideoLabelSpace, audio: AudioTopK,
                 template: Optional[dict] = None) -> PromptBundle:
    """Render the deterministic five-section prompt for one sample.

    The inputs section lists every label of the space exactly once and all
    K audio entries with probabilities at two decimals.
    """
    if len(space) == 0:
        raise ValueError("label space is empty")
    tpl = template if template is not None else _default_template()
    label_list = ", ".join(space.labels)
    pred_list = ", ".join(f"{label}({p:.2f})" for label, p in audio.entries)
    inputs = (f"Inputs: the video label space is [{label_list}]; "
              f"the audio predictions are {pred_list}.")
    return PromptBundle(background=tpl["background"], task=tpl["task"],
                        examples=tpl["examples"], requirements=tpl["requirements"],
                        inputs=inputs)


_STRIP_CHARS = string.whitespace + "\"'`.,;:!?()[]{}"


def resolve_label(reply: str, space: VideoLabelSpace) -> Optional[int]:
    """Resolve a free-text reply to a class index, or None.

    Exact match after trimming quotes and punctuation wins; otherwise a
    substring match is accepted only when exactly one space label occurs
    in the reply.
    """
    cleaned = normalize_label(reply.strip(_STRIP_CHARS))
    if not cleaned:
        return None
    exact = space.index_of(cleaned)
    if exact is not None:
        return exact
    contained = [i for i, lbl in enumerate(space.labels)
                 if normalize_label(lbl) in cleaned]
    if len(contained) == 1:
        return contained[0]
    return None


def _stems(text: str) -> set[str]:
    tokens = "".join(c if c.isalnum() else " " for c in text.casefold()).split()
    return {tok[:STEM_LEN] for tok in tokens}


def stem_similarity(a: str, b: str) -> float:
    """Jaccard overlap of the two strings' word-stem sets."""
    sa, sb = _stems(a), _stems(b)
    if not sa or not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


def map_via_lexical(space: VideoLabelSpace, audio: AudioTopK) -> MappingResult:
    """Deterministic offline mapper: probability-weighted stem overlap.

    Ties break toward the lexicographically smaller video label; a best
    score of zero is reported invalid.
    """
    scores = []
    for lbl in space.labels:
        s = sum(p * stem_similarity(audio_label, lbl) for audio_label, p in audio.entries)
        scores.append((s, lbl))
    best_score = max(s for s, _ in scores)
    if best_score == 0.0:
        return MappingResult(raw_reply="", resolved_label=None, class_index=None,
                             valid=False, source="lexical", note="no stem overlap")
    best_label = min(lbl for s, lbl in scores if s == best_score)
    idx = space.index_of(best_label)
    return MappingResult(raw_reply=best_label, resolved_label=best_label,
                         class_index=idx, valid=True, source="lexical")


@dataclass
class LLMClientConfig:
    endpoint_url: str
    model: str
    api_key_env: str = "AVTTA_LLM_API_KEY"
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.5


class HttpChatClient:
    """Single-turn chat completion over HTTP with retry and backoff."""

    source = "llm"

    def __init__(self, config: LLMClientConfig, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._sleep = sleep

    def complete(self, prompt_text: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {"model": self.config.model, "temperature": 0,
                   "messages": [{"role": "user", "content": prompt_text}]}
        last_err: Optional[Exception] = None
        for attempt in range(self.config.max_retries + 1):
            try:
                resp = requests.post(self.config.endpoint_url, json=payload,
                                     headers=headers, timeout=self.config.timeout)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except Exception as exc:  # network, HTTP status, or shape errors
                last_err = exc
                if attempt < self.config.max_retries:
                    self._sleep(self.config.backoff_base * 2 ** attempt)
        raise LLMRequestError(f"request failed after {self.config.max_retries + 1} "
                              f"attempts: {last_err}")


class FixtureClient:
    """Canned replies keyed by the audio entries rendered into the prompt."""

    source = "fixture"

    def __init__(self, replies: dict[str, str]):
        self.replies = dict(replies)

    @staticmethod
    def key_for(audio: AudioTopK) -> str:
        return ", ".join(f"{label}({p:.2f})" for label, p in audio.entries)

    @classmethod
    def from_examples(cls, rows: Sequence[dict]) -> "FixtureClient":
        replies = {}
        for row in rows:
            audio = AudioTopK(entries=[(lbl, p) for lbl, p in row["audio"]])
            replies[cls.key_for(audio)] = row["reply"]
        return cls(replies)

    def complete(self, prompt_text: str) -> str:
        for key, reply in self.replies.items():
            if key in prompt_text:
                return reply
        raise LLMRequestError("no fixture reply matches this prompt")


def prompt_hash(prompt_text: str) -> str:
    return hashlib.sha256(prompt_text.encode("utf-8")).hexdigest()


class MappingCache:
    """Append-only JSONL of resolved replies for fully offline replay."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[str, dict] = {}
        if self.path.exists():
            with self.path.open() as fh:
                for line in fh:
                    if line.strip():
                        entry = json.loads(line)
                        self._entries[entry["prompt_hash"]] = entry

    def get(self, key: str) -> Optional[dict]:
        return self._entries.get(key)

    def put(self, sample_id: str, key: str, raw_reply: str,
            resolved_label: Optional[str]) -> None:
        entry = {"sample_id": sample_id, "prompt_hash": key,
                 "raw_reply": raw_reply, "resolved_label": resolved_label}
        self._entries[key] = entry
        with self.path.open("a") as fh:
            fh.write(json.dumps(entry) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


def map_via_llm(client, prompt: PromptBundle, space: VideoLabelSpace,
                cache: Optional[MappingCache] = None,
                sample_id: str = "") -> MappingResult:
    """Send one completion request and resolve the trimmed reply.

    Failures (transport exhaustion, fixture miss, unresolvable replies)
    yield ``valid=False``; the mapper never guesses.
    """
    text = prompt.render()
    key = prompt_hash(text)
    source = getattr(client, "source", "llm")
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            reply = hit["raw_reply"]
            idx = resolve_label(reply, space)
            return MappingResult(raw_reply=reply,
                                 resolved_label=space.labels[idx] if idx is not None else None,
                                 class_index=idx, valid=idx is not None,
                                 source="fixture", note="cache replay")
    try:
        reply = client.complete(text)
    except LLMRequestError as exc:
        return MappingResult(raw_reply="", resolved_label=None, class_index=None,
                             valid=False, source=source, note=str(exc))
    reply = reply.strip()
    idx = resolve_label(reply, space)
    if cache is not None:
        cache.put(sample_id, key, reply, space.labels[idx] if idx is not None else None)
    if idx is None:
        return MappingResult(raw_reply=reply, resolved_label=None, class_index=None,
                             valid=False, source=source, note="reply did not resolve")
    return MappingResult(raw_reply=reply, resolved_label=space.labels[idx],
                         class_index=idx, valid=True, source=source)


def load_audio_predictions(path: str | Path) -> dict[str, AudioTopK]:
    """Parse a JSONL fixture file of per-sample top-K audio predictions."""
    out: dict[str, AudioTopK] = {}
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sample_id = str(obj["sample_id"])
                topk = AudioTopK(entries=[(lbl, p) for lbl, p in obj["topk"]],
                                 sample_id=sample_id)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
            if sample_id in out:
                raise ValueError(f"{path}: line {lineno}: duplicate sample_id {sample_id!r}")
            out[sample_id] = topk
    return out


def save_audio_predictions(preds: dict[str, AudioTopK], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for sample_id, topk in preds.items():
            fh.write(json.dumps({"sample_id": sample_id,
                                 "topk": [[lbl, p] for lbl, p in topk.entries]}) + "\n")


def synth_audio_oracle(ground_truth: int, quality: float,
                       audio_vocab: dict[str, list[str]],
                       rng: np.random.Generator, k: int = 5,
                       sample_id: str = "") -> AudioTopK:
    """Simulated audio tagger with a controllable hit rate.

    With probability ``quality`` the entries come from the true class's
    audio vocabulary, otherwise from a uniformly drawn other class.
    Probabilities are drawn, sorted descending, and normalized to sum 1.
    """
    class_names = list(audio_vocab.keys())
    if not 0 <= ground_truth < len(class_names):
        raise ValueError(f"ground truth {ground_truth} outside vocabulary")
    if any(not labels for labels in audio_vocab.values()):
        missing = [name for name, labels in audio_vocab.items() if not labels]
        raise ValueError(f"vocabulary has no labels for: {missing}")
    if rng.random() < quality:
        source_class = ground_truth
    else:
        others = [c for c in range(len(class_names)) if c != ground_truth]
        source_class = int(others[int(rng.integers(0, len(others)))])
    labels = list(audio_vocab[class_names[source_class]])
    take = min(k, len(labels))
    chosen = [labels[int(i)] for i in rng.permutation(len(labels))[:take]]
    probs = np.sort(rng.uniform(0.05, 1.0, size=take))[::-1]
    probs = probs / probs.sum()
    entries = [(lbl, float(p)) for lbl, p in zip(chosen, probs)]
    return AudioTopK(entries=entries, sample_id=sample_id)


def load_mapping_examples() -> dict:
    """Bundled audio-prediction rows with their expected mapper replies."""
    with resources.files("avtta.data").joinpath("label_mapping_examples.json").open("r") as fh:
        return json.load(fh)
