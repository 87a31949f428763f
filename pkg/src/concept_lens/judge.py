"""Recognition evaluation: ask a judge what a synthesised image shows, grade
each answer with a binary rubric, and summarise recognition rates.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from .backend import PLANTED_CONCEPTS
from .concepts import bundled_baseline_words, compute_language_baseline, concept_direction
from .errors import InputError
from .imrep import AggregationConfig, aggregate, compute_image_baseline, cosine
from .stats import normal_ci

log = logging.getLogger(__name__)

__all__ = [
    "QUESTION_WORDINGS",
    "JudgeProtocol",
    "RecognitionRecord",
    "JudgeClient",
    "ScriptedJudge",
    "ToyClassifierJudge",
    "RemoteJudge",
    "TransportError",
    "build_question",
    "rubric_template",
    "build_rubric",
    "parse_verdict",
    "keyword_grade",
    "evaluate_image",
    "recognition_curves",
    "is_recognised",
]

# "guess" is the default wording; "short" drops the "if you had to guess"
# clause.
QUESTION_WORDINGS = {
    "guess": {
        "open": "What is in the image if you had to guess? One word.",
        "hinted": "What {category} is in the image if you had to guess? One word.",
    },
    "short": {
        "open": "What is in the image? One word.",
        "hinted": "What {category} is in the image? One word.",
    },
}


@dataclass(frozen=True)
class JudgeProtocol:
    kind: str = "open"
    category: Optional[str] = None
    samples_per_image: int = 10
    wording: str = "guess"

    def __post_init__(self):
        if self.kind not in ("open", "hinted"):
            raise InputError(f"unknown protocol kind {self.kind!r}")
        if self.samples_per_image < 1:
            raise InputError("samples_per_image must be at least 1")
        if self.wording not in QUESTION_WORDINGS:
            raise InputError(f"unknown wording {self.wording!r}")


def build_question(protocol: JudgeProtocol) -> str:
    template = QUESTION_WORDINGS[protocol.wording][protocol.kind]
    if protocol.kind == "hinted":
        if not protocol.category or not protocol.category.strip():
            raise InputError("hinted protocol needs a category")
        return template.format(category=protocol.category.strip())
    return template


def rubric_template() -> str:
    return (resources.files("concept_lens.resources")
            .joinpath("rubric_template.txt").read_text(encoding="utf-8"))


_PLACEHOLDER = re.compile(r"\{(request|response|concept)\}")


def build_rubric(request: str, response: str, concept: str) -> str:
    """Fill the grading rubric. Substitution is single-pass, so braces inside
    the request or response are left alone."""
    values = {"request": request, "response": response, "concept": concept}
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], rubric_template())


_RESULT = re.compile(r"Result:\s*([01])")


def parse_verdict(text: str) -> Optional[int]:
    """The last ``Result: 0/1`` in a grader reply, or None if absent."""
    found = _RESULT.findall(text or "")
    return int(found[-1]) if found else None


def keyword_grade(response: str, concept: str) -> int:
    """1 iff the case-folded concept string occurs in the case-folded response."""
    return int(concept.casefold() in (response or "").casefold())


@dataclass
class RecognitionRecord:
    image_id: str
    concept: str
    protocol: JudgeProtocol
    question: str
    raw_responses: List[Optional[str]]
    verdicts: List[Optional[int]]
    category: Optional[str] = None
    layer: Optional[int] = None
    errors: List[Optional[str]] = field(default_factory=list)

    @property
    def valid_verdicts(self) -> List[int]:
        return [v for v in self.verdicts if v is not None]

    @property
    def missing(self) -> int:
        return sum(v is None for v in self.verdicts)

    @property
    def rate(self) -> Optional[float]:
        """Mean verdict over answered samples; None when every sample is missing."""
        valid = self.valid_verdicts
        return sum(valid) / len(valid) if valid else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rate"] = self.rate
        d["missing"] = self.missing
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RecognitionRecord":
        d = dict(d)
        d.pop("rate", None)
        d.pop("missing", None)
        d["protocol"] = JudgeProtocol(**d["protocol"])
        return cls(**d)


class TransportError(RuntimeError):
    """A judge request failed in transit and may be retried."""


class JudgeClient(ABC):
    """Describer plus grader. ``max_concurrency`` bounds parallel requests."""

    max_concurrency: int = 1
    model_ids: Dict[str, str] = {}

    @abstractmethod
    def describe_image(self, image: np.ndarray, question: str, seed: int = 0) -> str: ...

    def grade(self, request: str, response: str, concept: str) -> int:
        return keyword_grade(response, concept)


class ScriptedJudge(JudgeClient):
    """Offline client replaying fabricated answers, graded by keyword match.

    ``responses`` is either a list cycled through per call, or a callable
    ``(image, question, seed) -> str``.
    """

    model_ids = {"describer": "scripted", "grader": "keyword"}

    def __init__(self, responses):
        self._responses = responses
        self._i = 0
        self._lock = threading.Lock()

    def describe_image(self, image, question, seed=0):
        if callable(self._responses):
            return self._responses(image, question, seed)
        with self._lock:
            r = self._responses[self._i % len(self._responses)]
            self._i += 1
        if isinstance(r, Exception):
            raise r
        return r


class ToyClassifierJudge(JudgeClient):
    """Names the planted toy concept an image most resembles.

    Each candidate is scored by the attention-aggregated cosine with its own
    concept direction, averaged over every layer of the toy backend. An
    answer is sampled from ``softmax(score / temperature)``; temperature 0
    answers the argmax.
    """

    model_ids = {"describer": "toy-classifier", "grader": "keyword"}

    def __init__(self, backend, candidates=None, temperature: float = 0.05,
                 aggregation=None, baseline_words=None):
        self.backend = backend
        self.candidates = tuple(candidates or PLANTED_CONCEPTS)
        self.temperature = temperature
        self.aggregation = aggregation or AggregationConfig(temperature=0.5, prior_sigma=8.0)
        words = baseline_words or bundled_baseline_words()
        self._layers = list(range(backend.describe().layer_count))
        self._img_base = {l: compute_image_baseline(backend, l) for l in self._layers}
        self._dirs = {}
        for l in self._layers:
            base = compute_language_baseline(backend, words, l)
            self._dirs[l] = {c: concept_direction(backend, c, l, base) for c in self.candidates}

    def scores(self, image) -> Dict[str, float]:
        x = torch.as_tensor(np.asarray(image), dtype=self.backend.dtype).clamp(0.0, 1.0)
        out = {c: 0.0 for c in self.candidates}
        with torch.no_grad():
            for l in self._layers:
                p = self.backend.image_patch_activations(x, l)
                for c in self.candidates:
                    target = self._dirs[l][c]
                    rep = aggregate(p, self._img_base[l], target, self.aggregation)
                    out[c] += float(cosine(rep.vector, target.direction)) / len(self._layers)
        return out

    def describe_image(self, image, question, seed=0):
        scores = self.scores(image)
        names = list(scores)
        values = np.array([scores[n] for n in names])
        if self.temperature <= 0:
            return names[int(values.argmax())]
        logits = (values - values.max()) / self.temperature
        probs = np.exp(logits) / np.exp(logits).sum()
        return names[int(np.random.default_rng(seed).choice(len(names), p=probs))]


class RemoteJudge(JudgeClient):
    """Chat-completions style HTTPS judge.

    The describer and grader may be different models. The bearer token is
    read from the environment variable named by ``token_env``. Every request
    and response is appended to ``log_path`` as JSON lines.
    """

    def __init__(self, base_url: str, describer_model: str, grader_model: str,
                 token_env: str = "CONCEPT_LENS_JUDGE_TOKEN", temperature: Optional[float] = None,
                 timeout: float = 60.0, max_concurrency: int = 4, min_interval: float = 0.0,
                 log_path=None, transport=None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.describer_model = describer_model
        self.grader_model = grader_model
        self.temperature = temperature
        self.max_concurrency = max_concurrency
        self.min_interval = min_interval
        self.model_ids = {"describer": describer_model, "grader": grader_model}
        self.log_path = Path(log_path) if log_path else None
        token = os.environ.get(token_env)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        # ``transport`` lets tests substitute an in-process endpoint
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self._lock = threading.Lock()
        self._last = 0.0

    def _throttle(self):
        if self.min_interval <= 0:
            return
        with self._lock:
            wait = self._last + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()

    def _chat(self, model: str, content) -> str:
        import httpx

        payload = {"model": model, "messages": [{"role": "user", "content": content}]}
        if self.temperature is not None:
            payload["temperature"] = self.temperature
        self._throttle()
        try:
            resp = self._http.post(f"{self.base_url}/chat/completions", json=payload)
            resp.raise_for_status()
            text = resp.json()["choices"][0]["message"]["content"] or ""
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise TransportError(str(exc)) from exc
        if self.log_path:
            entry = {"model": model, "request": _loggable(content), "response": text}
            with self._lock, open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
        return text

    def describe_image(self, image, question, seed=0):
        url = "data:image/png;base64," + _png_base64(image)
        content = [
            {"type": "text", "text": question},
            {"type": "image_url", "image_url": {"url": url}},
        ]
        return self._chat(self.describer_model, content)

    def grade(self, request, response, concept):
        verdict = parse_verdict(self._chat(self.grader_model, build_rubric(request, response, concept)))
        if verdict is None:
            raise TransportError("grader reply has no 'Result: 0/1' line")
        return verdict


def _loggable(content):
    if isinstance(content, list):
        return [c if c.get("type") == "text" else {"type": c["type"], "image_url": "<png>"}
                for c in content]
    return content


def _png_base64(image) -> str:
    import base64
    import io

    from PIL import Image

    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _sample_seed(seed: int, image_id: str, kind: str, index: int) -> int:
    h = hashlib.sha256(f"{seed}:{image_id}:{kind}:{index}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _with_retries(fn, retries: int, backoff: float):
    for attempt in range(retries + 1):
        try:
            return fn()
        except TransportError:
            if attempt == retries:
                raise
            time.sleep(backoff * 2**attempt)


def evaluate_image(image, concept: str, category: Optional[str],
                   protocols: Sequence[JudgeProtocol], client: JudgeClient, seed: int = 0,
                   image_id: Optional[str] = None, layer: Optional[int] = None,
                   retries: int = 2, backoff: float = 0.5) -> List[RecognitionRecord]:
    """Sample and grade answers for every protocol.

    A hinted protocol without its own category uses ``category``. A sample
    whose request keeps failing after ``retries`` is stored as missing and
    left out of the rate.
    """
    image_id = image_id or concept
    records = []
    for proto in protocols:
        if proto.kind == "hinted" and not proto.category:
            proto = JudgeProtocol("hinted", category, proto.samples_per_image, proto.wording)
        question = build_question(proto)

        def one(i, proto=proto, question=question):
            s = _sample_seed(seed, image_id, proto.kind, i)
            try:
                response = _with_retries(lambda: client.describe_image(image, question, s),
                                         retries, backoff)
                verdict = _with_retries(lambda: client.grade(question, response, concept),
                                        retries, backoff)
                return response, int(verdict), None
            except TransportError as exc:
                log.warning("sample %d of %s/%s missing: %s", i, image_id, proto.kind, exc)
                return None, None, str(exc)

        n = proto.samples_per_image
        workers = max(1, min(client.max_concurrency, n))
        if workers == 1:
            results = [one(i) for i in range(n)]
        else:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(one, range(n)))
        records.append(RecognitionRecord(
            image_id=image_id,
            concept=concept,
            protocol=proto,
            question=question,
            raw_responses=[r[0] for r in results],
            verdicts=[r[1] for r in results],
            category=category,
            layer=layer,
            errors=[r[2] for r in results],
        ))
    return records


def is_recognised(record: RecognitionRecord, threshold: float = 0.5) -> Optional[bool]:
    rate = record.rate
    return None if rate is None else rate >= threshold


def _order(v):
    if v is None:
        return (2, 0, "")
    if isinstance(v, (int, float)):
        return (0, v, "")
    return (1, 0, str(v))


def recognition_curves(records: Iterable[RecognitionRecord],
                       grouping: Sequence[str] = ("protocol", "category", "layer"),
                       threshold: float = 0.5) -> List[dict]:
    """Proportion of recognised images per group, with a 95% Wald interval.

    ``grouping`` names record attributes; ``"protocol"`` groups by protocol
    kind. Groups whose records all lack a rate are dropped with a warning.
    """
    records = list(records)
    if not records:
        raise InputError("no records to summarise")

    def key(rec):
        return tuple(rec.protocol.kind if g == "protocol" else getattr(rec, g) for g in grouping)

    groups: Dict[tuple, list] = defaultdict(list)
    for rec in records:
        groups[key(rec)].append(rec)

    rows = []
    for k in sorted(groups, key=lambda t: tuple(_order(v) for v in t)):
        outcomes = [is_recognised(r, threshold) for r in groups[k]]
        outcomes = [o for o in outcomes if o is not None]
        if not outcomes:
            log.warning("group %s has no graded images; omitted", k)
            continue
        mean, lo, hi = normal_ci([float(o) for o in outcomes], ddof=0, bounds=(0.0, 1.0))
        row = dict(zip(grouping, k))
        row.update(n=len(outcomes), recognised=int(sum(outcomes)), proportion=mean,
                   ci_low=lo, ci_high=hi)
        rows.append(row)
    return rows
