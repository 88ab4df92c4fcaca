"""Prompt rendering, dialogue parsing, and generation batch orchestration.

The generator model is asked to emit dialogues as ``User: ...,
Assistant: ...`` lines. Turn markers embedded inside content are escaped
on the way out (``User:`` becomes ``User\\:``) and unescaped on the way
back in, so a format/parse cycle is byte-exact for any content.
"""

from __future__ import annotations

import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import jsonl
from .api import ChatResult, Endpoint, ServiceClient
from .corpus import ImageCaptionPair
from .errors import AuthError, DataError, ParseError, ServiceError
from .grouping import ImageGroup
from .templates import PromptTemplate

logger = logging.getLogger(__name__)

ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"

MIN_TURNS = 2
MAX_TURNS = 24

IMAGE_PLACEHOLDER = "<image>"

DEFAULT_TEMPERATURE = 0.7
DEFAULT_TOP_P = 0.9

USER_TRIGGER = (
    "Generate the conversation for the provided images and captions now, "
    "following the required format exactly."
)

_MARKER_RE = re.compile(r"\b(User|Assistant):")
_ROLE_BY_MARKER = {"User": ROLE_USER, "Assistant": ROLE_ASSISTANT}


@dataclass(frozen=True)
class Turn:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in (ROLE_USER, ROLE_ASSISTANT):
            raise DataError(f"unknown turn role {self.role!r}")
        if not self.content.strip():
            raise DataError("turn content is empty")


@dataclass(frozen=True)
class Conversation:
    id: str
    group_id: str
    image_refs: tuple[str, ...]
    turns: tuple[Turn, ...]
    template: str
    model: str
    sampling: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        validate_turns(self.turns)
        if not self.image_refs:
            raise DataError(f"conversation {self.id!r}: no image references")


def validate_turns(
    turns: Sequence[Turn], min_turns: int = MIN_TURNS, max_turns: int = MAX_TURNS
) -> None:
    if not min_turns <= len(turns) <= max_turns:
        raise DataError(
            f"turn count {len(turns)} outside [{min_turns}, {max_turns}]"
        )
    for i, turn in enumerate(turns):
        expected = ROLE_USER if i % 2 == 0 else ROLE_ASSISTANT
        if turn.role != expected:
            raise DataError(f"turn {i} has role {turn.role!r}, expected {expected!r}")
    if len(turns) % 2 != 0:
        raise DataError("dialogue must end with an assistant turn")


# ---------------------------------------------------------------------------
# Marker escaping and dialogue formatting / parsing


def escape_markers(text: str) -> str:
    text = text.replace("\\", "\\\\")
    text = text.replace("User:", "User\\:")
    return text.replace("Assistant:", "Assistant\\:")


def unescape_markers(text: str) -> str:
    out: list[str] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text) and text[i + 1] in ("\\", ":"):
            out.append(text[i + 1])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def format_dialogue(turns: Sequence[Turn]) -> str:
    """Render turns in the template's output format (the parser's inverse)."""
    validate_turns(turns, min_turns=2, max_turns=10**9)
    lines = []
    for i in range(0, len(turns), 2):
        q = escape_markers(turns[i].content)
        a = escape_markers(turns[i + 1].content)
        lines.append(f"User: {q}, Assistant: {a}")
    return "\n".join(lines)


def _clean_segment(segment: str, next_role: str | None) -> str:
    # the output format separates a question from its answer with ", " and
    # exchanges with a newline, so a separator comma only ever precedes an
    # Assistant marker
    content = segment.strip()
    if next_role == ROLE_ASSISTANT and content.endswith(","):
        content = content[:-1].rstrip()
    return unescape_markers(content)


def parse_dialogue(raw: str, strict: bool = False) -> list[Turn]:
    """Split a completion into alternating turns.

    Tolerates whitespace and the comma-versus-newline separator variance
    around the ``User:`` / ``Assistant:`` markers; anything before the
    first ``User:`` marker is discarded. In lenient mode a malformed tail
    (dangling question, empty content, broken alternation) is dropped and
    the valid prefix kept; in strict mode it raises.
    """
    if not raw or not raw.strip():
        raise ParseError("empty completion")
    matches = list(_MARKER_RE.finditer(raw))
    start_idx = next(
        (i for i, m in enumerate(matches) if m.group(1) == "User"), None
    )
    if start_idx is None:
        raise ParseError("no User: marker found")
    matches = matches[start_idx:]

    turns: list[Turn] = []
    pending: Turn | None = None

    def fail(message: str) -> None:
        raise ParseError(message)

    for i, match in enumerate(matches):
        role = _ROLE_BY_MARKER[match.group(1)]
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        next_role = (
            _ROLE_BY_MARKER[matches[i + 1].group(1)] if i + 1 < len(matches) else None
        )
        content = _clean_segment(raw[match.end() : end], next_role)
        expected = ROLE_USER if pending is None else ROLE_ASSISTANT
        if role != expected:
            if strict:
                fail(f"expected a {expected} turn at marker {i}, found {role}")
            logger.warning("dropping malformed dialogue tail at marker %d", i)
            pending = None
            break
        if not content:
            if strict:
                fail(f"empty {role} turn at marker {i}")
            logger.warning("dropping dialogue tail with empty %s turn", role)
            pending = None
            break
        turn = Turn(role=role, content=content)
        if pending is None:
            pending = turn
        else:
            turns.extend((pending, turn))
            pending = None

    if pending is not None:
        if strict:
            fail("dangling user turn with no assistant reply")
        logger.warning("dropping dangling user turn")
    if not turns:
        raise ParseError("no complete user/assistant exchange found")
    return turns


# ---------------------------------------------------------------------------
# Prompt rendering and sample assembly


def render_prompt(template: PromptTemplate, captions: Sequence[str]) -> str:
    """Template body followed by a numbered caption block.

    Captions are marker-escaped so stray ``User:`` text inside a caption
    cannot masquerade as a turn boundary if the generator echoes it.
    """
    if not 2 <= len(captions) <= 8:
        raise DataError(f"expected 2 to 8 captions, got {len(captions)}")
    for i, caption in enumerate(captions):
        if not caption.strip():
            raise DataError(f"caption {i + 1} is empty")
    block = "\n".join(
        f"Image {i + 1}: {escape_markers(caption)}" for i, caption in enumerate(captions)
    )
    return f"{template.body}\n\n{block}"


def chat_complete(
    endpoint: Endpoint,
    system: str,
    user: str,
    *,
    temperature: float = DEFAULT_TEMPERATURE,
    top_p: float = DEFAULT_TOP_P,
    max_tokens: int | None = None,
    seed: int | None = None,
) -> ChatResult:
    """One-shot chat completion against an OpenAI-compatible endpoint."""
    client = ServiceClient(endpoint)
    messages = [
        {"role": "system", "content": system},
        {"role": "user", "content": user},
    ]
    return client.chat(
        messages, temperature=temperature, top_p=top_p, max_tokens=max_tokens, seed=seed
    )


def assemble_sample(
    group: ImageGroup,
    turns: Sequence[Turn],
    image_refs: Sequence[str],
    *,
    template: str = "",
    model: str = "",
    sampling: Mapping[str, float] | None = None,
    min_turns: int = MIN_TURNS,
    max_turns: int = MAX_TURNS,
) -> Conversation:
    """Bind parsed turns to their group, front-loading one image
    placeholder per member into the first user turn."""
    if len(image_refs) != len(group.member_ids):
        raise DataError(
            f"group {group.group_id!r}: {len(image_refs)} image refs for "
            f"{len(group.member_ids)} members"
        )
    try:
        validate_turns(turns, min_turns=min_turns, max_turns=max_turns)
    except DataError as exc:
        raise DataError(f"group {group.group_id!r}: {exc}") from None
    placeholders = "\n".join(IMAGE_PLACEHOLDER for _ in group.member_ids)
    first = Turn(role=ROLE_USER, content=f"{placeholders}\n{turns[0].content}")
    return Conversation(
        id=f"conv-{group.group_id}",
        group_id=group.group_id,
        image_refs=tuple(image_refs),
        turns=(first, *turns[1:]),
        template=template,
        model=model,
        sampling=dict(sampling or {}),
    )


# ---------------------------------------------------------------------------
# Batch orchestration


@dataclass
class GenerationFailure:
    group_id: str
    stage: str  # "api" | "parse" | "assemble"
    reason: str


@dataclass
class GenerationReport:
    attempted: int = 0
    skipped: int = 0
    succeeded: int = 0
    failures: list[GenerationFailure] = field(default_factory=list)


def conversation_to_record(conv: Conversation) -> dict[str, Any]:
    return {
        "id": conv.id,
        "group_id": conv.group_id,
        "images": list(conv.image_refs),
        "template": conv.template,
        "model": conv.model,
        "sampling": dict(conv.sampling),
        "conversations": [{"role": t.role, "content": t.content} for t in conv.turns],
    }


def _completed_group_ids(path: Path) -> set[str]:
    done: set[str] = set()
    if not path.is_file():
        return done
    for _, rec in jsonl.iter_records(path):
        gid = rec.get("group_id")
        if isinstance(gid, str):
            done.add(gid)
    return done


def run_generation_batch(
    groups: Sequence[ImageGroup],
    pairs_by_id: Mapping[str, ImageCaptionPair],
    template: PromptTemplate,
    endpoint: Endpoint,
    *,
    concurrency: int = 4,
    temperature: float = DEFAULT_TEMPERATURE,
    top_p: float = DEFAULT_TOP_P,
    max_tokens: int | None = None,
    seed: int | None = None,
    strict_parse: bool = False,
    min_turns: int = MIN_TURNS,
    max_turns: int = MAX_TURNS,
    out_path: str | Path | None = None,
    resume: bool = True,
) -> tuple[list[Conversation], GenerationReport]:
    """Generate one conversation per group against a chat endpoint.

    API and parse failures land in the report instead of aborting the
    batch. ``seed`` is forwarded to the endpoint for providers that support
    seeded decoding. With ``out_path`` each success is appended
    immediately, and a re-run skips groups already present in the file.
    """
    if not groups:
        raise DataError("no groups to generate from")
    client = ServiceClient(endpoint)
    report = GenerationReport()
    sampling = {"temperature": temperature, "top_p": top_p}

    done: set[str] = set()
    if out_path is not None and resume:
        done = _completed_group_ids(Path(out_path))
    todo = [g for g in groups if g.group_id not in done]
    report.skipped = len(groups) - len(todo)
    report.attempted = len(todo)
    if report.skipped:
        logger.info("resuming: %d groups already complete", report.skipped)

    write_lock = threading.Lock()

    def one(group: ImageGroup) -> Conversation | GenerationFailure:
        try:
            missing = [i for i in group.member_ids if i not in pairs_by_id]
            if missing:
                return GenerationFailure(
                    group.group_id, "assemble", f"ids missing from corpus: {missing[:5]}"
                )
            members = [pairs_by_id[i] for i in group.member_ids]
            system = render_prompt(template, [p.caption for p in members])
            result = client.chat(
                [
                    {"role": "system", "content": system},
                    {"role": "user", "content": USER_TRIGGER},
                ],
                temperature=temperature,
                top_p=top_p,
                max_tokens=max_tokens,
                seed=seed,
            )
            turns = parse_dialogue(result.text, strict=strict_parse)
            return assemble_sample(
                group,
                turns,
                [p.image_ref for p in members],
                template=template.name,
                model=endpoint.model,
                sampling=sampling,
                min_turns=min_turns,
                max_turns=max_turns,
            )
        except ParseError as exc:
            return GenerationFailure(group.group_id, "parse", str(exc))
        except AuthError:
            raise
        except ServiceError as exc:
            return GenerationFailure(group.group_id, "api", str(exc))
        except DataError as exc:
            return GenerationFailure(group.group_id, "assemble", str(exc))

    conversations: list[Conversation] = []
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        for outcome in pool.map(one, todo):
            if isinstance(outcome, GenerationFailure):
                report.failures.append(outcome)
                continue
            conversations.append(outcome)
            if out_path is not None:
                with write_lock:
                    jsonl.append_record(out_path, conversation_to_record(outcome))
    report.succeeded = len(conversations)
    return conversations, report
