"""
Prompt templates for the language-model roles and parsers for their reply formats.
"""

import json
import logging
import os
import re
from functools import lru_cache
from string import Template
from typing import List, Optional, Tuple

from .errors import AdapterParseError

logger = logging.getLogger(__name__)

PROMPT_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "prompts")

LANDMARK_RETRIEVAL = "landmark_retrieval"
ENHANCE_DESCRIPTION = "enhance_description"
GOAL_VERIFICATION = "goal_verification"
INSTRUCTION_DECOMPOSITION = "instruction_decomposition"
EQA_WAYPOINT = "eqa_waypoint"
ANSWER_QUESTION = "answer_question"
ANSWER_SCORING = "answer_scoring"

ROLES = [
    LANDMARK_RETRIEVAL,
    ENHANCE_DESCRIPTION,
    GOAL_VERIFICATION,
    INSTRUCTION_DECOMPOSITION,
    EQA_WAYPOINT,
    ANSWER_QUESTION,
    ANSWER_SCORING,
]

GO_AROUND = "We need to go around and check"
UNABLE_TO_FIND = "Nav Loc: Unable to find"

_ROLE_HEADER = re.compile(r"^#\s*role:\s*(\w+)", re.MULTILINE)
_NAV_LOC = re.compile(r"Nav\s*Loc\s*\d*\s*:\s*\[([^\]]*)\]", re.IGNORECASE)
_UNABLE = re.compile(r"Nav\s*Loc\s*\d*\s*:\s*Unable\s+to\s+find", re.IGNORECASE)
_SUCCESS = re.compile(r"success\s*:\s*(yes|no)", re.IGNORECASE)
_NEED_FORWARD = re.compile(r"need\s+forward\s*:\s*(yes|no)", re.IGNORECASE)
_MOVE_TO = re.compile(r"move\s+to\s+(?:the\s+)?\{([^}]*)\}", re.IGNORECASE)
_ENHANCED = re.compile(r"enhancement\s+description\s*:\s*(.+)", re.IGNORECASE | re.DOTALL)
_SCORE = re.compile(r"score\s*:\s*([1-5])\b", re.IGNORECASE)


@lru_cache(maxsize=None)
def load_template(role: str) -> str:
    if role not in ROLES:
        raise KeyError(f"Unknown prompt role: {role}")
    with open(os.path.join(PROMPT_DIR, f"{role}.txt"), "r") as f:
        return f.read()


def render(role: str, **values) -> str:
    return Template(load_template(role)).substitute(**values)


def detect_role(prompt: str) -> Optional[str]:
    """Role named in a rendered prompt's header line."""
    match = _ROLE_HEADER.search(prompt or "")
    if match and match.group(1) in ROLES:
        return match.group(1)
    return None


def format_landmark_memory(landmarks) -> str:
    """Landmark records in the shape the retrieval prompt describes."""
    return json.dumps([
        {
            "label": lm.category,
            "description": lm.description,
            "loc": [round(c, 3) for c in lm.position],
            "confidence": round(lm.confidence, 3),
        }
        for lm in landmarks
    ])


def format_nav_locations(points) -> str:
    if not points:
        return "{" + UNABLE_TO_FIND + "}"
    parts = [
        f"Nav Loc {i}: [{p[0]:.3f}, {p[1]:.3f}, {p[2]:.3f}]" for i, p in enumerate(points, start=1)
    ]
    return "{" + ", ".join(parts) + "}"


def parse_nav_locations(text: str) -> List[Tuple[float, float, float]]:
    """
    Coordinates from a landmark-retrieval reply.

    "Unable to find" yields an empty list; entries that do not hold three
    numbers are skipped with a warning.
    """
    text = text or ""
    points = []
    for match in _NAV_LOC.finditer(text):
        try:
            values = [float(v) for v in match.group(1).split(",")]
        except ValueError:
            logger.warning("Skipping malformed Nav Loc entry: %r", match.group(0))
            continue
        if len(values) != 3:
            logger.warning("Skipping Nav Loc entry without three coordinates: %r", match.group(0))
            continue
        points.append((values[0], values[1], values[2]))
    if points:
        return points
    if _UNABLE.search(text):
        return []
    raise AdapterParseError(f"No Nav Loc entries in reply: {text[:200]!r}")


def parse_verification(text: str) -> Tuple[bool, bool, str]:
    """(success, need_forward, analysis) from a goal-verification reply."""
    text = text or ""
    success = _SUCCESS.search(text)
    if not success:
        raise AdapterParseError(f"Verification reply lacks a 'Success:' line: {text[:200]!r}")
    is_success = success.group(1).lower() == "yes"
    forward = _NEED_FORWARD.search(text)
    need_forward = bool(is_success and forward and forward.group(1).lower() == "yes")
    analysis_lines = [
        line.strip() for line in text.splitlines()
        if line.strip() and not _SUCCESS.search(line) and not _NEED_FORWARD.search(line)
    ]
    return is_success, need_forward, " ".join(analysis_lines)


def parse_waypoints(text: str) -> List[str]:
    waypoints = [w.strip() for w in _MOVE_TO.findall(text or "") if w.strip()]
    if not waypoints:
        raise AdapterParseError(f"No 'Move to the {{...}}' sub-goals in reply: {(text or '')[:200]!r}")
    return waypoints


def parse_enhancement(text: str) -> str:
    match = _ENHANCED.search(text or "")
    if not match or not match.group(1).strip():
        raise AdapterParseError("Reply lacks an 'enhancement description:' section")
    return match.group(1).strip().splitlines()[0].strip()


def parse_eqa_target(text: str) -> Optional[str]:
    """Target description, or None when the reply asks to go around and check."""
    text = (text or "").strip()
    if GO_AROUND.casefold() in text.casefold():
        return None
    if not text:
        raise AdapterParseError("Empty EQA waypoint reply")
    return text.splitlines()[0].strip().strip('"')


def parse_score(text: str) -> int:
    match = _SCORE.search(text or "")
    if match:
        return int(match.group(1))
    bare = re.fullmatch(r"\s*([1-5])\s*", text or "")
    if bare:
        return int(bare.group(1))
    raise AdapterParseError(f"No 1-5 score in reply: {(text or '')[:200]!r}")
