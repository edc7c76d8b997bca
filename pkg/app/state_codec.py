"""STATE line grammar: formatting, parsing, repair prompting and simplex normalization.

Grammar (last occurrence in a reply wins):

    STATE: pref=[<f>,<f>,<f>]; conf=<int>; tags=["<t>","<t>"]
"""
import logging
import re
from typing import List, Optional, Sequence, Tuple

from app.exceptions import SimplexViolation
from app.models import FailureKind, ParseOutcome, PreferenceState

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 0.02

STATE_TEMPLATE = 'STATE: pref=[pA,pB,pC]; conf=NN; tags=["tag1","tag2"]'

REPAIR_PROMPT = (
    "Your previous response did not contain a valid STATE line.\n"
    "Please respond with ONLY the corrected STATE line in the format:\n"
    f"{STATE_TEMPLATE}"
)

# Captures loosely so a malformed number can be told apart from a missing line.
_STATE_RE = re.compile(
    r"STATE:[ \t]*pref[ \t]*=[ \t]*\[([^\]\n]*)\][ \t]*;[ \t]*"
    r"conf[ \t]*=[ \t]*([^;\n]*?)[ \t]*;[ \t]*"
    r"tags[ \t]*=[ \t]*\[([^\]\n]*)\]"
)
_DECIMAL_RE = re.compile(r"^[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?$")
_STRICT_DECIMAL_RE = re.compile(r"^\d+\.\d+$")
_INT_RE = re.compile(r"^\d+$")
_SNAKE_RE = re.compile(r"^[a-z][a-z0-9]*(?:_[a-z0-9]+)*$")


def normalize_preferences(
    raw: Sequence[float], tol: float = DEFAULT_TOLERANCE
) -> Tuple[float, float, float]:
    """Project a near-simplex triple onto the simplex by dividing by its sum.

    Args:
        raw: Three preference values as emitted by the agent
        tol: Accepted absolute deviation of the sum from 1

    Returns:
        Triple summing to 1

    Raises:
        SimplexViolation: negative component or sum outside 1 +/- tol
    """
    if len(raw) != 3:
        raise SimplexViolation(f"expected 3 preferences, got {len(raw)}")
    if any(p < 0 for p in raw):
        raise SimplexViolation(f"negative preference component: {list(raw)}")
    total = sum(raw)
    if total <= 0:
        raise SimplexViolation(f"preferences sum to {total}, cannot normalize")
    if abs(total - 1.0) > tol:
        raise SimplexViolation(f"preferences sum to {total:.6f}, outside 1 +/- {tol}")
    return (raw[0] / total, raw[1] / total, raw[2] / total)


def format_state_line(state: PreferenceState) -> str:
    """Canonical single-line rendering with six decimal places."""
    a, b, c = state.pref
    tags = ",".join(f'"{tag}"' for tag in state.tags)
    return f"STATE: pref=[{a:.6f},{b:.6f},{c:.6f}]; conf={state.conf}; tags=[{tags}]"


def repair_prompt() -> str:
    """The single repair instruction sent after a failed parse."""
    return REPAIR_PROMPT


def strip_state_lines(text: str) -> str:
    """Argument prose with every STATE line removed."""
    kept = [line for line in text.splitlines() if not _STATE_RE.search(line)]
    return "\n".join(kept).strip()


def _failure(kind: FailureKind, detail: str) -> ParseOutcome:
    return ParseOutcome(failure_kind=kind, detail=detail)


def _parse_tags(raw: str, strict: bool) -> Optional[List[str]]:
    items = [item.strip() for item in raw.split(",")] if raw.strip() else []
    tags = []
    for item in items:
        if strict and not (len(item) >= 2 and item[0] == item[-1] == '"'):
            return None
        tag = item.strip("\"'").strip()
        if not tag:
            return None
        if strict and not _SNAKE_RE.match(tag):
            return None
        tags.append(tag)
    return tags if len(tags) == 2 else None


def parse_state_line(
    text: str, tol: float = DEFAULT_TOLERANCE, strict: bool = False
) -> ParseOutcome:
    """Extract the last STATE line from an agent reply.

    Args:
        text: Raw reply, possibly with argument prose around the STATE line
        tol: Renormalization tolerance passed to normalize_preferences
        strict: Require decimal-formatted preferences and snake_case tags

    Returns:
        ParseOutcome; never raises
    """
    matches = list(_STATE_RE.finditer(text or ""))
    if not matches:
        return _failure(FailureKind.NO_STATE_LINE, "no STATE line found")
    pref_raw, conf_raw, tags_raw = matches[-1].groups()

    pieces = [piece.strip() for piece in pref_raw.split(",")]
    number_re = _STRICT_DECIMAL_RE if strict else _DECIMAL_RE
    if len(pieces) != 3 or not all(number_re.match(piece) for piece in pieces):
        return _failure(FailureKind.MALFORMED_NUMBERS, f"unparsable preferences: [{pref_raw}]")
    if not _INT_RE.match(conf_raw.strip()):
        return _failure(FailureKind.MALFORMED_NUMBERS, f"conf is not an integer: {conf_raw!r}")
    conf = int(conf_raw.strip())
    if conf > 100:
        return _failure(FailureKind.MALFORMED_NUMBERS, f"conf out of range: {conf}")

    try:
        pref = normalize_preferences([float(piece) for piece in pieces], tol=tol)
    except SimplexViolation as e:
        return _failure(FailureKind.SIMPLEX_VIOLATION, str(e))

    tags = _parse_tags(tags_raw, strict)
    if tags is None:
        return _failure(FailureKind.TAG_VIOLATION, f"tags must be exactly two: [{tags_raw}]")

    try:
        state = PreferenceState(pref=pref, conf=conf, tags=tags)
    except ValueError as e:
        return _failure(FailureKind.TAG_VIOLATION, str(e))
    return ParseOutcome(state=state)
