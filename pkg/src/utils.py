"""
Utility functions for the shape optimizer.
"""

from config.settings import RELATIVE_FLOOR

TRUE_WORDS = {'true', 'yes', 'on', '1'}
FALSE_WORDS = {'false', 'no', 'off', '0'}


def relative_difference(a: float, b: float, floor: float = RELATIVE_FLOOR) -> float:
    """
    |a - b| / max(|a|, |b|, floor).

    Args:
        a, b: Values to compare
        floor: Lower bound of the denominator

    Returns:
        Symmetric relative difference
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


def parse_bool(text: str) -> bool:
    """
    Parse a boolean word (true/false, yes/no, on/off, 1/0).

    Raises:
        ValueError: on anything else
    """
    word = text.strip().lower()
    if word in TRUE_WORDS:
        return True
    if word in FALSE_WORDS:
        return False
    raise ValueError(f"not a boolean: '{text}'")
