"""Bundled word list used by the toy-corpus generator.

200 unique uppercase words. The tail of the list (see
``reserved_words``) can be held out of "real" transcripts so that
out-of-vocabulary analyses have known planted words to find.
"""

WORDS = (
    "THE", "AND", "OF", "TO", "IN", "THAT", "WAS", "HIS", "HE", "IT",
    "WITH", "IS", "FOR", "AS", "HAD", "YOU", "NOT", "BE", "HER", "ON",
    "AT", "BY", "WHICH", "HAVE", "OR", "FROM", "THIS", "HIM", "BUT", "ALL",
    "SHE", "THEY", "WERE", "MY", "ARE", "ME", "ONE", "THEIR", "SO", "AN",
    "SAID", "THEM", "WE", "WHO", "WOULD", "BEEN", "WILL", "NO", "WHEN", "THERE",
    "IF", "MORE", "OUT", "UP", "INTO", "DO", "ANY", "YOUR", "WHAT", "HAS",
    "MAN", "COULD", "OTHER", "THAN", "OUR", "SOME", "VERY", "TIME", "UPON", "ABOUT",
    "MAY", "ITS", "ONLY", "NOW", "LIKE", "LITTLE", "THEN", "CAN", "MADE", "SHOULD",
    "DID", "US", "SUCH", "GREAT", "BEFORE", "MUST", "TWO", "THESE", "SEE", "KNOW",
    "OVER", "MUCH", "DOWN", "AFTER", "FIRST", "GOOD", "MEN", "OWN", "NEVER", "MOST",
    "OLD", "SHALL", "DAY", "WHERE", "THOSE", "CAME", "COME", "HIMSELF", "WAY", "WORK",
    "LIFE", "WITHOUT", "GO", "MAKE", "WELL", "THROUGH", "BEING", "LONG", "SAY", "MIGHT",
    "HOUSE", "AGAIN", "THINK", "EVERY", "UNDER", "FOUND", "STILL", "WHILE", "LAST", "TAKE",
    "NIGHT", "EYES", "BOTH", "NOTHING", "YOUNG", "PEOPLE", "ANOTHER", "PLACE", "HAND", "YET",
    "THOUGH", "WORLD", "AWAY", "HEAD", "FACE", "EVEN", "RIGHT", "LEFT", "ROOM", "WATER",
    "TOLD", "ASKED", "HEARD", "SMALL", "WHITE", "THREE", "LIGHT", "DOOR", "VOICE", "ALWAYS",
    "THOUGHT", "AGAINST", "BETWEEN", "MOTHER", "FATHER", "WOMAN", "MORNING", "AMONG", "HEART", "BLACK",
    "SIDE", "ALMOST", "ALONG", "TURNED", "LOOKED", "HOWEVER", "BETTER", "ENOUGH", "SOMETHING", "WHOLE",
    "GRANITE", "LANTERN", "ORCHARD", "THIMBLE", "WALNUT", "HARBOUR", "VELVET", "MAGPIE", "QUARRY", "SADDLE",
    "EMBER", "FALCON", "GLACIER", "HEARTH", "IVORY", "JUNIPER", "KESTREL", "LICHEN", "MARBLE", "NUTMEG",
)


def common_words(n_reserved: int) -> tuple[str, ...]:
    """Words usable in ordinary transcripts (reserved tail excluded)."""
    if n_reserved < 0 or n_reserved > len(WORDS) - 20:
        raise ValueError(f"n_reserved must be in [0, {len(WORDS) - 20}], got {n_reserved}")
    return WORDS[: len(WORDS) - n_reserved] if n_reserved else WORDS


def reserved_words(n_reserved: int) -> tuple[str, ...]:
    """The held-out tail of the word list."""
    if n_reserved < 0 or n_reserved > len(WORDS) - 20:
        raise ValueError(f"n_reserved must be in [0, {len(WORDS) - 20}], got {n_reserved}")
    return WORDS[len(WORDS) - n_reserved :] if n_reserved else ()
