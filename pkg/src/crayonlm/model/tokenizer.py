"""Closed-vocabulary word-level tokenizer.

Class names are single tokens (two-word names included), coordinates are
two-decimal tokens ``0.00``..``1.00``, and instance tags are ``#0``..``#20``.
"""

from __future__ import annotations

import re

from ..panoptic.vocab import CLASS_NAMES, MAX_INSTANCES

PAD, IMAGE, STOP, UNK_TOK = "<pad>", "<image>", "<stop>", "<unk-tok>"
SPECIALS = (PAD, IMAGE, STOP, UNK_TOK)

TEMPLATE_WORDS = (
    "User", "Assistant", "Provide", "multiple", "object", "names", "with", "their", "numbering",
    "index", "and", "the", "objects'", "bounding", "box", "coordinates", "in", "this", "image",
    "Sure", "it", "is", "None", "of", "detailed", "information", "for", "Is", "there", "any",
    "Which", "specified", "How", "many", "are", "Yes", "No",
)
PUNCT = (",", ".", ":", "?", "(", ")", "[", "]")
COORDS = tuple(f"{i / 100:.2f}" for i in range(101))
TAGS = tuple(f"#{i}" for i in range(MAX_INSTANCES + 1))
DIGITS = tuple(str(i) for i in range(MAX_INSTANCES + 1))

_TOKEN_RE = re.compile(r"<[a-z\-]+>|#\d+|\d\.\d\d|\d+|[A-Za-z][A-Za-z'\-]*|[^\sA-Za-z\d]")
_NO_SPACE_BEFORE = {",", ".", ":", "?", ")", "]", STOP}
_NO_SPACE_AFTER = {"(", "["}


class Tokenizer:
    def __init__(self):
        vocab: list[str] = []
        for group in (SPECIALS, TEMPLATE_WORDS, PUNCT, CLASS_NAMES, TAGS, COORDS, DIGITS):
            for tok in group:
                if tok not in vocab:
                    vocab.append(tok)
        self.vocab = tuple(vocab)
        self.index = {t: i for i, t in enumerate(self.vocab)}
        self._phrases = {tuple(n.split(" ")): n for n in CLASS_NAMES if " " in n}

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def image_id(self) -> int:
        return self.index[IMAGE]

    @property
    def stop_id(self) -> int:
        return self.index[STOP]

    @property
    def unk_id(self) -> int:
        return self.index[UNK_TOK]

    def split(self, text: str) -> list[str]:
        words = _TOKEN_RE.findall(text)
        out: list[str] = []
        i = 0
        while i < len(words):
            pair = tuple(words[i:i + 2])
            if len(pair) == 2 and pair in self._phrases:
                out.append(self._phrases[pair])
                i += 2
            else:
                out.append(words[i])
                i += 1
        return out

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(t, unk) for t in self.split(text)]

    def decode(self, ids) -> str:
        parts: list[str] = []
        prev = None
        for i in ids:
            tok = self.vocab[int(i)]
            if tok == PAD:
                continue
            if prev is not None and tok not in _NO_SPACE_BEFORE and prev not in _NO_SPACE_AFTER:
                parts.append(" ")
            parts.append(tok)
            prev = tok
        return "".join(parts)
