"""Conditioning strings: natural-language "textual" prompts and "abstract" prompts
whose concept words are replaced by run-stable random tokens."""
import hashlib
import json
import logging
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from errors import ConfigurationError, LexiconError

logger = logging.getLogger(__name__)

VIEWS = ('2CH', '4CH')
PHASES = ('ED', 'ES')
STYLES = ('textual', 'abstract')

TEXTUAL_TEMPLATE = "ultrasound image of the heart in {chambers}-chamber view"
PHASE_CLAUSE = " in the {phase} phase"
ABSTRACT_TEMPLATE = "{modality} displays the {organ} in a {view} view during the {phase} phase"

# slot -> concrete concept values that get a token
SLOT_VALUES: Dict[str, tuple] = {
    'modality': ('ultrasound image',),
    'organ': ('heart',),
    'view': VIEWS,
    'phase': PHASES,
}

CONCEALED_WORDS = frozenset({
    'ultrasound', 'heart', '2ch', '4ch', '2-chamber', '4-chamber',
    'two-chamber', 'four-chamber', 'ed', 'es', 'diastole', 'systole',
})

TOKEN_ALPHABET = string.ascii_lowercase + string.digits
MAX_TOKEN_RETRIES = 100
_WORD = re.compile(r'[a-z0-9]+(?:-[a-z0-9]+)*')


@dataclass(frozen=True)
class ViewPhase:
    view: str
    phase: str

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ConfigurationError(f"Unknown view '{self.view}', expected one of {VIEWS}")
        if self.phase not in PHASES:
            raise ConfigurationError(f"Unknown phase '{self.phase}', expected one of {PHASES}")

    @classmethod
    def all(cls) -> List['ViewPhase']:
        return [cls(v, p) for v in VIEWS for p in PHASES]

    @property
    def chambers(self) -> str:
        return self.view[0]

    def __str__(self):
        return f"{self.view}-{self.phase}"


@dataclass(frozen=True)
class Prompt:
    text: str
    style: str
    view_phase: ViewPhase


@dataclass(frozen=True)
class ConceptLexicon:
    """slot -> value -> token table, fixed for a whole training run"""
    seed: int
    token_length: int
    table: Dict[str, Dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        tokens = [tok for values in self.table.values() for tok in values.values()]
        if len(tokens) != len(set(tokens)):
            raise LexiconError("Lexicon is not injective: two concepts share a token")

    def token(self, slot: str, value: str) -> str:
        try:
            return self.table[slot][value]
        except KeyError:
            raise LexiconError(f"Lexicon has no token for slot '{slot}' (value '{value}')") from None

    def lookup(self, token: str) -> Optional[tuple]:
        """Reverse lookup: token -> (slot, value)"""
        for slot, values in self.table.items():
            for value, tok in values.items():
                if tok == token:
                    return slot, value
        return None

    def to_dict(self) -> Dict:
        return {'seed': self.seed, 'token_length': self.token_length, 'table': self.table}

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode('utf-8')
        return hashlib.sha256(payload).hexdigest()

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ConceptLexicon':
        with open(path) as fh:
            data = json.load(fh)
        return cls(seed=int(data['seed']), token_length=int(data['token_length']),
                   table={slot: dict(values) for slot, values in data['table'].items()})


def _random_token(rng: np.random.Generator, length: int) -> str:
    chars = rng.choice(len(TOKEN_ALPHABET), size=length)
    return ''.join(TOKEN_ALPHABET[i] for i in chars)


def _is_valid_token(token: str) -> bool:
    return any(c.isalpha() for c in token) and any(c.isdigit() for c in token)


def build_lexicon(seed: int, token_length: int = 8) -> ConceptLexicon:
    """Draw one token per concept value, deterministic in ``seed``"""
    if token_length < 4:
        raise ConfigurationError(f"token_length must be >= 4, got {token_length}")
    rng = np.random.default_rng(seed)
    used = set()
    table: Dict[str, Dict[str, str]] = {}
    for slot, values in SLOT_VALUES.items():
        table[slot] = {}
        for value in values:
            for _ in range(MAX_TOKEN_RETRIES):
                token = _random_token(rng, token_length)
                if _is_valid_token(token) and token not in used:
                    break
            else:
                raise LexiconError(f"Could not draw a unique token for slot '{slot}' "
                                   f"after {MAX_TOKEN_RETRIES} tries")
            used.add(token)
            table[slot][value] = token
    lexicon = ConceptLexicon(seed=int(seed), token_length=int(token_length), table=table)
    logger.debug(f"Built lexicon seed={seed} hash={lexicon.content_hash()[:12]}")
    return lexicon


def render_textual(vp: ViewPhase, include_phase: bool = True) -> Prompt:
    text = TEXTUAL_TEMPLATE.format(chambers=vp.chambers)
    if include_phase:
        text += PHASE_CLAUSE.format(phase=vp.phase)
    return Prompt(text=text, style='textual', view_phase=vp)


def render_abstract(vp: ViewPhase, lex: ConceptLexicon) -> Prompt:
    text = ABSTRACT_TEMPLATE.format(
        modality=lex.token('modality', 'ultrasound image'),
        organ=lex.token('organ', 'heart'),
        view=lex.token('view', vp.view),
        phase=lex.token('phase', vp.phase),
    )
    return Prompt(text=text, style='abstract', view_phase=vp)


def render_prompt(vp: ViewPhase, style: str, lexicon: Optional[ConceptLexicon] = None,
                  include_phase: bool = True) -> Prompt:
    if style == 'textual':
        return render_textual(vp, include_phase=include_phase)
    if style == 'abstract':
        if lexicon is None:
            raise LexiconError("abstract prompts need a lexicon")
        return render_abstract(vp, lexicon)
    raise ConfigurationError(f"Unknown prompt style '{style}', expected one of {STYLES}")


def recover_view_phase(text: str, lex: ConceptLexicon) -> ViewPhase:
    """Invert render_abstract: find the view and phase tokens in ``text``"""
    found = {}
    for word in _WORD.findall(text.lower()):
        hit = lex.lookup(word)
        if hit is not None:
            found[hit[0]] = hit[1]
    missing = [slot for slot in ('view', 'phase') if slot not in found]
    if missing:
        raise LexiconError(f"Prompt carries no token for slot '{missing[0]}': {text!r}")
    return ViewPhase(found['view'], found['phase'])


def contains_concealed_words(text: str) -> bool:
    return any(word in CONCEALED_WORDS for word in _WORD.findall(text.lower()))


def check_lexicon_matches(lexicon: ConceptLexicon, expected_hash: Optional[str]) -> None:
    """Refuse a lexicon whose hash differs from the one a checkpoint recorded"""
    if expected_hash is None:
        raise LexiconError("Checkpoint recorded no lexicon hash; abstract prompts cannot be rendered")
    actual = lexicon.content_hash()
    if actual != expected_hash:
        raise LexiconError(f"Lexicon hash {actual[:12]} does not match checkpoint {expected_hash[:12]}")
