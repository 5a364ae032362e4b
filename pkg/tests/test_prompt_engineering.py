import pytest

from errors import ConfigurationError, LexiconError
from prompt_engineering import (ConceptLexicon, ViewPhase, build_lexicon, check_lexicon_matches,
                                contains_concealed_words, recover_view_phase, render_abstract, render_prompt,
                                render_textual)


def test_textual_prompts():
    assert render_textual(ViewPhase('2CH', 'ED')).text == \
        "ultrasound image of the heart in 2-chamber view in the ED phase"
    assert render_textual(ViewPhase('4CH', 'ES'), include_phase=False).text == \
        "ultrasound image of the heart in 4-chamber view"
    assert render_prompt(ViewPhase('4CH', 'ED'), 'textual').style == 'textual'


def test_view_phase_validation():
    with pytest.raises(ConfigurationError):
        ViewPhase('3CH', 'ED')
    with pytest.raises(ConfigurationError):
        ViewPhase('2CH', 'MID')
    assert [str(vp) for vp in ViewPhase.all()] == ['2CH-ED', '2CH-ES', '4CH-ED', '4CH-ES']


def test_abstract_prompts_over_many_seeds():
    cells = ViewPhase.all()
    for seed in range(1000):
        lex = build_lexicon(seed)
        assert lex == build_lexicon(seed)
        tokens = [tok for values in lex.table.values() for tok in values.values()]
        assert len(tokens) == len(set(tokens))
        assert all(len(tok) == 8 and any(c.isalpha() for c in tok) and any(c.isdigit() for c in tok)
                   for tok in tokens)
        prompts = {vp: render_abstract(vp, lex).text for vp in cells}
        assert len(set(prompts.values())) == 4
        for vp, text in prompts.items():
            assert not contains_concealed_words(text)
            assert recover_view_phase(text, lex) == vp
            assert lex.token('view', vp.view) in text.split()
            assert lex.token('phase', vp.phase) in text.split()


def test_concept_tokens_are_shared_across_prompts():
    lex = build_lexicon(11)
    ed = render_abstract(ViewPhase('2CH', 'ED'), lex).text.split()
    es = render_abstract(ViewPhase('2CH', 'ES'), lex).text.split()
    assert ed[0] == es[0]
    assert lex.token('view', '2CH') in ed and lex.token('view', '2CH') in es
    assert lex.token('phase', 'ED') in ed and lex.token('phase', 'ED') not in es


def test_textual_prompts_do_carry_concepts():
    assert contains_concealed_words(render_textual(ViewPhase('2CH', 'ED')).text)


def test_missing_slot_names_the_slot():
    lex = ConceptLexicon(seed=0, token_length=8, table={'view': {'2CH': 'ab12cd34'}})
    with pytest.raises(LexiconError, match="'phase'"):
        lex.token('phase', 'ED')
    with pytest.raises(LexiconError):
        render_prompt(ViewPhase('2CH', 'ED'), 'abstract')


def test_non_injective_lexicon_rejected():
    with pytest.raises(LexiconError):
        ConceptLexicon(seed=0, token_length=8, table={'view': {'2CH': 'ab12cd34', '4CH': 'ab12cd34'}})


def test_lexicon_persistence_and_hash_check(tmp_path):
    lex = build_lexicon(3)
    loaded = ConceptLexicon.load(lex.save(tmp_path / 'lexicon.json'))
    assert loaded == lex
    check_lexicon_matches(loaded, lex.content_hash())
    with pytest.raises(LexiconError):
        check_lexicon_matches(build_lexicon(4), lex.content_hash())
    with pytest.raises(LexiconError):
        check_lexicon_matches(lex, None)


def test_unknown_style():
    with pytest.raises(ConfigurationError):
        render_prompt(ViewPhase('2CH', 'ED'), 'poetic')
