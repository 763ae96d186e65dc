import pytest

from clipdg.core import class_labels
from clipdg.encoders import WhitespaceTokenizer
from clipdg.prompts import PromptError, build_prompt_set, load_prompt_file, prompt_tokens_for_label

DR = ["No DR", "mild DR", "moderate DR", "severe DR", "proliferative DR"]


def test_family_one_strings():
    ps = build_prompt_set("I", DR)
    assert ps.prompts == ("a photo of a No DR", "a photo of a mild DR", "a photo of a moderate DR",
                          "a photo of a severe DR", "a photo of a proliferative DR")


def test_family_two_strings():
    ps = build_prompt_set("II", DR)
    assert ps.prompts[0] == "a photo of a No Diabetic Retinopathy"
    assert ps.prompts[4] == "a photo of a proliferative Diabetic Retinopathy"


def test_families_differ_only_in_class_strings():
    a, b = build_prompt_set("I", DR), build_prompt_set("II", DR)
    assert a.template == b.template and a.class_strings != b.class_strings
    for pa, pb, sa, sb in zip(a.prompts, b.prompts, a.class_strings, b.class_strings):
        assert pa.replace(sa, "") == pb.replace(sb, "")


def test_custom_single_class():
    assert build_prompt_set("custom", ["x"]).prompts == ("a photo of a x",)


def test_tokens_for_label_and_round_trip():
    tok = WhitespaceTokenizer.default()
    ps = build_prompt_set("I", DR, tokenizer=tok)
    labels = class_labels(DR)
    assert prompt_tokens_for_label(ps, 0) == prompt_tokens_for_label(ps, labels[0]) == tuple(tok.encode(ps.prompts[0]))
    assert build_prompt_set("I", DR, tokenizer=tok) == ps
    assert [tok.decode(s) for s in ps.token_sequences] == list(ps.prompts)
    with pytest.raises(PromptError, match="out of range"):
        prompt_tokens_for_label(ps, 5)


@pytest.mark.parametrize("family, names, msg", [
    ("I", [], "empty class list"),
    ("III", DR, "unknown prompt family"),
    ("I", DR + ["extra"], "defines 5 classes"),
])
def test_prompt_set_errors(family, names, msg):
    with pytest.raises(PromptError, match=msg):
        build_prompt_set(family, names)


def test_template_without_slot():
    with pytest.raises(PromptError, match="slot"):
        build_prompt_set("custom", ["x"], template="a photo")


def test_context_overflow():
    with pytest.raises(PromptError, match="context length"):
        build_prompt_set("II", DR, tokenizer=WhitespaceTokenizer.default(), context_length=6)


def test_prompt_file(tmp_path):
    f = tmp_path / "prompts.txt"
    f.write_text("a fundus image of No DR\n\nmild DR\n")
    ps = load_prompt_file(f, tokenizer=WhitespaceTokenizer.default())
    assert ps.prompts == ("a fundus image of No DR", "mild DR") and len(ps.token_sequences) == 2
    (tmp_path / "empty.txt").write_text("\n")
    with pytest.raises(PromptError, match="empty"):
        load_prompt_file(tmp_path / "empty.txt")
