"""Class prompts for zero-shot scoring and text-side fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

DEFAULT_TEMPLATE = "a photo of a {c}"

FAMILY_CLASS_STRINGS = {
    "I": ("No DR", "mild DR", "moderate DR", "severe DR", "proliferative DR"),
    "II": ("No Diabetic Retinopathy", "mild Diabetic Retinopathy", "moderate Diabetic Retinopathy",
           "severe Diabetic Retinopathy", "proliferative Diabetic Retinopathy"),
}


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSet:
    family: str
    template: str
    class_strings: tuple[str, ...]
    prompts: tuple[str, ...]
    token_sequences: tuple[tuple[int, ...], ...]
    provenance: str

    def __len__(self) -> int:
        return len(self.prompts)

    def to_dict(self) -> dict:
        return {"family": self.family, "template": self.template,
                "class_strings": list(self.class_strings), "prompts": list(self.prompts),
                "provenance": self.provenance}


def build_prompt_set(family: str, class_names: Sequence[str], tokenizer=None,
                     template: str = DEFAULT_TEMPLATE, context_length: int | None = None) -> PromptSet:
    """Instantiate ``template`` once per class, ordered by class index.

    Families ``I`` and ``II`` substitute fixed short / long DR grade names for
    the first ``len(class_names)`` grades; ``custom`` substitutes the caller's
    strings. Tokenization is skipped when ``tokenizer`` is None.
    """
    class_names = list(class_names)
    if not class_names:
        raise PromptError("cannot build a prompt set for an empty class list")
    if "{c}" not in template:
        raise PromptError(f"template {template!r} has no '{{c}}' slot")
    if family in FAMILY_CLASS_STRINGS:
        table = FAMILY_CLASS_STRINGS[family]
        if len(class_names) > len(table):
            raise PromptError(f"prompt family {family} defines {len(table)} classes, task has {len(class_names)}")
        strings = table[:len(class_names)]
        provenance = f"family {family}: fixed DR grade names"
    elif family == "custom":
        strings = tuple(class_names)
        provenance = "custom: caller-supplied class strings"
    else:
        raise PromptError(f"unknown prompt family {family!r}; expected I, II or custom")

    prompts = tuple(template.replace("{c}", s) for s in strings)
    seqs: tuple[tuple[int, ...], ...] = ()
    if tokenizer is not None:
        seqs = tuple(tuple(tokenizer.encode(p)) for p in prompts)
        if context_length is not None:
            for p, s in zip(prompts, seqs):
                if len(s) > context_length:
                    raise PromptError(f"prompt {p!r} tokenizes to {len(s)} > context length {context_length}")
    return PromptSet(family, template, tuple(strings), prompts, seqs, provenance)


def load_prompt_file(path, tokenizer=None, context_length: int | None = None) -> PromptSet:
    """Read one full prompt per line; line order is class order."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    prompts = tuple(ln for ln in lines if ln)
    if not prompts:
        raise PromptError(f"prompt file {path} is empty")
    seqs: tuple[tuple[int, ...], ...] = ()
    if tokenizer is not None:
        seqs = tuple(tuple(tokenizer.encode(p)) for p in prompts)
        if context_length is not None and any(len(s) > context_length for s in seqs):
            raise PromptError(f"a prompt in {path} exceeds context length {context_length}")
    return PromptSet("custom", "{c}", prompts, prompts, seqs, f"custom: prompt file {path}")


def prompt_tokens_for_label(ps: PromptSet, y) -> tuple[int, ...]:
    index = getattr(y, "index", y)
    if not 0 <= int(index) < len(ps.token_sequences):
        raise PromptError(f"class index {index} out of range for {len(ps.token_sequences)} prompts")
    return ps.token_sequences[int(index)]
