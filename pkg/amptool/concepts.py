"""Candidate-concept extraction from captions.

Nouns are found with a closed-class lexicon (function words, common caption
adjectives/verbs/adverbs) plus a few suffix rules, then singularized with a
fixed irregular-plural table. Deterministic and offline by construction.
"""
from __future__ import annotations

import re
from typing import List

from .errors import InvalidArgumentError


_TOKEN = re.compile(r"[a-z]+(?:'[a-z]+)?")

FUNCTION_WORDS = frozenset("""
a an the this that these those there here it its it's they them their theirs he him his she her hers
we us our you your i me my mine what which who whom whose where when why how whats what's
and or but nor so yet if then than as because while although though
of in on at by for with without within into onto from to toward towards over under above below
beneath between among through across along around near beside besides behind before after during
against about up down out off inside outside upon via per like unlike next
is are was were be been being am has have had having do does did doing can could will would
shall should may might must not no yes very too also just only even still again ever never
all any some each every both either neither few many much more most other another such own same
one two three four five six seven eight nine ten eleven twelve twenty dozen several numerous
first second third last single double pair couple
image picture photo photograph shot view scene depiction
""".split())

# Frequent non-noun caption vocabulary. Extend here rather than in code.
ADJECTIVES = frozenset("""
red orange yellow green blue purple pink brown black white gray grey golden silver beige
dark light bright pale vivid colorful colourful multicolored striped spotted plain
big small large little tiny huge giant tall short long wide narrow thick thin round square
old young new ancient modern vintage antique rustic classic traditional
fluffy furry fuzzy soft hard smooth rough shiny glossy wet dry clean dirty empty full open closed
happy sad cute adorable beautiful pretty lovely ugly elegant fancy simple busy quiet calm serene
sunny cloudy snowy rainy foggy misty stormy hazy dim lit
wooden metallic plastic ceramic woolen
fresh ripe delicious tasty hot cold warm cool frozen cooked raw
close distant far nearby high low deep shallow front back left right top bottom middle central
various different similar lush green grassy sandy rocky snowy leafy wild domestic natural urban rural
detailed blurry sharp clear abstract realistic outdoor indoor scenic majestic vibrant cozy
""".split())

VERBS = frozenset("""
sit sits stand stands lie lies lay lays hold holds look looks walk walks run runs ride rides
play plays eat eats wear wears rest rests perch perches sleep sleeps fly flies swim swims
jump jumps climb climbs carry carries wait waits lean leans hang hangs float floats
grow grows feature features contain contains depict depicts
surround surrounds fill fills pose poses smile smiles gaze gazes
stare stares graze grazes read reads write writes move moves
chase chases catch catches fetch fetches pull pulls push pushes throw throws kick kicks
bite bites drive drives lick licks sniff sniffs chew chews hug hugs reach reaches roam roams wander wanders
is are be seem seems appear appears make makes take takes get gets go goes come comes
""".split())

ADVERBS_ENDING_LY_NOUNS = frozenset("""
family belly lily jelly fly butterfly dragonfly ally rally holly bully gully assembly
""".split())

ING_NOUNS = frozenset("""
building painting ceiling ring king wing string thing spring clothing wedding evening morning
swing pudding stuffing railing earring sibling duckling dumpling icing frosting ceiling
awning bedding lightning sapling seedling offspring stocking drawing carving sculpting
""".split())

ED_NOUNS = frozenset("""
bed shed sled seed weed reed steed feed flowerbed hundred
""".split())

IRREGULAR_PLURALS = {
    "people": "person",
    "men": "man",
    "women": "woman",
    "children": "child",
    "mice": "mouse",
    "geese": "goose",
    "teeth": "tooth",
    "feet": "foot",
    "oxen": "ox",
    "knives": "knife",
    "wives": "wife",
    "lives": "life",
    "leaves": "leaf",
    "loaves": "loaf",
    "wolves": "wolf",
    "calves": "calf",
    "halves": "half",
    "shelves": "shelf",
    "scarves": "scarf",
    "thieves": "thief",
    "elves": "elf",
    "cacti": "cactus",
    "fungi": "fungus",
    "dice": "die",
    "criteria": "criterion",
    "phenomena": "phenomenon",
    "tomatoes": "tomato",
    "potatoes": "potato",
    "heroes": "hero",
    "echoes": "echo",
    "buses": "bus",
    "cookies": "cookie",
    "movies": "movie",
    "zombies": "zombie",
    "brownies": "brownie",
    "selfies": "selfie",
    "smoothies": "smoothie",
    "hippies": "hippie",
}

# Singular nouns ending in -is; any other -is word is a plural of an -i noun (skis, taxis).
IS_SINGULARS = frozenset("""
tennis iris axis basis oasis pelvis trellis
""".split())

# Words whose plural equals the singular, or that end in -s when singular.
INVARIANT_NOUNS = frozenset("""
sheep fish deer moose series species news aircraft glasses pants jeans shorts scissors
bus gas lens glass grass dress class boss moss chess cross mass brass compass
cactus octopus virus bonus circus campus walrus hippopotamus
tennis iris bus canvas atlas chaos
""".split())


def lemmatize_noun(word: str) -> str:
    """Singular form of ``word`` (lower-cased)."""
    w = word.lower()
    if w in IRREGULAR_PLURALS:
        return IRREGULAR_PLURALS[w]
    if w in INVARIANT_NOUNS or len(w) <= 3:
        return w
    if w.endswith("ies") and len(w) > 4:
        return w[:-3] + "y"
    if w.endswith(("sses", "xes", "ches", "shes")):
        return w[:-2]
    if w.endswith(("ss", "us", "sis")) or w in IS_SINGULARS:
        return w
    if w.endswith("s"):
        return w[:-1]
    return w


def _is_noun_candidate(token: str) -> bool:
    if token in FUNCTION_WORDS or token in ADJECTIVES or token in VERBS:
        return False
    if "'" in token or len(token) < 2:
        return False
    if token.endswith("ly") and token not in ADVERBS_ENDING_LY_NOUNS:
        return False
    if token.endswith("ing") and token not in ING_NOUNS:
        return False
    if token.endswith("ed") and len(token) > 3 and token not in ED_NOUNS and not token.endswith("eed"):
        return False
    return True


def tokenize(caption: str) -> List[str]:
    return _TOKEN.findall(caption.lower())


def caption_nouns(caption: str) -> List[str]:
    """Lemmatized nouns of ``caption`` in order of first occurrence, deduplicated."""
    seen: dict[str, None] = {}
    for token in tokenize(caption):
        if not _is_noun_candidate(token):
            continue
        lemma = lemmatize_noun(token)
        if lemma in VERBS or lemma in ADJECTIVES or lemma in FUNCTION_WORDS:
            continue
        seen.setdefault(lemma, None)
    return list(seen)


def extract_candidate_concepts(caption: str) -> List[str]:
    if not caption or not caption.strip():
        raise InvalidArgumentError("caption must be nonempty")
    return caption_nouns(caption)


def contains_concept(caption: str, concept: str) -> bool:
    """Whole-token match after lemmatization ("cat" never matches "catalog")."""
    return lemmatize_noun(concept) in set(caption_nouns(caption))
