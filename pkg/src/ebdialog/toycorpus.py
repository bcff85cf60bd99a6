"""Template-generated multi-turn dialogues for desk-scale experiments.

Replies are deliberately one-to-many: each context admits several equally
plausible responses, so a model that always picks its single most likely
reply has low corpus-level diversity.
"""

from __future__ import annotations

import random

from .data import DialogueSample

TOPICS = {
    "food": ["pizza", "pasta", "sushi", "salad", "soup", "tacos", "curry", "noodles", "steak", "pancakes"],
    "sport": ["tennis", "soccer", "golf", "hockey", "boxing", "rugby", "swimming", "cycling", "karate", "skiing"],
    "music": ["jazz", "rock", "opera", "reggae", "blues", "techno", "folk", "metal", "salsa", "gospel"],
    "city": ["paris", "london", "tokyo", "rome", "berlin", "madrid", "cairo", "sydney", "lisbon", "dublin"],
    "pet": ["dogs", "cats", "birds", "fish", "rabbits", "horses", "turtles", "hamsters", "parrots", "ferrets"],
}
ADJECTIVES = [
    "great", "fun", "boring", "nice", "strange", "amazing", "awful", "lovely",
    "cheap", "popular", "weird", "cool", "relaxing", "exciting", "expensive", "classic",
]
PEOPLE = [
    "mother", "father", "sister", "brother", "uncle", "cousin", "neighbour", "teacher",
    "aunt", "grandma", "grandpa", "boss", "roommate", "coach", "dentist", "friends",
]
TIMES = [
    "weekend", "evening", "morning", "summer", "winter", "afternoon",
    "spring", "autumn", "monday", "friday", "holiday", "month",
]

OPENERS = [
    "i really enjoy {item} on weekends .",
    "have you ever tried {item} before ?",
    "my friend told me about {item} yesterday .",
    "what do you think about {item} these days ?",
    "i have been reading a lot about {item} .",
]
# the closing context turn always names the topic item and an adjective
FOLLOWS = [
    "i think {item} is {adj} .",
    "honestly {item} sounds {adj} to me .",
    "my {person} says {item} is {adj} .",
    "people say {item} is {adj} .",
]
BRIDGES = [
    "why do you say that ?",
    "tell me more about it please .",
    "that is interesting , go on .",
]
# Replies either echo the context (item + adjective) or fill free slots
# (person, time) whose value does not depend on the context. Echo replies
# are more frequent, so the single most likely reply is an echo. All
# replies have the same token length, so unigram diversity reflects word
# choice rather than reply length.
REPLIES = [
    ("yes , {item} is really {adj} .", 3),
    ("i agree , {item} is {adj} .", 3),
    ("well , {item} is very {adj} .", 3),
    ("i will try {item} this {time} .", 2),
    ("my {reply_person} loves {item} this {time} .", 2),
    ("{item} reminds me of my {reply_person} .", 2),
]


def make_dialogue(rng: random.Random) -> DialogueSample:
    topic = rng.choice(sorted(TOPICS))
    slots = {
        "item": rng.choice(TOPICS[topic]),
        "adj": rng.choice(ADJECTIVES),
        "person": rng.choice(PEOPLE),
        "reply_person": rng.choice(PEOPLE),
        "time": rng.choice(TIMES),
    }
    utts = [rng.choice(OPENERS).format(**slots), rng.choice(FOLLOWS).format(**slots)]
    if rng.random() < 0.4:
        utts.append(rng.choice(BRIDGES))
        utts.append(rng.choice(FOLLOWS).format(**slots))
    templates, weights = zip(*REPLIES)
    utts.append(rng.choices(templates, weights)[0].format(**slots))
    return DialogueSample(tuple(utts))


def make_corpus(n: int, seed: int = 0) -> list[DialogueSample]:
    rng = random.Random(seed)
    return [make_dialogue(rng) for _ in range(n)]
