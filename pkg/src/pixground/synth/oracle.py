"""Exhaustive referent resolution for expressions over a scene.

Works from the object list and geometry alone: the expression is parsed into
head and landmark phrases and every object is tested against them.
"""

from __future__ import annotations

from .scene import CATEGORIES, Scene, SceneObject

RELATIONS = ("above", "below", "left of", "right of", "inside")
OPPOSITE = {"above": "below", "below": "above", "left of": "right of", "right of": "left of"}


class ParseError(ValueError):
    pass


def parse(words: list[str]) -> tuple[tuple, str | None, tuple | None]:
    """Split into (head phrase, relation, landmark phrase); a phrase is (attrs, category)."""
    words = list(words)
    rel, cut = None, len(words)
    for i, w in enumerate(words):
        if w in ("above", "below", "inside"):
            rel, cut, skip = w, i, 1
            break
        if w in ("left", "right") and i + 1 < len(words) and words[i + 1] == "of":
            rel, cut, skip = f"{w} of", i, 2
            break
    head = _phrase(words[:cut])
    if rel is None:
        return head, None, None
    rest = words[cut + skip:]
    if not rest or rest[0] != "the":
        raise ParseError("relation must be followed by 'the'")
    return head, rel, _phrase(rest[1:])


def _phrase(words: list[str]) -> tuple[tuple[str, ...], str]:
    if not words or words[-1] not in CATEGORIES:
        raise ParseError(f"phrase {' '.join(words)!r} does not end in a category")
    return tuple(words[:-1]), words[-1]


def _center(obj: SceneObject) -> tuple[float, float]:
    return obj.x0 + obj.side / 2.0, obj.y0 + obj.side / 2.0


def holds(rel: str, a: SceneObject, b: SceneObject, image_size: int, margin: float) -> bool:
    """Whether ``a <rel> b``; positional relations need a center gap above ``margin``."""
    (ax, ay), (bx, by) = _center(a), _center(b)
    m = margin * image_size
    if rel == "above":
        return by - ay > m
    if rel == "below":
        return ay - by > m
    if rel == "left of":
        return bx - ax > m
    if rel == "right of":
        return ax - bx > m
    if rel == "inside":
        return (a.x0 >= b.x0 and a.y0 >= b.y0 and a.x0 + a.side <= b.x0 + b.side
                and a.y0 + a.side <= b.y0 + b.side and a is not b)
    raise ValueError(f"unknown relation {rel}")


def matches(phrase, obj: SceneObject) -> bool:
    attrs, category = phrase
    own = {obj.color, "striped" if obj.striped else None, obj.size}
    return obj.category == category and all(a in own for a in attrs)


def resolve(words: list[str], scene: Scene, image_size: int = 64, margin: float = 0.1) -> list[int]:
    """Indices of every object the expression can denote.

    A relational expression denotes a head-matching object that stands in the
    relation to at least one other object matching the landmark phrase, so
    "red circle above the red circle" picks the upper of two stacked twins.
    """
    head, rel, landmark = parse(words)
    objs = scene.objects
    heads = [i for i, o in enumerate(objs) if matches(head, o)]
    if rel is None:
        return heads
    marks = [j for j, o in enumerate(objs) if matches(landmark, o)]
    return [i for i in heads
            if any(j != i and holds(rel, objs[i], objs[j], image_size, margin) for j in marks)]
