"""Synthetic multi-turn video-dialog episodes with an exact oracle answerer.

A Scene is a handful of attributed objects moving over F frames according to
a small event script (slide / rotate / fly / contain). Episodes are lists of
templated question-answer turns over one scene; with some probability a turn
refers to the previous turn's referent with the pronoun "it", so it can only
be answered using dialog history. Answers always come from the symbolic
oracle, which makes the dataset solvable by construction.

Questions use a fixed word-level vocabulary, and every answer is drawn from a
fixed, sorted 40-string candidate set, so discriminative targets are stable
indices and generative targets are token sequences over the same vocabulary.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

SHAPES = ("cube", "sphere", "cone", "cylinder")
COLORS = ("red", "blue", "green", "yellow", "gray", "brown", "purple", "cyan")
MATERIALS = ("metal", "rubber")
SIZES = ("small", "large")
ACTIONS = ("slide", "rotate", "fly", "contain")

PLURALS = {s: s + "s" for s in SHAPES}
SINGULAR = {v: k for k, v in PLURALS.items()}

CATEGORIES = (
    "action_count",
    "action_query",
    "attribute_query",
    "object_count",
    "object_exist",
    "compare_action",
)
# categories whose question names a single object (and can therefore anchor
# a pronoun in the next turn)
REFERENT_CATEGORIES = ("attribute_query", "action_count", "action_query", "compare_action")
COREF_CATEGORIES = ("attribute_query", "action_count", "action_query")

PAD, EOS, PRONOUN = "[PAD]", "[EOS]", "it"

_QUESTION_WORDS = (
    "is", "there", "a", "what", "how", "many", "times", "does", "the",
    "perform", "same", "actions", "as", "objects", "object", "are", "and",
    "none", "yes", "no", "color", "shape", "material", "size", "?",
)
_NUMBER_WORDS = tuple(str(i) for i in range(11))

VOCAB: tuple[str, ...] = (
    (PAD, EOS, PRONOUN)
    + _QUESTION_WORDS
    + _NUMBER_WORDS
    + SHAPES
    + tuple(PLURALS.values())
    + COLORS
    + MATERIALS
    + SIZES
    + ACTIONS
)
TOKEN_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = TOKEN_TO_ID[PAD]
EOS_ID = TOKEN_TO_ID[EOS]


def encode_tokens(words) -> list[int]:
    try:
        return [TOKEN_TO_ID[w] for w in words]
    except KeyError as exc:
        raise ValueError(f"word {exc.args[0]!r} not in vocabulary") from None


def decode_tokens(ids) -> list[str]:
    return [VOCAB[i] for i in ids]


def _action_pairs():
    return tuple(f"{a} and {b}" for a, b in itertools.combinations(sorted(ACTIONS), 2))


CANDIDATES: tuple[str, ...] = tuple(
    sorted(
        _NUMBER_WORDS
        + ("yes", "no", "none")
        + SHAPES
        + COLORS
        + MATERIALS
        + SIZES
        + ACTIONS
        + _action_pairs()
    )
)
CANDIDATE_INDEX = {s: i for i, s in enumerate(CANDIDATES)}


class CandidateSet:
    """The fixed answer pool: exactly N sorted strings, index-stable."""

    def __init__(self, strings=CANDIDATES):
        self.strings = tuple(strings)
        self._index = {s: i for i, s in enumerate(self.strings)}

    def __len__(self):
        return len(self.strings)

    def index(self, answer: str) -> int:
        if answer not in self._index:
            raise KeyError(f"answer {answer!r} not in candidate set")
        return self._index[answer]

    def write(self, path):
        Path(path).write_text("\n".join(self.strings) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path):
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
        return cls(tuple(lines))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary hashable parts (process-independent)."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") >> 1


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------

@dataclass
class SceneObject:
    shape: str
    color: str
    material: str
    size: str
    trajectory: list  # per-frame (x, y), length num_frames

    def attributes(self):
        return {"shape": self.shape, "color": self.color,
                "material": self.material, "size": self.size}


@dataclass
class Event:
    obj: int
    action: str
    start: int
    end: int  # half-open [start, end)


@dataclass
class Scene:
    scene_id: int
    num_frames: int
    objects: list
    events: list

    def to_dict(self):
        return {
            "scene_id": self.scene_id,
            "num_frames": self.num_frames,
            "objects": [
                {"shape": o.shape, "color": o.color, "material": o.material,
                 "size": o.size, "trajectory": [list(p) for p in o.trajectory]}
                for o in self.objects
            ],
            "events": [
                {"obj": e.obj, "action": e.action, "start": e.start, "end": e.end}
                for e in self.events
            ],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            scene_id=d["scene_id"],
            num_frames=d["num_frames"],
            objects=[
                SceneObject(
                    shape=o["shape"], color=o["color"], material=o["material"],
                    size=o["size"], trajectory=[tuple(p) for p in o["trajectory"]],
                )
                for o in d["objects"]
            ],
            events=[Event(obj=e["obj"], action=e["action"], start=e["start"],
                          end=e["end"]) for e in d["events"]],
        )


_CORNER = (0.05, 0.05)


def generate_scene(seed: int, n_objects: int, num_frames: int,
                   max_objects: int = 12) -> Scene:
    """Deterministic scene: unique attribute tuples, piecewise trajectories
    driven by the event script. Raises if n_objects exceeds the slot budget."""
    if n_objects > max_objects:
        raise ValueError(f"n_objects={n_objects} exceeds capacity {max_objects}")
    if n_objects < 2:
        raise ValueError("need at least 2 objects")
    if num_frames < 2:
        raise ValueError("need at least 2 frames")
    rng = np.random.default_rng(seed)

    combos = list(itertools.product(SHAPES, COLORS, MATERIALS, SIZES))
    picked = rng.choice(len(combos), size=n_objects, replace=False)

    objects = []
    events = []
    for oi in range(n_objects):
        shape, color, material, size = combos[picked[oi]]
        n_ev = int(rng.integers(0, 4))
        obj_events = []
        if n_ev:
            distinct = [ACTIONS[i] for i in rng.choice(len(ACTIONS),
                                                       size=min(2, n_ev),
                                                       replace=False)]
            block = num_frames // n_ev
            for j in range(n_ev):
                lo = j * block
                length = int(rng.integers(2, max(3, block)))
                start = lo + int(rng.integers(0, max(1, block - length)))
                end = min(start + length, num_frames)
                action = distinct[int(rng.integers(0, len(distinct)))]
                obj_events.append(Event(obj=oi, action=action, start=start, end=end))
        pos = np.array([rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)])
        direction = 1.0 if rng.random() < 0.5 else -1.0
        traj = []
        for f in range(num_frames):
            active = next((e for e in obj_events if e.start <= f < e.end), None)
            if active is not None:
                span = max(active.end - active.start, 1)
                if active.action == "slide":
                    pos[0] += direction * 0.5 / span
                elif active.action == "fly":
                    pos[1] += direction * 0.5 / span
                elif active.action == "rotate":
                    theta = 2 * np.pi * (f - active.start) / span
                    base = traj[active.start - 1] if active.start > 0 else tuple(pos)
                    pos = np.array([base[0] + 0.08 * np.cos(theta),
                                    base[1] + 0.08 * np.sin(theta)])
                elif active.action == "contain":
                    pos = np.array(_CORNER)
            pos = np.clip(pos, 0.0, 1.0)
            traj.append((float(pos[0]), float(pos[1])))
        objects.append(SceneObject(shape=shape, color=color, material=material,
                                   size=size, trajectory=traj))
        events.extend(obj_events)

    return Scene(scene_id=seed, num_frames=num_frames, objects=objects, events=events)


# ---------------------------------------------------------------------------
# Question structure
# ---------------------------------------------------------------------------

_ATTR_OF_WORD = {}
for w in COLORS:
    _ATTR_OF_WORD[w] = "color"
for w in SIZES:
    _ATTR_OF_WORD[w] = "size"
for w in MATERIALS:
    _ATTR_OF_WORD[w] = "material"
for w in SHAPES:
    _ATTR_OF_WORD[w] = "shape"


def _constraints_from_words(words):
    """Attribute constraints from a descriptor phrase; plural shapes and the
    filler nouns object/objects are accepted."""
    constraints = {}
    for w in words:
        if w in ("object", "objects"):
            continue
        key = _ATTR_OF_WORD.get(SINGULAR.get(w, w))
        if key is None:
            raise ValueError(f"unparseable descriptor word {w!r}")
        constraints[key] = SINGULAR.get(w, w)
    return constraints


def _matches(scene: Scene, constraints: dict) -> list[int]:
    out = []
    for i, obj in enumerate(scene.objects):
        attrs = obj.attributes()
        if all(attrs[k] == v for k, v in constraints.items()):
            out.append(i)
    return out


def _phrase(constraints: dict, plural: bool = False) -> list[str]:
    words = []
    for key in ("size", "color", "material"):
        if key in constraints:
            words.append(constraints[key])
    if "shape" in constraints:
        shape = constraints["shape"]
        words.append(PLURALS[shape] if plural else shape)
    else:
        words.append("objects" if plural else "object")
    return words


def _object_actions(scene: Scene, obj: int) -> list[str]:
    return sorted({e.action for e in scene.events if e.obj == obj})


def _action_answer(actions: list[str]) -> str:
    if not actions:
        return "none"
    if len(actions) == 1:
        return actions[0]
    return f"{actions[0]} and {actions[1]}"


class OracleError(ValueError):
    """The oracle refuses to guess: unresolvable pronoun or ambiguous query."""


@dataclass
class ParsedQuestion:
    category: str
    constraints: dict | None = None       # descriptor (None when pronoun)
    pronoun: bool = False
    attribute: str | None = None          # attribute_query
    action: str | None = None             # action_count
    constraints_b: dict | None = None     # compare_action, second operand


def parse_question(tokens) -> ParsedQuestion:
    t = list(tokens)
    if not t or t[-1] != "?":
        raise ValueError(f"malformed question {t!r}")
    if t[0] == "is":
        # is there a <desc> ?
        return ParsedQuestion("object_exist",
                              constraints=_constraints_from_words(t[3:-1]))
    if t[0] == "how" and t[1] == "many":
        if t[2] == "times":
            # how many times does the <desc> <action> ? | ... does it <action> ?
            action = t[-2]
            if action not in ACTIONS:
                raise ValueError(f"unknown action {action!r}")
            if t[4] == PRONOUN:
                return ParsedQuestion("action_count", pronoun=True, action=action)
            return ParsedQuestion(
                "action_count",
                constraints=_constraints_from_words(t[5:-2]),
                action=action,
            )
        # how many <desc-plural> are there ?
        return ParsedQuestion("object_count",
                              constraints=_constraints_from_words(t[2:-3]))
    if t[0] == "what":
        if t[1] == "actions":
            # what actions does the <desc> perform ? | ... does it perform ?
            if t[3] == PRONOUN:
                return ParsedQuestion("action_query", pronoun=True)
            return ParsedQuestion(
                "action_query",
                constraints=_constraints_from_words(t[4:-2]),
            )
        attr = t[1]
        if attr not in ("color", "shape", "material", "size"):
            raise ValueError(f"unknown attribute {attr!r}")
        if t[3] == PRONOUN:
            return ParsedQuestion("attribute_query", pronoun=True, attribute=attr)
        return ParsedQuestion(
            "attribute_query",
            constraints=_constraints_from_words(t[4:-1]),
            attribute=attr,
        )
    if t[0] == "does":
        # does the <d1> perform the same actions as the <d2> ?
        i = t.index("perform")
        j = len(t) - 1 - t[::-1].index("the")
        return ParsedQuestion(
            "compare_action",
            constraints=_constraints_from_words(t[2:i]),
            constraints_b=_constraints_from_words(t[j + 1:-1]),
        )
    raise ValueError(f"unparseable question {t!r}")


def _unique_match(scene: Scene, constraints: dict) -> int:
    found = _matches(scene, constraints)
    if len(found) != 1:
        raise OracleError(
            f"descriptor {constraints!r} matches {len(found)} objects, need exactly 1"
        )
    return found[0]


def _turn_referent(scene: Scene, parsed: ParsedQuestion, prev_referent) -> int | None:
    """Object index a turn leaves behind for pronoun resolution."""
    if parsed.pronoun:
        if prev_referent is None:
            raise OracleError("pronoun with no referent in the previous turn")
        return prev_referent
    if parsed.category in REFERENT_CATEGORIES:
        return _unique_match(scene, parsed.constraints)
    return None


def resolve_referent(scene: Scene, dialog_context) -> int | None:
    """Referent available to the NEXT turn after the given history (a list of
    question token sequences, oldest first)."""
    referent = None
    for tokens in dialog_context:
        referent = _turn_referent(scene, parse_question(tokens), referent)
    return referent


def oracle_answer(scene: Scene, dialog_context, question_tokens,
                  candidates: CandidateSet | None = None) -> int:
    """Exact symbolic answer; raises OracleError rather than guessing."""
    candidates = candidates or CandidateSet()
    parsed = parse_question(question_tokens)
    if parsed.pronoun:
        target = resolve_referent(scene, dialog_context)
        if target is None:
            raise OracleError("pronoun with empty or referent-free history")
    elif parsed.category in ("object_exist", "object_count"):
        target = None
    elif parsed.category == "compare_action":
        target = _unique_match(scene, parsed.constraints)
    else:
        target = _unique_match(scene, parsed.constraints)

    if parsed.category == "object_exist":
        answer = "yes" if _matches(scene, parsed.constraints) else "no"
    elif parsed.category == "object_count":
        answer = str(len(_matches(scene, parsed.constraints)))
    elif parsed.category == "attribute_query":
        answer = scene.objects[target].attributes()[parsed.attribute]
    elif parsed.category == "action_count":
        answer = str(sum(1 for e in scene.events
                         if e.obj == target and e.action == parsed.action))
    elif parsed.category == "action_query":
        answer = _action_answer(_object_actions(scene, target))
    elif parsed.category == "compare_action":
        other = _unique_match(scene, parsed.constraints_b)
        same = _object_actions(scene, target) == _object_actions(scene, other)
        answer = "yes" if same else "no"
    else:  # pragma: no cover
        raise ValueError(f"unknown category {parsed.category}")
    return candidates.index(answer)


# ---------------------------------------------------------------------------
# Episode generation
# ---------------------------------------------------------------------------

@dataclass
class Turn:
    question: list  # token strings
    category: str
    coref: bool
    answer_index: int
    answer: str

    def to_dict(self):
        return {"question": list(self.question), "category": self.category,
                "coref": self.coref, "answer_index": self.answer_index,
                "answer": self.answer}

    @classmethod
    def from_dict(cls, d):
        return cls(question=list(d["question"]), category=d["category"],
                   coref=d["coref"], answer_index=d["answer_index"],
                   answer=d["answer"])


@dataclass
class DialogEpisode:
    episode_id: int
    scene: Scene
    turns: list = field(default_factory=list)

    def to_dict(self):
        return {"schema": SCHEMA_VERSION, "episode_id": self.episode_id,
                "scene": self.scene.to_dict(),
                "turns": [t.to_dict() for t in self.turns]}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported episode schema {d.get('schema')!r}, "
                f"expected {SCHEMA_VERSION}"
            )
        return cls(episode_id=d["episode_id"], scene=Scene.from_dict(d["scene"]),
                   turns=[Turn.from_dict(t) for t in d["turns"]])


# sampling weights chosen to keep the benchmark learnable at desk scale while
# covering the full taxonomy
CATEGORY_WEIGHTS = {
    "object_exist": 0.22,
    "attribute_query": 0.22,
    "object_count": 0.16,
    "action_query": 0.16,
    "compare_action": 0.12,
    "action_count": 0.12,
}

_MAX_TRIES = 40


def _unique_descriptor(scene, rng, target: int, exclude: str | None = None) -> dict | None:
    """Smallest-ish attribute subset uniquely matching ``target``; tries random
    subsets by ascending size. ``exclude`` drops one attribute from the pool."""
    attrs = scene.objects[target].attributes()
    keys = [k for k in ("shape", "color", "material", "size") if k != exclude]
    for size in range(1, len(keys) + 1):
        subsets = list(itertools.combinations(keys, size))
        order = rng.permutation(len(subsets))
        for si in order:
            constraints = {k: attrs[k] for k in subsets[si]}
            if _matches(scene, constraints) == [target]:
                return constraints
    return None


def _question_for(scene, rng, category, prev_referent, coref, candidates):
    """One question draw; returns (tokens, referent) or None when the draw is
    not realisable on this scene."""
    n = len(scene.objects)
    if coref:
        if prev_referent is None:
            return None
        target = prev_referent
        if category == "attribute_query":
            attr = ("color", "shape", "material", "size")[rng.integers(0, 4)]
            return (["what", attr, "is", PRONOUN, "?"], target)
        if category == "action_count":
            action = ACTIONS[rng.integers(0, len(ACTIONS))]
            return (["how", "many", "times", "does", PRONOUN, action, "?"], target)
        if category == "action_query":
            return (["what", "actions", "does", PRONOUN, "perform", "?"], target)
        return None

    if category == "object_exist":
        want_yes = rng.random() < 0.5
        for _ in range(_MAX_TRIES):
            if want_yes:
                target = int(rng.integers(0, n))
                attrs = scene.objects[target].attributes()
                keys = list(rng.permutation(["shape", "color", "material", "size"]))
                constraints = {k: attrs[k] for k in keys[: rng.integers(1, 5)]}
            else:
                constraints = {
                    k: v
                    for k, v in zip(
                        ("shape", "color", "material", "size"),
                        (SHAPES[rng.integers(0, 4)], COLORS[rng.integers(0, 8)],
                         MATERIALS[rng.integers(0, 2)], SIZES[rng.integers(0, 2)]),
                    )
                    if rng.random() < 0.7
                } or {"color": COLORS[rng.integers(0, 8)]}
            has = bool(_matches(scene, constraints))
            if has == want_yes:
                return (["is", "there", "a"] + _phrase(constraints) + ["?"], None)
        return None
    if category == "object_count":
        keys = list(rng.permutation(["shape", "color", "material", "size"]))
        picked = keys[: rng.integers(0, 3)]
        some = scene.objects[rng.integers(0, n)].attributes()
        constraints = {k: some[k] for k in picked}
        if len(_matches(scene, constraints)) > 10:
            return None
        return (
            ["how", "many"] + _phrase(constraints, plural=True) + ["are", "there", "?"],
            None,
        )
    if category == "attribute_query":
        target = int(rng.integers(0, n))
        attr = ("color", "shape", "material", "size")[rng.integers(0, 4)]
        desc = _unique_descriptor(scene, rng, target, exclude=attr)
        if desc is None:
            return None
        return (["what", attr, "is", "the"] + _phrase(desc) + ["?"], target)
    if category == "action_count":
        target = int(rng.integers(0, n))
        acts = _object_actions(scene, target)
        pool = acts if (acts and rng.random() < 0.7) else list(ACTIONS)
        action = pool[rng.integers(0, len(pool))]
        desc = _unique_descriptor(scene, rng, target)
        if desc is None:
            return None
        return (
            ["how", "many", "times", "does", "the"] + _phrase(desc) + [action, "?"],
            target,
        )
    if category == "action_query":
        target = int(rng.integers(0, n))
        desc = _unique_descriptor(scene, rng, target)
        if desc is None:
            return None
        return (
            ["what", "actions", "does", "the"] + _phrase(desc) + ["perform", "?"],
            target,
        )
    if category == "compare_action":
        a, b = rng.choice(n, size=2, replace=False)
        da = _unique_descriptor(scene, rng, int(a))
        db = _unique_descriptor(scene, rng, int(b))
        if da is None or db is None:
            return None
        tokens = (
            ["does", "the"] + _phrase(da)
            + ["perform", "the", "same", "actions", "as", "the"] + _phrase(db) + ["?"]
        )
        return (tokens, int(a))
    raise ValueError(f"unknown category {category}")


def _draw_category(rng, pool):
    names = [c for c in CATEGORIES if c in pool]
    weights = np.array([CATEGORY_WEIGHTS[c] for c in names])
    weights = weights / weights.sum()
    return names[rng.choice(len(names), p=weights)]


def generate_episode(scene: Scene, seed: int, n_turns: int,
                     coref_rate: float) -> DialogEpisode:
    """Templated dialog over ``scene``. With probability ``coref_rate`` a turn
    (from the second on) refers to the previous turn's referent via "it"."""
    if n_turns < 1:
        raise ValueError("need at least one turn")
    rng = np.random.default_rng(seed)
    candidates = CandidateSet()
    turns: list[Turn] = []
    context: list[list[str]] = []
    prev_referent = None
    for ti in range(n_turns):
        made = None
        for _ in range(_MAX_TRIES):
            coref = (
                ti > 0 and prev_referent is not None and rng.random() < coref_rate
            )
            if coref:
                category = COREF_CATEGORIES[rng.integers(0, len(COREF_CATEGORIES))]
            elif ti == 0 and coref_rate > 0:
                # anchor the dialog with a referent so pronouns can follow
                category = _draw_category(rng, REFERENT_CATEGORIES)
            else:
                category = _draw_category(rng, CATEGORIES)
            drawn = _question_for(scene, rng, category, prev_referent, coref, candidates)
            if drawn is None:
                continue
            tokens, referent = drawn
            try:
                answer_index = oracle_answer(scene, context, tokens, candidates)
            except (OracleError, KeyError, ValueError):
                continue
            made = (tokens, category, coref, referent, answer_index)
            break
        if made is None:
            raise RuntimeError(
                f"could not draw an answerable question for turn {ti} "
                f"(scene {scene.scene_id})"
            )
        tokens, category, coref, referent, answer_index = made
        turns.append(Turn(question=tokens, category=category, coref=coref,
                          answer_index=answer_index,
                          answer=candidates.strings[answer_index]))
        context.append(tokens)
        prev_referent = referent
    return DialogEpisode(episode_id=seed, scene=scene, turns=turns)


def generate_dataset(global_seed: int, n_episodes: int, n_turns: int,
                     coref_rate: float, min_objects: int = 3, max_objects: int = 6,
                     num_frames: int = 16, slot_budget: int = 12) -> list[DialogEpisode]:
    """Reproducible corpus: per-episode seed = hash(global_seed, episode index)."""
    episodes = []
    for ei in range(n_episodes):
        ep_seed = derive_seed(global_seed, ei)
        rng = np.random.default_rng(ep_seed)
        n_obj = int(rng.integers(min_objects, max_objects + 1))
        scene = generate_scene(ep_seed, n_obj, num_frames, max_objects=slot_budget)
        episodes.append(generate_episode(scene, ep_seed, n_turns, coref_rate))
    return episodes


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def write_dataset(episodes, path):
    """One JSON object per line, schema-versioned, byte-stable."""
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_dict(), sort_keys=True,
                                separators=(",", ":")))
            fh.write("\n")


def read_dataset(path) -> list[DialogEpisode]:
    episodes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: malformed JSON on line {lineno}: {exc}") from None
            episodes.append(DialogEpisode.from_dict(d))
    return episodes


def dataset_hash(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]
