"""Synthetic referential world: attribute scenes and template-grammar captions.

A scene is a tuple of attribute values (size, color, shape, pattern by
default). References are rendered by a small grammar::

    a [size] [color] <shape> [with <pattern>] <eos>

The noun attribute is always mentioned; every other attribute is mentioned
with probability ``mention_prob``, and each value has several synonyms, one
of which is preferred. References are therefore natural but often not
discriminative, which is what creates a trade-off between matching them and
letting a listener pick out the scene.
"""

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

PAD, BOS, EOS = 0, 1, 2
RESERVED = ("<pad>", "<bos>", "<eos>")
DET = "a"
WITH = "with"
AND = "and"

_LEXICON = (
    ("size", (("small", "tiny"), ("big", "large"), ("medium", "midsize"), ("huge", "giant"),
              ("long", "lengthy"), ("short", "stubby"))),
    ("color", (("red", "crimson"), ("blue", "azure"), ("green", "lime"), ("yellow", "golden"),
               ("purple", "violet"), ("orange", "amber"))),
    ("shape", (("circle", "ring"), ("square", "box"), ("triangle", "wedge"), ("star", "spark"),
               ("hexagon", "hex"), ("cross", "plus"))),
    ("pattern", (("stripes", "bands"), ("dots", "spots"), ("checks", "tiles"), ("waves", "ripples"),
                 ("swirls", "spirals"), ("zigzags", "chevrons"))),
)

FORMAT = "psst-world"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    num_attributes: int = 4
    values_per_attribute: int = 5
    synonyms_per_value: int = 2
    refs_per_scene: int = 5
    split_sizes: tuple = (400, 100, 100)
    max_len: int = 8
    mention_prob: float = 0.25
    preferred_synonym_prob: float = 0.75
    seed: int = 0
    vocab: tuple | None = None

    @property
    def num_scenes(self):
        return self.values_per_attribute**self.num_attributes


class Vocabulary:
    """Ordered token list with reserved indices 0=PAD, 1=BOS, 2=EOS."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            raise ConfigError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary has duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words):
        return [self.index[w] for w in words]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class Scene:
    id: int
    attributes: tuple


@dataclass(frozen=True)
class ReferenceCaption:
    scene_id: int
    tokens: tuple

    def words(self):
        """Tokens before EOS."""
        return tuple(t for t in self.tokens if t != EOS)


@dataclass
class Batch:
    target: Scene
    distractors: list
    references: list

    @property
    def scenes(self):
        return [self.target, *self.distractors]


class Grammar:
    """Surface forms for attribute values and the caption template."""

    def __init__(self, num_attributes, values_per_attribute, synonyms_per_value):
        self.num_attributes = num_attributes
        self.values_per_attribute = values_per_attribute
        self.synonyms_per_value = synonyms_per_value
        self.attribute_names = []
        self.words = []  # words[attr][value] -> tuple of synonyms
        for a in range(num_attributes):
            if a < len(_LEXICON):
                name, table = _LEXICON[a]
            else:
                name, table = f"attr{a}", ()
            self.attribute_names.append(name)
            values = []
            for v in range(values_per_attribute):
                if v < len(table) and synonyms_per_value <= len(table[v]):
                    syns = table[v][:synonyms_per_value]
                else:
                    syns = tuple(f"{name}{v}_{s}" for s in range(synonyms_per_value))
                values.append(syns)
            self.words.append(values)
        self.noun = min(2, num_attributes - 1)
        self.trailing = [a for a in range(3, num_attributes)]
        self.leading = [a for a in range(num_attributes) if a != self.noun and a not in self.trailing]
        self.lookup = {}
        for a, values in enumerate(self.words):
            for v, syns in enumerate(values):
                for s in syns:
                    self.lookup[s] = (a, v)

    def token_list(self):
        toks = [DET, WITH, AND]
        for values in self.words:
            for syns in values:
                toks.extend(syns)
        return toks

    def render(self, attributes, mentioned, synonym):
        """Words for a caption mentioning the attributes flagged in ``mentioned``."""
        out = [DET]
        for a in self.leading:
            if mentioned[a]:
                out.append(self.words[a][attributes[a]][synonym[a]])
        out.append(self.words[self.noun][attributes[self.noun]][synonym[self.noun]])
        tail = [self.words[a][attributes[a]][synonym[a]] for a in self.trailing if mentioned[a]]
        if tail:
            out.append(WITH)
            for i, w in enumerate(tail):
                if i:
                    out.append(AND)
                out.append(w)
        return out

    def parse(self, words):
        """Attribute values named in ``words``: ``{attribute: value}``."""
        found = {}
        for w in words:
            if w in self.lookup:
                a, v = self.lookup[w]
                found[a] = v
        return found


class World:
    """Immutable scene/caption corpus with train/val/test splits."""

    def __init__(self, config, vocab, scenes, splits, references):
        self.config = config
        self.vocab = vocab
        self.scenes = scenes  # id -> Scene
        self.splits = splits  # name -> list of scene ids
        self.references = references  # scene id -> list of ReferenceCaption
        self.grammar = Grammar(config.num_attributes, config.values_per_attribute, config.synonyms_per_value)

    def split(self, name):
        return [self.scenes[i] for i in self.splits[name]]

    def refs(self, scene_id):
        return self.references[scene_id]

    def attribute_matrix(self, scenes):
        """One-hot-per-attribute encoding, shape [len(scenes), A * K]."""
        A, K = self.config.num_attributes, self.config.values_per_attribute
        out = np.zeros((len(scenes), A * K))
        for i, s in enumerate(scenes):
            for a, v in enumerate(s.attributes):
                out[i, a * K + v] = 1.0
        return out

    def parse(self, token_ids):
        return self.grammar.parse(self.vocab.decode([t for t in token_ids if t > EOS]))

    def describe(self, token_ids):
        return " ".join(self.vocab.decode([t for t in token_ids if t > EOS]))

    # ---------------------------------------------------------------- I/O

    def to_text(self):
        """Deterministic JSON document, one scene/reference row per line."""
        cfg = asdict(self.config)
        cfg["split_sizes"] = list(self.config.split_sizes)
        cfg["vocab"] = None if self.config.vocab is None else list(self.config.vocab)
        lines = ["{"]
        lines.append(f'"format": {json.dumps(FORMAT)},')
        lines.append(f'"version": {FORMAT_VERSION},')
        lines.append(f'"config": {json.dumps(cfg, sort_keys=True)},')
        lines.append(f'"vocab": {json.dumps(self.vocab.tokens)},')
        lines.append('"scenes": [')
        rows = []
        for name in ("train", "val", "test"):
            for sid in self.splits[name]:
                s = self.scenes[sid]
                rows.append(json.dumps({"id": s.id, "split": name, "attributes": list(s.attributes)}))
        lines.append(",\n".join(rows))
        lines.append("],")
        lines.append('"references": [')
        rows = []
        for name in ("train", "val", "test"):
            for sid in self.splits[name]:
                for ref in self.references[sid]:
                    rows.append(
                        json.dumps(
                            {"scene_id": sid, "tokens": list(ref.tokens), "text": self.describe(ref.tokens)}
                        )
                    )
        lines.append(",\n".join(rows))
        lines.append("]")
        lines.append("}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text):
        doc = json.loads(text)
        if doc.get("format") != FORMAT:
            raise ConfigError("not a psst world file")
        if doc.get("version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported world version {doc.get('version')}")
        cfg = dict(doc["config"])
        cfg["split_sizes"] = tuple(cfg["split_sizes"])
        if cfg.get("vocab") is not None:
            cfg["vocab"] = tuple(cfg["vocab"])
        config = WorldConfig(**cfg)
        vocab = Vocabulary(doc["vocab"])
        scenes, splits = {}, {"train": [], "val": [], "test": []}
        for row in doc["scenes"]:
            scenes[row["id"]] = Scene(row["id"], tuple(row["attributes"]))
            splits[row["split"]].append(row["id"])
        references = {sid: [] for sid in scenes}
        for row in doc["references"]:
            references[row["scene_id"]].append(ReferenceCaption(row["scene_id"], tuple(row["tokens"])))
        return cls(config, vocab, scenes, splits, references)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _scene_id(attributes, k):
    sid = 0
    for v in attributes:
        sid = sid * k + v
    return sid


def generate_world(config=None):
    """Build a world deterministically from ``config.seed``."""
    config = config or WorldConfig()
    A, K, S = config.num_attributes, config.values_per_attribute, config.synonyms_per_value
    if A < 1:
        raise ConfigError("num_attributes must be >= 1")
    if K < 2:
        raise ConfigError("values_per_attribute must be >= 2")
    if S < 2:
        raise ConfigError("each attribute value needs >= 2 surface tokens")
    if config.refs_per_scene < 2:
        raise ConfigError("refs_per_scene must be >= 2 for reference diversity")
    if any(n < 0 for n in config.split_sizes) or sum(config.split_sizes) > config.num_scenes:
        raise ConfigError(f"split sizes {config.split_sizes} exceed {config.num_scenes} possible scenes")

    grammar = Grammar(A, K, S)
    longest = 2 + len(grammar.leading) + (2 * len(grammar.trailing) if grammar.trailing else 0)
    if longest > config.max_len:
        raise ConfigError(f"max_len {config.max_len} cannot hold the longest caption ({longest} tokens)")
    needed = list(RESERVED) + grammar.token_list()
    if config.vocab is not None:
        missing = [t for t in needed if t not in config.vocab]
        if missing:
            raise ConfigError(f"vocabulary too small for the grammar; missing {missing[:5]}")
        vocab = Vocabulary(config.vocab)
    else:
        vocab = Vocabulary(needed)

    rng = np.random.default_rng(config.seed)
    all_attrs = list(itertools.product(range(K), repeat=A))
    order = rng.permutation(len(all_attrs))
    n_train, n_val, n_test = config.split_sizes
    chosen = [all_attrs[i] for i in order[: n_train + n_val + n_test]]
    scenes, splits = {}, {}
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n_train + n_val + n_test)}
    for name, (lo, hi) in bounds.items():
        splits[name] = []
        for attrs in chosen[lo:hi]:
            sid = _scene_id(attrs, K)
            scenes[sid] = Scene(sid, tuple(int(v) for v in attrs))
            splits[name].append(sid)

    references = {}
    for name in ("train", "val", "test"):
        for sid in splits[name]:
            references[sid] = _render_references(scenes[sid], grammar, vocab, config, rng)
    return World(config, vocab, scenes, splits, references)


def _render_references(scene, grammar, vocab, config, rng):
    A, S = config.num_attributes, config.synonyms_per_value
    while True:
        refs = []
        for _ in range(config.refs_per_scene):
            mentioned = rng.random(A) < config.mention_prob
            mentioned[grammar.noun] = True
            synonym = np.where(
                rng.random(A) < config.preferred_synonym_prob, 0, rng.integers(1, S, size=A)
            )
            words = grammar.render(scene.attributes, mentioned, synonym)
            refs.append(ReferenceCaption(scene.id, tuple(vocab.encode(words)) + (EOS,)))
        if len({r.tokens for r in refs}) >= 2:
            return refs


def one_attribute_neighbors(scene, candidates):
    return [c for c in candidates if sum(a != b for a, b in zip(c.attributes, scene.attributes)) == 1]


def sample_batch(world, split, batch_size, hard_fraction, rng, target=None):
    """Target scene plus ``batch_size - 1`` distractors from ``split``.

    ``round(hard_fraction * (batch_size - 1))`` distractors are drawn from the
    target's one-attribute neighbours when the split has them; the rest are
    uniform over the remaining scenes.
    """
    pool = world.split(split)
    if not pool:
        raise ConfigError(f"split {split!r} is empty")
    if batch_size > len(pool):
        raise ConfigError(f"batch_size {batch_size} exceeds split size {len(pool)}")
    if target is None:
        target = pool[int(rng.integers(len(pool)))]
    others = [s for s in pool if s.id != target.id]
    n_dis = batch_size - 1
    n_hard = int(round(hard_fraction * n_dis))
    chosen = []
    if n_hard:
        near = one_attribute_neighbors(target, others)
        take = min(n_hard, len(near))
        if take:
            picks = rng.choice(len(near), size=take, replace=False)
            chosen = [near[i] for i in picks]
    taken = {s.id for s in chosen}
    rest = [s for s in others if s.id not in taken]
    picks = rng.choice(len(rest), size=n_dis - len(chosen), replace=False)
    chosen.extend(rest[i] for i in picks)
    return Batch(target, chosen, list(world.refs(target.id)))
