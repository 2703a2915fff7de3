"""Speaker and listener networks.

Both agents are single-layer GRUs. The speaker's hidden state is initialised
from a linear encoding of the scene; each step emits a token through the
configured estimator and feeds the emission's embedding (an expected
embedding for dense rows) back in. The listener runs its own GRU over the
emission vectors and scores captions against scenes by cosine similarity.

Everything is batched: a :class:`Caption` holds one row per scene. Parameters
live in plain ``{name: ndarray}`` dicts whose names are the canonical
checkpoint record names, in the order given by :func:`speaker_param_names`
and :func:`listener_param_names`.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ContractError, DegenerateInputError
from .estimators import CategoricalDist, emit_token, gumbel_max_sample, psst_gate
from .world import BOS, EOS, PAD


@dataclass(frozen=True)
class AgentDims:
    vocab_size: int
    scene_dim: int
    hidden: int = 32
    embed: int = 16
    listener_hidden: int = 32


def _gru_shapes(prefix, n_in, n_hid):
    return [
        (f"{prefix}.gru.wz", (n_in, n_hid), n_in),
        (f"{prefix}.gru.uz", (n_hid, n_hid), n_hid),
        (f"{prefix}.gru.bz", (n_hid,), n_hid),
        (f"{prefix}.gru.wr", (n_in, n_hid), n_in),
        (f"{prefix}.gru.ur", (n_hid, n_hid), n_hid),
        (f"{prefix}.gru.br", (n_hid,), n_hid),
        (f"{prefix}.gru.wn", (n_in, n_hid), n_in),
        (f"{prefix}.gru.un", (n_hid, n_hid), n_hid),
        (f"{prefix}.gru.bn", (n_hid,), n_hid),
    ]


def _speaker_layout(d):
    return [
        ("speaker.scene_enc.w", (d.scene_dim, d.hidden), d.scene_dim),
        ("speaker.scene_enc.b", (d.hidden,), d.scene_dim),
        ("speaker.embed", (d.vocab_size, d.embed), d.vocab_size),
        *_gru_shapes("speaker", d.embed, d.hidden),
        ("speaker.out.w", (d.hidden, d.vocab_size), d.hidden),
        ("speaker.out.b", (d.vocab_size,), d.hidden),
    ]


def _listener_layout(d):
    return [
        ("listener.embed", (d.vocab_size, d.embed), d.vocab_size),
        *_gru_shapes("listener", d.embed, d.listener_hidden),
        ("listener.scene_enc.w", (d.scene_dim, d.listener_hidden), d.scene_dim),
        ("listener.scene_enc.b", (d.listener_hidden,), d.scene_dim),
    ]


def speaker_param_names(dims):
    return [name for name, _, _ in _speaker_layout(dims)]


def listener_param_names(dims):
    return [name for name, _, _ in _listener_layout(dims)]


def _init(layout, rng):
    """Embedding tables ~ N(0, 1); everything else ~ U(+-1/sqrt(fan_in))."""
    out = {}
    for name, shape, fan_in in layout:
        if name.endswith(".embed"):
            out[name] = rng.standard_normal(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            out[name] = rng.uniform(-bound, bound, size=shape)
    return out


class Params:
    """Ordered ``{name: ndarray}`` parameter set for one agent."""

    def __init__(self, dims, arrays):
        self.dims = dims
        self.arrays = arrays

    def copy(self):
        return type(self)(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def num_parameters(self):
        return int(sum(v.size for v in self.arrays.values()))

    def flat(self):
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def set_flat(self, vec):
        pos = 0
        for k, v in self.arrays.items():
            self.arrays[k] = np.asarray(vec[pos : pos + v.size], dtype=np.float64).reshape(v.shape).copy()
            pos += v.size

    def bind(self, tape, requires_grad=True, tile=None):
        """Leaf nodes for every parameter; ``tile=B`` adds a per-example axis."""
        nodes = {}
        for k, v in self.arrays.items():
            value = v if tile is None else np.broadcast_to(v, (tile, *v.shape)).copy()
            nodes[k] = tape.leaf(value, requires_grad, name=k)
        return nodes

    def sgd_step(self, nodes, lr):
        for k in self.arrays:
            g = nodes[k].grad
            if g is not None:
                self.arrays[k] -= lr * g

    def save(self, path):
        save_checkpoint(path, self.arrays)


class SpeakerParams(Params):
    @classmethod
    def init(cls, dims, rng):
        return cls(dims, _init(_speaker_layout(dims), rng))

    @classmethod
    def load(cls, path, dims):
        return cls(dims, _load(path, _speaker_layout(dims)))


class ListenerParams(Params):
    @classmethod
    def init(cls, dims, rng):
        return cls(dims, _init(_listener_layout(dims), rng))

    @classmethod
    def load(cls, path, dims):
        return cls(dims, _load(path, _listener_layout(dims)))


def _load(path, layout):
    arrays = load_checkpoint(path)
    expected = [name for name, _, _ in layout]
    if list(arrays) != expected:
        raise CheckpointError(f"{path}: parameter names/order do not match the agent layout")
    for name, shape, _ in layout:
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
    return arrays


def _gru_nodes(nodes, prefix):
    return {k: nodes[f"{prefix}.gru.{k}"] for k in ad.GRU_WEIGHTS}


def _one_hot(index, size):
    out = np.zeros((len(index), size))
    out[np.arange(len(index)), index] = 1.0
    return out


# -------------------------------------------------------------------- speaker


@dataclass
class Step:
    vector: ad.Node
    dist: CategoricalDist
    token_index: np.ndarray
    dense: np.ndarray
    active: np.ndarray


@dataclass
class Caption:
    """Batched caption; ``steps[t].vector`` row i is example i's emission at t.

    ``tokens[i, t]`` is the sampled id, or -1 for dense or finished rows.
    """

    steps: list
    log_prob: ad.Node | None
    relaxed: np.ndarray
    batch: int
    tokens: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.tokens is None:
            cols = [np.where(s.active, s.token_index, -1) for s in self.steps]
            self.tokens = np.stack(cols, axis=1) if cols else np.zeros((self.batch, 0), dtype=int)

    def __len__(self):
        return len(self.steps)

    def token_lists(self):
        """Sampled token ids per row, up to and including EOS (dense rows: [])."""
        out = []
        for i in range(self.batch):
            if self.relaxed[i]:
                out.append([])
                continue
            row = []
            for t in self.tokens[i]:
                if t < 0:
                    break
                row.append(int(t))
                if t == EOS:
                    break
            out.append(row)
        return out


def speaker_init_state(nodes, scene_x):
    tape = nodes["speaker.embed"].tape
    x = tape.constant(scene_x)
    return ad.tanh(ad.linear(x, nodes["speaker.scene_enc.w"], nodes["speaker.scene_enc.b"]))


def speaker_rollout(nodes, scene_x, config, max_len, rng, stop_at_eos=True):
    """Unroll the speaker for a batch of scenes under ``config``.

    Sampled rows stop after emitting EOS; dense (relaxed) rows always run to
    ``max_len``. Emissions of finished rows are zeroed and flagged inactive.
    """
    tape = nodes["speaker.embed"].tape
    scene_x = np.atleast_2d(scene_x)
    batch = scene_x.shape[0]
    vocab = nodes["speaker.embed"].shape[-2]
    gru = _gru_nodes(nodes, "speaker")
    embed = nodes["speaker.embed"]
    decision = psst_gate(config.gate_rho, rng, size=batch)
    relaxed_any = np.zeros(batch, dtype=bool)
    if max_len <= 0:
        return Caption([], None, relaxed_any, batch)
    h = speaker_init_state(nodes, scene_x)
    x = ad.linear(tape.constant(_one_hot(np.full(batch, BOS), vocab)), embed)
    alive = np.ones(batch, dtype=bool)
    steps = []
    log_prob = None
    for t in range(max_len):
        if not alive.any():
            break
        if config.per_token_gate and t > 0:
            decision = psst_gate(config.gate_rho, rng, size=batch)
        h = ad.gru_cell(x, h, gru)
        dist = CategoricalDist.from_logits(ad.linear(h, nodes["speaker.out.w"], nodes["speaker.out.b"]))
        em = emit_token(dist, config, decision, rng)
        active = alive.copy()
        sampled = active & ~em.dense
        relaxed_any |= em.dense
        lp = ad.mul(ad.gather(dist.log_probs, np.where(em.dense, 0, em.token_index)), sampled.astype(float))
        log_prob = lp if log_prob is None else ad.add(log_prob, lp)
        vector = em.vector if active.all() else ad.mul(em.vector, active[:, None].astype(float))
        steps.append(Step(vector, dist, em.token_index, em.dense, active))
        if stop_at_eos:
            alive &= em.dense | (em.token_index != EOS)
        x = ad.linear(vector, embed)
    return Caption(steps, log_prob, relaxed_any, batch)


def teacher_forced_log_prob(nodes, scene_x, sequences, normalize=False):
    """Per-row ``sum_t log p(w_t | w_<t)`` of fixed sequences, Node [B].

    Inputs are constant one-hots, so the gradient is the pure score
    ``grad log p(w)``. ``normalize`` divides each row by its length.
    """
    tape = nodes["speaker.embed"].tape
    scene_x = np.atleast_2d(scene_x)
    batch = scene_x.shape[0]
    if any(len(r) == 0 for r in sequences):
        raise ContractError("sequences must be nonempty")
    vocab = nodes["speaker.embed"].shape[-2]
    lengths = np.array([len(r) for r in sequences])
    steps = int(lengths.max())
    padded = np.full((batch, steps), PAD, dtype=int)
    for i, r in enumerate(sequences):
        padded[i, : len(r)] = r
    gru = _gru_nodes(nodes, "speaker")
    embed = nodes["speaker.embed"]
    h = speaker_init_state(nodes, scene_x)
    prev = np.full(batch, BOS)
    weights = 1.0 / lengths if normalize else np.ones(batch)
    total = None
    for t in range(steps):
        x = ad.linear(tape.constant(_one_hot(prev, vocab)), embed)
        live = t < lengths
        h = ad.gru_cell(x, h, gru, None if live.all() else live.astype(float))
        logp = ad.log_softmax(ad.linear(h, nodes["speaker.out.w"], nodes["speaker.out.b"]))
        term = ad.mul(ad.gather(logp, padded[:, t]), live * weights)
        total = term if total is None else ad.add(total, term)
        prev = padded[:, t]
    return total


def speaker_mle_loss(nodes, scene_x, references):
    """Teacher-forced NLL, averaged over each reference's steps, then over the batch.

    ``references`` is a list of token sequences (EOS-terminated), one per scene.
    """
    return ad.neg(ad.mean(teacher_forced_log_prob(nodes, scene_x, references, normalize=True)))


# ------------------------------------------------------------- numpy inference


def _np_gru(x, h, arrays, prefix):
    p = f"{prefix}.gru."
    az = x @ arrays[p + "wz"] + h @ arrays[p + "uz"] + arrays[p + "bz"]
    ar = x @ arrays[p + "wr"] + h @ arrays[p + "ur"] + arrays[p + "br"]
    xn = x @ arrays[p + "wn"] + arrays[p + "bn"]
    hn = h @ arrays[p + "un"]
    return kernels.gru_gates_forward(
        np.ascontiguousarray(az), np.ascontiguousarray(ar), np.ascontiguousarray(xn),
        np.ascontiguousarray(hn), np.ascontiguousarray(h), None,
    )[3]


def _np_log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def speaker_step_logprobs(params, h, prev):
    """One inference step: new hidden state and next-token log-probabilities."""
    a = params.arrays
    h = _np_gru(a["speaker.embed"][prev], h, a, "speaker")
    return h, _np_log_softmax(h @ a["speaker.out.w"] + a["speaker.out.b"])


def speaker_initial_hidden(params, scene_x):
    a = params.arrays
    return np.tanh(np.atleast_2d(scene_x) @ a["speaker.scene_enc.w"] + a["speaker.scene_enc.b"])


def greedy_decode(params, scene_x, max_len):
    """Argmax decoding for a batch of scenes; rows are padded with PAD after EOS."""
    h = speaker_initial_hidden(params, scene_x)
    batch = h.shape[0]
    prev = np.full(batch, BOS)
    alive = np.ones(batch, dtype=bool)
    out = np.full((batch, max_len), PAD, dtype=int)
    for t in range(max_len):
        if not alive.any():
            break
        h, logp = speaker_step_logprobs(params, h, prev)
        prev = logp.argmax(axis=1)
        out[alive, t] = prev[alive]
        alive &= prev != EOS
    return [[int(t) for t in row if t != PAD] for row in out]


def sample_decode(params, scene_x, max_len, rng):
    """Multinomial (Gumbel-max) sampling for a batch of scenes, tape-free."""
    h = speaker_initial_hidden(params, scene_x)
    batch = h.shape[0]
    prev = np.full(batch, BOS)
    alive = np.ones(batch, dtype=bool)
    rows = [[] for _ in range(batch)]
    for _ in range(max_len):
        if not alive.any():
            break
        h, logp = speaker_step_logprobs(params, h, prev)
        prev = gumbel_max_sample(np.exp(logp), rng)
        for i in np.flatnonzero(alive):
            rows[i].append(int(prev[i]))
        alive &= prev != EOS
    return rows


def beam_decode(params, scene_x, width, max_len):
    """Beam search over summed log-probabilities for a single scene.

    Hypotheses that emit EOS are set aside as complete; search stops when no
    live beam can beat the best complete one. Live beams still open at
    ``max_len`` count as complete. Returns the token list (EOS included when
    emitted).
    """
    if width < 1:
        raise ContractError("beam width must be >= 1")
    if max_len <= 0:
        return []
    h = speaker_initial_hidden(params, scene_x)
    beams = [((), 0.0)]
    hidden = h
    done = []
    for t in range(max_len):
        prev = np.array([b[0][-1] if b[0] else BOS for b in beams])
        hidden, logp = speaker_step_logprobs(params, hidden, prev)
        scores = np.array([b[1] for b in beams])[:, None] + logp
        flat = scores.ravel()
        order = np.lexsort((np.arange(flat.size), -flat))[:width]
        vocab = logp.shape[1]
        next_beams, rows = [], []
        for idx in order:
            bi, tok = divmod(int(idx), vocab)
            seq = beams[bi][0] + (tok,)
            if tok == EOS:
                done.append((seq, float(flat[idx])))
            else:
                next_beams.append((seq, float(flat[idx])))
                rows.append(bi)
        if not next_beams:
            break
        beams = next_beams
        hidden = hidden[rows]
        best_done = max((d[1] for d in done), default=-np.inf)
        if best_done >= max(b[1] for b in beams):
            break
    else:
        done.extend(beams)
    best = max(done, key=lambda d: d[1])
    return list(best[0])


def sequence_log_prob(params, scene_x, tokens):
    """Exact log-probability of ``tokens`` under the speaker (teacher forced)."""
    h = speaker_initial_hidden(params, scene_x)
    prev = np.array([BOS])
    total = 0.0
    for tok in tokens:
        h, logp = speaker_step_logprobs(params, h, prev)
        total += float(logp[0, tok])
        prev = np.array([tok])
    return total


# ------------------------------------------------------------------- listener


def listener_encode_caption(nodes, caption):
    """Final GRU state over the caption's emission vectors, shape [B, d]."""
    if len(caption) == 0:
        raise ContractError("cannot score an empty caption")
    tape = nodes["listener.embed"].tape
    gru = _gru_nodes(nodes, "listener")
    hidden = nodes["listener.gru.uz"].shape[-1]
    h = tape.constant(np.zeros((caption.batch, hidden)))
    for step in caption.steps:
        x = ad.linear(step.vector, nodes["listener.embed"])
        mask = None if step.active.all() else step.active.astype(float)
        h = ad.gru_cell(x, h, gru, mask)
    return h


def listener_encode_scenes(nodes, scene_x):
    tape = nodes["listener.embed"].tape
    return ad.linear(tape.constant(np.atleast_2d(scene_x)), nodes["listener.scene_enc.w"], nodes["listener.scene_enc.b"])


def listener_score(nodes, caption, scene_x):
    """Cosine between each caption row and the matching scene row, shape [B]."""
    return ad.cosine(listener_encode_caption(nodes, caption), listener_encode_scenes(nodes, scene_x))


def listener_score_matrix(nodes, caption, scene_x):
    """``[B, P]`` cosine scores of every caption against every scene."""
    return ad.cosine_matrix(listener_encode_caption(nodes, caption), listener_encode_scenes(nodes, scene_x))


def caption_from_tokens(tape, token_lists, vocab):
    """Constant one-hot :class:`Caption` for fixed token sequences (e.g. references)."""
    batch = len(token_lists)
    length = max((len(t) for t in token_lists), default=0)
    steps = []
    for t in range(length):
        active = np.array([t < len(seq) for seq in token_lists])
        idx = np.array([seq[t] if t < len(seq) else PAD for seq in token_lists])
        vec = _one_hot(idx, vocab) * active[:, None]
        steps.append(Step(tape.constant(vec), None, np.where(active, idx, PAD), np.zeros(batch, bool), active))
    return Caption(steps, None, np.zeros(batch, dtype=bool), batch)


def np_listener_caption_embedding(params, token_lists):
    """Tape-free caption encoding for evaluation."""
    a = params.arrays
    batch = len(token_lists)
    length = max((len(t) for t in token_lists), default=0)
    if length == 0:
        raise ContractError("cannot score an empty caption")
    h = np.zeros((batch, a["listener.gru.uz"].shape[0]))
    for t in range(length):
        active = np.array([t < len(seq) for seq in token_lists])
        idx = np.array([seq[t] if t < len(seq) else PAD for seq in token_lists])
        new = _np_gru(a["listener.embed"][idx], h, a, "listener")
        h = np.where(active[:, None], new, h)
    return h


def np_listener_scene_embedding(params, scene_x):
    a = params.arrays
    return np.atleast_2d(scene_x) @ a["listener.scene_enc.w"] + a["listener.scene_enc.b"]


def np_cosine_matrix(u, v):
    un = np.linalg.norm(u, axis=1, keepdims=True)
    vn = np.linalg.norm(v, axis=1, keepdims=True)
    if (un == 0).any() or (vn == 0).any():
        raise DegenerateInputError("zero-norm embedding")
    return (u / un) @ (v / vn).T
