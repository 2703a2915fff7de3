"""Exact expectations and gradients by enumerating every caption.

On instances with at most 64 sequences (``V**T <= 64``) the expected loss
``sum_w p(w) l(w)`` and its gradient are computed exactly through the tape.
:func:`estimator_report` runs any estimator many times from the same
parameters and compares its mean to that exact gradient.

Sequences are fixed-length (no EOS stopping) so the sample space is a clean
product ``V**T``.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .agents import (
    AgentDims,
    ListenerParams,
    SpeakerParams,
    listener_encode_caption,
    listener_encode_scenes,
    speaker_initial_hidden,
    speaker_rollout,
    speaker_step_logprobs,
    Caption,
    Step,
)
from .errors import SizeError
from .estimators import Baseline, EstimatorConfig, Kind, reinforce_surrogate

MAX_SEQUENCES = 64


class TableLoss:
    """Fixed loss per sequence, extended multilinearly to dense emissions.

    For emissions ``y_1..y_T`` the loss is ``sum_w L[w] prod_t y_t[w_t]``,
    which equals ``L[w]`` on one-hot inputs.
    """

    def __init__(self, table, vocab, length):
        self.table = np.asarray(table, dtype=np.float64).reshape(-1)
        self.vocab = vocab
        self.length = length

    def values(self, sequences):
        return self.table[_flat_index(sequences, self.vocab)]

    def __call__(self, tape, vectors):
        joint = vectors[0]
        batch = joint.shape[0]
        for y in vectors[1:]:
            cols = joint.shape[1]
            joint = ad.reshape(
                ad.mul(ad.reshape(joint, (batch, cols, 1)), ad.reshape(y, (batch, 1, self.vocab))),
                (batch, cols * self.vocab),
            )
        return ad.reshape(ad.linear(joint, self.table.reshape(-1, 1)), (batch,))


class ListenerLoss:
    """Negative cosine score of a frozen listener for a fixed target scene."""

    def __init__(self, params, scene_x, vocab, length):
        self.params = params
        self.scene_x = np.atleast_2d(scene_x)
        self.vocab = vocab
        self.length = length
        seqs = np.array(list(itertools.product(range(vocab), repeat=length)))
        tape = ad.Tape()
        self.table = self(tape, [tape.constant(np.eye(vocab)[seqs[:, t]]) for t in range(length)]).value.copy()

    def values(self, sequences):
        return self.table[_flat_index(sequences, self.vocab)]

    def __call__(self, tape, vectors):
        batch = vectors[0].shape[0]
        nodes = self.params.bind(tape, requires_grad=False)
        active = np.ones(batch, dtype=bool)
        steps = [Step(v, None, np.zeros(batch, int), np.zeros(batch, bool), active) for v in vectors]
        cap = listener_encode_caption(nodes, Caption(steps, None, np.zeros(batch, bool), batch))
        scene = listener_encode_scenes(nodes, np.repeat(self.scene_x, batch, axis=0))
        return ad.neg(ad.cosine(cap, scene))


def _flat_index(sequences, vocab):
    seqs = np.atleast_2d(np.asarray(sequences, dtype=int))
    idx = np.zeros(seqs.shape[0], dtype=int)
    for t in range(seqs.shape[1]):
        idx = idx * vocab + seqs[:, t]
    return idx


@dataclass
class EnumInstance:
    vocab: int
    length: int
    loss: object
    scene_x: np.ndarray
    dims: AgentDims
    reference: tuple

    def __post_init__(self):
        if self.vocab**self.length > MAX_SEQUENCES or self.vocab > 4 or self.length > 3:
            raise SizeError(f"V={self.vocab}, T={self.length} is too large to enumerate (limit V<=4, T<=3)")

    def sequences(self):
        return np.array(list(itertools.product(range(self.vocab), repeat=self.length)))


@dataclass
class GradientReport:
    kind: str
    names: list
    exact: np.ndarray
    estimator_mean: np.ndarray
    estimator_std_err: np.ndarray
    variance: np.ndarray
    n_samples: int

    @property
    def bias(self):
        return self.estimator_mean - self.exact

    @property
    def mean_variance(self):
        return float(self.variance.mean())

    def unbiased(self, z=3.0):
        """Every coordinate within ``z`` standard errors of the exact gradient.

        Coordinates with zero standard error must match to 1e-9.
        """
        err = np.abs(self.bias)
        tol = np.where(self.estimator_std_err > 0, z * self.estimator_std_err, 1e-9)
        return bool((err <= tol).all())

    def max_abs_z(self):
        """Largest |bias| / std_err over coordinates with a nonzero standard error."""
        se = self.estimator_std_err
        live = se > 0
        return float((np.abs(self.bias[live]) / se[live]).max()) if live.any() else 0.0

    def rows(self):
        for i, name in enumerate(self.names):
            yield name, self.exact[i], self.estimator_mean[i], self.estimator_std_err[i], self.bias[i]

    def to_text(self):
        lines = [f"# kind={self.kind} n_samples={self.n_samples} mean_variance={self.mean_variance:.6g}"]
        lines.append(f"{'coordinate':<28}{'exact':>14}{'mean':>14}{'std_err':>14}{'bias':>14}{'z':>9}")
        for name, ex, mu, se, b in self.rows():
            z = abs(b) / se if se > 0 else (0.0 if abs(b) < 1e-9 else np.inf)
            lines.append(f"{name:<28}{ex:>14.6g}{mu:>14.6g}{se:>14.6g}{b:>14.6g}{z:>9.2f}")
        return "\n".join(lines)


def coordinate_names(params):
    names = []
    for k, v in params.arrays.items():
        if v.size == 1:
            names.append(k)
        else:
            names.extend(f"{k}[{','.join(map(str, i))}]" for i in np.ndindex(v.shape))
    return names


def random_instance(rng, vocab=3, length=2, loss="table", hidden=4, embed=3, scene_dim=4, scale=2.0):
    """Random enumerable instance plus speaker parameters.

    ``scale`` multiplies the default initialisation so per-step distributions
    are far from uniform.
    """
    dims = AgentDims(vocab_size=vocab, scene_dim=scene_dim, hidden=hidden, embed=embed, listener_hidden=hidden)
    params = SpeakerParams.init(dims, rng)
    for k in params.arrays:
        params.arrays[k] *= scale
    scene_x = np.zeros((1, scene_dim))
    scene_x[0, rng.integers(scene_dim)] = 1.0
    if loss == "table":
        loss_fn = TableLoss(rng.uniform(0.0, 1.0, size=vocab**length), vocab, length)
    elif loss == "listener":
        lp = ListenerParams.init(dims, rng)
        for k in lp.arrays:
            lp.arrays[k] *= scale
        loss_fn = ListenerLoss(lp, scene_x, vocab, length)
    else:
        raise ValueError(f"unknown loss kind {loss!r}")
    reference = tuple(int(t) for t in rng.integers(vocab, size=length))
    return EnumInstance(vocab, length, loss_fn, scene_x, dims, reference), params


def _sequence_log_probs(nodes, instance):
    """Node [N] of log p(w) for every enumerated sequence, teacher forced."""
    seqs = instance.sequences()
    n = seqs.shape[0]
    tape = nodes["speaker.embed"].tape
    vocab = instance.vocab
    scene = np.repeat(instance.scene_x, n, axis=0)
    h = ad.tanh(ad.linear(tape.constant(scene), nodes["speaker.scene_enc.w"], nodes["speaker.scene_enc.b"]))
    gru = {k: nodes[f"speaker.gru.{k}"] for k in ad.GRU_WEIGHTS}
    prev = np.eye(vocab)[np.full(n, 1 % vocab)]
    total = None
    for t in range(instance.length):
        x = ad.linear(tape.constant(prev), nodes["speaker.embed"])
        h = ad.gru_cell(x, h, gru)
        logp = ad.log_softmax(ad.linear(h, nodes["speaker.out.w"], nodes["speaker.out.b"]))
        term = ad.gather(logp, seqs[:, t])
        total = term if total is None else ad.add(total, term)
        prev = np.eye(vocab)[seqs[:, t]]
    return total


def sequence_probabilities(instance, params):
    tape = ad.Tape()
    return np.exp(_sequence_log_probs(params.bind(tape, requires_grad=False), instance).value)


def _expected_loss_node(instance, params):
    tape = ad.Tape()
    nodes = params.bind(tape)
    probs = ad.exp(_sequence_log_probs(nodes, instance))
    table = instance.loss.values(instance.sequences())
    return ad.sum(ad.mul(probs, table)), nodes


def exact_expected_loss(instance, params):
    """``sum_w p(w) l(w)`` over all ``V**T`` sequences."""
    return float(_expected_loss_node(instance, params)[0].value)


def exact_gradient(instance, params):
    """Flat gradient of :func:`exact_expected_loss` in parameter order."""
    root, nodes = _expected_loss_node(instance, params)
    ad.backward(root)
    return np.concatenate([nodes[k].grad.ravel() for k in params.arrays])


def greedy_sequence(instance, params):
    """Argmax decode of fixed length (BOS is token 1 mod V, as in enumeration)."""
    h = speaker_initial_hidden(params, instance.scene_x)
    prev = np.array([1 % instance.vocab])
    out = []
    for _ in range(instance.length):
        h, logp = speaker_step_logprobs(params, h, prev)
        prev = logp.argmax(axis=1)
        out.append(int(prev[0]))
    return tuple(out)


def _baseline_values(instance, params, kind):
    kind = Baseline(kind)
    if kind == Baseline.NONE:
        return 0.0
    if kind == Baseline.GROUND_TRUTH:
        return float(instance.loss.values([instance.reference])[0])
    return float(instance.loss.values([greedy_sequence(instance, params)])[0])


def per_sample_gradients(instance, params, config, batch, rng):
    """Per-sample estimator gradients, shape [batch, num_parameters]."""
    tape = ad.Tape()
    nodes = params.bind(tape, tile=batch)
    scene = np.repeat(instance.scene_x, batch, axis=0)
    caption = speaker_rollout(nodes, scene, config, instance.length, rng, stop_at_eos=False)
    losses = instance.loss(tape, [s.vector for s in caption.steps])
    if config.kind == Kind.REINFORCE:
        seqs = caption.tokens
        loss_vals = instance.loss.values(seqs)
        b = _baseline_values(instance, params, config.baseline)
        root = ad.mul(reinforce_surrogate(caption.log_prob, -loss_vals, -b), float(batch))
    else:
        root = ad.sum(losses)
    ad.backward(root)
    return np.concatenate([nodes[k].grad.reshape(batch, -1) for k in params.arrays], axis=1)


def estimator_report(instance, params, config, n_samples, rng, chunk=20000):
    """Mean, standard error and variance of ``config``'s gradient estimate."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    exact = exact_gradient(instance, params)
    shift = None
    s1 = s2 = None
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        g = per_sample_gradients(instance, params, config, b, rng)
        if shift is None:
            shift = g[0].copy()
            s1 = np.zeros_like(shift)
            s2 = np.zeros_like(shift)
        d = g - shift
        s1 += d.sum(axis=0)
        s2 += (d * d).sum(axis=0)
        done += b
    mean = shift + s1 / n_samples
    if n_samples > 1:
        var = np.maximum((s2 - s1 * s1 / n_samples) / (n_samples - 1), 0.0)
    else:
        var = np.zeros_like(mean)
    return GradientReport(
        kind=config.label(),
        names=coordinate_names(params),
        exact=exact,
        estimator_mean=mean,
        estimator_std_err=np.sqrt(var / n_samples),
        variance=var,
        n_samples=n_samples,
    )


def monte_carlo_expected_loss(instance, params, n_samples, rng):
    """Sample-mean loss and its standard error, sampling sequences from the speaker."""
    probs = sequence_probabilities(instance, params)
    idx = rng.choice(len(probs), size=n_samples, p=probs / probs.sum())
    vals = instance.loss.values(instance.sequences()[idx])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_samples))


def unbiasedness_gate(instances, baselines=(Baseline.NONE, Baseline.GROUND_TRUTH), n_samples=200_000, seed=0):
    """REINFORCE reports for every (instance, baseline); gate passes if all unbiased."""
    reports = []
    for i, (inst, params) in enumerate(instances):
        for j, bl in enumerate(baselines):
            rng = np.random.default_rng([seed, i, j])
            cfg = EstimatorConfig(Kind.REINFORCE, baseline=bl)
            reports.append(estimator_report(inst, params, cfg, n_samples, rng))
    return all(r.unbiased() for r in reports), reports
