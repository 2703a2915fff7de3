"""Pretraining, joint training, evaluation and sweeps on the referential world."""

import dataclasses
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import autodiff as ad
from .agents import (
    AgentDims,
    ListenerParams,
    SpeakerParams,
    beam_decode,
    caption_from_tokens,
    greedy_decode,
    listener_score_matrix,
    np_cosine_matrix,
    np_listener_caption_embedding,
    np_listener_scene_embedding,
    sample_decode,
    speaker_mle_loss,
    speaker_rollout,
    teacher_forced_log_prob,
)
from .errors import CheckpointError, ConfigError, NumericalError
from .estimators import Baseline, EstimatorConfig, Kind, baseline_value, make_config, reinforce_surrogate
from .metrics import (
    CurvePoint,
    LossWeights,
    NGramStats,
    composite_loss,
    curve_csv,
    disc_hinge_loss,
    hinge_terms,
    hinge_terms_value,
    interpolate_recall,
    recall_at_k,
    target_ranks,
)
from .world import World

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PSST_OUTPUT_ROOT"


@dataclass
class RunConfig:
    world: str | None = None
    method: str = "psst-mn"
    rho: float | None = 0.5
    tau: float | None = None
    baseline: str = "ground-truth"
    per_token_gate: bool = False
    lam: float = 0.99
    batch_size: int = 32
    lr: float = 5.0
    listener_lr: float | None = 0.5
    lr_decay: float = 0.8
    lr_decay_every: int = 15
    clip_norm: float = 5.0
    pretrain_speaker_epochs: int = 20
    pretrain_listener_epochs: int = 10
    pretrain_speaker_lr: float = 1.0
    pretrain_listener_lr: float = 2.0
    joint_epochs: int = 50
    early_stop_metric: str = "recall10"
    eval_split: str = "val"
    beam_width: int = 2
    max_len: int = 8
    hidden: int = 32
    embed: int = 16
    listener_hidden: int = 32
    alternate: bool = False
    freeze_speaker: bool = False
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        for name in ("batch_size", "lr", "lr_decay", "lr_decay_every", "clip_norm", "beam_width", "max_len",
                     "hidden", "embed", "listener_hidden", "pretrain_speaker_lr", "pretrain_listener_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.listener_lr is not None and self.listener_lr <= 0:
            raise ConfigError("listener_lr must be positive")
        for name in ("pretrain_speaker_epochs", "pretrain_listener_epochs", "joint_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.early_stop_metric not in ("recall1", "recall5", "recall10"):
            raise ConfigError(f"unknown early-stop metric {self.early_stop_metric}")
        self.estimator()

    def estimator(self):
        return make_config(self.method, rho=self.rho, tau=self.tau, baseline=self.baseline,
                           per_token_gate=self.per_token_gate)

    def dims(self, world):
        A, K = world.config.num_attributes, world.config.values_per_attribute
        return AgentDims(len(world.vocab), A * K, self.hidden, self.embed, self.listener_hidden)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class RunManifest:
    config: dict
    timings: dict = field(default_factory=dict)
    best_epoch: int | None = None
    best_metrics: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    version: str = __version__
    status: str = "ok"
    error: str | None = None

    def write(self, path):
        _atomic_write(path, json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def lr_at(config, base_lr, epoch):
    return base_lr * config.lr_decay ** (epoch // config.lr_decay_every)


def _clip(nodes, names, max_norm):
    total = 0.0
    for k in names:
        g = nodes[k].grad
        if g is not None:
            total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for k in names:
            if nodes[k].grad is not None:
                nodes[k].grad *= scale
    return norm


class WorldContext:
    """Per-world caches shared by every phase of a run."""

    def __init__(self, world):
        self.world = world
        self.stats = NGramStats.from_world(world, "train")
        self._loo = {}
        self._x = {}

    def scene_x(self, scenes):
        return self.world.attribute_matrix(scenes)

    def split_x(self, split):
        if split not in self._x:
            self._x[split] = self.world.attribute_matrix(self.world.split(split))
        return self._x[split]

    def references(self, scene):
        return [r.tokens for r in self.world.refs(scene.id)]

    def reference_cider(self, scene):
        """Mean leave-one-out CIDEr of the scene's own references."""
        if scene.id not in self._loo:
            refs = self.references(scene)
            vals = [self.stats.score(refs[j], refs[:j] + refs[j + 1:]) for j in range(len(refs))]
            self._loo[scene.id] = float(np.mean(vals))
        return self._loo[scene.id]


# ----------------------------------------------------------------- pretraining


def _check_finite(value, what):
    if not np.isfinite(value):
        raise NumericalError(f"{what} diverged (non-finite loss)")


def pretrain_speaker_epoch(ctx, speaker, config, lr, rng):
    world = ctx.world
    pairs = [(s, r.tokens) for s in world.split("train") for r in world.refs(s.id)]
    order = rng.permutation(len(pairs))
    losses = []
    for start in range(0, len(order), config.batch_size):
        chunk = [pairs[i] for i in order[start : start + config.batch_size]]
        tape = ad.Tape()
        nodes = speaker.bind(tape)
        loss = speaker_mle_loss(nodes, ctx.scene_x([c[0] for c in chunk]), [c[1] for c in chunk])
        _check_finite(float(loss.value), "speaker pretraining")
        ad.backward(loss)
        _clip(nodes, speaker.names(), config.clip_norm)
        speaker.sgd_step(nodes, lr)
        losses.append(float(loss.value))
    return float(np.mean(losses))


def speaker_nll(ctx, speaker, split):
    """Teacher-forced NLL over every reference of ``split`` (no gradient)."""
    world = ctx.world
    pairs = [(s, r.tokens) for s in world.split(split) for r in world.refs(s.id)]
    tape = ad.Tape()
    nodes = speaker.bind(tape, requires_grad=False)
    loss = speaker_mle_loss(nodes, ctx.scene_x([p[0] for p in pairs]), [p[1] for p in pairs])
    return float(loss.value)


def _distinct_batches(scenes, batch_size, rng):
    order = rng.permutation(len(scenes))
    out = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if len(idx) >= 2:
            out.append([scenes[i] for i in idx])
    return out


def pretrain_listener_epoch(ctx, listener, config, lr, rng):
    world = ctx.world
    vocab = len(world.vocab)
    scenes = world.split("train")
    losses = []
    for _ in range(world.config.refs_per_scene):
        for batch in _distinct_batches(scenes, config.batch_size, rng):
            refs = [ctx.references(s)[int(rng.integers(world.config.refs_per_scene))] for s in batch]
            tape = ad.Tape()
            nodes = listener.bind(tape)
            cap = caption_from_tokens(tape, refs, vocab)
            loss = disc_hinge_loss(listener_score_matrix(nodes, cap, ctx.scene_x(batch)))
            _check_finite(float(loss.value), "listener pretraining")
            ad.backward(loss)
            _clip(nodes, listener.names(), config.clip_norm)
            listener.sgd_step(nodes, lr)
            losses.append(float(loss.value))
    return float(np.mean(losses)) if losses else 0.0


def reference_recall(ctx, listener, split, ks=(1, 5, 10), which=0, pool=None, seed=0):
    """Listener recall when each scene is described by one of its references.

    ``pool`` restricts each query to its target plus ``pool - 1`` distractors
    drawn from the same split (the referential-game setting).
    """
    scenes = ctx.world.split(split)
    caps = [ctx.references(s)[which] for s in scenes]
    if pool is None:
        return _retrieval(ctx, listener, caps, scenes, ks)
    return pooled_recall(_scores(ctx, listener, caps, scenes), [s.id for s in scenes], pool, ks, seed)


def pooled_recall(scores, ids, pool, ks=(1, 5, 10), seed=0):
    """Recall@k where query i ranks its target among ``pool - 1`` random distractors."""
    n = scores.shape[0]
    if not 1 <= pool <= n:
        raise ConfigError(f"pool must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    ids = np.asarray(ids)
    hits = {k: 0 for k in ks}
    for i in range(n):
        others = np.delete(np.arange(n), i)
        cols = np.concatenate([[i], rng.choice(others, pool - 1, replace=False)])
        rank = int(target_ranks(scores[i : i + 1, cols], [0], ids[cols])[0])
        for k in ks:
            hits[k] += rank < k
    return {f"recall{k}": hits[k] / n for k in ks}


def _scores(ctx, listener, captions, scenes):
    return np_cosine_matrix(
        np_listener_caption_embedding(listener, captions), np_listener_scene_embedding(listener, ctx.scene_x(scenes))
    )


def _retrieval(ctx, listener, captions, scenes, ks):
    scores = _scores(ctx, listener, captions, scenes)
    ids = [s.id for s in scenes]
    targets = np.arange(len(scenes))
    return {f"recall{k}": recall_at_k(scores, targets, min(k, len(scenes)), ids) for k in ks}


def pretrain(world, config, output_dir=None, ctx=None):
    """MLE-pretrain the speaker and hinge-pretrain the listener.

    Returns ``(speaker, listener, history)``; with ``output_dir`` the
    checkpoints are rewritten after every epoch.
    """
    ctx = ctx or WorldContext(world)
    dims = config.dims(world)
    rng = np.random.default_rng([config.seed, 0])
    speaker = SpeakerParams.init(dims, rng)
    listener = ListenerParams.init(dims, rng)
    history = {"speaker_val_nll": [speaker_nll(ctx, speaker, config.eval_split)], "listener_val": []}
    paths = {}
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        paths = {"speaker": os.path.join(output_dir, "speaker_pretrain.ckpt"),
                 "listener": os.path.join(output_dir, "listener_pretrain.ckpt")}
        speaker.save(paths["speaker"])
        listener.save(paths["listener"])
    for epoch in range(config.pretrain_speaker_epochs):
        loss = pretrain_speaker_epoch(ctx, speaker, config, lr_at(config, config.pretrain_speaker_lr, epoch), rng)
        history["speaker_val_nll"].append(speaker_nll(ctx, speaker, config.eval_split))
        log.info("speaker pretrain epoch %d train_nll=%.4f val_nll=%.4f", epoch, loss, history["speaker_val_nll"][-1])
        if paths:
            speaker.save(paths["speaker"])
    for epoch in range(config.pretrain_listener_epochs):
        loss = pretrain_listener_epoch(ctx, listener, config, lr_at(config, config.pretrain_listener_lr, epoch), rng)
        history["listener_val"].append(reference_recall(ctx, listener, config.eval_split))
        log.info("listener pretrain epoch %d hinge=%.4f val=%s", epoch, loss, history["listener_val"][-1])
        if paths:
            listener.save(paths["listener"])
    return speaker, listener, history


# ------------------------------------------------------------------ evaluation


def decode_split(speaker, ctx, split, beam_width, max_len):
    x = ctx.split_x(split)
    return [beam_decode(speaker, x[i], beam_width, max_len) for i in range(x.shape[0])]


def evaluate(world, speaker, listener, split, beam_width=2, max_len=8, ctx=None, captions=None):
    """Beam-decode every scene of ``split`` and rank the whole split per caption.

    Pass ``captions`` (one token list per scene) to score fixed captions
    instead, e.g. references for a ceiling comparison.
    """
    ctx = ctx or WorldContext(world)
    scenes = world.split(split)
    if not scenes:
        raise ConfigError(f"split {split!r} is empty")
    if captions is None:
        captions = decode_split(speaker, ctx, split, beam_width, max_len)
    safe = [c if len(c) else [0] for c in captions]
    metrics = _retrieval(ctx, listener, safe, scenes, (1, 5, 10))
    metrics["cider"] = float(np.mean(ctx.stats.score_many(captions, [ctx.references(s) for s in scenes])))
    metrics["captions"] = [list(map(int, c)) for c in captions]
    return metrics


# -------------------------------------------------------------- joint training


def _disc_baseline(ctx, speaker, listener, scenes, scene_x, est, config, rng):
    kind = est.baseline
    if kind == Baseline.NONE:
        return 0.0
    scene_emb = np_listener_scene_embedding(listener, scene_x)
    if kind == Baseline.GROUND_TRUTH:
        caps = [ctx.references(s)[int(rng.integers(len(ctx.references(s))))] for s in scenes]
        ref = -hinge_terms_value(np_cosine_matrix(np_listener_caption_embedding(listener, caps), scene_emb))
        return baseline_value(kind, reference_reward=ref)
    caps = [c if c else [0] for c in greedy_decode(speaker, scene_x, config.max_len)]
    greedy = -hinge_terms_value(np_cosine_matrix(np_listener_caption_embedding(listener, caps), scene_emb))
    return baseline_value(kind, greedy_reward=greedy)


def _nat_baseline(ctx, speaker, scenes, scene_x, est, config):
    kind = est.baseline
    if kind == Baseline.NONE:
        return 0.0
    if kind == Baseline.GROUND_TRUTH:
        return baseline_value(kind, reference_reward=np.array([ctx.reference_cider(s) for s in scenes]))
    greedy = greedy_decode(speaker, scene_x, config.max_len)
    return baseline_value(kind, greedy_reward=ctx.stats.score_many(greedy, [ctx.references(s) for s in scenes]))


@dataclass
class StepStats:
    loss: float
    disc: float
    nat_reward: float
    disc_grad_norm: float = 0.0
    relaxed_fraction: float = 0.0


def joint_step(ctx, speaker, listener, scenes, config, rng, train_speaker=True, train_listener=True, lr=None,
               listener_lr=None):
    """One optimisation step of the composite objective on a batch of scenes."""
    est = config.estimator()
    lr = config.lr if lr is None else lr
    tape = ad.Tape()
    s_nodes = speaker.bind(tape, requires_grad=train_speaker)
    l_nodes = listener.bind(tape, requires_grad=train_listener)
    scene_x = ctx.scene_x(scenes)
    batch = len(scenes)
    lam = 1.0 if config.freeze_speaker else config.lam

    if config.freeze_speaker:
        est = EstimatorConfig(Kind.REINFORCE)
    cap = speaker_rollout(s_nodes, scene_x, est, config.max_len, rng)
    scores = listener_score_matrix(l_nodes, cap, scene_x)
    terms = hinge_terms(scores)
    disc = ad.mean(terms)
    if est.kind == Kind.REINFORCE and train_speaker and lam > 0:
        b = _disc_baseline(ctx, speaker, listener, scenes, scene_x, est, config, rng)
        disc = ad.add(disc, reinforce_surrogate(cap.log_prob, -terms.value, b))

    nat_reward = 0.0
    nat = None
    if lam < 1.0:
        tokens = cap.token_lists()
        if cap.relaxed.any():
            aux = sample_decode(speaker, scene_x, config.max_len, rng)
            tokens = [aux[i] if cap.relaxed[i] else tokens[i] for i in range(batch)]
        reward = ctx.stats.score_many(tokens, [ctx.references(s) for s in scenes])
        nat_reward = float(reward.mean())
        if train_speaker:
            if est.kind == Kind.REINFORCE:
                logp = cap.log_prob
            else:
                logp = teacher_forced_log_prob(s_nodes, scene_x, tokens)
            nat = reinforce_surrogate(logp, reward, _nat_baseline(ctx, speaker, scenes, scene_x, est, config))
    if nat is None:
        nat = tape.constant(0.0)

    loss = composite_loss(disc, nat, LossWeights(lam))
    _check_finite(float(loss.value), "joint training")
    ad.backward(loss)
    names = (speaker.names() if train_speaker else []) + (listener.names() if train_listener else [])
    nodes = {**s_nodes, **l_nodes}
    grad_norm = _clip(nodes, names, config.clip_norm)
    if train_speaker:
        speaker.sgd_step(s_nodes, lr)
    if train_listener:
        listener.sgd_step(l_nodes, lr if listener_lr is None else listener_lr)
    return StepStats(float(loss.value), float(disc.value), nat_reward, grad_norm if lam > 0 else 0.0,
                     float(cap.relaxed.mean()))


def joint_train(world, config, speaker, listener, output_dir=None, ctx=None, on_epoch=None):
    """Jointly train both agents; returns ``(manifest, curve_points, best_params)``.

    ``speaker``/``listener`` are copied, never mutated. The best epoch is the
    one with the highest validation ``early_stop_metric`` (earliest on ties);
    its parameters are also evaluated on the test split.
    """
    ctx = ctx or WorldContext(world)
    t0 = time.perf_counter()
    speaker, listener = speaker.copy(), listener.copy()
    rng = np.random.default_rng([config.seed, 1])
    est = config.estimator()
    train = world.split("train")
    manifest = RunManifest(config=config.to_dict())
    points = []
    metrics0 = evaluate(world, speaker, listener, config.eval_split, config.beam_width, config.max_len, ctx)
    best = (metrics0[config.early_stop_metric], 0, speaker.copy(), listener.copy(), metrics0)
    points.append(_point(config, est, 0, metrics0))
    step = 0
    for epoch in range(1, config.joint_epochs + 1):
        lr = lr_at(config, config.lr, epoch - 1)
        listener_lr = lr_at(config, config.listener_lr, epoch - 1) if config.listener_lr else None
        for batch in _distinct_batches(train, config.batch_size, rng):
            train_speaker = not config.freeze_speaker
            train_listener = True
            if config.alternate and not config.freeze_speaker:
                train_speaker = step % 2 == 0
                train_listener = not train_speaker
            joint_step(ctx, speaker, listener, batch, config, rng, train_speaker, train_listener, lr, listener_lr)
            step += 1
        metrics = evaluate(world, speaker, listener, config.eval_split, config.beam_width, config.max_len, ctx)
        points.append(_point(config, est, epoch, metrics))
        if on_epoch:
            on_epoch(epoch, metrics)
        if metrics[config.early_stop_metric] > best[0]:
            best = (metrics[config.early_stop_metric], epoch, speaker.copy(), listener.copy(), metrics)
    _, best_epoch, best_speaker, best_listener, best_metrics = best
    manifest.best_epoch = best_epoch
    manifest.best_metrics = {k: v for k, v in best_metrics.items() if k != "captions"}
    test = evaluate(world, best_speaker, best_listener, "test", config.beam_width, config.max_len, ctx)
    manifest.final_metrics = {k: v for k, v in test.items() if k != "captions"}
    manifest.timings["joint_seconds"] = time.perf_counter() - t0
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        manifest.checkpoints = {"speaker": os.path.join(output_dir, "speaker_best.ckpt"),
                                "listener": os.path.join(output_dir, "listener_best.ckpt")}
        best_speaker.save(manifest.checkpoints["speaker"])
        best_listener.save(manifest.checkpoints["listener"])
        with open(os.path.join(output_dir, "curve.csv"), "w", encoding="utf-8") as fh:
            fh.write(curve_csv(points))
        manifest.write(os.path.join(output_dir, "manifest.json"))
    return manifest, points, (best_speaker, best_listener)


def _point(config, est, epoch, metrics):
    return CurvePoint(
        method=est.kind.value,
        lam=float(config.lam),
        rho=est.rho,
        tau=est.tau,
        seed=config.seed,
        epoch=epoch,
        cider=metrics["cider"],
        recall1=metrics["recall1"],
        recall5=metrics["recall5"],
        recall10=metrics["recall10"],
    )


def load_agents(world, config, speaker_path, listener_path):
    dims = config.dims(world)
    try:
        return SpeakerParams.load(speaker_path, dims), ListenerParams.load(listener_path, dims)
    except (OSError, CheckpointError) as exc:
        raise CheckpointError(f"cannot load checkpoints: {exc}") from exc


# ----------------------------------------------------------------------- sweep


@dataclass(frozen=True)
class Cell:
    method: str
    lam: float
    rho: float | None
    seed: int

    def name(self):
        rho = "na" if self.rho is None else f"{self.rho:g}"
        return f"{self.method}_lam{self.lam:g}_rho{rho}_seed{self.seed}"


def grid_cells(methods, lams, rhos, seeds):
    cells = []
    for m in methods:
        kind = Kind(m)
        rho_values = rhos if kind in (Kind.PSST_MULTINOMIAL, Kind.PSST_GUMBEL) else [None]
        for lam in lams:
            for rho in rho_values:
                for seed in seeds:
                    cells.append(Cell(kind.value, float(lam), None if rho is None else float(rho), int(seed)))
    if not cells:
        raise ConfigError("sweep grid is empty")
    return cells


_PRETRAIN_CACHE = {}


def _pretrained(world, config, world_key):
    key = (world_key, config.seed, config.pretrain_speaker_epochs, config.pretrain_listener_epochs,
           config.pretrain_speaker_lr, config.pretrain_listener_lr, config.batch_size, config.hidden,
           config.embed, config.listener_hidden, config.lr_decay, config.lr_decay_every, config.clip_norm)
    if key not in _PRETRAIN_CACHE:
        sp, li, _ = pretrain(world, config)
        _PRETRAIN_CACHE[key] = (sp, li)
    sp, li = _PRETRAIN_CACHE[key]
    return sp.copy(), li.copy()


def run_cell(world, base, cell, output_dir=None, world_key=None):
    """Pretrain (cached per seed) and jointly train one grid cell."""
    config = base.replace(method=cell.method, lam=cell.lam, rho=cell.rho, seed=cell.seed)
    cell_dir = os.path.join(output_dir, cell.name()) if output_dir else None
    t0 = time.perf_counter()
    try:
        speaker, listener = _pretrained(world, config, world_key or id(world))
        manifest, points, _ = joint_train(world, config, speaker, listener, cell_dir)
        manifest.timings["cell_seconds"] = time.perf_counter() - t0
        if cell_dir:
            manifest.write(os.path.join(cell_dir, "manifest.json"))
        return cell, manifest, points
    except Exception as exc:  # partial failures are recorded, the sweep continues
        log.exception("cell %s failed", cell.name())
        manifest = RunManifest(config=config.to_dict(), status="failed", error=repr(exc))
        if cell_dir:
            manifest.write(os.path.join(cell_dir, "manifest.json"))
        return cell, manifest, []


def _run_cell_from_text(args):
    world_text, base, cell, output_dir = args
    return run_cell(World.from_text(world_text), base, cell, output_dir, world_key=hash(world_text))


def sweep(world, base, cells, output_dir=None, workers=1):
    """Run every cell; returns ``(manifests, points)`` in cell order.

    With ``output_dir`` writes per-cell directories and ``curves.csv``.
    """
    if not cells:
        raise ConfigError("sweep grid is empty")
    if workers > 1:
        text = world.to_text()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_from_text, [(text, base, c, output_dir) for c in cells]))
    else:
        results = [run_cell(world, base, c, output_dir) for c in cells]
    manifests = {cell: man for cell, man, _ in results}
    points = [p for _, _, pts in results for p in pts]
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        _atomic_write(os.path.join(output_dir, "curves.csv"), curve_csv(points))
        summary = {c.name(): {"status": m.status, "best_epoch": m.best_epoch, "final": m.final_metrics,
                              "error": m.error} for c, m in manifests.items()}
        _atomic_write(os.path.join(output_dir, "sweep_manifest.json"), json.dumps(summary, indent=2, sort_keys=True))
    return manifests, points


def curve_by_run(points, metric="recall1"):
    """Group curve points into ``{(method, lam, rho, seed): [(cider, metric), ...]}``."""
    out = {}
    for p in points:
        out.setdefault((p.method, p.lam, p.rho, p.seed), []).append((p.cider, getattr(p, metric)))
    return out


def recall_at_matched_cider(curves, level):
    """Interpolated recall of each curve at CIDEr ``level``."""
    return {key: interpolate_recall(pts, level) for key, pts in curves.items()}
